//! Prediction on clouds of any size. Views larger than one patch are split
//! into FPS-seeded cells; each cell is padded with its nearest outside points
//! to a full patch for context, predicted, and written back by original index.

use crate::decoder::SaliencyPrediction;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pointcloud::{farthest_point_sample, PointCloud};
use crate::tensor::kernels::dist2;

/// Points predicted together. `own` receive the predictions; `members`
/// (a superset of `own`) form the network input.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub own: Vec<usize>,
    pub members: Vec<usize>,
}

/// Splits `coords` into patches of exactly `patch_size` members (or all points
/// when there are fewer). Coincident points always share a patch.
pub fn split_patches(coords: &[[f64; 3]], patch_size: usize) -> Result<Vec<Patch>> {
    if patch_size == 0 {
        return Err(Error::contract("patch size must be positive"));
    }
    let n = coords.len();
    if n <= patch_size {
        let all: Vec<usize> = (0..n).collect();
        return Ok(vec![Patch {
            own: all.clone(),
            members: all,
        }]);
    }
    let mut cells = Vec::new();
    split_cell(coords, (0..n).collect(), patch_size, &mut cells)?;
    Ok(cells
        .into_iter()
        .map(|(seed, own)| {
            let mut in_cell = vec![false; n];
            own.iter().for_each(|&i| in_cell[i] = true);
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&i| !in_cell[i])
                .map(|i| (dist2(&coords[i], &coords[seed]), i))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut members = own.clone();
            members.extend(others.iter().take(patch_size - own.len()).map(|&(_, i)| i));
            Patch { own, members }
        })
        .collect())
}

/// Voronoi split around FPS seeds, recursing into oversized cells.
fn split_cell(coords: &[[f64; 3]], points: Vec<usize>, patch_size: usize, out: &mut Vec<(usize, Vec<usize>)>) -> Result<()> {
    if points.len() <= patch_size {
        let seed = points[0];
        out.push((seed, points));
        return Ok(());
    }
    let local: Vec<[f64; 3]> = points.iter().map(|&i| coords[i]).collect();
    let count = points.len().div_ceil(patch_size);
    let seeds = farthest_point_sample(&local, count)?;
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (li, p) in local.iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (s, &si) in seeds.iter().enumerate() {
            let d = dist2(p, &local[si]);
            if d < best_d {
                best = s;
                best_d = d;
            }
        }
        cells[best].push(points[li]);
    }
    if cells.iter().any(|c| c.len() == points.len()) {
        // every point coincides with one seed; no geometric split exists
        for chunk in points.chunks(patch_size) {
            out.push((chunk[0], chunk.to_vec()));
        }
        return Ok(());
    }
    for cell in cells.into_iter().filter(|c| !c.is_empty()) {
        split_cell(coords, cell, patch_size, out)?;
    }
    Ok(())
}

/// Saliency for every point of `cloud`, patch by patch.
pub fn predict_cloud(model: &Model, cloud: &PointCloud, threshold: f64) -> Result<SaliencyPrediction> {
    let patches = split_patches(&cloud.coords, model.cfg.patch_size)?;
    let mut logits = vec![0.0; cloud.len()];
    for patch in &patches {
        let sub = cloud.subset(&patch.members)?;
        let out = model.logits(&sub)?;
        // own points come first in `members`
        for (k, &i) in patch.own.iter().enumerate() {
            logits[i] = out[k];
        }
    }
    Ok(SaliencyPrediction::from_logits(logits, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cloud_is_one_patch() {
        let coords = vec![[0.0; 3], [1.0; 3]];
        let p = split_patches(&coords, 4).unwrap();
        assert_eq!(p, vec![Patch { own: vec![0, 1], members: vec![0, 1] }]);
    }

    #[test]
    fn patches_cover_every_point_once() {
        let coords: Vec<[f64; 3]> = (0..103).map(|i| [(i % 10) as f64, (i / 10) as f64, (i * 7 % 5) as f64]).collect();
        let patches = split_patches(&coords, 16).unwrap();
        let mut seen = vec![0; coords.len()];
        for p in &patches {
            assert_eq!(p.members.len(), 16);
            assert_eq!(&p.members[..p.own.len()], &p.own[..]);
            p.own.iter().for_each(|&i| seen[i] += 1);
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn identical_points_fall_back_to_chunks() {
        let coords = vec![[1.0; 3]; 10];
        let patches = split_patches(&coords, 4).unwrap();
        assert_eq!(patches.iter().map(|p| p.own.len()).sum::<usize>(), 10);
    }
}
