//! Point clouds and the geometric primitives of the encoder and decoder:
//! normalization, farthest point sampling, ball grouping, and 3-NN
//! inverse-distance interpolation. Neighbor search is brute force.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::kernels::dist2;
use crate::tensor::Tensor;

/// Number of input channels: xyz, rgb, normalized xyz.
pub const INPUT_CHANNELS: usize = 9;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// `N` xyz triples.
    pub coords: Vec<[f64; 3]>,
    /// RGB in `[0, 1]`.
    pub colors: Vec<[f64; 3]>,
    /// `(coords − min_corner) / max_extent`.
    pub norm_coords: Vec<[f64; 3]>,
    /// Per-point salient flags, when known.
    pub labels: Option<Vec<bool>>,
    /// Set when all points coincide and normalization fell back to 0.5.
    pub degenerate_extent: bool,
}

impl PointCloud {
    /// Builds a cloud and computes its normalized coordinates.
    pub fn new(coords: Vec<[f64; 3]>, colors: Vec<[f64; 3]>, labels: Option<Vec<bool>>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::contract("point cloud must contain at least one point"));
        }
        if colors.len() != coords.len() {
            return Err(Error::Dimension {
                op: "point cloud colors",
                lhs: vec![coords.len(), 3],
                rhs: vec![colors.len(), 3],
            });
        }
        if let Some(l) = &labels {
            if l.len() != coords.len() {
                return Err(Error::Dimension {
                    op: "point cloud labels",
                    lhs: vec![coords.len()],
                    rhs: vec![l.len()],
                });
            }
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::contract("point coordinates must be finite"));
        }
        let (norm_coords, degenerate_extent) = normalize_coords(&coords);
        Ok(PointCloud {
            coords,
            colors,
            norm_coords,
            labels,
            degenerate_extent,
        })
    }

    /// Cloud with every color set to mid-gray.
    pub fn from_coords(coords: Vec<[f64; 3]>) -> Result<Self> {
        let colors = vec![[0.5; 3]; coords.len()];
        Self::new(coords, colors, None)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Largest axis-aligned side of the bounding box.
    pub fn max_extent(&self) -> f64 {
        bounds(&self.coords).1
    }

    /// `N×9` input features: xyz, rgb, normalized xyz.
    pub fn input_features(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.len() * INPUT_CHANNELS);
        for i in 0..self.len() {
            data.extend_from_slice(&self.coords[i]);
            data.extend_from_slice(&self.colors[i]);
            data.extend_from_slice(&self.norm_coords[i]);
        }
        Tensor::new(vec![self.len(), INPUT_CHANNELS], data).unwrap()
    }

    /// Labels as 0/1 floats; error when the cloud is unlabeled.
    pub fn label_values(&self) -> Result<Vec<f64>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::contract("point cloud has no labels"))?;
        Ok(labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    /// Sub-cloud at the given indices, renormalized over the subset.
    pub fn subset(&self, indices: &[usize]) -> Result<PointCloud> {
        let coords = indices.iter().map(|&i| self.coords[i]).collect();
        let colors = indices.iter().map(|&i| self.colors[i]).collect();
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        PointCloud::new(coords, colors, labels)
    }

    /// Reorders points so that new point `i` is old point `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> PointCloud {
        PointCloud {
            coords: perm.iter().map(|&i| self.coords[i]).collect(),
            colors: perm.iter().map(|&i| self.colors[i]).collect(),
            norm_coords: perm.iter().map(|&i| self.norm_coords[i]).collect(),
            labels: self.labels.as_ref().map(|l| perm.iter().map(|&i| l[i]).collect()),
            degenerate_extent: self.degenerate_extent,
        }
    }
}

fn bounds(coords: &[[f64; 3]]) -> ([f64; 3], f64) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in coords {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    (lo, extent)
}

fn normalize_coords(coords: &[[f64; 3]]) -> (Vec<[f64; 3]>, bool) {
    let (lo, extent) = bounds(coords);
    if extent <= 0.0 {
        return (vec![[0.5; 3]; coords.len()], true);
    }
    let norm = coords
        .iter()
        .map(|p| [(p[0] - lo[0]) / extent, (p[1] - lo[1]) / extent, (p[2] - lo[2]) / extent])
        .collect();
    (norm, false)
}

/// Recomputes `norm_coords` from `coords`.
pub fn normalize_cloud(mut cloud: PointCloud) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::contract("cannot normalize an empty cloud"));
    }
    let (norm, degenerate) = normalize_coords(&cloud.coords);
    cloud.norm_coords = norm;
    cloud.degenerate_extent = degenerate;
    Ok(cloud)
}

fn lex_cmp(a: &[f64; 3], b: &[f64; 3]) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

/// Centroid whose value does not depend on point order.
fn order_free_centroid(coords: &[[f64; 3]]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for (a, slot) in c.iter_mut().enumerate() {
        let mut vals: Vec<f64> = coords.iter().map(|p| p[a]).collect();
        vals.sort_by(f64::total_cmp);
        *slot = vals.iter().sum::<f64>() / coords.len() as f64;
    }
    c
}

/// Picks the index maximizing `score`; ties go to the lexicographically smallest
/// coordinate, then the smaller index.
fn argmax_lex(coords: &[[f64; 3]], score: &[f64], skip: &[bool]) -> usize {
    let mut best: Option<usize> = None;
    for i in 0..coords.len() {
        if skip[i] {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => match score[i].total_cmp(&score[b]) {
                Ordering::Greater => Some(i),
                Ordering::Equal if lex_cmp(&coords[i], &coords[b]) == Ordering::Less => Some(i),
                _ => Some(b),
            },
        };
    }
    best.expect("at least one candidate")
}

/// Greedy max-min farthest point sampling over `coords`.
///
/// The first pick is the point farthest from the centroid; every later pick
/// maximizes the distance to the picked set. Ties resolve to the
/// lexicographically smallest coordinate, so the selected coordinates do not
/// depend on input order.
pub fn farthest_point_sample(coords: &[[f64; 3]], count: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if count == 0 || count > n {
        return Err(Error::contract(format!(
            "farthest point sampling needs 1 <= M <= N, got M={count}, N={n}"
        )));
    }
    let centroid = order_free_centroid(coords);
    let mut score: Vec<f64> = coords.iter().map(|p| dist2(p, &centroid)).collect();
    let mut picked = vec![false; n];
    let mut out = Vec::with_capacity(count);

    let first = argmax_lex(coords, &score, &picked);
    out.push(first);
    picked[first] = true;
    for (i, p) in coords.iter().enumerate() {
        score[i] = dist2(p, &coords[first]);
    }
    while out.len() < count {
        let next = argmax_lex(coords, &score, &picked);
        out.push(next);
        picked[next] = true;
        for (i, p) in coords.iter().enumerate() {
            let d = dist2(p, &coords[next]);
            if d < score[i] {
                score[i] = d;
            }
        }
    }
    Ok(out)
}

/// Neighborhoods of `M` centroids: indices, padding and relative offsets.
/// Feature tensors are gathered from these by the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupIndex {
    pub centroid_indices: Vec<usize>,
    /// `M×K` point indices, row-major; padded slots repeat the nearest member.
    pub neighbors: Vec<usize>,
    pub valid_counts: Vec<usize>,
    pub k: usize,
    /// `M×K` offsets `p_j − p_c`.
    pub rel_coords: Vec<[f64; 3]>,
}

impl GroupIndex {
    pub fn groups(&self) -> usize {
        self.centroid_indices.len()
    }

    pub fn members(&self, g: usize) -> &[usize] {
        &self.neighbors[g * self.k..(g + 1) * self.k]
    }
}

/// Up to `k` nearest points within `radius` of each centroid, sorted by
/// distance then index, padded with the nearest member.
pub fn ball_query(coords: &[[f64; 3]], centroids: &[usize], radius: f64, k: usize) -> Result<GroupIndex> {
    if !(radius > 0.0) || k == 0 {
        return Err(Error::contract(format!("ball query needs radius > 0 and K >= 1, got {radius}, {k}")));
    }
    if let Some(&c) = centroids.iter().find(|&&c| c >= coords.len()) {
        return Err(Error::contract(format!("centroid index {c} out of range")));
    }
    let r2 = radius * radius;
    let mut neighbors = Vec::with_capacity(centroids.len() * k);
    let mut rel_coords = Vec::with_capacity(centroids.len() * k);
    let mut valid_counts = Vec::with_capacity(centroids.len());
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for &c in centroids {
        let pc = coords[c];
        cand.clear();
        cand.extend(
            coords
                .iter()
                .enumerate()
                .map(|(j, p)| (dist2(p, &pc), j))
                .filter(|&(d, j)| d <= r2 || j == c),
        );
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let valid = cand.len().min(k);
        valid_counts.push(valid);
        for slot in 0..k {
            let j = cand[if slot < valid { slot } else { 0 }].1;
            neighbors.push(j);
            let p = coords[j];
            rel_coords.push([p[0] - pc[0], p[1] - pc[1], p[2] - pc[2]]);
        }
    }
    Ok(GroupIndex {
        centroid_indices: centroids.to_vec(),
        neighbors,
        valid_counts,
        k,
        rel_coords,
    })
}

/// Grouped features `f_{i,j}` with their centroid features `f_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedSet {
    pub centroid_indices: Vec<usize>,
    /// `M×d`
    pub centroid_features: Tensor,
    /// `M×K×d`
    pub neighbor_features: Tensor,
    /// `M×K` offsets to the centroid.
    pub neighbor_rel_coords: Vec<[f64; 3]>,
    pub valid_counts: Vec<usize>,
}

impl GroupedSet {
    pub fn groups(&self) -> usize {
        self.neighbor_features.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.neighbor_features.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.neighbor_features.shape()[2]
    }
}

/// Ball query plus feature gathering from `features` (`N×d`).
pub fn ball_group(coords: &[[f64; 3]], features: &Tensor, centroids: &[usize], radius: f64, k: usize) -> Result<GroupedSet> {
    if features.shape().len() != 2 || features.rows() != coords.len() {
        return Err(Error::Dimension {
            op: "ball_group features",
            lhs: vec![coords.len(), 3],
            rhs: features.shape().to_vec(),
        });
    }
    let idx = ball_query(coords, centroids, radius, k)?;
    let d = features.cols();
    let gather = |rows: &[usize]| rows.iter().flat_map(|&i| features.row(i).iter().copied()).collect::<Vec<_>>();
    Ok(GroupedSet {
        centroid_features: Tensor::new(vec![centroids.len(), d], gather(centroids))?,
        neighbor_features: Tensor::new(vec![centroids.len(), k, d], gather(&idx.neighbors))?,
        neighbor_rel_coords: idx.rel_coords,
        valid_counts: idx.valid_counts,
        centroid_indices: idx.centroid_indices,
    })
}

/// Interpolation stencil: for each destination, up to three source indices
/// and normalized weights (`fan_in` = 3, unused slots carry weight 0).
#[derive(Clone, Debug, PartialEq)]
pub struct InterpStencil {
    pub index: Vec<usize>,
    pub weight: Vec<f64>,
}

pub const INTERP_NEIGHBORS: usize = 3;
const COINCIDENT_DIST2: f64 = 1e-12;
const WEIGHT_EPS: f64 = 1e-8;

/// Inverse-squared-distance weights over the 3 nearest sources; a destination
/// coinciding with a source copies it exactly.
pub fn interp_stencil(src: &[[f64; 3]], dst: &[[f64; 3]]) -> Result<InterpStencil> {
    if src.is_empty() {
        return Err(Error::contract("interpolation needs at least one source point"));
    }
    let k = INTERP_NEIGHBORS;
    let mut index = Vec::with_capacity(dst.len() * k);
    let mut weight = Vec::with_capacity(dst.len() * k);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for q in dst {
        best.clear();
        for (j, p) in src.iter().enumerate() {
            let d = dist2(p, q);
            if best.len() < k || d < best[best.len() - 1].0 {
                let at = best.partition_point(|&(bd, _)| bd <= d);
                best.insert(at, (d, j));
                best.truncate(k);
            }
        }
        if best[0].0 < COINCIDENT_DIST2 {
            index.push(best[0].1);
            weight.push(1.0);
            for _ in 1..k {
                index.push(best[0].1);
                weight.push(0.0);
            }
            continue;
        }
        let inv: Vec<f64> = best.iter().map(|&(d, _)| 1.0 / (d + WEIGHT_EPS)).collect();
        let total: f64 = inv.iter().sum();
        for slot in 0..k {
            match best.get(slot) {
                Some(&(_, j)) => {
                    index.push(j);
                    weight.push(inv[slot] / total);
                }
                None => {
                    index.push(best[0].1);
                    weight.push(0.0);
                }
            }
        }
    }
    Ok(InterpStencil { index, weight })
}

/// Upsamples `src_features` (`M×d`) onto `dst_coords`, giving `N×d`.
pub fn interpolate_up(src_coords: &[[f64; 3]], src_features: &Tensor, dst_coords: &[[f64; 3]]) -> Result<Tensor> {
    if src_features.rows() != src_coords.len() {
        return Err(Error::Dimension {
            op: "interpolate_up",
            lhs: vec![src_coords.len(), 3],
            rhs: src_features.shape().to_vec(),
        });
    }
    let st = interp_stencil(src_coords, dst_coords)?;
    let d = src_features.cols();
    let mut out = vec![0.0; dst_coords.len() * d];
    for r in 0..dst_coords.len() {
        for slot in 0..INTERP_NEIGHBORS {
            let (j, w) = (st.index[r * 3 + slot], st.weight[r * 3 + slot]);
            if w == 0.0 {
                continue;
            }
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(src_features.row(j)) {
                *o += w * v;
            }
        }
    }
    Tensor::new(vec![dst_coords.len(), d], out)
}
