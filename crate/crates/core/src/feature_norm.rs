//! Feature normalization of grouped sets: centroid-relative offsets divided by
//! one standard deviation shared across every group and channel of a level,
//! followed by a learnable per-channel affine map.

use crate::error::{Error, Result};
use crate::pointcloud::GroupedSet;
use crate::tensor::{Graph, Tensor, Var};

pub const FN_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct FNParams<H> {
    /// Per-channel scale, initialized to 1.
    pub alpha: H,
    /// Per-channel shift, initialized to 0.
    pub beta: H,
    pub epsilon: f64,
}

impl<H> FNParams<H> {
    pub fn map<U>(&self, mut f: impl FnMut(&H) -> U) -> FNParams<U> {
        FNParams {
            alpha: f(&self.alpha),
            beta: f(&self.beta),
            epsilon: self.epsilon,
        }
    }
}

impl FNParams<Tensor> {
    pub fn identity(d: usize) -> Self {
        FNParams {
            alpha: Tensor::filled(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
            epsilon: FN_EPSILON,
        }
    }
}

/// Repeats each centroid row `k` times so it lines up with `[M, K, d]` members.
fn expand_centroids(g: &mut Graph, centroids: Var, k: usize) -> Result<Var> {
    let m = g.shape(centroids)[0];
    let index: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat(i).take(k)).collect();
    let weight = vec![1.0; index.len()];
    g.gather(centroids, index, weight, 1, &[m, k])
}

/// `f_{i,j} − f_i` for members `[M, K, d]` and centroids `[M, d]`.
pub fn centered(g: &mut Graph, members: Var, centroids: Var) -> Result<Var> {
    let (sm, sc) = (g.shape(members).to_vec(), g.shape(centroids).to_vec());
    if sm.len() != 3 || sc.len() != 2 || sm[0] != sc[0] || sm[2] != sc[1] {
        return Err(Error::Dimension {
            op: "feature_norm",
            lhs: sm,
            rhs: sc,
        });
    }
    let expanded = expand_centroids(g, centroids, sm[1])?;
    g.sub(members, expanded)
}

/// `α ⊙ (f_{i,j} − f_i)/(σ + ε) + β`
pub fn fn_forward(g: &mut Graph, members: Var, centroids: Var, p: &FNParams<Var>) -> Result<Var> {
    let diff = centered(g, members, centroids)?;
    fn_scale(g, diff, p)
}

/// The normalization applied to already centred features.
pub fn fn_scale(g: &mut Graph, diff: Var, p: &FNParams<Var>) -> Result<Var> {
    let sigma = g.rms(diff);
    let scaled = g.div_shifted(diff, sigma, p.epsilon)?;
    let y = g.mul_channel(scaled, p.alpha)?;
    g.add_bias(y, p.beta)
}

/// σ over all groups, members and channels, taken against each group's centroid feature.
pub fn group_std(groups: &GroupedSet) -> Result<f64> {
    let mut g = Graph::new();
    let members = g.constant(groups.neighbor_features.clone());
    let centroids = g.constant(groups.centroid_features.clone());
    let diff = centered(&mut g, members, centroids)?;
    let s = g.rms(diff);
    Ok(g.value(s).data()[0])
}

/// Returns `groups` with normalized neighbor features.
pub fn fn_apply(groups: &GroupedSet, params: &FNParams<Tensor>) -> Result<GroupedSet> {
    let mut g = Graph::new();
    let members = g.constant(groups.neighbor_features.clone());
    let centroids = g.constant(groups.centroid_features.clone());
    let p = params.map(|t| g.constant(t.clone()));
    let out = fn_forward(&mut g, members, centroids, &p)?;
    Ok(GroupedSet {
        neighbor_features: g.take_value(out),
        ..groups.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(member: f64, centroid: f64) -> GroupedSet {
        GroupedSet {
            centroid_indices: vec![0],
            centroid_features: Tensor::new(vec![1, 1], vec![centroid]).unwrap(),
            neighbor_features: Tensor::new(vec![1, 1, 1], vec![member]).unwrap(),
            neighbor_rel_coords: vec![[0.0; 3]],
            valid_counts: vec![1],
        }
    }

    #[test]
    fn single_term_std() {
        assert_eq!(group_std(&single(3.0, 1.0)).unwrap(), 2.0);
        assert_eq!(group_std(&single(1.0, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_sigma_gives_zero() {
        let out = fn_apply(&single(1.0, 1.0), &FNParams::identity(1)).unwrap();
        assert_eq!(out.neighbor_features.data(), &[0.0]);
    }

    #[test]
    fn zero_alpha_collapses_to_beta() {
        let mut p = FNParams::identity(1);
        p.alpha = Tensor::zeros(&[1]);
        p.beta = Tensor::vector(vec![0.75]);
        let out = fn_apply(&single(4.0, -1.0), &p).unwrap();
        assert_eq!(out.neighbor_features.data(), &[0.75]);
    }
}
