//! Point context encoder: five levels of sample, group, normalize, local
//! attention over each group, max-pool aggregation, and attention across the
//! pooled seeds.

use rand_chacha::ChaCha8Rng;

use crate::attention::{trans_block, trans_shapes, TransParams};
use crate::config::{ModelConfig, PCTLevelConfig, LEVELS};
use crate::error::{Error, Result};
use crate::feature_norm::{centered, fn_scale, FNParams, FN_EPSILON};
use crate::params::{bias_init, glorot, ParamId, ParamStore};
use crate::pointcloud::{ball_query, farthest_point_sample, GroupIndex, PointCloud};
use crate::tensor::{Graph, Tensor, Var};

/// Parameters of one encoder level. Disabled stages carry no parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PCTParams<H> {
    /// `(d_in + 3) × d_out` lift shared by every group member.
    pub lift_w: H,
    pub lift_b: H,
    pub norm: Option<FNParams<H>>,
    pub psi_pre: Option<TransParams<H>>,
    pub psi_post: Option<TransParams<H>>,
}

impl<H> PCTParams<H> {
    pub fn map<U>(&self, mut f: impl FnMut(&H) -> U) -> PCTParams<U> {
        PCTParams {
            lift_w: f(&self.lift_w),
            lift_b: f(&self.lift_b),
            norm: self.norm.as_ref().map(|p| p.map(&mut f)),
            psi_pre: self.psi_pre.as_ref().map(|p| p.map(&mut f)),
            psi_post: self.psi_post.as_ref().map(|p| p.map(&mut f)),
        }
    }
}

/// Registers a transformer block's tensors under `prefix`.
pub(crate) fn init_trans(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d_in: usize, d: usize) -> TransParams<ParamId> {
    let shapes = trans_shapes(d_in, d);
    // each bias draws its range from the fan-in of the matrix before it
    let mut fan_in = 1;
    let mut add = |name: &str, shape: &Vec<usize>| {
        let t = if shape.len() == 2 {
            fan_in = shape[0];
            glorot(rng, shape[0], shape[1])
        } else {
            bias_init(rng, fan_in, shape[0])
        };
        store.add(format!("{prefix}.{name}"), t)
    };
    TransParams {
        w_q: add("w_q", &shapes.w_q),
        w_k: add("w_k", &shapes.w_k),
        w_v: add("w_v", &shapes.w_v),
        ffn_w1: add("ffn_w1", &shapes.ffn_w1),
        ffn_b1: add("ffn_b1", &shapes.ffn_b1),
        ffn_w2: add("ffn_w2", &shapes.ffn_w2),
        ffn_b2: add("ffn_b2", &shapes.ffn_b2),
    }
}

impl PCTParams<ParamId> {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d_in: usize, cfg: &PCTLevelConfig) -> Self {
        let d = cfg.d_out;
        let lift_w = store.add(format!("{prefix}.lift_w"), glorot(rng, d_in + 3, d));
        let lift_b = store.add(format!("{prefix}.lift_b"), bias_init(rng, d_in + 3, d));
        let norm = cfg.use_fn.then(|| FNParams {
            alpha: store.add(format!("{prefix}.fn.alpha"), Tensor::filled(&[d], 1.0)),
            beta: store.add(format!("{prefix}.fn.beta"), Tensor::zeros(&[d])),
            epsilon: FN_EPSILON,
        });
        let psi_pre = cfg.use_psi_pre.then(|| init_trans(store, rng, &format!("{prefix}.psi_pre"), d, d));
        let psi_post = cfg.use_psi_post.then(|| init_trans(store, rng, &format!("{prefix}.psi_post"), d, d));
        PCTParams {
            lift_w,
            lift_b,
            norm,
            psi_pre,
            psi_post,
        }
    }
}

/// Coordinates and features of one level, features on a graph.
#[derive(Clone, Debug)]
pub struct LevelVar {
    pub coords: Vec<[f64; 3]>,
    /// `M×d`
    pub features: Var,
}

/// Plain-value level output.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLevelOutput {
    pub coords: Vec<[f64; 3]>,
    pub features: Tensor,
}

impl EncoderLevelOutput {
    pub fn from_graph(g: &Graph, level: &LevelVar) -> Self {
        EncoderLevelOutput {
            coords: level.coords.clone(),
            features: g.value(level.features).clone(),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> LevelVar {
        LevelVar {
            coords: self.coords.clone(),
            features: g.constant(self.features.clone()),
        }
    }
}

/// Transformer over one set of `S×d` rows. With `cap > 0`, sets larger than
/// `cap` are split into contiguous chunks that attend independently.
pub fn trans_over_set(g: &mut Graph, x: Var, p: &TransParams<Var>, cap: usize) -> Result<Var> {
    let (s, d) = (g.shape(x)[0], g.shape(x)[1]);
    if cap == 0 || s <= cap {
        let x3 = g.reshape(x, &[1, s, d])?;
        let y = trans_block(g, x3, p)?;
        return g.reshape(y, &[s, d]);
    }
    let mut parts = Vec::new();
    for start in (0..s).step_by(cap) {
        let idx: Vec<usize> = (start..(start + cap).min(s)).collect();
        let n = idx.len();
        let chunk = g.select_rows(x, &idx)?;
        let chunk = g.reshape(chunk, &[1, n, d])?;
        let y = trans_block(g, chunk, p)?;
        parts.push(g.reshape(y, &[n, d])?);
    }
    g.concat_rows(&parts)
}

/// Intermediate tensors of one encoder level, exposed for testing.
#[derive(Clone, Debug)]
pub struct PCTTrace {
    pub groups: GroupIndex,
    /// Lifted member features `[M, K, d_out]`, already centred on the group when FN is on.
    pub lifted: Var,
    /// Input to ψ_pre (after FN when enabled).
    pub normalized: Var,
    /// `[M, K, d_out]` after ψ_pre.
    pub local: Var,
    /// `[M, d_out]` after max-pooling.
    pub pooled: Var,
}

/// One encoder level over `coords` (`N`) and `features` (`N×d_in`).
/// `extent` rescales the normalized radius to coordinate units.
pub fn pct_block(
    g: &mut Graph,
    coords: &[[f64; 3]],
    features: Var,
    cfg: &PCTLevelConfig,
    params: &PCTParams<Var>,
    extent: f64,
    cap: usize,
) -> Result<(LevelVar, PCTTrace)> {
    let n = coords.len();
    if n < cfg.out_points {
        return Err(Error::contract(format!(
            "encoder level needs at least {} points, got {n}",
            cfg.out_points
        )));
    }
    if g.shape(features).len() != 2 || g.shape(features)[0] != n {
        return Err(Error::Dimension {
            op: "pct_block features",
            lhs: vec![n],
            rhs: g.shape(features).to_vec(),
        });
    }
    let (m, k) = (cfg.out_points, cfg.k);
    let centroids = farthest_point_sample(coords, m)?;
    let groups = ball_query(coords, &centroids, cfg.radius * extent, k)?;

    let members = g.gather(features, groups.neighbors.clone(), vec![1.0; m * k], 1, &[m, k])?;
    let rel: Vec<f64> = groups.rel_coords.iter().flatten().copied().collect();
    let rel = g.constant(Tensor::new(vec![m, k, 3], rel)?);
    let grouped = g.concat(members, rel)?;

    let (lifted, normalized) = match &params.norm {
        Some(p) => {
            // The centroid's own lift is [f_c, 0, 0, 0]·W + b. The lift is affine,
            // so centring before it gives the same difference with b cancelled exactly.
            let centre = g.select_rows(features, &centroids)?;
            let zeros = g.constant(Tensor::zeros(&[m, 3]));
            let centre = g.concat(centre, zeros)?;
            let diff = centered(g, grouped, centre)?;
            let diff = g.matmul(diff, params.lift_w)?;
            (diff, fn_scale(g, diff, p)?)
        }
        None => {
            let lifted = g.linear(grouped, params.lift_w, params.lift_b)?;
            (lifted, lifted)
        }
    };
    let local = match &params.psi_pre {
        Some(p) => trans_block(g, normalized, p)?,
        None => normalized,
    };
    let pooled = g.segment_max(local, &groups.valid_counts)?;
    let out = match &params.psi_post {
        Some(p) => trans_over_set(g, pooled, p, cap)?,
        None => pooled,
    };
    let level = LevelVar {
        coords: centroids.iter().map(|&i| coords[i]).collect(),
        features: out,
    };
    let trace = PCTTrace {
        groups,
        lifted,
        normalized,
        local,
        pooled,
    };
    Ok((level, trace))
}

/// Extent used to scale normalized radii; 1 for a degenerate cloud.
pub fn radius_scale(cloud: &PointCloud) -> f64 {
    let e = cloud.max_extent();
    if e > 0.0 {
        e
    } else {
        1.0
    }
}

/// Runs the five encoder levels. Level 0 input is the 9-channel `input`.
pub fn encode(
    g: &mut Graph,
    cloud: &PointCloud,
    input: Var,
    cfg: &ModelConfig,
    params: &[PCTParams<Var>],
) -> Result<Vec<LevelVar>> {
    if params.len() != LEVELS {
        return Err(Error::contract(format!("encoder needs {LEVELS} levels of parameters")));
    }
    let extent = radius_scale(cloud);
    let mut coords = cloud.coords.clone();
    let mut features = input;
    let mut out = Vec::with_capacity(LEVELS);
    for (l, p) in params.iter().enumerate() {
        let (level, _) = pct_block(g, &coords, features, &cfg.level(l), p, extent, cfg.attention_cap)?;
        coords = level.coords.clone();
        features = level.features;
        out.push(level);
    }
    Ok(out)
}
