//! Scene context decoder: upsample-and-transform blocks back to input
//! resolution, multi-context aggregation of all encoder levels into one scene
//! vector, and the per-point saliency head.

use rand_chacha::ChaCha8Rng;

use crate::attention::TransParams;
use crate::config::{ModelConfig, LEVELS};
use crate::encoder::{init_trans, trans_over_set, LevelVar};
use crate::error::{Error, Result};
use crate::params::{bias_init, glorot, ParamId, ParamStore};
use crate::pointcloud::{interp_stencil, INPUT_CHANNELS, INTERP_NEIGHBORS};
use crate::tensor::{sigmoid, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct UTParams<H> {
    /// `(d_upper + d_skip) × d_skip`
    pub fuse_w: H,
    pub fuse_b: H,
    /// Absent when the transformer stage is ablated.
    pub trans: Option<TransParams<H>>,
}

impl<H> UTParams<H> {
    pub fn map<U>(&self, mut f: impl FnMut(&H) -> U) -> UTParams<U> {
        UTParams {
            fuse_w: f(&self.fuse_w),
            fuse_b: f(&self.fuse_b),
            trans: self.trans.as_ref().map(|t| t.map(&mut f)),
        }
    }
}

impl UTParams<ParamId> {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d_upper: usize, d_skip: usize, use_ut: bool) -> Self {
        UTParams {
            fuse_w: store.add(format!("{prefix}.fuse_w"), glorot(rng, d_upper + d_skip, d_skip)),
            fuse_b: store.add(format!("{prefix}.fuse_b"), bias_init(rng, d_upper + d_skip, d_skip)),
            trans: use_ut.then(|| init_trans(store, rng, &format!("{prefix}.trans"), d_skip, d_skip)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<H> {
    /// Lifts the 9 input channels to the level-1 width for the last skip link.
    pub input_lift_w: H,
    pub input_lift_b: H,
    /// Blocks in decoding order: level 5→4, 4→3, 3→2, 2→1, 1→input.
    pub blocks: Vec<UTParams<H>>,
}

impl<H> DecoderParams<H> {
    pub fn map<U>(&self, mut f: impl FnMut(&H) -> U) -> DecoderParams<U> {
        DecoderParams {
            input_lift_w: f(&self.input_lift_w),
            input_lift_b: f(&self.input_lift_b),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
        }
    }
}

impl DecoderParams<ParamId> {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let d1 = cfg.widths[0];
        let input_lift_w = store.add("dec.input_lift_w", glorot(rng, INPUT_CHANNELS, d1));
        let input_lift_b = store.add("dec.input_lift_b", bias_init(rng, INPUT_CHANNELS, d1));
        let mut blocks = Vec::with_capacity(LEVELS);
        for l in (0..LEVELS).rev() {
            let d_upper = cfg.widths[l];
            let d_skip = if l == 0 { d1 } else { cfg.widths[l - 1] };
            let prefix = format!("dec.ut{}", l + 1);
            blocks.push(UTParams::init(store, rng, &prefix, d_upper, d_skip, cfg.flags.use_ut));
        }
        DecoderParams {
            input_lift_w,
            input_lift_b,
            blocks,
        }
    }
}

/// One compression layer per encoder level.
#[derive(Clone, Debug, PartialEq)]
pub struct MCAParams<H> {
    pub weights: Vec<H>,
    pub biases: Vec<H>,
}

impl<H> MCAParams<H> {
    pub fn map<U>(&self, mut f: impl FnMut(&H) -> U) -> MCAParams<U> {
        MCAParams {
            weights: self.weights.iter().map(&mut f).collect(),
            biases: self.biases.iter().map(&mut f).collect(),
        }
    }
}

impl MCAParams<ParamId> {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let c = cfg.compress_dim;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, &d) in cfg.widths.iter().enumerate() {
            weights.push(store.add(format!("mca.l{}.w", l + 1), glorot(rng, d, c)));
            biases.push(store.add(format!("mca.l{}.b", l + 1), bias_init(rng, d, c)));
        }
        MCAParams { weights, biases }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<H> {
    /// `(d_dec [+ context]) × d_dec`
    pub w1: H,
    pub b1: H,
    /// `d_dec × 1`
    pub w2: H,
    pub b2: H,
}

impl<H> HeadParams<H> {
    pub fn map<U>(&self, mut f: impl FnMut(&H) -> U) -> HeadParams<U> {
        HeadParams {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }
}

impl HeadParams<ParamId> {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.decoder_width();
        let d_in = d + if cfg.flags.use_mca { cfg.context_width() } else { 0 };
        HeadParams {
            w1: store.add("head.w1", glorot(rng, d_in, d)),
            b1: store.add("head.b1", bias_init(rng, d_in, d)),
            w2: store.add("head.w2", glorot(rng, d, 1)),
            b2: store.add("head.b2", bias_init(rng, d, 1)),
        }
    }
}

/// `Trans(concat(U(upper), skip))` at the skip resolution. `U` is 3-NN
/// inverse-distance interpolation; a linear fuse maps back to the skip width.
pub fn ut_block(g: &mut Graph, upper: &LevelVar, skip: &LevelVar, params: &UTParams<Var>, cap: usize) -> Result<LevelVar> {
    let n = skip.coords.len();
    let st = interp_stencil(&upper.coords, &skip.coords)?;
    let up = g.gather(upper.features, st.index, st.weight, INTERP_NEIGHBORS, &[n])?;
    let joined = g.concat(up, skip.features)?;
    let expected = g.shape(params.fuse_w)[0];
    if g.shape(joined)[1] != expected {
        return Err(Error::Dimension {
            op: "ut_block concat",
            lhs: g.shape(joined).to_vec(),
            rhs: g.shape(params.fuse_w).to_vec(),
        });
    }
    let fused = g.linear(joined, params.fuse_w, params.fuse_b)?;
    let features = match &params.trans {
        Some(p) => trans_over_set(g, fused, p, cap)?,
        None => fused,
    };
    Ok(LevelVar {
        coords: skip.coords.clone(),
        features,
    })
}

/// Chains the UT blocks from the coarsest level back to the input points.
/// `input` holds the 9 raw channels of `input_coords`.
pub fn decode(
    g: &mut Graph,
    levels: &[LevelVar],
    input_coords: &[[f64; 3]],
    input: Var,
    params: &DecoderParams<Var>,
    cap: usize,
) -> Result<Var> {
    if levels.len() != LEVELS || params.blocks.len() != LEVELS {
        return Err(Error::contract(format!("decoder needs {LEVELS} levels")));
    }
    let mut current = levels[LEVELS - 1].clone();
    for (b, l) in (0..LEVELS - 1).rev().enumerate() {
        current = ut_block(g, &current, &levels[l], &params.blocks[b], cap)?;
    }
    let lifted = g.linear(input, params.input_lift_w, params.input_lift_b)?;
    let skip = LevelVar {
        coords: input_coords.to_vec(),
        features: lifted,
    };
    let out = ut_block(g, &current, &skip, &params.blocks[LEVELS - 1], cap)?;
    Ok(out.features)
}

/// Scene context vector: per level `max_rows(relu(F·W + b))`, concatenated in level order.
pub fn mca(g: &mut Graph, levels: &[LevelVar], params: &MCAParams<Var>) -> Result<Var> {
    if levels.len() != LEVELS || params.weights.len() != LEVELS {
        return Err(Error::contract(format!("scene context needs {LEVELS} levels")));
    }
    let mut context: Option<Var> = None;
    for (l, level) in levels.iter().enumerate() {
        let h = g.linear(level.features, params.weights[l], params.biases[l])?;
        let h = g.relu(h);
        let v = g.max_rows(h)?;
        context = Some(match context {
            None => v,
            Some(c) => g.concat(c, v)?,
        });
    }
    Ok(context.unwrap())
}

/// Per-point logits from decoder features, with the scene context broadcast
/// onto every row when present.
pub fn predict_head(g: &mut Graph, point_features: Var, context: Option<Var>, params: &HeadParams<Var>) -> Result<Var> {
    let n = g.shape(point_features)[0];
    let x = match context {
        Some(c) => {
            let rows = g.broadcast_rows(c, n)?;
            g.concat(point_features, rows)?
        }
        None => point_features,
    };
    let h = g.linear(x, params.w1, params.b1)?;
    let h = g.relu(h);
    let logit = g.linear(h, params.w2, params.b2)?;
    g.reshape(logit, &[n])
}

pub const MASK_THRESHOLD: f64 = 0.5;

/// Saliency logits, probabilities and thresholded mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyPrediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SaliencyPrediction {
    pub fn from_logits(logits: Vec<f64>, threshold: f64) -> Self {
        let probabilities: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let mask = probabilities.iter().map(|&p| p > threshold).collect();
        SaliencyPrediction {
            logits,
            probabilities,
            mask,
        }
    }
}

/// Scene context as a plain vector of width `5 × compress_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneContext {
    pub vector: Vec<f64>,
}

/// Plain-value scene context.
pub fn scene_context(levels: &[crate::encoder::EncoderLevelOutput], params: &MCAParams<Tensor>) -> Result<SceneContext> {
    let mut g = Graph::new();
    let vars: Vec<LevelVar> = levels.iter().map(|l| l.bind(&mut g)).collect();
    let p = params.map(|t| g.constant(t.clone()));
    let v = mca(&mut g, &vars, &p)?;
    Ok(SceneContext {
        vector: g.take_value(v).into_data(),
    })
}
