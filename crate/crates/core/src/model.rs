//! The full encoder-decoder, its parameter layout, and forward entry points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, LEVELS};
use crate::decoder::{decode, mca, predict_head, DecoderParams, HeadParams, MCAParams, SaliencyPrediction};
use crate::encoder::{encode, LevelVar, PCTParams};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::pointcloud::{PointCloud, INPUT_CHANNELS};
use crate::tensor::{grad_check_named, CheckReport, Fault, GradCheckOptions, Graph, Stencil, Tensor, Var};

/// Where every parameter lives, by handle.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelLayout<H> {
    pub encoder: Vec<PCTParams<H>>,
    pub decoder: DecoderParams<H>,
    pub mca: Option<MCAParams<H>>,
    pub head: HeadParams<H>,
}

impl<H> ModelLayout<H> {
    pub fn map<U>(&self, mut f: impl FnMut(&H) -> U) -> ModelLayout<U> {
        ModelLayout {
            encoder: self.encoder.iter().map(|p| p.map(&mut f)).collect(),
            decoder: self.decoder.map(&mut f),
            mca: self.mca.as_ref().map(|p| p.map(&mut f)),
            head: self.head.map(&mut f),
        }
    }
}

/// Graph handles produced by one forward pass.
pub struct ForwardOutput {
    pub levels: Vec<LevelVar>,
    /// `N×d_dec`
    pub point_features: Var,
    pub context: Option<Var>,
    /// `N`
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    layout: ModelLayout<ParamId>,
}

impl Model {
    /// Fresh model with Glorot-initialized weights seeded by `cfg.init_seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let mut encoder = Vec::with_capacity(LEVELS);
        let mut d_in = INPUT_CHANNELS;
        for l in 0..LEVELS {
            let level = cfg.level(l);
            encoder.push(PCTParams::init(&mut store, &mut rng, &format!("enc.l{}", l + 1), d_in, &level));
            d_in = level.d_out;
        }
        let decoder = DecoderParams::init(&mut store, &mut rng, &cfg);
        let mca = cfg.flags.use_mca.then(|| MCAParams::init(&mut store, &mut rng, &cfg));
        let head = HeadParams::init(&mut store, &mut rng, &cfg);
        Ok(Model {
            cfg,
            params: store,
            layout: ModelLayout {
                encoder,
                decoder,
                mca,
                head,
            },
        })
    }

    pub fn layout(&self) -> &ModelLayout<ParamId> {
        &self.layout
    }

    /// Minimum number of points a patch needs.
    pub fn min_points(&self) -> usize {
        self.cfg.points[0]
    }

    /// Forward pass with parameters already on `g` (`vars[i]` is parameter `i`).
    pub fn forward_with(&self, g: &mut Graph, cloud: &PointCloud, vars: &[Var]) -> Result<ForwardOutput> {
        if vars.len() != self.params.len() {
            return Err(Error::contract(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        if cloud.len() < self.min_points() {
            return Err(Error::contract(format!(
                "cloud has {} points, model needs at least {}",
                cloud.len(),
                self.min_points()
            )));
        }
        let p = self.layout.map(|id| vars[id.0]);
        let input = g.constant(cloud.input_features());
        let cap = self.cfg.attention_cap;
        let levels = encode(g, cloud, input, &self.cfg, &p.encoder)?;
        let point_features = decode(g, &levels, &cloud.coords, input, &p.decoder, cap)?;
        let context = match &p.mca {
            Some(m) => Some(mca(g, &levels, m)?),
            None => None,
        };
        let logits = predict_head(g, point_features, context, &p.head)?;
        Ok(ForwardOutput {
            levels,
            point_features,
            context,
            logits,
        })
    }

    /// Per-point logits without gradient tracking.
    pub fn logits(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.params.bind_constant(&mut g);
        let out = self.forward_with(&mut g, cloud, &vars)?;
        Ok(g.take_value(out.logits).into_data())
    }

    pub fn predict(&self, cloud: &PointCloud, threshold: f64) -> Result<SaliencyPrediction> {
        Ok(SaliencyPrediction::from_logits(self.logits(cloud)?, threshold))
    }

    /// Mean BCE loss on a labeled cloud and its gradient for every parameter.
    pub fn loss_and_grads(&self, cloud: &PointCloud) -> Result<(f64, Vec<Tensor>)> {
        self.loss_and_grads_with(cloud, None)
    }

    pub fn loss_and_grads_with(&self, cloud: &PointCloud, fault: Option<Fault>) -> Result<(f64, Vec<Tensor>)> {
        let labels = cloud.label_values()?;
        let mut g = match fault {
            Some(f) => Graph::with_fault(f),
            None => Graph::new(),
        };
        let vars = self.params.bind(&mut g);
        let out = self.forward_with(&mut g, cloud, &vars)?;
        let loss = g.bce_with_logits(out.logits, &labels)?;
        g.backward(loss)?;
        let value = g.value(loss).data()[0];
        Ok((value, vars.iter().map(|&v| g.grad_tensor(v)).collect()))
    }

    /// Gradient check of the BCE loss on `cloud` over every parameter tensor.
    /// The loss is measured relative to its value at the current parameters,
    /// which leaves the gradient unchanged and keeps rounding out of the differences.
    pub fn grad_check(&self, cloud: &PointCloud, opts: &GradCheckOptions) -> Result<CheckReport> {
        let labels = cloud.label_values()?;
        let base = self.logits(cloud)?;
        let params: Vec<(String, Tensor)> = self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        grad_check_named(
            |g, vars| {
                let out = self.forward_with(g, cloud, vars)?;
                g.bce_increment(out.logits, &labels, &base)
            },
            &params,
            opts,
        )
    }
}

/// Component a parameter belongs to, from its name.
pub fn param_group(name: &str) -> &'static str {
    let part = |p: &str| name.split('.').any(|s| s == p);
    if name.starts_with("head.") {
        "head"
    } else if name.starts_with("mca.") {
        "mca"
    } else if name.starts_with("dec.") {
        if part("trans") { "ut.trans" } else { "ut" }
    } else if part("fn") {
        "fn"
    } else if part("psi_pre") {
        "psi_pre"
    } else if part("psi_post") {
        "psi_post"
    } else {
        "encoder"
    }
}

/// `cfg` with tiny sizes forced (64-point patches); flags and seeds are kept.
pub fn gradcheck_config(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig {
        flags: cfg.flags,
        init_seed: cfg.init_seed,
        data_seed: cfg.data_seed,
        regime: cfg.regime,
        ..ModelConfig::tiny()
    }
}

/// Gradient check of a tiny model on one 64-point synthetic scene, with a
/// five-point stencil so truncation error stays well under the tolerance.
pub fn check_gradients(cfg: &ModelConfig, fault: Option<Fault>) -> Result<CheckReport> {
    let cfg = gradcheck_config(cfg);
    let cloud = crate::train::gen_synthetic_scene(crate::train::scene_seed(cfg.data_seed, 0, 0), cfg.patch_size, cfg.regime)?;
    let model = Model::new(cfg)?;
    let opts = GradCheckOptions {
        fault,
        stencil: Stencil::FivePoint,
        ..GradCheckOptions::default()
    };
    model.grad_check(&cloud, &opts)
}
