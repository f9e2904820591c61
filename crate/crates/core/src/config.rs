//! Model, optimizer, data and training settings, with a flat `key = value`
//! text format (`#` starts a comment, dotted section prefixes).
//!
//! The level plan (point counts, radii, neighbor counts, widths) is not taken
//! from any published configuration. The defaults follow the usual
//! hierarchical point-network recipe and every value can be overridden.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const LEVELS: usize = 5;

/// Stage switches for ablation runs; all on for the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    pub use_fn: bool,
    pub use_psi_pre: bool,
    pub use_psi_post: bool,
    pub use_ut: bool,
    pub use_mca: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_fn: true,
            use_psi_pre: true,
            use_psi_post: true,
            use_ut: true,
            use_mca: true,
        }
    }
}

/// A removable model component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Fn,
    PsiPre,
    PsiPost,
    Ut,
    Mca,
}

impl Component {
    pub const ALL: [Component; 5] = [Component::Fn, Component::PsiPre, Component::PsiPost, Component::Ut, Component::Mca];

    pub fn key(self) -> &'static str {
        match self {
            Component::Fn => "fn",
            Component::PsiPre => "psi_pre",
            Component::PsiPost => "psi_post",
            Component::Ut => "ut",
            Component::Mca => "mca",
        }
    }

    /// Parses a comma-separated list such as `fn,ut`.
    pub fn parse_list(s: &str) -> Result<Vec<Component>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let c = part.parse::<Component>()?;
            if !out.contains(&c) {
                out.push(c);
            }
        }
        Ok(out)
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation flag `{s}` (expected one of fn, psi_pre, psi_post, ut, mca)")))
    }
}

impl AblationFlags {
    pub fn without(mut self, c: Component) -> Self {
        match c {
            Component::Fn => self.use_fn = false,
            Component::PsiPre => self.use_psi_pre = false,
            Component::PsiPost => self.use_psi_post = false,
            Component::Ut => self.use_ut = false,
            Component::Mca => self.use_mca = false,
        }
        self
    }
}

/// Synthetic scene regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// One medium object.
    Default,
    /// One object holding at most 3% of the points.
    Small,
    /// Two or three objects.
    Multi,
    /// Cycles through the three regimes by scene index.
    Mixed,
}

impl Regime {
    pub fn key(self) -> &'static str {
        match self {
            Regime::Default => "default",
            Regime::Small => "small",
            Regime::Multi => "multi",
            Regime::Mixed => "mixed",
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Regime::Default, Regime::Small, Regime::Multi, Regime::Mixed]
            .into_iter()
            .find(|r| r.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown scene regime `{s}`")))
    }
}

/// One encoder level's settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PCTLevelConfig {
    pub out_points: usize,
    /// In normalized units; multiplied by the input cloud's extent.
    pub radius: f64,
    pub k: usize,
    pub d_out: usize,
    pub use_fn: bool,
    pub use_psi_pre: bool,
    pub use_psi_post: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub points: Vec<usize>,
    pub radii: Vec<f64>,
    pub neighbors: Vec<usize>,
    pub widths: Vec<usize>,
    pub compress_dim: usize,
    /// Split attention sets larger than this into chunks; 0 disables.
    pub attention_cap: usize,
    pub init_seed: u64,
    pub flags: AblationFlags,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    pub patch_size: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub regime: Regime,
    /// Directory of labeled PLY patches; synthetic scenes when empty.
    pub data_dir: String,
    pub data_seed: u64,

    pub epochs: usize,
    pub batch_size: usize,
    pub train_seed: u64,
    pub checkpoint_every: usize,

    pub threshold: f64,
    pub adaptive_threshold: bool,
}

impl Default for ModelConfig {
    /// Full-size settings: 4,096-point patches, Adam at 5e-4, 800 epochs.
    fn default() -> Self {
        ModelConfig {
            points: vec![1024, 256, 64, 16, 8],
            radii: vec![0.1, 0.2, 0.4, 0.8, 1.6],
            neighbors: vec![16; LEVELS],
            widths: vec![64, 128, 256, 512, 512],
            compress_dim: 32,
            attention_cap: 0,
            init_seed: 0,
            flags: AblationFlags::default(),
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patch_size: 4096,
            train_scenes: 8,
            test_scenes: 32,
            regime: Regime::Default,
            data_dir: String::new(),
            data_seed: 0,
            epochs: 800,
            batch_size: 4,
            train_seed: 0,
            checkpoint_every: 10,
            threshold: 0.5,
            adaptive_threshold: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale settings: 512-point synthetic scenes, narrow widths, 200 epochs.
    pub fn desk() -> Self {
        ModelConfig {
            points: vec![256, 128, 64, 32, 16],
            radii: vec![0.1, 0.2, 0.4, 0.8, 1.6],
            neighbors: vec![16; LEVELS],
            widths: vec![16, 24, 32, 48, 64],
            compress_dim: 16,
            // Without LayerNorm in Trans, larger steps or beta2=0.999 give late loss spikes
            lr: 2e-4,
            beta2: 0.99,
            patch_size: 512,
            train_scenes: 8,
            test_scenes: 32,
            epochs: 200,
            batch_size: 1,
            ..ModelConfig::default()
        }
    }

    /// 64-point model for gradient checks and fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            points: vec![32, 16, 8, 4, 2],
            radii: vec![0.2, 0.3, 0.5, 0.8, 1.2],
            neighbors: vec![6; LEVELS],
            widths: vec![6, 8, 8, 10, 12],
            compress_dim: 4,
            patch_size: 64,
            train_scenes: 2,
            test_scenes: 2,
            epochs: 5,
            batch_size: 2,
            ..ModelConfig::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn level(&self, l: usize) -> PCTLevelConfig {
        PCTLevelConfig {
            out_points: self.points[l],
            radius: self.radii[l],
            k: self.neighbors[l],
            d_out: self.widths[l],
            use_fn: self.flags.use_fn,
            use_psi_pre: self.flags.use_psi_pre,
            use_psi_post: self.flags.use_psi_post,
        }
    }

    /// Width of the decoder's per-point output.
    pub fn decoder_width(&self) -> usize {
        self.widths[0]
    }

    pub fn context_width(&self) -> usize {
        LEVELS * self.compress_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, len) in [
            ("model.points", self.points.len()),
            ("model.radii", self.radii.len()),
            ("model.neighbors", self.neighbors.len()),
            ("model.widths", self.widths.len()),
        ] {
            if len != LEVELS {
                return bad(format!("{name} needs {LEVELS} entries, got {len}"));
            }
        }
        if self.points.windows(2).any(|w| w[1] >= w[0]) || self.points[LEVELS - 1] == 0 {
            return bad("model.points must be positive and strictly decreasing".into());
        }
        // the stock plan repeats 512 at the last two levels, so equal widths are allowed
        if self.widths.windows(2).any(|w| w[1] < w[0]) || self.widths[0] == 0 {
            return bad("model.widths must be positive and non-decreasing".into());
        }
        if self.radii.iter().any(|r| !(*r > 0.0)) {
            return bad("model.radii must be positive".into());
        }
        if self.neighbors.contains(&0) {
            return bad("model.neighbors must be positive".into());
        }
        if self.compress_dim == 0 {
            return bad("model.compress_dim must be positive".into());
        }
        if self.patch_size < self.points[0] {
            return bad(format!(
                "data.patch_size ({}) must be at least model.points[0] ({})",
                self.patch_size, self.points[0]
            ));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("optimizer settings out of range".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("eval.threshold must lie in (0, 1)".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        Ok(())
    }

    /// Parses config text on top of the full-size defaults. A `preset` key
    /// resets every field to that preset before later keys apply.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_prefix(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => *self = Self::preset(value)?,
            "model.points" => self.points = list(key, value)?,
            "model.radii" => self.radii = list(key, value)?,
            "model.neighbors" => self.neighbors = list(key, value)?,
            "model.widths" => self.widths = list(key, value)?,
            "model.compress_dim" => self.compress_dim = one(key, value)?,
            "model.attention_cap" => self.attention_cap = one(key, value)?,
            "model.init_seed" => self.init_seed = one(key, value)?,
            "ablation.fn" => self.flags.use_fn = one(key, value)?,
            "ablation.psi_pre" => self.flags.use_psi_pre = one(key, value)?,
            "ablation.psi_post" => self.flags.use_psi_post = one(key, value)?,
            "ablation.ut" => self.flags.use_ut = one(key, value)?,
            "ablation.mca" => self.flags.use_mca = one(key, value)?,
            "optim.lr" => self.lr = one(key, value)?,
            "optim.beta1" => self.beta1 = one(key, value)?,
            "optim.beta2" => self.beta2 = one(key, value)?,
            "optim.eps" => self.adam_eps = one(key, value)?,
            "data.patch_size" => self.patch_size = one(key, value)?,
            "data.train_scenes" => self.train_scenes = one(key, value)?,
            "data.test_scenes" => self.test_scenes = one(key, value)?,
            "data.regime" => self.regime = value.parse()?,
            "data.dir" => self.data_dir = value.to_string(),
            "data.seed" => self.data_seed = one(key, value)?,
            "train.epochs" => self.epochs = one(key, value)?,
            "train.batch_size" => self.batch_size = one(key, value)?,
            "train.seed" => self.train_seed = one(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = one(key, value)?,
            "eval.threshold" => self.threshold = one(key, value)?,
            "eval.adaptive_threshold" => self.adaptive_threshold = one(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Writes every field; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let nums = |v: &[usize]| join(&v.iter().map(|x| x.to_string()).collect::<Vec<_>>());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("model.points", nums(&self.points));
        kv("model.radii", join(&self.radii.iter().map(|x| x.to_string()).collect::<Vec<_>>()));
        kv("model.neighbors", nums(&self.neighbors));
        kv("model.widths", nums(&self.widths));
        kv("model.compress_dim", self.compress_dim.to_string());
        kv("model.attention_cap", self.attention_cap.to_string());
        kv("model.init_seed", self.init_seed.to_string());
        kv("ablation.fn", self.flags.use_fn.to_string());
        kv("ablation.psi_pre", self.flags.use_psi_pre.to_string());
        kv("ablation.psi_post", self.flags.use_psi_post.to_string());
        kv("ablation.ut", self.flags.use_ut.to_string());
        kv("ablation.mca", self.flags.use_mca.to_string());
        kv("optim.lr", self.lr.to_string());
        kv("optim.beta1", self.beta1.to_string());
        kv("optim.beta2", self.beta2.to_string());
        kv("optim.eps", self.adam_eps.to_string());
        kv("data.patch_size", self.patch_size.to_string());
        kv("data.train_scenes", self.train_scenes.to_string());
        kv("data.test_scenes", self.test_scenes.to_string());
        kv("data.regime", self.regime.key().to_string());
        kv("data.dir", self.data_dir.clone());
        kv("data.seed", self.data_seed.to_string());
        kv("train.epochs", self.epochs.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.seed", self.train_seed.to_string());
        kv("train.checkpoint_every", self.checkpoint_every.to_string());
        kv("eval.threshold", self.threshold.to_string());
        kv("eval.adaptive_threshold", self.adaptive_threshold.to_string());
        s
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn one<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn list<T: FromStr + Clone>(key: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<T> = value.split(',').map(|p| one(key, p.trim())).collect::<Result<_>>()?;
    // a single value applies to every level
    if items.len() == 1 {
        return Ok(vec![items[0].clone(); LEVELS]);
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["full", "desk", "tiny"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ModelConfig::parse("model.widht = 3\n").unwrap_err().to_string();
        assert!(err.contains("model.widht"), "{err}");
    }

    #[test]
    fn preset_then_override() {
        let c = ModelConfig::parse("preset = desk\ntrain.epochs = 7 # short\n").unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.patch_size, 512);
    }

    #[test]
    fn scalar_list_broadcasts() {
        let c = ModelConfig::parse("model.neighbors = 8").unwrap();
        assert_eq!(c.neighbors, vec![8; LEVELS]);
    }

    #[test]
    fn ablation_list_parsing() {
        assert_eq!(Component::parse_list("fn, ut").unwrap(), vec![Component::Fn, Component::Ut]);
        assert!(Component::parse_list("fn,bogus").is_err());
    }
}
