//! Loss, optimizer, metrics, synthetic data, and the training loop.

pub mod ablation;
pub mod adam;
pub mod metrics;
pub mod report;
pub mod synthetic;

pub use ablation::{ablation_variants, run_ablation, AblationRow};
pub use adam::{adam_step, OptimState};
pub use metrics::{adaptive_threshold, e_measure, f_measure, iou, mae, MetricsReport};
pub use report::{format_table, parse_report, write_report, ReportRow};
pub use synthetic::{gen_synthetic_scene, scene_seed};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pointcloud::PointCloud;
use crate::tensor::{Graph, Tensor};

/// Mean binary cross-entropy of `logits` against `labels`.
pub fn bce_loss(logits: &[f64], labels: &[bool]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::contract("bce_loss on empty input"));
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(logits.to_vec()));
    let y: Vec<f64> = labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let l = g.bce_with_logits(x, &y)?;
    Ok(g.value(l).data()[0])
}

/// Synthetic scenes for split 0 (train) or 1 (test), as configured.
pub fn synthetic_split(cfg: &ModelConfig, split: u64, count: usize) -> Result<Vec<PointCloud>> {
    (0..count)
        .map(|i| gen_synthetic_scene(scene_seed(cfg.data_seed, split, i as u64), cfg.patch_size, cfg.regime))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    /// Training-set metrics from the forward passes of this epoch.
    pub metrics: MetricsReport,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch={} step={} loss={} mae={:.6} f_measure={:.6} e_measure={:.6} iou={:.6}",
            self.epoch, self.step, self.loss, self.metrics.mae, self.metrics.f_measure, self.metrics.e_measure, self.metrics.iou
        )
    }
}

/// Model plus optimizer state; epochs count from 0.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optim: OptimState,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let c = &model.cfg;
        let optim = OptimState::new(model.params.tensors(), c.lr, c.beta1, c.beta2, c.adam_eps);
        Trainer { model, optim, epoch: 0 }
    }

    pub fn resume(model: Model, optim: OptimState, epoch: usize) -> Result<Self> {
        if optim.m.len() != model.params.len() {
            return Err(Error::contract("optimizer state does not match the model parameters"));
        }
        Ok(Trainer { model, optim, epoch })
    }

    /// One pass over `scenes` in a seed-determined order, one Adam step per batch
    /// with gradients averaged over the batch.
    pub fn train_epoch(&mut self, scenes: &[PointCloud]) -> Result<EpochLog> {
        if scenes.is_empty() {
            return Err(Error::contract("no training scenes"));
        }
        let cfg = &self.model.cfg;
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train_seed ^ (self.epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407));
        order.shuffle(&mut rng);
        let threshold = cfg.threshold;
        let batch_size = cfg.batch_size;

        let mut total_loss = 0.0;
        let mut views = Vec::with_capacity(scenes.len());
        for batch in order.chunks(batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let scene = &scenes[i];
                let (loss, grads, logits) = scene_step(&self.model, scene)?;
                total_loss += loss;
                let labels = scene.labels.as_ref().unwrap();
                let probs = crate::decoder::SaliencyPrediction::from_logits(logits, threshold).probabilities;
                views.push(MetricsReport::single(&probs, labels, threshold)?);
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&grads) {
                            for (u, v) in x.data_mut().iter_mut().zip(y.data()) {
                                *u += v;
                            }
                        }
                    }
                }
            }
            let mut grads = acc.unwrap();
            let scale = 1.0 / batch.len() as f64;
            for t in &mut grads {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            adam_step(self.model.params.tensors_mut(), &grads, &mut self.optim)?;
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch,
            step: self.optim.step,
            loss: total_loss / scenes.len() as f64,
            metrics: MetricsReport::average(&views)?,
        })
    }

    /// Trains until `self.epoch == epochs`, calling `on_epoch` after each epoch.
    pub fn fit(
        &mut self,
        scenes: &[PointCloud],
        epochs: usize,
        mut on_epoch: impl FnMut(&EpochLog, &Trainer) -> Result<bool>,
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < epochs {
            let log = self.train_epoch(scenes)?;
            let keep_going = on_epoch(&log, self)?;
            logs.push(log);
            if !keep_going {
                break;
            }
        }
        Ok(logs)
    }
}

/// Loss, gradients and logits for one labeled scene.
fn scene_step(model: &Model, scene: &PointCloud) -> Result<(f64, Vec<Tensor>, Vec<f64>)> {
    let labels = scene.label_values()?;
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g);
    let out = model.forward_with(&mut g, scene, &vars)?;
    let loss = g.bce_with_logits(out.logits, &labels)?;
    g.backward(loss)?;
    let grads = vars.iter().map(|&v| g.grad_tensor(v)).collect();
    let logits = g.value(out.logits).data().to_vec();
    Ok((g.value(loss).data()[0], grads, logits))
}

/// Per-view metrics averaged over labeled `scenes`. With `adaptive`, each view
/// is thresholded at twice its mean probability (capped at 1).
pub fn evaluate(model: &Model, scenes: &[PointCloud], threshold: f64, adaptive: bool) -> Result<MetricsReport> {
    let views = scenes
        .iter()
        .map(|s| {
            let labels = s.labels.as_ref().ok_or_else(|| Error::contract("evaluation data must be labeled"))?;
            let p = crate::predict::predict_cloud(model, s, threshold)?.probabilities;
            let t = if adaptive { adaptive_threshold(&p) } else { threshold };
            MetricsReport::single(&p, labels, t)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::average(&views)
}
