//! Component ablations: retrain with one component removed at a time.

use super::{evaluate, MetricsReport, Trainer};
use crate::config::{Component, ModelConfig};
use crate::error::Result;
use crate::model::Model;
use crate::pointcloud::PointCloud;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub removed: Option<Component>,
    pub metrics: MetricsReport,
}

/// `full` followed by one `w/o-<flag>` variant per requested component.
pub fn ablation_variants(base: &ModelConfig, flags: &[Component]) -> Vec<(String, Option<Component>, ModelConfig)> {
    let mut out = vec![("full".to_string(), None, base.clone())];
    for &c in flags {
        let mut cfg = base.clone();
        cfg.flags = base.flags.without(c);
        out.push((format!("w/o-{}", c.key()), Some(c), cfg));
    }
    out
}

/// Trains every variant from the same seeds on `train` and scores it on `test`.
pub fn run_ablation(base: &ModelConfig, flags: &[Component], train: &[PointCloud], test: &[PointCloud]) -> Result<Vec<AblationRow>> {
    ablation_variants(base, flags)
        .into_iter()
        .map(|(variant, removed, cfg)| {
            let mut trainer = Trainer::new(Model::new(cfg.clone())?);
            trainer.fit(train, cfg.epochs, |log, _| {
                log::debug!("{variant} {}", log.line());
                Ok(true)
            })?;
            let metrics = evaluate(&trainer.model, test, cfg.threshold, cfg.adaptive_threshold)?;
            log::info!("{variant}: iou={:.4} mae={:.4}", metrics.iou, metrics.mae);
            Ok(AblationRow { variant, removed, metrics })
        })
        .collect()
}
