use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use psformer::io::{load_checkpoint, load_labeled, load_labeled_patches, parse_ply, save_checkpoint, write_atomic, write_ply};
use psformer::model::{check_gradients, param_group};
use psformer::predict::predict_cloud;
use psformer::tensor::Fault;
use psformer::train::{
    evaluate, format_table, gen_synthetic_scene, run_ablation, scene_seed, synthetic_split, write_report, ReportRow, Trainer,
};
use psformer::{Component, Model, ModelConfig, PointCloud};

use crate::{ConfigArgs, EvalArgs, GenDataArgs, GradcheckArgs, PredictArgs, TrainArgs};

fn apply_overrides(cfg: &mut ModelConfig, overrides: &[String]) -> Result<()> {
    for kv in overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(())
}

fn build_config(args: &ConfigArgs, ablate: Option<&str>) -> Result<ModelConfig> {
    let mut cfg = match &args.config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::desk(),
    };
    apply_overrides(&mut cfg, &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.init_seed = seed;
        cfg.data_seed = seed;
        cfg.train_seed = seed;
    }
    if let Some(list) = ablate {
        for c in Component::parse_list(list)? {
            cfg.flags = cfg.flags.without(c);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn training_data(cfg: &ModelConfig) -> Result<Vec<PointCloud>> {
    if cfg.data_dir.is_empty() {
        Ok(synthetic_split(cfg, 0, cfg.train_scenes)?)
    } else {
        let dir = Path::new(&cfg.data_dir);
        if !dir.is_dir() {
            bail!("data.dir `{}` is not a directory", dir.display());
        }
        Ok(load_labeled_patches(dir, cfg.patch_size)?)
    }
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut trainer = match &a.checkpoint {
        Some(path) => {
            if a.cfg.config.is_some() || a.cfg.seed.is_some() || a.ablate.is_some() {
                bail!("a resumed run takes its config from the checkpoint; change training keys with --set");
            }
            let saved = load_checkpoint(path)?;
            let mut cfg = saved.model.cfg.clone();
            apply_overrides(&mut cfg, &a.cfg.overrides)?;
            cfg.validate()?;
            let mut model = Model::new(cfg.clone())?;
            model
                .params
                .load_from(&saved.model.params)
                .context("--set changed the model architecture of the checkpoint")?;
            let mut optim = saved.optim;
            optim.lr = cfg.lr;
            optim.beta1 = cfg.beta1;
            optim.beta2 = cfg.beta2;
            optim.eps = cfg.adam_eps;
            log::info!("resuming from {} at epoch {} step {}", path.display(), saved.epoch, optim.step);
            Trainer::resume(model, optim, saved.epoch)?
        }
        None => Trainer::new(Model::new(build_config(&a.cfg, a.ablate.as_deref())?)?),
    };
    let cfg = trainer.model.cfg.clone();
    let scenes = training_data(&cfg)?;
    log::info!("{} training patches, {} parameters", scenes.len(), trainer.model.params.numel());

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_atomic(&a.out.join("config.txt"), cfg.to_text().as_bytes())?;
    let log_path = a.out.join("train.log");
    let mut log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.checkpoint.is_some())
        .truncate(a.checkpoint.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let ckpt = a.out.join("checkpoint.bin");

    let start = Instant::now();
    let logs = trainer.fit(&scenes, cfg.epochs, |log, t| {
        let line = log.line();
        log::info!("{line}");
        writeln!(log_file, "{line}").map_err(|e| psformer::Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        if cfg.checkpoint_every > 0 && log.epoch % cfg.checkpoint_every == 0 {
            save_checkpoint(t, &ckpt)?;
        }
        Ok(true)
    })?;
    save_checkpoint(&trainer, &ckpt)?;
    match logs.last() {
        Some(last) => println!("trained to epoch {} (step {}) in {:.1?}: loss={}", last.epoch, last.step, start.elapsed(), last.loss),
        None => println!("already at epoch {}; nothing to train", trainer.epoch),
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(ExitCode::SUCCESS)
}

fn emit_report(rows: &[ReportRow], out: Option<&Path>) -> Result<()> {
    print!("{}", format_table(rows));
    if let Some(p) = out {
        write_atomic(p, write_report(rows).as_bytes())?;
        println!("report: {}", p.display());
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    if let Some(list) = &a.ablate {
        return ablation_study(&a, list);
    }
    let path = a.checkpoint.as_ref().expect("clap requires --checkpoint without --ablate");
    let trainer = load_checkpoint(path)?;
    let mut cfg = trainer.model.cfg.clone();
    apply_overrides(&mut cfg, &a.cfg.overrides)?;
    let threshold = a.threshold.unwrap_or(cfg.threshold);
    let scenes = match &a.data {
        Some(p) => load_labeled(p)?,
        None => synthetic_split(&cfg, 1, cfg.test_scenes)?,
    };
    let metrics = evaluate(&trainer.model, &scenes, threshold, cfg.adaptive_threshold)?;
    let variant = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    emit_report(&[ReportRow { variant, metrics }], a.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn ablation_study(a: &EvalArgs, list: &str) -> Result<ExitCode> {
    let mut cfg = build_config(&a.cfg, None)?;
    if let Some(t) = a.threshold {
        cfg.threshold = t;
    }
    let flags = if list == "all" { Component::ALL.to_vec() } else { Component::parse_list(list)? };
    let train = training_data(&cfg)?;
    let test = match &a.data {
        Some(p) => load_labeled(p)?,
        None => synthetic_split(&cfg, 1, cfg.test_scenes)?,
    };
    let rows = run_ablation(&cfg, &flags, &train, &test)?;
    let full_iou = rows[0].metrics.iou;
    let report: Vec<ReportRow> = rows
        .iter()
        .map(|r| ReportRow {
            variant: r.variant.clone(),
            metrics: r.metrics.clone(),
        })
        .collect();
    emit_report(&report, a.out.as_deref())?;
    for r in rows.iter().skip(1).filter(|r| r.metrics.iou > full_iou) {
        println!("inversion: {} iou {:.4} > full {:.4}", r.variant, r.metrics.iou, full_iou);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn predict(a: PredictArgs) -> Result<ExitCode> {
    let trainer = load_checkpoint(&a.checkpoint)?;
    let threshold = a.threshold.unwrap_or(trainer.model.cfg.threshold);
    let cloud = parse_ply(&a.input)?;
    let start = Instant::now();
    let pred = predict_cloud(&trainer.model, &cloud, threshold)?;
    write_ply(&cloud, Some(&pred.probabilities), &a.out, !a.ascii)?;
    let salient = pred.mask.iter().filter(|&&m| m).count();
    log::info!("predicted {} points in {:.1?}", cloud.len(), start.elapsed());
    println!("{}: {} points, {} salient at threshold {}", a.out.display(), cloud.len(), salient, threshold);
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = build_config(&a.cfg, None)?;
    let fault = a.corrupt_backward.then_some(Fault::HalfReluGrad);
    let start = Instant::now();
    let report = check_gradients(&cfg, fault)?;
    let elapsed = start.elapsed();

    let mut text = format!("# gradcheck step={:e} tol={:e}\n", report.step, report.tol);
    let mut groups: BTreeMap<&str, (usize, f64, bool)> = BTreeMap::new();
    for p in &report.params {
        let g = groups.entry(param_group(&p.name)).or_insert((0, 0.0, true));
        g.0 += 1;
        g.1 = g.1.max(p.max_rel_error);
        g.2 &= p.passed;
        text += &format!(
            "param {} group={} checked={} kinks={} max_rel_error={:.3e} {}\n",
            p.name,
            param_group(&p.name),
            p.checked,
            p.kinks,
            p.max_rel_error,
            if p.passed { "PASS" } else { "FAIL" }
        );
    }
    for (name, (count, err, ok)) in &groups {
        text += &format!("group {name} tensors={count} max_rel_error={err:.3e} {}\n", if *ok { "PASS" } else { "FAIL" });
    }
    let passed = report.passed();
    text += &format!(
        "overall max_rel_error={:.3e} kinks={} time={:.1}s {}\n",
        report.max_rel_error(),
        report.kinks(),
        elapsed.as_secs_f64(),
        if passed { "PASS" } else { "FAIL" }
    );
    print!("{text}");
    if let Some(p) = &a.out {
        write_atomic(p, text.as_bytes())?;
    }
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

pub fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let cfg = build_config(&a.cfg, None)?;
    let (split, default_count) = match a.split.as_str() {
        "train" => (0, cfg.train_scenes),
        _ => (1, cfg.test_scenes),
    };
    let count = a.count.unwrap_or(default_count);
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for i in 0..count {
        let scene = gen_synthetic_scene(scene_seed(cfg.data_seed, split, i as u64), cfg.patch_size, cfg.regime)?;
        let path = a.out.join(format!("{}_{i:04}.ply", a.split));
        write_ply(&scene, None, &path, !a.ascii)?;
    }
    println!("wrote {count} {}-split scenes of {} points to {}", a.split, cfg.patch_size, a.out.display());
    Ok(ExitCode::SUCCESS)
}
