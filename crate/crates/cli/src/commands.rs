use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use masksurf::autodiff::Graph;
use masksurf::dataio::{build_dataset, write_ply_with, write_surfel_file, Dataset, ExtraProperty};
use masksurf::geometry::{add, nearest_indices, normalize, unoriented_angle_deg, Vec3};
use masksurf::network::{self, Binder, Checkpoint, HeadKind, MaskSurfNet, ModelConfig, Stage};
use masksurf::training::{
    self, prepare_sample, reconstruct, stream, MaskSettings, MetricsRow, Purpose, METRICS_HEADER,
};
use serde_json::{json, Value};

use crate::config::RunConfig;

fn core<T>(r: masksurf::Result<T>) -> Result<T> {
    r.map_err(|e| anyhow!("{e}"))
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    core(build_dataset(&cfg.data)).context("building the dataset")
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    core(Checkpoint::load(path)).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Encoder shape from the checkpoint, classifier settings from the config.
fn model_for(cfg: &RunConfig, ck: Option<&Checkpoint>, num_classes: usize) -> ModelConfig {
    let mut model = cfg.model_for(num_classes);
    if let Some(ck) = ck {
        model = ModelConfig {
            num_classes: model.num_classes,
            cls_hidden: model.cls_hidden,
            cls_dropout: model.cls_dropout,
            ..ck.config.clone()
        };
    }
    model
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let ds = dataset(cfg)?;
    let mut manifest = String::from("split,label,class,path\n");
    for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
        for (i, s) in samples.iter().enumerate() {
            let class = &ds.class_names[s.label];
            let rel = format!("{split}/{class}/{i:05}.xyzn");
            let path = out.join(&rel);
            mkdir(path.parent().expect("has parent"))?;
            core(write_surfel_file(&path, &s.surfels))?;
            manifest.push_str(&format!("{split},{},{class},{rel}\n", s.label));
        }
    }
    let path = out.join("manifest.csv");
    fs::write(&path, manifest).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} train and {} test samples to {}", ds.train.len(), ds.test.len(), out.display());
    Ok(json!({"classes": ds.class_names, "train": ds.train.len(), "test": ds.test.len()}))
}

fn print_row(r: &MetricsRow) {
    println!(
        "epoch {:>3}  lr {:.3e}  alpha {:.4}  l_p {:.5e}  l_n {:.4}  l_all {:.5e}",
        r.epoch, r.lr, r.alpha, r.l_p, r.l_n, r.l_all
    );
}

fn row_json(r: &MetricsRow) -> Value {
    json!({"epoch": r.epoch, "l_p": r.l_p, "l_n": r.l_n, "l_all": r.l_all})
}

pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let ds = dataset(cfg)?;
    let model = cfg.model_for(ds.num_classes());
    let mut hook = |r: &MetricsRow| print_row(r);
    let outcome = core(training::pretrain(&ds, &model, &cfg.train, Some(out), Some(&mut hook)))?;
    let last = outcome.metrics.last().expect("at least one epoch");
    Ok(json!({"final": row_json(last), "checkpoint": "checkpoint.bin", "metrics": "metrics.csv"}))
}

pub fn finetune(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<Value> {
    let ck = checkpoint.map(load_checkpoint).transpose()?;
    let ds = dataset(cfg)?;
    let model = model_for(cfg, ck.as_ref(), ds.num_classes());
    let train = cfg.train_with_epochs(cfg.finetune.epochs);
    let outcome = core(training::finetune(ck.as_ref(), &model, &ds, cfg.finetune.protocol, &train))?;
    mkdir(out)?;
    core(outcome.checkpoint.save(&out.join("finetune.bin")))?;
    println!("{} accuracy {:.2}%", cfg.finetune.protocol, 100.0 * outcome.accuracy);
    let result = json!({
        "protocol": cfg.finetune.protocol.to_string(),
        "accuracy": outcome.accuracy,
        "epoch_loss": outcome.epoch_loss,
        "checkpoint": "finetune.bin",
    });
    write_json(&out.join("finetune.json"), &result)?;
    Ok(result)
}

pub fn fewshot(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<Value> {
    let ck = checkpoint.map(load_checkpoint).transpose()?;
    let ds = dataset(cfg)?;
    let model = model_for(cfg, ck.as_ref(), ds.num_classes());
    let train = cfg.train_with_epochs(cfg.fewshot.epochs);
    let e = &cfg.fewshot.episode;
    let outcome = core(training::fewshot_eval(ck.as_ref(), &model, &ds, e, &train))?;
    println!("{}-way {}-shot: {outcome}", e.n_way, e.m_shot);
    let result = json!({
        "accuracies": outcome.accuracies,
        "mean": outcome.mean,
        "std": outcome.std,
        "summary": outcome.to_string(),
    });
    mkdir(out)?;
    write_json(&out.join("fewshot.json"), &result)?;
    Ok(result)
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut text = format!("{METRICS_HEADER}\n");
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn probe(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<Value> {
    let ck = checkpoint.map(load_checkpoint).transpose()?;
    let ds = dataset(cfg)?;
    let model = model_for(cfg, ck.as_ref(), ds.num_classes());
    let train = cfg.train_with_epochs(cfg.probe.epochs);
    let outcome = core(training::probe_decoder(ck.as_ref(), &model, &ds, &train))?;
    mkdir(out)?;
    write_metrics(&out.join("probe_metrics.csv"), &outcome.metrics)?;
    println!("held-out l_p {:.5e}  l_n {:.4}", outcome.l_p, outcome.l_n);
    let result = json!({"l_p": outcome.l_p, "l_n": outcome.l_n, "alpha": train.alpha_final});
    write_json(&out.join("probe.json"), &result)?;
    Ok(result)
}

pub fn gradcheck(eps: f64, tol: f64) -> Result<Value> {
    let checks = core(training::gradient_suite(eps, tol))?;
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    let mut rows = Vec::new();
    for c in &checks {
        let r = &c.report;
        println!(
            "{:<32} max rel {:.3e}  checked {:>5}  skipped {:>3}  {}",
            c.name,
            r.max_rel_error,
            r.checked,
            r.skipped,
            if r.pass { "pass" } else { "FAIL" }
        );
        worst = worst.max(r.max_rel_error);
        if !r.pass {
            failed.push(c.name.clone());
        }
        rows.push(json!({"name": c.name, "max_rel_error": r.max_rel_error, "pass": r.pass}));
    }
    let verdict = if failed.is_empty() { "PASS" } else { "FAIL" };
    println!("max relative error {worst:.3e} (tol {tol:e}): {verdict}");
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(json!({"max_rel_error": worst, "tol": tol, "eps": eps, "checks": rows}))
}

pub fn count_params(cfg: &RunConfig) -> Result<Value> {
    let m = &cfg.model;
    let pre = network::param_count(m, Stage::Pretrain);
    let fine = network::param_count(m, Stage::Finetune(HeadKind::Nonlinear));
    let linear = network::param_count(m, Stage::Finetune(HeadKind::Linear));
    let points_only = network::param_count(
        &ModelConfig {
            predict_normals: false,
            ..m.clone()
        },
        Stage::Pretrain,
    );
    let extra = 100.0 * (pre as f64 - points_only as f64) / points_only as f64;
    let millions = |n: usize| n as f64 / 1e6;
    println!("pretrain            {pre:>10}  ({:.1}M)", millions(pre));
    println!("finetune nonlinear  {fine:>10}  ({:.1}M)", millions(fine));
    println!("finetune linear     {linear:>10}  ({:.1}M)", millions(linear));
    println!("points-only head    {points_only:>10}  (normals add {extra:.2}%)");
    Ok(json!({
        "pretrain": pre,
        "finetune_nonlinear": fine,
        "finetune_linear": linear,
        "pretrain_points_only": points_only,
        "normal_head_increase_percent": extra,
    }))
}

/// Sweep name, value label and the override it stands for.
fn sweep_points(cfg: &RunConfig) -> Vec<(String, String, &'static str, &'static str)> {
    let mut out = Vec::new();
    for sweep in &cfg.ablate.sweeps {
        let (section, key, values): (&str, &str, Vec<String>) = match sweep.as_str() {
            "mask_ratio" => ("mask", "ratio", cfg.ablate.mask_ratios.iter().map(|v| format!("{v:?}")).collect()),
            "mask_strategy" => ("mask", "strategy", vec!["random".into(), "block".into()]),
            "alpha" => ("loss", "alpha", cfg.ablate.alphas.iter().map(|v| format!("{v:?}")).collect()),
            "normal_mode" => ("loss", "normal_mode", vec!["unoriented".into(), "oriented".into()]),
            "target_scope" => ("loss", "target_scope", vec!["masked_only".into(), "all_patches".into()]),
            "normal_source" => ("data", "normal_source", vec!["ground_truth".into(), "estimated".into()]),
            _ => unreachable!("sweeps are validated when parsed"),
        };
        for v in values {
            out.push((sweep.clone(), v, section, key));
        }
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// One pre-training per sweep value, each followed by the configured
/// evaluations on the base dataset. Rows are appended as runs finish.
pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<Value> {
    mkdir(out)?;
    let points = sweep_points(cfg);
    if points.is_empty() {
        bail!("`ablate.sweeps` selects no configurations");
    }
    let eval_ds = dataset(cfg)?;
    let summary = out.join("summary.csv");
    let mut f = File::create(&summary).with_context(|| format!("creating {}", summary.display()))?;
    writeln!(f, "sweep,value,pretrain_l_all,probe_l_p,probe_l_n,accuracy")?;
    let mut rows = Vec::new();
    for (i, (sweep, value, section, key)) in points.iter().enumerate() {
        println!("[{}/{}] {sweep} = {value}", i + 1, points.len());
        let mut run = cfg.clone();
        run.apply(section, key, value)?;
        run.validate()?;
        let pre_ds = if run.data == cfg.data { None } else { Some(dataset(&run)?) };
        let model = run.model_for(eval_ds.num_classes());
        let dir = out.join("runs").join(format!("{sweep}-{value}"));
        let pre = core(training::pretrain(pre_ds.as_ref().unwrap_or(&eval_ds), &model, &run.train, Some(&dir), None))
            .with_context(|| format!("pre-training {sweep} = {value}"))?;
        let l_all = pre.metrics.last().expect("at least one epoch").l_all;
        let (mut probe_lp, mut probe_ln, mut acc) = (None, None, None);
        if cfg.ablate.metric.probe() {
            let p = core(training::probe_decoder(
                Some(&pre.checkpoint),
                &model,
                &eval_ds,
                &run.train_with_epochs(run.probe.epochs),
            ))?;
            probe_lp = Some(p.l_p);
            probe_ln = Some(p.l_n);
        }
        if cfg.ablate.metric.finetune() {
            let ft = core(training::finetune(
                Some(&pre.checkpoint),
                &model,
                &eval_ds,
                run.finetune.protocol,
                &run.train_with_epochs(run.finetune.epochs),
            ))?;
            acc = Some(ft.accuracy);
        }
        writeln!(f, "{sweep},{value},{l_all:?},{},{},{}", opt(probe_lp), opt(probe_ln), opt(acc))?;
        f.flush()?;
        rows.push(json!({
            "sweep": sweep, "value": value, "pretrain_l_all": l_all,
            "probe_l_p": probe_lp, "probe_l_n": probe_ln, "accuracy": acc,
        }));
    }
    Ok(json!({"summary": "summary.csv", "rows": rows}))
}

fn to_points(data: &[f64]) -> Vec<Vec3> {
    data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Angle between a prediction and the ground-truth normal of its nearest
/// true point in the same patch; a zero prediction counts as 90°.
fn angular_errors(pred_pos: &[Vec3], pred_nrm: &[Vec3], truth_pos: &[Vec3], truth_nrm: &[Vec3], k: usize) -> Vec<f64> {
    pred_pos
        .iter()
        .zip(pred_nrm)
        .enumerate()
        .map(|(i, (&p, &n))| {
            let patch = i / k;
            let tp = &truth_pos[patch * k..(patch + 1) * k];
            let j = nearest_indices(tp, p, 1)[0];
            match normalize(n) {
                Some(n) => unoriented_angle_deg(n, truth_nrm[patch * k + j]),
                None => 90.0,
            }
        })
        .collect()
}

pub fn export_vis(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<Value> {
    let ck = load_checkpoint(checkpoint)?;
    if ck.stage != Stage::Pretrain {
        bail!("export-vis needs a pre-training checkpoint, {} holds a fine-tuned model", checkpoint.display());
    }
    if !ck.config.predict_normals {
        bail!("checkpoint {} has no normal head", checkpoint.display());
    }
    let ds = dataset(cfg)?;
    let net = core(MaskSurfNet::new(ck.config.clone()))?;
    let mask = MaskSettings {
        ratio: cfg.train.mask_ratio,
        strategy: cfg.train.mask_strategy,
    };
    let frozen = vec![true; ck.params.len()];
    let threshold = cfg.vis.threshold_deg;
    mkdir(out)?;
    let mut files = Vec::new();
    let mut all_errors = Vec::new();
    for (i, sample) in ds.test.iter().take(cfg.vis.samples).enumerate() {
        let mut rng = stream(cfg.train.seed, Purpose::Evaluate, 3, i);
        let prepared = core(prepare_sample(
            &sample.surfels,
            net.config.patch_count,
            net.config.patch_size,
            None,
            Some(mask),
            &mut rng,
        ))?;
        let g = Graph::new();
        let b = Binder::new(&g, &ck.params, &frozen);
        let pass = core(reconstruct(&net, &b, &prepared, cfg.train.target_scope, cfg.train.alpha_final, cfg.train.normal_mode))?;
        let k = prepared.grouping.patch_size();
        let centers = prepared.grouping.centers();
        let truth = core(prepared.truth())?.select(&pass.supervised);
        let pred_pos = to_points(g.value(pass.pred_pos).data());
        let pred_nrm = to_points(g.value(pass.pred_nrm).data());
        let errors = angular_errors(&pred_pos, &pred_nrm, &truth.positions, &truth.normals, k);
        let within: Vec<f64> = errors.iter().map(|&e| f64::from(u8::from(e <= threshold))).collect();
        let global = |local: &[Vec3], patches: &[usize]| -> Vec<Vec3> {
            local.iter().enumerate().map(|(j, &p)| add(p, centers[patches[j / k]])).collect()
        };
        let pred_global = global(&pred_pos, &pass.supervised);
        let unit_nrm: Vec<Vec3> = pred_nrm.iter().map(|&n| normalize(n).unwrap_or([0.0; 3])).collect();

        let partition = prepared.partition.as_ref().expect("masked sample");
        let visible = partition.visible_indices();
        let mut vis_pos = Vec::new();
        let mut vis_nrm = Vec::new();
        for &p in &visible {
            vis_pos.extend(prepared.grouping.patch(p).iter().map(|&x| add(x, centers[p])));
            vis_nrm.extend_from_slice(&prepared.normals[p * k..(p + 1) * k]);
        }

        let stem = format!("sample{i:03}");
        let input = out.join(format!("{stem}_input.ply"));
        core(write_ply_with(&input, sample.surfels.positions().points(), Some(sample.surfels.normals().normals()), &[]))?;
        let vis = out.join(format!("{stem}_visible.ply"));
        core(write_ply_with(&vis, &vis_pos, Some(&vis_nrm), &[]))?;
        let pts = out.join(format!("{stem}_pred_points.ply"));
        core(write_ply_with(&pts, &pred_global, None, &[]))?;
        let surf = out.join(format!("{stem}_pred_surfels.ply"));
        core(write_ply_with(
            &surf,
            &pred_global,
            Some(&unit_nrm),
            &[
                ExtraProperty {
                    name: "angular_error",
                    values: &errors,
                },
                ExtraProperty {
                    name: "within_threshold",
                    values: &within,
                },
            ],
        ))?;
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        let frac = within.iter().sum::<f64>() / within.len() as f64;
        println!("{stem}: mean angular error {mean:.1}°, {:.1}% within {threshold}°", 100.0 * frac);
        for p in [input, vis, pts, surf] {
            files.push(p.file_name().expect("file").to_string_lossy().into_owned());
        }
        all_errors.extend(errors);
    }
    if all_errors.is_empty() {
        bail!("no test samples to export (vis.samples = {})", cfg.vis.samples);
    }
    let n = all_errors.len() as f64;
    Ok(json!({
        "files": files,
        "threshold_deg": threshold,
        "mean_angular_error": all_errors.iter().sum::<f64>() / n,
        "fraction_within_threshold": all_errors.iter().filter(|&&e| e <= threshold).count() as f64 / n,
    }))
}
