use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::TrainConfig;
use super::optim::{adamw_step, alpha_schedule, cosine_lr, OptimizerState};
use super::pipeline::{epoch_order, init_seed, prepare_sample, reconstruct, stream, MaskSettings, Purpose};
use crate::autodiff::{Graph, Tensor};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::network::{Binder, Checkpoint, MaskSurfNet, ModelConfig, ParamStore, Stage};

pub const METRICS_HEADER: &str = "epoch,step,lr,alpha,l_p,l_n,l_all,wall_time";

/// One per-epoch metrics record.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub lr: f64,
    /// Mean loss weight over the epoch's samples.
    pub alpha: f64,
    pub l_p: f64,
    pub l_n: f64,
    /// `l_p + alpha·l_n` of the logged values.
    pub l_all: f64,
    pub wall_time: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.epoch, self.step, self.lr, self.alpha, self.l_p, self.l_n, self.l_all, self.wall_time
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(Error::parse("metrics", format!("expected 8 fields in `{line}`")));
        }
        let n = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::parse("metrics", format!("bad number `{}`", f[i])))
        };
        Ok(MetricsRow {
            epoch: n(0)? as usize,
            step: n(1)? as usize,
            lr: n(2)?,
            alpha: n(3)?,
            l_p: n(4)?,
            l_n: n(5)?,
            l_all: n(6)?,
            wall_time: n(7)?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::parse(path.display().to_string(), "unexpected metrics header"));
    }
    lines.map(MetricsRow::parse).collect()
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

/// Called after every epoch.
pub type EpochHook<'a> = &'a mut dyn FnMut(&MetricsRow);

/// Accumulate per-sample gradients into `sum`.
pub(crate) fn accumulate(sum: &mut [Option<Tensor>], grads: Vec<Option<Tensor>>) {
    for (acc, g) in sum.iter_mut().zip(grads) {
        let Some(g) = g else { continue };
        match acc {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
            None => *acc = Some(g),
        }
    }
}

pub(crate) fn scale_grads(sum: &mut [Option<Tensor>], factor: f64) {
    for g in sum.iter_mut().flatten() {
        for x in g.data_mut() {
            *x *= factor;
        }
    }
}

fn write_atomic(path: &Path, ck: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    ck.save(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Encoder-decoder pre-training state that survives across epochs.
pub struct Pretrainer<'a> {
    pub net: MaskSurfNet,
    pub params: ParamStore,
    pub frozen: Vec<bool>,
    pub state: OptimizerState,
    pub train: &'a TrainConfig,
    /// Constant loss weight instead of the linear ramp (used by probing).
    pub fixed_alpha: Option<f64>,
    pub purpose: Purpose,
}

impl<'a> Pretrainer<'a> {
    pub fn new(model: &ModelConfig, train: &'a TrainConfig) -> Result<Self> {
        let net = MaskSurfNet::new(model.clone())?;
        let params = net.init_params(Stage::Pretrain, init_seed(train.seed, 0));
        let frozen = vec![false; params.len()];
        Self::with_params(net, params, frozen, train)
    }

    pub fn with_params(net: MaskSurfNet, params: ParamStore, frozen: Vec<bool>, train: &'a TrainConfig) -> Result<Self> {
        train.validate()?;
        if frozen.len() != params.len() {
            return Err(Error::invalid("frozen mask length differs from the parameter count"));
        }
        let state = OptimizerState::new(&params);
        Ok(Pretrainer {
            frozen,
            net,
            params,
            state,
            train,
            fixed_alpha: None,
            purpose: Purpose::Pretrain,
        })
    }

    /// Run one epoch over `samples`; `step` is the global step counter.
    pub fn epoch(
        &mut self,
        samples: &[&crate::geometry::SurfelCloud],
        epoch: usize,
        step: &mut usize,
        total_steps: usize,
    ) -> Result<MetricsRow> {
        let cfg = self.train;
        let model = &self.net.config;
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init);
        let mask = MaskSettings {
            ratio: cfg.mask_ratio,
            strategy: cfg.mask_strategy,
        };
        let order = epoch_order(cfg.seed, self.purpose, epoch, samples.len());
        let (mut sum_p, mut sum_n, mut sum_alpha) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let alpha = self
                .fixed_alpha
                .unwrap_or_else(|| alpha_schedule(*step, total_steps, cfg.alpha_final));
            let mut grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
            for &idx in batch {
                let mut rng = stream(cfg.seed, self.purpose, epoch, idx);
                let prepared = prepare_sample(
                    samples[idx],
                    model.patch_count,
                    model.patch_size,
                    cfg.augment.as_ref(),
                    Some(mask),
                    &mut rng,
                )?;
                let g = Graph::new();
                let b = Binder::new(&g, &self.params, &self.frozen);
                let pass = reconstruct(&self.net, &b, &prepared, cfg.target_scope, alpha, cfg.normal_mode)?;
                let br = pass.loss.breakdown(&g, alpha);
                if !(br.l_all.is_finite() && br.l_p.is_finite() && br.l_n.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at epoch {epoch}, step {step}, sample {idx}"
                    )));
                }
                g.backward(pass.loss.l_all)?;
                accumulate(&mut grads, b.gradients());
                sum_p += br.l_p;
                sum_n += br.l_n;
                sum_alpha += alpha;
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            adamw_step(&mut self.params, &grads, &mut self.state, lr, cfg.weight_decay, &cfg.adam)?;
            *step += 1;
        }
        let n = samples.len() as f64;
        let (l_p, l_n, alpha) = (sum_p / n, sum_n / n, sum_alpha / n);
        Ok(MetricsRow {
            epoch,
            step: *step,
            lr,
            alpha,
            l_p,
            l_n,
            l_all: l_p + alpha * l_n,
            wall_time: 0.0,
        })
    }

    pub fn checkpoint(&self, epoch: usize, step: usize) -> Checkpoint {
        let mut ck = Checkpoint::new(self.net.config.clone(), Stage::Pretrain, self.params.clone());
        ck.optimizer = self.state.to_store(&self.params);
        ck.meta.insert("epoch".into(), epoch.to_string());
        ck.meta.insert("step".into(), step.to_string());
        ck.meta.insert("optimizer_step".into(), self.state.step.to_string());
        ck.meta.insert(
            "rng".into(),
            format!("chacha8;seed={};next_epoch={}", self.train.seed, epoch),
        );
        for (k, v) in self.train.pairs() {
            ck.meta.insert(format!("train.{k}"), v.replace(' ', "_"));
        }
        ck
    }
}

pub fn steps_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size)
}

/// Masked surfel pre-training on the dataset's train split.
///
/// With `out_dir`, writes `metrics.csv` row by row and `checkpoint.bin`
/// every `checkpoint_every` epochs and at the end. A failure leaves the
/// last complete checkpoint in place.
pub fn pretrain(
    dataset: &Dataset,
    model: &ModelConfig,
    train: &TrainConfig,
    out_dir: Option<&Path>,
    mut hook: Option<EpochHook>,
) -> Result<PretrainOutcome> {
    if dataset.train.is_empty() {
        return Err(Error::data("pre-training needs a non-empty train split"));
    }
    let mut trainer = Pretrainer::new(model, train)?;
    let samples: Vec<_> = dataset.train.iter().map(|s| &s.surfels).collect();
    let total_steps = steps_per_epoch(samples.len(), train.batch_size) * train.epochs;

    let mut csv = None;
    let ck_path: Option<PathBuf> = out_dir.map(|d| d.join("checkpoint.bin"));
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.csv");
        let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
        csv = Some((f, path));
    }

    let start = Instant::now();
    let mut step = 0;
    let mut metrics = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let mut row = trainer.epoch(&samples, epoch, &mut step, total_steps)?;
        if train.record_wall_time {
            row.wall_time = start.elapsed().as_secs_f64();
        }
        if let Some((f, path)) = csv.as_mut() {
            writeln!(f, "{}", row.csv()).map_err(|e| Error::io(&*path, e))?;
            f.flush().map_err(|e| Error::io(&*path, e))?;
        }
        if let Some(h) = hook.as_mut() {
            h(&row);
        }
        metrics.push(row);
        let last = epoch + 1 == train.epochs;
        if let Some(p) = &ck_path {
            if last || (train.checkpoint_every > 0 && (epoch + 1) % train.checkpoint_every == 0) {
                write_atomic(p, &trainer.checkpoint(epoch + 1, step))?;
            }
        }
    }
    let checkpoint = trainer.checkpoint(train.epochs, step);
    Ok(PretrainOutcome { checkpoint, metrics })
}
