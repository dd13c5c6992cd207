use super::config::TrainConfig;
use super::finetune::load_encoder;
use super::pipeline::{init_seed, prepare_sample, reconstruct, stream, MaskSettings, Purpose};
use super::pretrain::{steps_per_epoch, MetricsRow, Pretrainer};
use crate::autodiff::Graph;
use crate::dataio::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::network::{Binder, Checkpoint, MaskSurfNet, ModelConfig, ParamStore, Stage, ENCODER_PREFIXES};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutcome {
    /// Held-out position loss.
    pub l_p: f64,
    /// Held-out normal loss.
    pub l_n: f64,
    pub metrics: Vec<MetricsRow>,
}

/// Mean `(l_p, l_n)` of masked reconstruction over `samples`, with masks
/// drawn from a fixed evaluation stream and no augmentation.
pub fn evaluate_reconstruction(
    net: &MaskSurfNet,
    params: &ParamStore,
    samples: &[Sample],
    train: &TrainConfig,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::data("evaluation needs a non-empty split"));
    }
    let frozen = vec![true; params.len()];
    let mask = MaskSettings {
        ratio: train.mask_ratio,
        strategy: train.mask_strategy,
    };
    let (mut l_p, mut l_n) = (0.0, 0.0);
    for (i, s) in samples.iter().enumerate() {
        let mut rng = stream(train.seed, Purpose::Evaluate, 2, i);
        let prepared = prepare_sample(
            &s.surfels,
            net.config.patch_count,
            net.config.patch_size,
            None,
            Some(mask),
            &mut rng,
        )?;
        let g = Graph::new();
        let b = Binder::new(&g, params, &frozen);
        let pass = reconstruct(net, &b, &prepared, train.target_scope, train.alpha_final, train.normal_mode)?;
        let br = pass.loss.breakdown(&g, train.alpha_final);
        l_p += br.l_p;
        l_n += br.l_n;
    }
    let n = samples.len() as f64;
    Ok((l_p / n, l_n / n))
}

/// Train a fresh decoder and head on a frozen encoder, then measure
/// held-out reconstruction.
///
/// The surfel loss weight stays at `train.alpha_final` throughout. Without
/// a checkpoint the encoder keeps its random initialization.
pub fn probe_decoder(
    pretrained: Option<&Checkpoint>,
    model: &ModelConfig,
    dataset: &Dataset,
    train: &TrainConfig,
) -> Result<ProbeOutcome> {
    if dataset.train.is_empty() {
        return Err(Error::data("probing needs a non-empty train split"));
    }
    let net = MaskSurfNet::new(model.clone())?;
    let mut params = net.init_params(Stage::Pretrain, init_seed(train.seed, 2));
    if let Some(ck) = pretrained {
        load_encoder(&mut params, model, ck)?;
    }
    let mut frozen = vec![false; params.len()];
    for i in params.matching(&ENCODER_PREFIXES) {
        frozen[i] = true;
    }
    let mut trainer = Pretrainer::with_params(net, params, frozen, train)?;
    trainer.fixed_alpha = Some(train.alpha_final);
    trainer.purpose = Purpose::Probe;

    let samples: Vec<_> = dataset.train.iter().map(|s| &s.surfels).collect();
    let total_steps = steps_per_epoch(samples.len(), train.batch_size) * train.epochs;
    let mut step = 0;
    let mut metrics = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        metrics.push(trainer.epoch(&samples, epoch, &mut step, total_steps)?);
    }
    let (l_p, l_n) = evaluate_reconstruction(&trainer.net, &trainer.params, &dataset.test, train)?;
    Ok(ProbeOutcome { l_p, l_n, metrics })
}
