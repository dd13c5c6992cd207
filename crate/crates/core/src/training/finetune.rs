use std::fmt;

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use super::config::{Protocol, TrainConfig};
use super::optim::{adamw_step, cosine_lr, OptimizerState};
use super::pipeline::{argmax, cross_entropy, encode_all, epoch_order, init_seed, prepare_sample, stream, Purpose, PreparedSample};
use super::pretrain::{accumulate, scale_grads};
use crate::autodiff::{Graph, Tensor};
use crate::dataio::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::network::{Binder, Checkpoint, HeadKind, MaskSurfNet, ModelConfig, ParamStore, Stage, ENCODER_PREFIXES};

/// Classifier head used by a protocol.
pub fn protocol_head(protocol: Protocol) -> HeadKind {
    match protocol {
        Protocol::LinearFrozen => HeadKind::Linear,
        Protocol::TransferAll | Protocol::NonlinearFrozen => HeadKind::Nonlinear,
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Test-split accuracy in `[0, 1]`.
    pub accuracy: f64,
    pub checkpoint: Checkpoint,
    /// Mean training cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Copy encoder arrays from a checkpoint after checking the architecture.
pub(crate) fn load_encoder(params: &mut ParamStore, model: &ModelConfig, ck: &Checkpoint) -> Result<()> {
    if !model.encoder_matches(&ck.config) {
        return Err(Error::invalid(
            "checkpoint encoder architecture does not match the model config",
        ));
    }
    params.copy_from(&ck.params, &ENCODER_PREFIXES)?;
    Ok(())
}

// Test and train splits draw from different evaluation streams.
const TRAIN_SPLIT: usize = 0;
const TEST_SPLIT: usize = 1;

fn prepare_plain(model: &ModelConfig, sample: &Sample, seed: u64, split: usize, index: usize) -> Result<PreparedSample> {
    let mut rng = stream(seed, Purpose::Evaluate, split, index);
    prepare_sample(&sample.surfels, model.patch_count, model.patch_size, None, None, &mut rng)
}

/// Pooled encoder features of unaugmented samples.
fn pooled_features(
    net: &MaskSurfNet,
    params: &ParamStore,
    samples: &[Sample],
    seed: u64,
    split: usize,
) -> Result<Vec<Tensor>> {
    let frozen = vec![true; params.len()];
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let prepared = prepare_plain(&net.config, s, seed, split, i)?;
            let g = Graph::new();
            let b = Binder::new(&g, params, &frozen);
            let tokens = encode_all(net, &b, &prepared)?;
            Ok(g.value(net.pool(&b, tokens)?))
        })
        .collect()
}

/// Supervised classification on top of an optionally pre-trained encoder.
///
/// Frozen protocols train the head on cached features of unaugmented
/// inputs; `transfer_all` runs the full network with augmentation.
pub fn finetune(
    pretrained: Option<&Checkpoint>,
    model: &ModelConfig,
    dataset: &Dataset,
    protocol: Protocol,
    train: &TrainConfig,
) -> Result<FinetuneOutcome> {
    train.validate()?;
    if model.num_classes != dataset.num_classes() {
        return Err(Error::invalid(format!(
            "classifier has {} classes but the dataset has {}",
            model.num_classes,
            dataset.num_classes()
        )));
    }
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(Error::data("fine-tuning needs non-empty train and test splits"));
    }
    if let Some(s) = dataset.train.iter().chain(&dataset.test).find(|s| s.label >= model.num_classes) {
        return Err(Error::data(format!("label {} out of range for {} classes", s.label, model.num_classes)));
    }
    let net = MaskSurfNet::new(model.clone())?;
    let head = protocol_head(protocol);
    let stage = Stage::Finetune(head);
    let mut params = net.init_params(stage, init_seed(train.seed, 1));
    if let Some(ck) = pretrained {
        load_encoder(&mut params, model, ck)?;
    }
    let mut frozen = vec![false; params.len()];
    if protocol.frozen_encoder() {
        for i in params.matching(&ENCODER_PREFIXES) {
            frozen[i] = true;
        }
    }
    let cached = if protocol.frozen_encoder() {
        Some((
            pooled_features(&net, &params, &dataset.train, train.seed, TRAIN_SPLIT)?,
            pooled_features(&net, &params, &dataset.test, train.seed, TEST_SPLIT)?,
        ))
    } else {
        None
    };

    let mut state = OptimizerState::new(&params);
    let mut epoch_loss = Vec::with_capacity(train.epochs);
    let n = dataset.train.len();
    for epoch in 0..train.epochs {
        let lr = cosine_lr(epoch, train.epochs, train.lr_init);
        let order = epoch_order(train.seed, Purpose::Finetune, epoch, n);
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size) {
            let mut grads: Vec<Option<Tensor>> = vec![None; params.len()];
            for &idx in batch {
                let sample = &dataset.train[idx];
                let mut rng = stream(train.seed, Purpose::Finetune, epoch, idx);
                let g = Graph::new();
                let b = Binder::new(&g, &params, &frozen);
                let logits = match &cached {
                    Some((features, _)) => {
                        let x = g.constant(features[idx].clone());
                        net.head(&b, x, head, Some(&mut rng))?
                    }
                    None => {
                        let prepared = prepare_sample(
                            &sample.surfels,
                            model.patch_count,
                            model.patch_size,
                            train.augment.as_ref(),
                            None,
                            &mut rng,
                        )?;
                        let tokens = encode_all(&net, &b, &prepared)?;
                        net.classify(&b, tokens, head, Some(&mut rng))?
                    }
                };
                let loss = cross_entropy(&g, logits, sample.label)?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}, sample {idx}")));
                }
                total += value;
                g.backward(loss)?;
                accumulate(&mut grads, b.gradients());
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            adamw_step(&mut params, &grads, &mut state, lr, train.weight_decay, &train.adam)?;
        }
        epoch_loss.push(total / n as f64);
    }

    let mut correct = 0;
    for (i, sample) in dataset.test.iter().enumerate() {
        let g = Graph::new();
        let b = Binder::new(&g, &params, &frozen);
        let logits = match &cached {
            Some((_, features)) => net.head::<rand_chacha::ChaCha8Rng>(&b, g.constant(features[i].clone()), head, None)?,
            None => {
                let prepared = prepare_plain(model, sample, train.seed, TEST_SPLIT, i)?;
                let tokens = encode_all(&net, &b, &prepared)?;
                net.classify::<rand_chacha::ChaCha8Rng>(&b, tokens, head, None)?
            }
        };
        if argmax(g.value(logits).data()) == sample.label {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / dataset.test.len() as f64;

    let mut checkpoint = Checkpoint::new(model.clone(), stage, params);
    checkpoint.optimizer = state.to_store(&checkpoint.params);
    checkpoint.meta.insert("protocol".into(), protocol.to_string());
    checkpoint.meta.insert("epochs".into(), train.epochs.to_string());
    checkpoint.meta.insert("optimizer_step".into(), state.step.to_string());
    checkpoint.meta.insert("accuracy".into(), format!("{accuracy:?}"));
    Ok(FinetuneOutcome {
        accuracy,
        checkpoint,
        epoch_loss,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FewshotConfig {
    pub n_way: usize,
    pub m_shot: usize,
    pub query_per_class: usize,
    pub trials: usize,
    pub protocol: Protocol,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        FewshotConfig {
            n_way: 5,
            m_shot: 10,
            query_per_class: 20,
            trials: 10,
            protocol: Protocol::TransferAll,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewshotOutcome {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over trials.
    pub std: f64,
}

impl fmt::Display for FewshotOutcome {
    /// Percentages as `mean±std`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

/// Repeated n-way m-shot episodes over the pooled train and test samples.
pub fn fewshot_eval(
    pretrained: Option<&Checkpoint>,
    model: &ModelConfig,
    dataset: &Dataset,
    cfg: &FewshotConfig,
    train: &TrainConfig,
) -> Result<FewshotOutcome> {
    if cfg.n_way == 0 || cfg.m_shot == 0 || cfg.query_per_class == 0 || cfg.trials == 0 {
        return Err(Error::invalid("n_way, m_shot, query_per_class and trials must be positive"));
    }
    let mut pools: Vec<Vec<&Sample>> = vec![Vec::new(); dataset.num_classes()];
    for s in dataset.train.iter().chain(&dataset.test) {
        if s.label >= pools.len() {
            return Err(Error::data(format!("label {} out of range", s.label)));
        }
        pools[s.label].push(s);
    }
    let need = cfg.m_shot + cfg.query_per_class;
    let eligible: Vec<usize> = (0..pools.len()).filter(|&c| pools[c].len() >= need).collect();
    if eligible.len() < cfg.n_way {
        return Err(Error::invalid(format!(
            "{}-way {}-shot with {} queries needs {} classes of at least {need} samples, found {}",
            cfg.n_way,
            cfg.m_shot,
            cfg.query_per_class,
            cfg.n_way,
            eligible.len()
        )));
    }
    let mut episode_model = model.clone();
    episode_model.num_classes = cfg.n_way;

    let mut accuracies = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let mut rng = stream(train.seed, Purpose::Fewshot, trial, 0);
        let classes = sample_indices(&mut rng, eligible.len(), cfg.n_way);
        let mut episode = Dataset {
            class_names: Vec::with_capacity(cfg.n_way),
            train: Vec::new(),
            test: Vec::new(),
        };
        for (label, c) in classes.iter().map(|i| eligible[i]).enumerate() {
            episode.class_names.push(dataset.class_names[c].clone());
            let picks = sample_indices(&mut rng, pools[c].len(), need);
            for (j, p) in picks.iter().enumerate() {
                let sample = Sample {
                    surfels: pools[c][p].surfels.clone(),
                    label,
                };
                if j < cfg.m_shot {
                    episode.train.push(sample);
                } else {
                    episode.test.push(sample);
                }
            }
        }
        let episode_train = TrainConfig {
            seed: rng.gen(),
            ..train.clone()
        };
        let out = finetune(pretrained, &episode_model, &episode, cfg.protocol, &episode_train)?;
        accuracies.push(out.accuracy);
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let std = (accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    Ok(FewshotOutcome { accuracies, mean, std })
}
