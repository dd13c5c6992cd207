//! Pre-training, fine-tuning protocols, few-shot evaluation and probing.

mod config;
mod finetune;
mod gradcheck;
mod optim;
mod pipeline;
mod pretrain;
mod probe;
#[cfg(test)]
mod tests;

pub use config::{Protocol, TrainConfig};
pub use finetune::{fewshot_eval, finetune, protocol_head, FewshotConfig, FewshotOutcome, FinetuneOutcome};
pub use gradcheck::{
    gradcheck_params, gradient_suite, loss_checks, model_checks, primitive_checks, tiny_model, NamedCheck, GRADCHECK_EPS, GRADCHECK_TOL,
};
pub use optim::{adamw_step, alpha_schedule, cosine_lr, decays, AdamConfig, OptimizerState};
pub use pipeline::{
    argmax, cross_entropy, encode_all, epoch_order, init_seed, prepare_sample, reconstruct, stream, MaskSettings,
    PreparedSample, Purpose, ReconstructionPass,
};
pub use pretrain::{
    pretrain, read_metrics, steps_per_epoch, EpochHook, MetricsRow, PretrainOutcome, Pretrainer, METRICS_HEADER,
};
pub use probe::{evaluate_reconstruction, probe_decoder, ProbeOutcome};
