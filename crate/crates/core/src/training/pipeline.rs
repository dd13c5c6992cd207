use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::dataio::{augment_with, AugmentConfig};
use crate::error::Result;
use crate::geometry::{farthest_point_sample_from, group_by_indices, knn_group, PatchGrouping, SurfelCloud, Vec3};
use crate::losses::{surfel_loss, LossVars, NormalMode, SurfelPatches, TargetScope};
use crate::masking::{make_mask, split_by_mask, MaskPartition, MaskStrategy};
use crate::network::{Binder, MaskSurfNet, PeKind};

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Pretrain = 3,
    Finetune = 4,
    Evaluate = 5,
    Probe = 6,
    Fewshot = 7,
}

/// Rng for `(purpose, epoch, index)` under `seed`.
pub fn stream(seed: u64, purpose: Purpose, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 60) | ((epoch as u64 & 0x0fff_ffff) << 32) | (index as u64 & 0xffff_ffff));
    rng
}

/// Seed for parameter initialization.
pub fn init_seed(seed: u64, tag: usize) -> u64 {
    stream(seed, Purpose::Init, 0, tag).gen()
}

/// Fisher–Yates order of `0..n` for one epoch.
pub fn epoch_order(seed: u64, purpose: Purpose, epoch: usize, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, Purpose::Shuffle, epoch, purpose as usize);
    order.shuffle(&mut rng);
    order
}

/// A patchified sample, optionally masked.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub grouping: PatchGrouping,
    /// Normals regrouped with the same indices as the patch points.
    pub normals: Vec<Vec3>,
    pub partition: Option<MaskPartition>,
}

impl PreparedSample {
    pub fn truth(&self) -> Result<SurfelPatches> {
        SurfelPatches::new(self.grouping.patches().to_vec(), self.normals.clone(), self.grouping.patch_size())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MaskSettings {
    pub ratio: f64,
    pub strategy: MaskStrategy,
}

/// Augment, sample centers by FPS, group by KNN and optionally mask.
pub fn prepare_sample(
    surfels: &SurfelCloud,
    patch_count: usize,
    patch_size: usize,
    augment: Option<&AugmentConfig>,
    mask: Option<MaskSettings>,
    rng: &mut impl Rng,
) -> Result<PreparedSample> {
    let owned;
    let cloud = match augment {
        Some(cfg) => {
            owned = augment_with(surfels, cfg, rng)?;
            &owned
        }
        None => surfels,
    };
    let first = rng.gen_range(0..cloud.len());
    let fps = farthest_point_sample_from(cloud.positions(), patch_count, first)?;
    let grouping = knn_group(cloud.positions(), &fps.centers, patch_size)?;
    let normals = group_by_indices(cloud.normals().normals(), &grouping)?;
    let partition = match mask {
        Some(m) => Some(make_mask(m.strategy, grouping.centers(), m.ratio, rng)?),
        None => None,
    };
    Ok(PreparedSample {
        grouping,
        normals,
        partition,
    })
}

/// Graph nodes of one masked-reconstruction forward pass.
pub struct ReconstructionPass {
    pub loss: LossVars,
    pub pred_pos: Var,
    pub pred_nrm: Var,
    /// Patch indices (into the grouping) of the prediction rows.
    pub supervised: Vec<usize>,
}

/// Encoder tokens of every patch, normalized, for classification.
pub fn encode_all(net: &MaskSurfNet, b: &Binder, sample: &PreparedSample) -> Result<Var> {
    let g = &sample.grouping;
    let tokens = net.embed_tokens(b, g.patches(), g.patch_size())?;
    let pe = net.positional_embed(b, g.centers(), PeKind::Encoder)?;
    let enc = net.encode(b, tokens, pe)?;
    net.encoder_norm(b, enc)
}

/// Masked surfel prediction and its loss for one prepared sample.
pub fn reconstruct(
    net: &MaskSurfNet,
    b: &Binder,
    sample: &PreparedSample,
    scope: TargetScope,
    alpha: f64,
    mode: NormalMode,
) -> Result<ReconstructionPass> {
    let partition = sample
        .partition
        .as_ref()
        .ok_or_else(|| crate::Error::invalid("reconstruction needs a mask"))?;
    let g = &sample.grouping;
    let k = g.patch_size();
    let split = split_by_mask(g.patches(), g.centers(), partition)?;
    let tokens = net.embed_tokens(b, &split.visible, k)?;
    let pe_vis = net.positional_embed(b, &split.visible_centers, PeKind::Encoder)?;
    let enc = net.encode(b, tokens, pe_vis)?;
    let enc = net.encoder_norm(b, enc)?;
    let mut all_centers = split.visible_centers.clone();
    all_centers.extend(&split.masked_centers);
    let pe_all = net.positional_embed(b, &all_centers, PeKind::Decoder)?;
    let masked = partition.masked_count();
    let decoded = match scope {
        TargetScope::MaskedOnly => net.decode(b, enc, masked, pe_all)?,
        TargetScope::AllPatches => net.decode_all(b, enc, masked, pe_all)?,
    };
    let (pred_pos, pred_nrm) = net.predict_surfels(b, decoded)?;
    let pred_nrm = match pred_nrm {
        Some(n) => n,
        None => b.graph.constant(Tensor::zeros(b.graph.shape(pred_pos))),
    };
    let supervised = scope.supervised(partition);
    let truth = sample.truth()?.select(&supervised);
    let loss = surfel_loss(b.graph, pred_pos, pred_nrm, &truth, alpha, mode)?;
    Ok(ReconstructionPass {
        loss,
        pred_pos,
        pred_nrm,
        supervised,
    })
}

/// Mean of `-log p(label)` over a batch of `1×C` logit rows.
pub fn cross_entropy(g: &Graph, logits: Var, label: usize) -> Result<Var> {
    let logp = g.log_softmax(logits)?;
    let picked = g.gather(logp, 1, [label])?;
    let s = g.sum(picked, None)?;
    g.scale(s, -1.0)
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
