//! Masked/visible partitions of patches.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{nearest_indices, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskStrategy {
    #[default]
    Random,
    /// A seed patch and its nearest patch centers.
    Block,
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(MaskStrategy::Random),
            "block" => Ok(MaskStrategy::Block),
            other => Err(Error::invalid(format!("unknown mask strategy `{other}` (random|block)"))),
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskStrategy::Random => "random",
            MaskStrategy::Block => "block",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPartition {
    flags: Vec<bool>,
    ratio: f64,
    strategy: MaskStrategy,
}

/// `round(m·n)` with halves rounded up, validated to leave at least one
/// masked and one visible patch.
pub fn masked_count(n: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("mask ratio {ratio} must lie in (0, 1)")));
    }
    let count = (ratio * n as f64 + 0.5).floor() as usize;
    if count < 1 || count >= n {
        return Err(Error::invalid(format!(
            "mask ratio {ratio} masks {count} of {n} patches; need between 1 and {}",
            n.saturating_sub(1)
        )));
    }
    Ok(count)
}

impl MaskPartition {
    pub fn from_flags(flags: Vec<bool>, ratio: f64, strategy: MaskStrategy) -> Result<Self> {
        let count = masked_count(flags.len(), ratio)?;
        let actual = flags.iter().filter(|&&f| f).count();
        if actual != count {
            return Err(Error::invalid(format!(
                "{actual} flags set, ratio {ratio} over {} patches requires {count}",
                flags.len()
            )));
        }
        Ok(MaskPartition { flags, ratio, strategy })
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn strategy(&self) -> MaskStrategy {
        self.strategy
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&i| !self.flags[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&i| self.flags[i]).collect()
    }

    /// Split per-patch items (`per_patch` consecutive entries each) into
    /// (visible, masked), preserving patch order in both groups.
    pub fn split<T: Clone>(&self, items: &[T], per_patch: usize) -> Result<(Vec<T>, Vec<T>)> {
        if items.len() != self.flags.len() * per_patch {
            return Err(Error::invalid(format!(
                "partition covers {} patches of {per_patch}, got {} items",
                self.flags.len(),
                items.len()
            )));
        }
        let mut visible = Vec::new();
        let mut masked = Vec::new();
        for (chunk, &flag) in items.chunks(per_patch.max(1)).zip(&self.flags) {
            if flag {
                masked.extend_from_slice(chunk);
            } else {
                visible.extend_from_slice(chunk);
            }
        }
        Ok((visible, masked))
    }
}

pub fn random_mask(n: usize, ratio: f64, seed: u64) -> Result<MaskPartition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_mask_with(n, ratio, &mut rng)
}

/// Uniform choice of `round(m·n)` patches without replacement.
pub fn random_mask_with(n: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPartition> {
    let count = masked_count(n, ratio)?;
    let mut flags = vec![false; n];
    for i in rand::seq::index::sample(rng, n, count) {
        flags[i] = true;
    }
    Ok(MaskPartition {
        flags,
        ratio,
        strategy: MaskStrategy::Random,
    })
}

pub fn block_mask(centers: &[Vec3], ratio: f64, seed: u64) -> Result<MaskPartition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    block_mask_with(centers, ratio, &mut rng)
}

pub fn block_mask_with(centers: &[Vec3], ratio: f64, rng: &mut impl Rng) -> Result<MaskPartition> {
    masked_count(centers.len(), ratio)?;
    let seed_center = rng.gen_range(0..centers.len());
    block_mask_from(centers, ratio, seed_center)
}

/// Mask `seed_center` and its `round(m·N) − 1` nearest centers.
pub fn block_mask_from(centers: &[Vec3], ratio: f64, seed_center: usize) -> Result<MaskPartition> {
    let count = masked_count(centers.len(), ratio)?;
    if seed_center >= centers.len() {
        return Err(Error::invalid(format!(
            "seed center {seed_center} out of range for {} centers",
            centers.len()
        )));
    }
    let mut flags = vec![false; centers.len()];
    // The seed is at distance zero; exact duplicates with a lower index
    // would otherwise displace it.
    flags[seed_center] = true;
    let mut taken = 1;
    for i in nearest_indices(centers, centers[seed_center], centers.len()) {
        if taken == count {
            break;
        }
        if !flags[i] {
            flags[i] = true;
            taken += 1;
        }
    }
    Ok(MaskPartition {
        flags,
        ratio,
        strategy: MaskStrategy::Block,
    })
}

pub fn make_mask(
    strategy: MaskStrategy,
    centers: &[Vec3],
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<MaskPartition> {
    match strategy {
        MaskStrategy::Random => random_mask_with(centers.len(), ratio, rng),
        MaskStrategy::Block => block_mask_with(centers, ratio, rng),
    }
}

/// Point patches and centers split by one partition.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSplit {
    pub visible: Vec<Vec3>,
    pub masked: Vec<Vec3>,
    pub visible_centers: Vec<Vec3>,
    pub masked_centers: Vec<Vec3>,
}

/// Split flat N·K patch rows and N centers by `partition`.
pub fn split_by_mask(patches: &[Vec3], centers: &[Vec3], partition: &MaskPartition) -> Result<MaskedSplit> {
    if centers.len() != partition.len() || partition.is_empty() || patches.len() % partition.len() != 0 {
        return Err(Error::invalid(format!(
            "partition of {} patches cannot split {} centers / {} patch rows",
            partition.len(),
            centers.len(),
            patches.len()
        )));
    }
    let k = patches.len() / partition.len();
    let (visible, masked) = partition.split(patches, k)?;
    let (visible_centers, masked_centers) = partition.split(centers, 1)?;
    Ok(MaskedSplit {
        visible,
        masked,
        visible_centers,
        masked_centers,
    })
}
