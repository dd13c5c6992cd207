//! Chamfer distance, position-indexed normal distance (PIND) and the
//! combined surfel objective.
//!
//! Nearest-neighbor pairings are argmins over squared position distance,
//! ties going to the lower index. In the differentiable versions the
//! pairings are constants: gradients flow through the paired values only.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{dot, norm, sq_dist, Vec3};
use crate::masking::MaskPartition;

/// Norm floor applied before dividing by a normal's length.
pub const NORM_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormalMode {
    /// `1 − |cos|`: a normal and its negation are the same.
    #[default]
    Unoriented,
    /// `1 − cos`.
    Oriented,
}

impl FromStr for NormalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unoriented" => Ok(NormalMode::Unoriented),
            "oriented" => Ok(NormalMode::Oriented),
            other => Err(Error::invalid(format!(
                "unknown normal mode `{other}` (unoriented|oriented)"
            ))),
        }
    }
}

impl fmt::Display for NormalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormalMode::Unoriented => "unoriented",
            NormalMode::Oriented => "oriented",
        })
    }
}

/// Which patches the objective supervises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TargetScope {
    #[default]
    MaskedOnly,
    AllPatches,
}

impl FromStr for TargetScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked_only" => Ok(TargetScope::MaskedOnly),
            "all_patches" => Ok(TargetScope::AllPatches),
            other => Err(Error::invalid(format!(
                "unknown target scope `{other}` (masked_only|all_patches)"
            ))),
        }
    }
}

impl fmt::Display for TargetScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetScope::MaskedOnly => "masked_only",
            TargetScope::AllPatches => "all_patches",
        })
    }
}

impl TargetScope {
    /// Indices of supervised patches in decoder token order
    /// (`[visible; masked]`).
    pub fn supervised(self, partition: &MaskPartition) -> Vec<usize> {
        match self {
            TargetScope::MaskedOnly => partition.masked_indices(),
            TargetScope::AllPatches => {
                let mut all = partition.visible_indices();
                all.extend(partition.masked_indices());
                all
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_p: f64,
    pub l_n: f64,
    pub l_all: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    pub fn new(l_p: f64, l_n: f64, alpha: f64) -> Self {
        LossBreakdown {
            l_p,
            l_n,
            l_all: l_p + alpha * l_n,
            alpha,
        }
    }
}

/// Index of the row of `set` nearest to `query`; lowest index on ties.
fn argmin(query: Vec3, set: &[Vec3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &p) in set.iter().enumerate() {
        let d = sq_dist(query, p);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChamferResult {
    pub value: f64,
    /// For each truth row, the nearest predicted row.
    pub truth_to_pred: Vec<usize>,
    /// For each predicted row, the nearest truth row.
    pub pred_to_truth: Vec<usize>,
}

fn check_patch(p: &[Vec3], p_hat: &[Vec3]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid("chamfer distance of empty patches"));
    }
    if p.len() != p_hat.len() {
        return Err(Error::invalid(format!(
            "patch sizes differ: {} vs {}",
            p.len(),
            p_hat.len()
        )));
    }
    Ok(())
}

/// Symmetric sum of mean nearest-neighbor squared distances.
pub fn chamfer_distance(p: &[Vec3], p_hat: &[Vec3]) -> Result<ChamferResult> {
    check_patch(p, p_hat)?;
    let k = p.len() as f64;
    let truth_to_pred: Vec<usize> = p.iter().map(|&q| argmin(q, p_hat)).collect();
    let pred_to_truth: Vec<usize> = p_hat.iter().map(|&q| argmin(q, p)).collect();
    let forward: f64 = p.iter().zip(&truth_to_pred).map(|(&q, &j)| sq_dist(q, p_hat[j])).sum();
    let backward: f64 = p_hat.iter().zip(&pred_to_truth).map(|(&q, &j)| sq_dist(q, p[j])).sum();
    Ok(ChamferResult {
        value: forward / k + backward / k,
        truth_to_pred,
        pred_to_truth,
    })
}

/// Normal distance in `[0, 1]` (unoriented) or `[0, 2]` (oriented).
///
/// Norms below [`NORM_FLOOR`] are clamped; the returned flag reports it.
pub fn normal_metric_checked(n: Vec3, n_hat: Vec3, mode: NormalMode) -> (f64, bool) {
    let (a, b) = (norm(n), norm(n_hat));
    let clamped = a < NORM_FLOOR || b < NORM_FLOOR;
    let cos = dot(n, n_hat) / (a.max(NORM_FLOOR) * b.max(NORM_FLOOR));
    let d = match mode {
        NormalMode::Unoriented => 1.0 - cos.abs(),
        NormalMode::Oriented => 1.0 - cos,
    };
    (d, clamped)
}

pub fn normal_metric(n: Vec3, n_hat: Vec3, mode: NormalMode) -> f64 {
    normal_metric_checked(n, n_hat, mode).0
}

/// PIND: normals paired through position argmins, both directions.
pub fn pind_loss(p: &[Vec3], p_hat: &[Vec3], n: &[Vec3], n_hat: &[Vec3], mode: NormalMode) -> Result<f64> {
    check_patch(p, p_hat)?;
    if n.len() != p.len() || n_hat.len() != p.len() {
        return Err(Error::invalid("normal patches must match position patches in length"));
    }
    let cd = chamfer_distance(p, p_hat)?;
    Ok(pind_from_pairs(&cd, n, n_hat, mode))
}

fn pind_from_pairs(cd: &ChamferResult, n: &[Vec3], n_hat: &[Vec3], mode: NormalMode) -> f64 {
    let k = n.len() as f64;
    let forward: f64 = n.iter().zip(&cd.truth_to_pred).map(|(&a, &j)| normal_metric(a, n_hat[j], mode)).sum();
    let backward: f64 = n_hat.iter().zip(&cd.pred_to_truth).map(|(&a, &j)| normal_metric(a, n[j], mode)).sum();
    forward / k + backward / k
}

/// Surfel patches stored as flat `patches·k` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfelPatches {
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub k: usize,
}

impl SurfelPatches {
    pub fn new(positions: Vec<Vec3>, normals: Vec<Vec3>, k: usize) -> Result<Self> {
        if k == 0 || positions.len() % k != 0 || normals.len() != positions.len() {
            return Err(Error::invalid(format!(
                "{} positions and {} normals do not form patches of {k}",
                positions.len(),
                normals.len()
            )));
        }
        Ok(SurfelPatches { positions, normals, k })
    }

    pub fn num_patches(&self) -> usize {
        self.positions.len() / self.k
    }

    fn patch(&self, i: usize) -> (&[Vec3], &[Vec3]) {
        let r = i * self.k..(i + 1) * self.k;
        (&self.positions[r.clone()], &self.normals[r])
    }

    /// The listed patches, in the listed order.
    pub fn select(&self, patches: &[usize]) -> Self {
        let mut positions = Vec::with_capacity(patches.len() * self.k);
        let mut normals = Vec::with_capacity(patches.len() * self.k);
        for &i in patches {
            let (p, n) = self.patch(i);
            positions.extend_from_slice(p);
            normals.extend_from_slice(n);
        }
        SurfelPatches { positions, normals, k: self.k }
    }
}

/// Per-patch CD and PIND averaged over patches, combined as
/// `l_p + alpha·l_n`.
pub fn total_loss(pred: &SurfelPatches, truth: &SurfelPatches, alpha: f64, mode: NormalMode) -> Result<LossBreakdown> {
    if alpha < 0.0 {
        return Err(Error::invalid(format!("alpha must be non-negative, got {alpha}")));
    }
    if pred.k != truth.k || pred.num_patches() != truth.num_patches() || truth.num_patches() == 0 {
        return Err(Error::invalid(format!(
            "{} predicted patches of {} vs {} target patches of {}",
            pred.num_patches(),
            pred.k,
            truth.num_patches(),
            truth.k
        )));
    }
    let mut l_p = 0.0;
    let mut l_n = 0.0;
    for i in 0..truth.num_patches() {
        let (p, n) = truth.patch(i);
        let (p_hat, n_hat) = pred.patch(i);
        let cd = chamfer_distance(p, p_hat)?;
        l_p += cd.value;
        l_n += pind_from_pairs(&cd, n, n_hat, mode);
    }
    let count = truth.num_patches() as f64;
    Ok(LossBreakdown::new(l_p / count, l_n / count, alpha))
}

/// Graph nodes of the surfel objective for one sample.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_p: Var,
    pub l_n: Var,
    pub l_all: Var,
    /// Predicted normals whose norm fell under [`NORM_FLOOR`].
    pub clamped_normals: usize,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph, alpha: f64) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().expect("scalar loss");
        LossBreakdown {
            l_p: v(self.l_p),
            l_n: v(self.l_n),
            l_all: v(self.l_all),
            alpha,
        }
    }
}

/// Differentiable surfel objective.
///
/// `pred_pos` and `pred_nrm` are `[patches, k, 3]` nodes aligned with the
/// patches of `truth`. Target normals are constants.
pub fn surfel_loss(
    g: &Graph,
    pred_pos: Var,
    pred_nrm: Var,
    truth: &SurfelPatches,
    alpha: f64,
    mode: NormalMode,
) -> Result<LossVars> {
    let (patches, k) = (truth.num_patches(), truth.k);
    let expected = [patches, k, 3];
    if g.shape(pred_pos) != expected || g.shape(pred_nrm) != expected {
        return Err(Error::invalid(format!(
            "predictions {:?}/{:?} do not match {patches} target patches of {k}",
            g.shape(pred_pos),
            g.shape(pred_nrm)
        )));
    }
    if alpha < 0.0 {
        return Err(Error::invalid(format!("alpha must be non-negative, got {alpha}")));
    }
    let rows = patches * k;
    let pos_vals = g.value(pred_pos);
    let pred_rows: Vec<Vec3> = pos_vals.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();

    // Global row indices of the position argmins.
    let mut fwd = Vec::with_capacity(rows);
    let mut bwd = Vec::with_capacity(rows);
    for i in 0..patches {
        let base = i * k;
        let (p, _) = truth.patch(i);
        let p_hat = &pred_rows[base..base + k];
        fwd.extend(p.iter().map(|&q| base + argmin(q, p_hat)));
        bwd.extend(p_hat.iter().map(|&q| base + argmin(q, p)));
    }

    let flat_pos = g.reshape(pred_pos, [rows, 3])?;
    let flat_nrm = g.reshape(pred_nrm, [rows, 3])?;
    let truth_pos = g.constant(rows3(&truth.positions));
    // Pairings enter as gather indices so that they are part of the graph.
    let paired_truth_pos = g.gather(truth_pos, 0, bwd.clone())?;

    let gathered = g.gather(flat_pos, 0, fwd.clone())?;
    let forward = mean_sq_rows(g, truth_pos, gathered)?;
    let backward = mean_sq_rows(g, flat_pos, paired_truth_pos)?;
    let l_p = g.add(forward, backward)?;

    let unit_truth: Vec<Vec3> = truth
        .normals
        .iter()
        .map(|&n| {
            let s = 1.0 / norm(n).max(NORM_FLOOR);
            [n[0] * s, n[1] * s, n[2] * s]
        })
        .collect();
    let gathered_nrm = g.gather(flat_nrm, 0, fwd)?;
    let unit_truth = g.constant(rows3(&unit_truth));
    let paired_unit_truth = g.gather(unit_truth, 0, bwd)?;
    let (term_a, clamped_a) = metric_rows(g, gathered_nrm, unit_truth, mode)?;
    let (term_b, clamped_b) = metric_rows(g, flat_nrm, paired_unit_truth, mode)?;
    let l_n = g.add(term_a, term_b)?;

    let weighted = g.scale(l_n, alpha)?;
    let l_all = g.add(l_p, weighted)?;
    Ok(LossVars {
        l_p,
        l_n,
        l_all,
        clamped_normals: clamped_a + clamped_b,
    })
}

fn rows3(rows: &[Vec3]) -> Tensor {
    Tensor::new([rows.len(), 3], rows.iter().flatten().copied().collect()).expect("rows of three")
}

/// Mean over rows of the squared distance between two `[L, 3]` nodes.
fn mean_sq_rows(g: &Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let per_row = g.sum(sq, Some(1))?;
    g.mean(per_row, None)
}

/// Mean normal metric between predicted rows `pred` and constant unit
/// rows `truth`.
fn metric_rows(g: &Graph, pred: Var, truth: Var, mode: NormalMode) -> Result<(Var, usize)> {
    let rows = g.shape(truth)[0];
    let prod = g.mul(pred, truth)?;
    let dots = g.sum(prod, Some(1))?;
    let sq = g.mul(pred, pred)?;
    let sumsq = g.sum(sq, Some(1))?;
    let len = g.sqrt(sumsq)?;
    let clamped = g.value(len).data().iter().filter(|&&v| v < NORM_FLOOR).count();
    let len = g.reshape(len, [rows, 1])?;
    let floor = g.constant(Tensor::full([rows, 1], NORM_FLOOR));
    let both = g.concat(&[len, floor], 1)?;
    let safe_len = g.max_reduce(both, 1)?;
    let inv = g.pow(safe_len, -1.0)?;
    let cos = g.mul(dots, inv)?;
    let cos = match mode {
        NormalMode::Unoriented => g.abs(cos)?,
        NormalMode::Oriented => cos,
    };
    let one = g.constant(Tensor::scalar(1.0));
    let dist = g.sub(one, cos)?;
    Ok((g.mean(dist, None)?, clamped))
}
