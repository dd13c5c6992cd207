//! Point-cloud primitives: farthest point sampling, KNN patch grouping and
//! local-PCA normal estimation.
//!
//! All selections use squared Euclidean distance and break ties by the
//! lower source index. Neighbor search is an exhaustive scan.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn sq_dist(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

pub fn normalize(a: Vec3) -> Option<Vec3> {
    let n = norm(a);
    (n > 0.0 && n.is_finite()).then(|| scale(a, 1.0 / n))
}

/// Unoriented angle between two directions, in degrees.
pub fn unoriented_angle_deg(a: Vec3, b: Vec3) -> f64 {
    let c = (dot(a, b) / (norm(a) * norm(b))).abs().min(1.0);
    c.acos().to_degrees()
}

fn check_finite(points: &[Vec3], what: &str) -> Result<()> {
    match points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
        Some(i) => Err(Error::data(format!("{what} {i} has a non-finite coordinate"))),
        None => Ok(()),
    }
}

/// M ≥ 1 points with finite coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::data("point cloud has no points"));
        }
        check_finite(&points, "point")?;
        Ok(PointCloud { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }
}

/// Tolerance on the norm of every stored normal.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Per-point unit normals.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalCloud {
    normals: Vec<Vec3>,
}

impl NormalCloud {
    pub fn new(normals: Vec<Vec3>) -> Result<Self> {
        check_finite(&normals, "normal")?;
        if let Some(i) = normals
            .iter()
            .position(|n| (norm(*n) - 1.0).abs() > UNIT_TOLERANCE)
        {
            return Err(Error::data(format!(
                "normal {i} has norm {}, expected 1",
                norm(normals[i])
            )));
        }
        Ok(NormalCloud { normals })
    }

    /// Normalizes every row first; zero rows are a data error.
    pub fn from_unnormalized(normals: Vec<Vec3>) -> Result<Self> {
        let unit = normals
            .iter()
            .enumerate()
            .map(|(i, &n)| normalize(n).ok_or_else(|| Error::data(format!("normal {i} has zero length"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(unit)
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }
}

/// Positions paired with unoriented unit normals.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfelCloud {
    positions: PointCloud,
    normals: NormalCloud,
}

impl SurfelCloud {
    pub fn new(positions: PointCloud, normals: NormalCloud) -> Result<Self> {
        if positions.len() != normals.len() {
            return Err(Error::data(format!(
                "{} positions but {} normals",
                positions.len(),
                normals.len()
            )));
        }
        Ok(SurfelCloud { positions, normals })
    }

    pub fn from_vecs(positions: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        Self::new(PointCloud::new(positions)?, NormalCloud::new(normals)?)
    }

    pub fn positions(&self) -> &PointCloud {
        &self.positions
    }

    pub fn normals(&self) -> &NormalCloud {
        &self.normals
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpsResult {
    pub centers: Vec<Vec3>,
    pub indices: Vec<usize>,
}

/// Farthest point sampling with a seeded uniformly random first point.
pub fn farthest_point_sample(cloud: &PointCloud, n: usize, seed: u64) -> Result<FpsResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..cloud.len());
    farthest_point_sample_from(cloud, n, first)
}

/// Farthest point sampling starting from a given index.
pub fn farthest_point_sample_from(cloud: &PointCloud, n: usize, first: usize) -> Result<FpsResult> {
    let points = cloud.points();
    let m = points.len();
    if n < 1 || n > m {
        return Err(Error::invalid(format!("cannot sample {n} centers from {m} points")));
    }
    if first >= m {
        return Err(Error::invalid(format!("start index {first} out of range for {m} points")));
    }
    let mut selected = vec![false; m];
    let mut min_dist = vec![f64::INFINITY; m];
    let mut indices = Vec::with_capacity(n);
    let mut current = first;
    for _ in 0..n {
        indices.push(current);
        selected[current] = true;
        let c = points[current];
        let mut best: Option<usize> = None;
        for (i, p) in points.iter().enumerate() {
            if selected[i] {
                continue;
            }
            let d = sq_dist(*p, c);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if best.map_or(true, |b| min_dist[i] > min_dist[b]) {
                best = Some(i);
            }
        }
        match best {
            Some(b) => current = b,
            None => break,
        }
    }
    let centers = indices.iter().map(|&i| points[i]).collect();
    Ok(FpsResult { centers, indices })
}

/// N patches of K neighbors each, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrouping {
    centers: Vec<Vec3>,
    indices: Vec<usize>,
    patches: Vec<Vec3>,
    k: usize,
    source_len: usize,
}

impl PatchGrouping {
    pub fn num_patches(&self) -> usize {
        self.centers.len()
    }

    pub fn patch_size(&self) -> usize {
        self.k
    }

    /// Number of points in the cloud the grouping indexes into.
    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn centers(&self) -> &[Vec3] {
        &self.centers
    }

    /// Flat N·K source indices.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn patch_indices(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// Flat N·K center-normalized coordinates.
    pub fn patches(&self) -> &[Vec3] {
        &self.patches
    }

    pub fn patch(&self, i: usize) -> &[Vec3] {
        &self.patches[i * self.k..(i + 1) * self.k]
    }
}

/// Indices of the `k` points nearest to `query`, ordered by distance then
/// index.
pub fn nearest_indices(points: &[Vec3], query: Vec3, k: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (sq_dist(*p, query), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < order.len() {
        order.select_nth_unstable_by(k, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    order.into_iter().map(|(_, i)| i).collect()
}

pub fn knn_group(cloud: &PointCloud, centers: &[Vec3], k: usize) -> Result<PatchGrouping> {
    let points = cloud.points();
    if k < 1 || k > points.len() {
        return Err(Error::invalid(format!(
            "patch size {k} must be in [1, {}]",
            points.len()
        )));
    }
    check_finite(centers, "center")?;
    let mut indices = Vec::with_capacity(centers.len() * k);
    let mut patches = Vec::with_capacity(centers.len() * k);
    for &c in centers {
        for i in nearest_indices(points, c, k) {
            indices.push(i);
            patches.push(sub(points[i], c));
        }
    }
    Ok(PatchGrouping {
        centers: centers.to_vec(),
        indices,
        patches,
        k,
        source_len: points.len(),
    })
}

/// Gather per-point values (e.g. normals) with a grouping's indices,
/// without center normalization.
pub fn group_by_indices(values: &[Vec3], grouping: &PatchGrouping) -> Result<Vec<Vec3>> {
    if values.len() != grouping.source_len {
        return Err(Error::invalid(format!(
            "grouping indexes {} points but {} values were given",
            grouping.source_len,
            values.len()
        )));
    }
    Ok(grouping.indices.iter().map(|&i| values[i]).collect())
}

/// Normal returned for neighborhoods whose covariance has rank below two.
pub const FALLBACK_NORMAL: Vec3 = [0.0, 0.0, 1.0];

/// Relative eigenvalue threshold below which a neighborhood counts as
/// rank deficient.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct NormalEstimate {
    pub normals: NormalCloud,
    /// Points whose neighborhood was degenerate and got [`FALLBACK_NORMAL`].
    pub degenerate: usize,
}

/// Tangent-plane normals from the `k` nearest neighbors of every point.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<NormalEstimate> {
    let points = cloud.points();
    if k < 3 {
        return Err(Error::invalid(format!("normal estimation needs k >= 3, got {k}")));
    }
    if points.len() < k {
        return Err(Error::invalid(format!(
            "normal estimation with k = {k} needs at least {k} points, got {}",
            points.len()
        )));
    }
    let mut degenerate = 0;
    let normals = points
        .iter()
        .map(|&p| {
            let nbrs = nearest_indices(points, p, k);
            match plane_normal(nbrs.iter().map(|&i| points[i])) {
                Some(n) => n,
                None => {
                    degenerate += 1;
                    FALLBACK_NORMAL
                }
            }
        })
        .collect();
    Ok(NormalEstimate {
        normals: NormalCloud::new(normals)?,
        degenerate,
    })
}

/// Smallest principal direction of a neighborhood, or `None` when its
/// covariance has rank below two.
fn plane_normal(neighbors: impl Iterator<Item = Vec3> + Clone) -> Option<Vec3> {
    let count = neighbors.clone().count() as f64;
    let mut mean = [0.0; 3];
    for q in neighbors.clone() {
        mean = add(mean, q);
    }
    mean = scale(mean, 1.0 / count);
    let mut cov = Matrix3::zeros();
    for q in neighbors {
        let d = sub(q, mean);
        for r in 0..3 {
            for c in 0..3 {
                cov[(r, c)] += d[r] * d[c];
            }
        }
    }
    let eig = SymmetricEigen::new(cov / count);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (smallest, middle, largest) = (order[0], order[1], order[2]);
    let top = eig.eigenvalues[largest];
    if top <= 0.0 || eig.eigenvalues[middle] <= RANK_TOLERANCE * top {
        return None;
    }
    let v = eig.eigenvectors.column(smallest);
    normalize([v[0], v[1], v[2]])
}
