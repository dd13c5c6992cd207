//! Surfel sources, augmentation, file formats and dataset assembly.

mod formats;
mod mesh;
mod shapes;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use formats::{
    format_ply, format_xyz, parse_ply, parse_xyz, read_point_file, read_surfel_file, write_ply_with, write_point_file,
    write_surfel_file, ExtraProperty, PointData,
};
pub use mesh::{parse_obj, parse_off, read_mesh_file, sample_mesh_surfels, sample_mesh_surfels_with, TriangleMesh};
pub use shapes::{synth_shape, synth_shape_with, Shape, ShapeKind, ShapeSpec};

use crate::error::{Error, Result};
use crate::geometry::{estimate_normals, SurfelCloud, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub scale_range: [f64; 2],
    /// Half-width of the per-axis uniform translation.
    pub translate_range: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_range: [0.8, 1.25],
            translate_range: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid(format!("scale range [{lo}, {hi}] must satisfy 0 < lo <= hi")));
        }
        if !(self.translate_range >= 0.0 && self.translate_range.is_finite()) {
            return Err(Error::invalid(format!("translate range {} must be non-negative", self.translate_range)));
        }
        Ok(())
    }

    /// Draw one scale factor and one translation.
    pub fn draw(&self, rng: &mut impl Rng) -> (f64, Vec3) {
        let [lo, hi] = self.scale_range;
        let s = if lo == hi { lo } else { rng.gen_range(lo..hi) };
        let t = self.translate_range;
        let mut shift = [0.0; 3];
        if t > 0.0 {
            for v in &mut shift {
                *v = rng.gen_range(-t..t);
            }
        }
        (s, shift)
    }
}

/// Isotropic scaling then translation of positions; normals unchanged.
pub fn apply_affine(cloud: &SurfelCloud, scale: f64, shift: Vec3) -> Result<SurfelCloud> {
    let positions = cloud
        .positions()
        .points()
        .iter()
        .map(|p| [p[0] * scale + shift[0], p[1] * scale + shift[1], p[2] * scale + shift[2]])
        .collect();
    SurfelCloud::from_vecs(positions, cloud.normals().normals().to_vec())
}

pub fn augment(cloud: &SurfelCloud, cfg: &AugmentConfig, seed: u64) -> Result<SurfelCloud> {
    augment_with(cloud, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn augment_with(cloud: &SurfelCloud, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<SurfelCloud> {
    cfg.validate()?;
    let (s, t) = cfg.draw(rng);
    apply_affine(cloud, s, t)
}

/// Where dataset normals come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalSource {
    GroundTruth,
    Estimated,
}

impl FromStr for NormalSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground_truth" => Ok(NormalSource::GroundTruth),
            "estimated" => Ok(NormalSource::Estimated),
            _ => Err(Error::invalid(format!(
                "unknown normal source `{s}` (expected ground_truth or estimated)"
            ))),
        }
    }
}

impl fmt::Display for NormalSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormalSource::GroundTruth => "ground_truth",
            NormalSource::Estimated => "estimated",
        })
    }
}

/// Dataset manifest (`data.*` configuration keys).
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub classes: Vec<ShapeKind>,
    pub samples_per_class: usize,
    pub points: usize,
    pub split: f64,
    pub seed: u64,
    pub normal_source: NormalSource,
    pub normal_k: usize,
    /// When set, classes are the sorted subdirectories holding OFF/OBJ meshes.
    pub mesh_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: ShapeKind::ALL.to_vec(),
            samples_per_class: 200,
            points: 1024,
            split: 0.8,
            seed: 0,
            normal_source: NormalSource::GroundTruth,
            normal_k: 16,
            mesh_dir: None,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("cannot parse `{value}` for data.{key}")))
}

impl DataConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "classes" => {
                self.classes = value
                    .split(',')
                    .map(|s| s.trim())
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "samples_per_class" => self.samples_per_class = parse_num(key, value)?,
            "points" => self.points = parse_num(key, value)?,
            "split" => self.split = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "normal_source" => self.normal_source = value.trim().parse()?,
            "normal_k" => self.normal_k = parse_num(key, value)?,
            "mesh_dir" => {
                let v = value.trim();
                self.mesh_dir = (!v.is_empty()).then(|| PathBuf::from(v));
            }
            _ => return Err(Error::invalid(format!("unknown key `data.{key}`"))),
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let classes: Vec<String> = self.classes.iter().map(ToString::to_string).collect();
        vec![
            ("classes", classes.join(",")),
            ("samples_per_class", self.samples_per_class.to_string()),
            ("points", self.points.to_string()),
            ("split", format!("{:?}", self.split)),
            ("seed", self.seed.to_string()),
            ("normal_source", self.normal_source.to_string()),
            ("normal_k", self.normal_k.to_string()),
            (
                "mesh_dir",
                self.mesh_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.mesh_dir.is_none() && self.classes.is_empty() {
            return Err(Error::invalid("data.classes is empty"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::data("data.samples_per_class must be positive"));
        }
        if self.points == 0 {
            return Err(Error::invalid("data.points must be positive"));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::invalid(format!("data.split {} outside (0, 1)", self.split)));
        }
        if self.normal_k < 3 {
            return Err(Error::invalid("data.normal_k must be at least 3"));
        }
        Ok(())
    }

    /// Train samples per class.
    pub fn train_per_class(&self) -> usize {
        (self.split * self.samples_per_class as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub surfels: SurfelCloud,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Independent rng for sample `index` of class `class`.
fn sample_rng(seed: u64, class: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class as u64) << 32) | index as u64);
    rng
}

/// Per-sample random dimensions for a shape class.
pub fn random_shape(kind: ShapeKind, rng: &mut impl Rng) -> Shape {
    match kind {
        ShapeKind::Sphere => Shape::Sphere { radius: 1.0 },
        ShapeKind::Box => Shape::Box {
            extents: [rng.gen_range(0.4..1.6), rng.gen_range(0.4..1.6), rng.gen_range(0.4..1.6)],
        },
        ShapeKind::Cylinder => Shape::Cylinder {
            radius: rng.gen_range(0.3..0.8),
            height: rng.gen_range(0.8..2.0),
        },
        ShapeKind::Torus => Shape::Torus {
            major: 1.0,
            minor: rng.gen_range(0.15..0.5),
        },
        ShapeKind::Cone => Shape::Cone {
            radius: rng.gen_range(0.4..1.0),
            height: rng.gen_range(0.8..2.0),
        },
    }
}

/// Center on the bounding-box midpoint and scale the farthest point to 1.
fn normalize_cloud(cloud: SurfelCloud) -> Result<SurfelCloud> {
    let pts = cloud.positions().points();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in pts {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let c = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    let r = pts
        .iter()
        .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt())
        .fold(0.0, f64::max);
    let s = if r > 0.0 { 1.0 / r } else { 1.0 };
    apply_affine(&cloud, s, [-c[0] * s, -c[1] * s, -c[2] * s])
}

fn mesh_classes(dir: &Path) -> Result<Vec<(String, Vec<PathBuf>)>> {
    let read = |d: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(d)
            .map_err(|e| Error::io(d, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        v.sort();
        Ok(v)
    };
    let mut classes = Vec::new();
    for sub in read(dir)?.into_iter().filter(|p| p.is_dir()) {
        let files: Vec<PathBuf> = read(&sub)?
            .into_iter()
            .filter(|p| matches!(mesh::extension(p).as_str(), "off" | "obj"))
            .collect();
        let name = sub.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if files.is_empty() {
            return Err(Error::data(format!("class `{name}` in {} has no OFF/OBJ meshes", dir.display())));
        }
        classes.push((name, files));
    }
    if classes.is_empty() {
        return Err(Error::data(format!("{} has no class subdirectories", dir.display())));
    }
    Ok(classes)
}

/// Deterministic dataset: per class, the first `round(split·n)` samples
/// train and the rest test.
pub fn build_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n_train = cfg.train_per_class();
    if n_train == 0 || n_train == cfg.samples_per_class {
        return Err(Error::data(format!(
            "split {} of {} samples leaves an empty train or test set",
            cfg.split, cfg.samples_per_class
        )));
    }
    let mut class_names = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut push = |label: usize, i: usize, surfels: SurfelCloud| -> Result<()> {
        let surfels = match cfg.normal_source {
            NormalSource::GroundTruth => surfels,
            NormalSource::Estimated => {
                let est = estimate_normals(surfels.positions(), cfg.normal_k)?;
                SurfelCloud::new(surfels.positions().clone(), est.normals)?
            }
        };
        let s = Sample { surfels, label };
        if i < n_train {
            train.push(s);
        } else {
            test.push(s);
        }
        Ok(())
    };
    match &cfg.mesh_dir {
        Some(dir) => {
            let meshes = mesh_classes(dir)?;
            for (label, (name, files)) in meshes.iter().enumerate() {
                class_names.push(name.clone());
                let loaded: Vec<TriangleMesh> = files.iter().map(|f| read_mesh_file(f)).collect::<Result<_>>()?;
                for i in 0..cfg.samples_per_class {
                    let mut rng = sample_rng(cfg.seed, label, i);
                    let cloud = sample_mesh_surfels_with(&loaded[i % loaded.len()], cfg.points, &mut rng)?;
                    push(label, i, normalize_cloud(cloud)?)?;
                }
            }
        }
        None => {
            for (label, &kind) in cfg.classes.iter().enumerate() {
                class_names.push(kind.to_string());
                for i in 0..cfg.samples_per_class {
                    let mut rng = sample_rng(cfg.seed, label, i);
                    let spec = ShapeSpec {
                        shape: random_shape(kind, &mut rng),
                        label,
                    };
                    push(label, i, synth_shape_with(&spec, cfg.points, &mut rng)?)?;
                }
            }
        }
    }
    Ok(Dataset {
        class_names,
        train,
        test,
    })
}

#[cfg(test)]
mod tests;
