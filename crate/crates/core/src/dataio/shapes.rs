use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{SurfelCloud, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Box,
    Cylinder,
    Torus,
    Cone,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Sphere,
        ShapeKind::Box,
        ShapeKind::Cylinder,
        ShapeKind::Torus,
        ShapeKind::Cone,
    ];
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(ShapeKind::Sphere),
            "box" => Ok(ShapeKind::Box),
            "cylinder" => Ok(ShapeKind::Cylinder),
            "torus" => Ok(ShapeKind::Torus),
            "cone" => Ok(ShapeKind::Cone),
            _ => Err(Error::invalid(format!(
                "unknown shape kind `{s}` (expected sphere, box, cylinder, torus or cone)"
            ))),
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Box => "box",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Torus => "torus",
            ShapeKind::Cone => "cone",
        })
    }
}

/// Analytic shape with its dimensions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Full edge lengths along x, y, z.
    Box { extents: Vec3 },
    Cylinder { radius: f64, height: f64 },
    Torus { major: f64, minor: f64 },
    Cone { radius: f64, height: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeSpec {
    pub shape: Shape,
    pub label: usize,
}

impl Shape {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Shape::Sphere { .. } => ShapeKind::Sphere,
            Shape::Box { .. } => ShapeKind::Box,
            Shape::Cylinder { .. } => ShapeKind::Cylinder,
            Shape::Torus { .. } => ShapeKind::Torus,
            Shape::Cone { .. } => ShapeKind::Cone,
        }
    }

    /// Build from a kind name and its dimensions in declaration order.
    pub fn from_parts(kind: &str, dims: &[f64]) -> Result<Self> {
        let kind: ShapeKind = kind.parse()?;
        let want = match kind {
            ShapeKind::Sphere => 1,
            ShapeKind::Box => 3,
            _ => 2,
        };
        if dims.len() != want {
            return Err(Error::invalid(format!("{kind} takes {want} dimensions, got {}", dims.len())));
        }
        let shape = match kind {
            ShapeKind::Sphere => Shape::Sphere { radius: dims[0] },
            ShapeKind::Box => Shape::Box {
                extents: [dims[0], dims[1], dims[2]],
            },
            ShapeKind::Cylinder => Shape::Cylinder {
                radius: dims[0],
                height: dims[1],
            },
            ShapeKind::Torus => Shape::Torus {
                major: dims[0],
                minor: dims[1],
            },
            ShapeKind::Cone => Shape::Cone {
                radius: dims[0],
                height: dims[1],
            },
        };
        shape.validate()?;
        Ok(shape)
    }

    fn dims(&self) -> Vec<f64> {
        match *self {
            Shape::Sphere { radius } => vec![radius],
            Shape::Box { extents } => extents.to_vec(),
            Shape::Cylinder { radius, height } | Shape::Cone { radius, height } => vec![radius, height],
            Shape::Torus { major, minor } => vec![major, minor],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims().iter().any(|&d| !(d.is_finite() && d > 0.0)) {
            return Err(Error::invalid(format!("{} dimensions must be positive: {:?}", self.kind(), self.dims())));
        }
        if let Shape::Torus { major, minor } = *self {
            if minor >= major {
                return Err(Error::invalid(format!("torus minor radius {minor} must be below major {major}")));
            }
        }
        Ok(())
    }

    /// Bounding-box center offset along z (cones are built apex-up from z=0).
    fn z_offset(&self) -> f64 {
        match *self {
            Shape::Cone { height, .. } => height / 2.0,
            _ => 0.0,
        }
    }

    /// Largest distance of a surface point from the centered origin.
    fn max_radius(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Box { extents } => 0.5 * (extents[0].powi(2) + extents[1].powi(2) + extents[2].powi(2)).sqrt(),
            Shape::Cylinder { radius, height } | Shape::Cone { radius, height } => {
                (radius * radius + height * height / 4.0).sqrt()
            }
            Shape::Torus { major, minor } => major + minor,
        }
    }

    /// One uniformly distributed surface point with its outward normal.
    fn sample(&self, rng: &mut impl Rng) -> (Vec3, Vec3) {
        match *self {
            Shape::Sphere { radius } => {
                let n = unit_vector(rng);
                ([n[0] * radius, n[1] * radius, n[2] * radius], n)
            }
            Shape::Box { extents } => {
                let [a, b, c] = extents;
                let areas = [b * c, b * c, a * c, a * c, a * b, a * b];
                let face = pick(&areas, rng);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = [0.0; 3];
                for (i, pi) in p.iter_mut().enumerate() {
                    *pi = if i == axis {
                        sign * extents[i] / 2.0
                    } else {
                        rng.gen_range(-0.5..0.5) * extents[i]
                    };
                }
                let mut n = [0.0; 3];
                n[axis] = sign;
                (p, n)
            }
            Shape::Cylinder { radius, height } => {
                let side = 2.0 * PI * radius * height;
                let cap = PI * radius * radius;
                match pick(&[side, cap, cap], rng) {
                    0 => {
                        let t = rng.gen_range(0.0..2.0 * PI);
                        let z = rng.gen_range(-0.5..0.5) * height;
                        let (s, c) = t.sin_cos();
                        ([radius * c, radius * s, z], [c, s, 0.0])
                    }
                    face => {
                        let sign = if face == 1 { 1.0 } else { -1.0 };
                        let [x, y] = disk(radius, rng);
                        ([x, y, sign * height / 2.0], [0.0, 0.0, sign])
                    }
                }
            }
            Shape::Torus { major, minor } => {
                let theta = rng.gen_range(0.0..2.0 * PI);
                // Area element is proportional to (R + r cos phi).
                let phi = loop {
                    let phi = rng.gen_range(0.0..2.0 * PI);
                    if rng.gen::<f64>() * (major + minor) <= major + minor * phi.cos() {
                        break phi;
                    }
                };
                let (st, ct) = theta.sin_cos();
                let (sp, cp) = phi.sin_cos();
                let ring = major + minor * cp;
                ([ring * ct, ring * st, minor * sp], [cp * ct, cp * st, sp])
            }
            Shape::Cone { radius, height } => {
                let slant = (radius * radius + height * height).sqrt();
                let lateral = PI * radius * slant;
                let base = PI * radius * radius;
                if pick(&[lateral, base], rng) == 0 {
                    let t = rng.gen::<f64>().sqrt();
                    let theta = rng.gen_range(0.0..2.0 * PI);
                    let (s, c) = theta.sin_cos();
                    let rho = radius * t;
                    let p = [rho * c, rho * s, height * (1.0 - t)];
                    let n = [height * c / slant, height * s / slant, radius / slant];
                    (p, n)
                } else {
                    let [x, y] = disk(radius, rng);
                    ([x, y, 0.0], [0.0, 0.0, -1.0])
                }
            }
        }
    }
}

fn unit_vector(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v: Vec3 = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let r2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if r2 > 1e-6 && r2 <= 1.0 {
            let r = r2.sqrt();
            return [v[0] / r, v[1] / r, v[2] / r];
        }
    }
}

fn disk(radius: f64, rng: &mut impl Rng) -> [f64; 2] {
    let r = radius * rng.gen::<f64>().sqrt();
    let (s, c) = rng.gen_range(0.0..2.0 * PI).sin_cos();
    [r * c, r * s]
}

fn pick(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Uniform surface sample with analytic normals, centered and scaled so
/// the farthest surface point lies at distance 1.
pub fn synth_shape(spec: &ShapeSpec, m: usize, seed: u64) -> Result<SurfelCloud> {
    synth_shape_with(spec, m, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn synth_shape_with(spec: &ShapeSpec, m: usize, rng: &mut impl Rng) -> Result<SurfelCloud> {
    spec.shape.validate()?;
    if m == 0 {
        return Err(Error::invalid("cannot sample zero surfels"));
    }
    let dz = spec.shape.z_offset();
    let inv = 1.0 / spec.shape.max_radius();
    let mut positions = Vec::with_capacity(m);
    let mut normals = Vec::with_capacity(m);
    for _ in 0..m {
        let (p, n) = spec.shape.sample(rng);
        let p = match spec.shape {
            Shape::Sphere { .. } => n,
            _ => [p[0] * inv, p[1] * inv, (p[2] - dz) * inv],
        };
        positions.push(p);
        normals.push(n);
    }
    SurfelCloud::from_vecs(positions, normals)
}
