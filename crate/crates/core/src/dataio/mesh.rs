use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{self, SurfelCloud, Vec3};

/// Triangle soup with validated indices.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::data("mesh has non-finite vertex coordinates"));
        }
        for (i, f) in faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&v| v >= vertices.len()) {
                return Err(Error::invalid(format!(
                    "face {i} references vertex {bad}, mesh has {}",
                    vertices.len()
                )));
            }
        }
        Ok(TriangleMesh { vertices, faces })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn triangle(&self, face: usize) -> [Vec3; 3] {
        self.faces[face].map(|i| self.vertices[i])
    }

    /// Unnormalized face normal (twice the area in length).
    fn face_cross(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.triangle(face);
        geometry::cross(geometry::sub(b, a), geometry::sub(c, a))
    }

    pub fn face_area(&self, face: usize) -> f64 {
        0.5 * geometry::norm(self.face_cross(face))
    }

    /// Faces too small to carry a normal; these are never sampled.
    pub fn degenerate_faces(&self) -> usize {
        (0..self.faces.len())
            .filter(|&f| geometry::normalize(self.face_cross(f)).is_none())
            .count()
    }
}

/// Surfels drawn from the mesh surface, faces chosen proportionally to area.
pub fn sample_mesh_surfels(mesh: &TriangleMesh, m: usize, seed: u64) -> Result<SurfelCloud> {
    sample_mesh_surfels_with(mesh, m, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_mesh_surfels_with(mesh: &TriangleMesh, m: usize, rng: &mut impl Rng) -> Result<SurfelCloud> {
    if m == 0 {
        return Err(Error::invalid("cannot sample zero surfels"));
    }
    let mut valid = Vec::new();
    let mut cumulative = Vec::new();
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        let cross = mesh.face_cross(f);
        if let Some(n) = geometry::normalize(cross) {
            total += 0.5 * geometry::norm(cross);
            valid.push((f, n));
            cumulative.push(total);
        }
    }
    if valid.is_empty() {
        return Err(Error::data("mesh has no face with nonzero area"));
    }
    let mut positions = Vec::with_capacity(m);
    let mut normals = Vec::with_capacity(m);
    for _ in 0..m {
        let u = rng.gen::<f64>() * total;
        let slot = cumulative.partition_point(|&c| c <= u).min(valid.len() - 1);
        let (face, normal) = valid[slot];
        let [a, b, c] = mesh.triangle(face);
        let (mut r1, mut r2): (f64, f64) = (rng.gen(), rng.gen());
        if r1 + r2 > 1.0 {
            r1 = 1.0 - r1;
            r2 = 1.0 - r2;
        }
        let p = geometry::add(
            a,
            geometry::add(geometry::scale(geometry::sub(b, a), r1), geometry::scale(geometry::sub(c, a), r2)),
        );
        positions.push(p);
        normals.push(normal);
    }
    SurfelCloud::from_vecs(positions, normals)
}

fn parse_f64(tok: &str, loc: &dyn Fn() -> String) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::parse(loc(), format!("`{tok}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::data(format!("{}: non-finite coordinate `{tok}`", loc())));
    }
    Ok(v)
}

fn fan(poly: &[usize], faces: &mut Vec<[usize; 3]>) {
    for i in 1..poly.len() - 1 {
        faces.push([poly[0], poly[i], poly[i + 1]]);
    }
}

/// Content lines with their 1-based numbers, comments and blanks removed.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

pub fn parse_off(text: &str, name: &str) -> Result<TriangleMesh> {
    let mut lines = content_lines(text);
    let at = |line: usize| format!("{name}:{line}");
    let (hline, header) = lines.next().ok_or_else(|| Error::parse(name, "empty OFF file"))?;
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| Error::parse(at(hline), "missing OFF header"))?
        .trim();
    let counts_line = if rest.is_empty() {
        lines.next().ok_or_else(|| Error::parse(name, "missing OFF counts"))?
    } else {
        (hline, rest)
    };
    let counts: Vec<usize> = counts_line
        .1
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(at(counts_line.0), format!("bad count `{t}`"))))
        .collect::<Result<_>>()?;
    if counts.len() < 2 {
        return Err(Error::parse(at(counts_line.0), "expected vertex and face counts"));
    }
    let (nv, nf) = (counts[0], counts[1]);
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines.next().ok_or_else(|| Error::parse(name, "file ends inside the vertex list"))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(Error::parse(at(ln), "vertex needs three coordinates"));
        }
        let loc = || at(ln);
        vertices.push([parse_f64(toks[0], &loc)?, parse_f64(toks[1], &loc)?, parse_f64(toks[2], &loc)?]);
    }
    let mut faces = Vec::new();
    for face in 0..nf {
        let (ln, l) = lines.next().ok_or_else(|| Error::parse(name, "file ends inside the face list"))?;
        let nums: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::parse(at(ln), format!("bad index `{t}`"))))
            .collect::<Result<_>>()?;
        let n = *nums.first().ok_or_else(|| Error::parse(at(ln), "empty face"))?;
        if n < 3 || nums.len() < n + 1 {
            return Err(Error::parse(at(ln), format!("face {face} lists {n} vertices")));
        }
        let poly = &nums[1..=n];
        if let Some(&bad) = poly.iter().find(|&&i| i >= nv) {
            return Err(Error::parse(at(ln), format!("face {face} index {bad} out of range (0..{nv})")));
        }
        fan(poly, &mut faces);
    }
    TriangleMesh::new(vertices, faces)
}

pub fn parse_obj(text: &str, name: &str) -> Result<TriangleMesh> {
    let at = |line: usize| format!("{name}:{line}");
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut face_no = 0usize;
    for (ln, l) in content_lines(text) {
        let mut toks = l.split_whitespace();
        match toks.next() {
            Some("v") => {
                let loc = || at(ln);
                let c: Vec<f64> = toks.take(3).map(|t| parse_f64(t, &loc)).collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(Error::parse(at(ln), "vertex needs three coordinates"));
                }
                vertices.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                let mut poly = Vec::new();
                for t in toks {
                    let idx = t.split('/').next().unwrap_or("");
                    let raw: i64 = idx
                        .parse()
                        .map_err(|_| Error::parse(at(ln), format!("bad index `{t}` in face {face_no}")))?;
                    let nv = vertices.len() as i64;
                    let resolved = if raw > 0 { raw - 1 } else { nv + raw };
                    if raw == 0 || resolved < 0 || resolved >= nv {
                        return Err(Error::parse(
                            at(ln),
                            format!("face {face_no} index {raw} out of range (mesh has {nv} vertices so far)"),
                        ));
                    }
                    poly.push(resolved as usize);
                }
                if poly.len() < 3 {
                    return Err(Error::parse(at(ln), format!("face {face_no} has fewer than three vertices")));
                }
                fan(&poly, &mut faces);
                face_no += 1;
            }
            _ => {}
        }
    }
    if vertices.is_empty() {
        return Err(Error::parse(name, "no vertices"));
    }
    TriangleMesh::new(vertices, faces)
}

/// Read an OFF or OBJ mesh, chosen by extension.
pub fn read_mesh_file(path: &Path) -> Result<TriangleMesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    match extension(path).as_str() {
        "off" => parse_off(&text, &name),
        "obj" => parse_obj(&text, &name),
        other => Err(Error::invalid(format!("unsupported mesh format `{other}` for {name}"))),
    }
}

pub(crate) fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}
