use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::mesh::extension;
use crate::error::{Error, Result};
use crate::geometry::{NormalCloud, PointCloud, SurfelCloud, Vec3};

/// Points with normals when the file carries them.
#[derive(Clone, Debug, PartialEq)]
pub enum PointData {
    Points(PointCloud),
    Surfels(SurfelCloud),
}

impl PointData {
    pub fn positions(&self) -> &PointCloud {
        match self {
            PointData::Points(p) => p,
            PointData::Surfels(s) => s.positions(),
        }
    }
}

/// Scalar vertex property written after positions and normals.
pub struct ExtraProperty<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
}

fn fmt_num(out: &mut String, v: f64) {
    write!(out, "{v:.8e}").expect("write to string");
}

fn build(positions: Vec<Vec3>, normals: Option<Vec<Vec3>>) -> Result<PointData> {
    let cloud = PointCloud::new(positions)?;
    match normals {
        None => Ok(PointData::Points(cloud)),
        Some(n) => Ok(PointData::Surfels(SurfelCloud::new(cloud, NormalCloud::from_unnormalized(n)?)?)),
    }
}

fn parse_row(line: &str, at: &str, width: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::parse(at, format!("`{t}` is not a number")))
        })
        .collect::<Result<_>>()?;
    if vals.len() < width {
        return Err(Error::parse(at, format!("expected {width} values, found {}", vals.len())));
    }
    if let Some(v) = vals.iter().find(|v| !v.is_finite()) {
        return Err(Error::data(format!("{at}: non-finite value {v}")));
    }
    Ok(vals)
}

/// XYZ or XYZN text. Normals are read when every row has six values.
pub fn parse_xyz(text: &str, name: &str) -> Result<PointData> {
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    let mut width = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = format!("{name}:{}", i + 1);
        let vals = parse_row(line, &at, 3)?;
        let w = *width.get_or_insert(if vals.len() >= 6 { 6 } else { 3 });
        if vals.len() != w {
            return Err(Error::parse(&at, format!("expected {w} values, found {}", vals.len())));
        }
        positions.push([vals[0], vals[1], vals[2]]);
        if w == 6 {
            normals.push([vals[3], vals[4], vals[5]]);
        }
    }
    if positions.is_empty() {
        return Err(Error::parse(name, "no points in file"));
    }
    build(positions, (width == Some(6)).then_some(normals))
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
    has_list: bool,
}

/// ASCII PLY; only the vertex element is read, other elements are skipped.
pub fn parse_ply(text: &str, name: &str) -> Result<PointData> {
    let mut lines = text.lines().enumerate();
    let at = |i: usize| format!("{name}:{}", i + 1);
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(Error::parse(at(0), "missing `ply` magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    loop {
        let (i, line) = lines.next().ok_or_else(|| Error::parse(name, "header has no end_header"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => saw_format = true,
            ["format", other, ..] => {
                return Err(Error::parse(at(i), format!("unsupported PLY format `{other}` (ascii only)")))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", ename, count] => elements.push(PlyElement {
                name: ename.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::parse(at(i), format!("bad element count `{count}`")))?,
                properties: Vec::new(),
                has_list: false,
            }),
            ["property", "list", .., pname] | ["property", _, pname] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(at(i), "property before any element"))?;
                el.has_list |= toks[1] == "list";
                el.properties.push(pname.to_string());
            }
            _ => return Err(Error::parse(at(i), format!("unrecognized header line `{line}`"))),
        }
    }
    if !saw_format {
        return Err(Error::parse(name, "header lacks a format line"));
    }
    let mut result = None;
    for el in &elements {
        if el.name != "vertex" {
            for _ in 0..el.count {
                lines.next().ok_or_else(|| Error::parse(name, format!("file ends inside element `{}`", el.name)))?;
            }
            continue;
        }
        if el.has_list {
            return Err(Error::parse(name, "list properties on vertices are not supported"));
        }
        let col = |p: &str| el.properties.iter().position(|q| q == p);
        let xyz = ["x", "y", "z"].map(col);
        if xyz.iter().any(Option::is_none) {
            return Err(Error::parse(name, "vertex element lacks x, y, z properties"));
        }
        let nrm = ["nx", "ny", "nz"].map(col);
        let has_normals = nrm.iter().all(Option::is_some);
        let mut positions = Vec::with_capacity(el.count);
        let mut normals = Vec::with_capacity(el.count);
        for _ in 0..el.count {
            let (i, line) = lines.next().ok_or_else(|| Error::parse(name, "file ends inside the vertex list"))?;
            let vals = parse_row(line, &at(i), el.properties.len())?;
            let get = |c: [Option<usize>; 3]| c.map(|c| vals[c.expect("checked")]);
            positions.push(get(xyz));
            if has_normals {
                normals.push(get(nrm));
            }
        }
        if positions.is_empty() {
            return Err(Error::parse(name, "vertex element is empty"));
        }
        result = Some(build(positions, has_normals.then_some(normals))?);
    }
    result.ok_or_else(|| Error::parse(name, "no vertex element"))
}

pub fn read_point_file(path: &Path) -> Result<PointData> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    match extension(path).as_str() {
        "xyz" | "xyzn" | "txt" => parse_xyz(&text, &name),
        "ply" => parse_ply(&text, &name),
        other => Err(Error::invalid(format!("unsupported point format `{other}` for {name}"))),
    }
}

/// Read a file that must carry normals.
pub fn read_surfel_file(path: &Path) -> Result<SurfelCloud> {
    match read_point_file(path)? {
        PointData::Surfels(s) => Ok(s),
        PointData::Points(_) => Err(Error::data(format!(
            "{} has no normals (needs nx, ny, nz / six columns)",
            path.display()
        ))),
    }
}

pub fn format_xyz(positions: &[Vec3], normals: Option<&[Vec3]>) -> Result<String> {
    check_lengths(positions, normals, &[])?;
    let mut out = String::new();
    for (i, p) in positions.iter().enumerate() {
        let row = p.iter().chain(normals.map(|n| &n[i]).into_iter().flatten());
        for (j, &v) in row.enumerate() {
            if j > 0 {
                out.push(' ');
            }
            fmt_num(&mut out, v);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn format_ply(positions: &[Vec3], normals: Option<&[Vec3]>, extra: &[ExtraProperty]) -> Result<String> {
    check_lengths(positions, normals, extra)?;
    let mut out = String::from("ply\nformat ascii 1.0\n");
    writeln!(out, "element vertex {}", positions.len()).expect("write to string");
    let mut props = vec!["x", "y", "z"];
    if normals.is_some() {
        props.extend(["nx", "ny", "nz"]);
    }
    props.extend(extra.iter().map(|e| e.name));
    for p in props {
        writeln!(out, "property double {p}").expect("write to string");
    }
    out.push_str("end_header\n");
    for (i, p) in positions.iter().enumerate() {
        let mut vals: Vec<f64> = p.to_vec();
        if let Some(n) = normals {
            vals.extend(n[i]);
        }
        vals.extend(extra.iter().map(|e| e.values[i]));
        for (j, v) in vals.into_iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            fmt_num(&mut out, v);
        }
        out.push('\n');
    }
    Ok(out)
}

fn check_lengths(positions: &[Vec3], normals: Option<&[Vec3]>, extra: &[ExtraProperty]) -> Result<()> {
    let n = positions.len();
    if normals.is_some_and(|x| x.len() != n) || extra.iter().any(|e| e.values.len() != n) {
        return Err(Error::invalid("per-point arrays differ in length"));
    }
    for e in extra {
        if e.name.is_empty() || e.name.contains(char::is_whitespace) {
            return Err(Error::invalid(format!("bad property name `{}`", e.name)));
        }
    }
    Ok(())
}

/// Write by extension: `.xyz` (positions), `.xyzn` or `.ply`.
pub fn write_point_file(path: &Path, positions: &[Vec3], normals: Option<&[Vec3]>) -> Result<()> {
    let text = match extension(path).as_str() {
        "xyz" => format_xyz(positions, None)?,
        "xyzn" => {
            let n = normals.ok_or_else(|| Error::invalid("xyzn output needs normals"))?;
            format_xyz(positions, Some(n))?
        }
        "ply" => format_ply(positions, normals, &[])?,
        other => return Err(Error::invalid(format!("unsupported point format `{other}`"))),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_surfel_file(path: &Path, cloud: &SurfelCloud) -> Result<()> {
    write_point_file(path, cloud.positions().points(), Some(cloud.normals().normals()))
}

pub fn write_ply_with(path: &Path, positions: &[Vec3], normals: Option<&[Vec3]>, extra: &[ExtraProperty]) -> Result<()> {
    let text = format_ply(positions, normals, extra)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
