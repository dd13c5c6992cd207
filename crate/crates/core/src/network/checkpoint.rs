//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, a
//! UTF-8 manifest, then the payload of little-endian `f64` values. The
//! manifest holds `key = value` lines for the model config, stage and
//! metadata, plus one `tensor <group> <name> <byte offset> <shape>` line per
//! array, with offsets relative to the payload start.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::config::{HeadKind, ModelConfig};
use super::model::Stage;
use super::params::ParamStore;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MSURFCKP";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stage: Stage,
    pub params: ParamStore,
    /// Optimizer arrays, e.g. first and second moments.
    pub optimizer: ParamStore,
    /// Counters, rng state and any other scalar metadata.
    pub meta: BTreeMap<String, String>,
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "pretrain",
        Stage::Finetune(HeadKind::Linear) => "finetune-linear",
        Stage::Finetune(HeadKind::Nonlinear) => "finetune-nonlinear",
    }
}

fn parse_stage(s: &str) -> Option<Stage> {
    match s {
        "pretrain" => Some(Stage::Pretrain),
        "finetune-linear" => Some(Stage::Finetune(HeadKind::Linear)),
        "finetune-nonlinear" => Some(Stage::Finetune(HeadKind::Nonlinear)),
        _ => None,
    }
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '=') {
        return Err(Error::invalid(format!("{kind} `{s}` cannot be stored in a checkpoint")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(config: ModelConfig, stage: Stage, params: ParamStore) -> Self {
        Checkpoint {
            config,
            stage,
            params,
            optimizer: ParamStore::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::data(format!("checkpoint lacks `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::data(format!("checkpoint `{key}` = `{raw}` is not an integer")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = String::new();
        manifest.push_str(&format!("stage = {}\n", stage_name(self.stage)));
        for (k, v) in self.config.pairs() {
            manifest.push_str(&format!("model.{k} = {v}\n"));
        }
        for (k, v) in &self.meta {
            check_token("metadata key", k)?;
            if v.contains('\n') {
                return Err(Error::invalid(format!("metadata `{k}` spans lines")));
            }
            manifest.push_str(&format!("meta.{k} = {v}\n"));
        }
        let mut payload = Vec::new();
        for (group, store) in [("param", &self.params), ("optim", &self.optimizer)] {
            for (name, t) in store.iter() {
                check_token("tensor name", name)?;
                let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
                manifest.push_str(&format!("tensor {group} {name} {} [{}]\n", payload.len(), shape.join(",")));
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut out = Vec::with_capacity(20 + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::parse("checkpoint", msg);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if mlen > body.len() {
            return Err(bad("truncated manifest".into()));
        }
        let manifest = std::str::from_utf8(&body[..mlen]).map_err(|_| bad("manifest is not UTF-8".into()))?;
        let payload = &body[mlen..];

        let mut config = ModelConfig::default();
        let mut stage = None;
        let mut meta = BTreeMap::new();
        let mut params = ParamStore::new();
        let mut optimizer = ParamStore::new();
        let mut expected_offset = 0usize;
        for (lineno, line) in manifest.lines().enumerate() {
            let at = |msg: String| Error::parse(format!("checkpoint manifest line {}", lineno + 1), msg);
            if let Some(rest) = line.strip_prefix("tensor ") {
                let fields: Vec<&str> = rest.split(' ').collect();
                let [group, name, offset, shape] = fields[..] else {
                    return Err(at(format!("malformed tensor entry `{line}`")));
                };
                let offset: usize = offset.parse().map_err(|_| at(format!("bad offset `{offset}`")))?;
                if offset != expected_offset {
                    return Err(at(format!("offset {offset} does not follow previous array ({expected_offset})")));
                }
                let dims = shape
                    .strip_prefix('[')
                    .and_then(|s| s.strip_suffix(']'))
                    .ok_or_else(|| at(format!("bad shape `{shape}`")))?;
                let dims: Vec<usize> = if dims.is_empty() {
                    Vec::new()
                } else {
                    dims.split(',')
                        .map(|d| d.parse().map_err(|_| at(format!("bad shape `{shape}`"))))
                        .collect::<Result<_>>()?
                };
                let n: usize = dims.iter().product();
                let end = offset + 8 * n;
                if end > payload.len() {
                    return Err(at(format!("array `{name}` runs past the payload")));
                }
                let data = payload[offset..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                let t = Tensor::new(dims, data)?;
                let store = match group {
                    "param" => &mut params,
                    "optim" => &mut optimizer,
                    _ => return Err(at(format!("unknown tensor group `{group}`"))),
                };
                store.insert(name, t).map_err(|e| at(e.to_string()))?;
                expected_offset = end;
                continue;
            }
            let (key, value) = line
                .split_once(" = ")
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            if key == "stage" {
                stage = Some(parse_stage(value).ok_or_else(|| at(format!("unknown stage `{value}`")))?);
            } else if let Some(k) = key.strip_prefix("model.") {
                config.apply(k, value).map_err(|e| at(e.to_string()))?;
            } else if let Some(k) = key.strip_prefix("meta.") {
                meta.insert(k.to_string(), value.to_string());
            } else {
                return Err(at(format!("unknown key `{key}`")));
            }
        }
        if expected_offset != payload.len() {
            return Err(bad(format!(
                "{} trailing payload bytes",
                payload.len() - expected_offset
            )));
        }
        let stage = stage.ok_or_else(|| bad("missing stage".into()))?;
        config.validate()?;
        Ok(Checkpoint {
            config,
            stage,
            params,
            optimizer,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
