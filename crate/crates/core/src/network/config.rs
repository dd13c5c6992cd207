use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Classification head variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Linear,
    Nonlinear,
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadKind::Linear),
            "nonlinear" => Ok(HeadKind::Nonlinear),
            _ => Err(Error::invalid(format!("unknown head kind `{s}` (expected linear or nonlinear)"))),
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Linear => "linear",
            HeadKind::Nonlinear => "nonlinear",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_count: usize,
    pub patch_size: usize,
    /// Widths of the two pointwise layers of the token embedding.
    pub embed_hidden: [usize; 2],
    pub pe_hidden: usize,
    /// Whether the reconstruction head emits normals next to positions.
    pub predict_normals: bool,
    pub num_classes: usize,
    pub cls_hidden: [usize; 2],
    pub cls_dropout: f64,
}

impl ModelConfig {
    /// Full-size model.
    pub fn paper() -> Self {
        ModelConfig {
            embed_dim: 384,
            encoder_depth: 12,
            decoder_depth: 4,
            heads: 6,
            mlp_ratio: 4,
            patch_count: 64,
            patch_size: 32,
            embed_hidden: [128, 256],
            pe_hidden: 128,
            predict_normals: true,
            num_classes: 40,
            cls_hidden: [512, 256],
            cls_dropout: 0.1,
        }
    }

    /// Reduced model that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            embed_dim: 96,
            encoder_depth: 6,
            decoder_depth: 2,
            heads: 6,
            patch_count: 32,
            patch_size: 16,
            num_classes: 5,
            ..Self::paper()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Scalars per predicted point: position, plus normal when enabled.
    pub fn surfel_width(&self) -> usize {
        if self.predict_normals {
            6
        } else {
            3
        }
    }

    /// Whether encoder parameters of `other` fit this config.
    pub fn encoder_matches(&self, other: &ModelConfig) -> bool {
        self.embed_dim == other.embed_dim
            && self.encoder_depth == other.encoder_depth
            && self.heads == other.heads
            && self.mlp_ratio == other.mlp_ratio
            && self.patch_count == other.patch_count
            && self.patch_size == other.patch_size
            && self.embed_hidden == other.embed_hidden
            && self.pe_hidden == other.pe_hidden
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("patch_count", self.patch_count),
            ("patch_size", self.patch_size),
            ("embed_hidden", self.embed_hidden[0].min(self.embed_hidden[1])),
            ("pe_hidden", self.pe_hidden),
            ("num_classes", self.num_classes),
            ("cls_hidden", self.cls_hidden[0].min(self.cls_hidden[1])),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("model.{name} must be positive")));
            }
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.cls_dropout) {
            return Err(Error::invalid(format!("cls_dropout {} outside [0, 1)", self.cls_dropout)));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("cannot parse `{value}` for model.{key}")))
}

fn parse_pair(key: &str, value: &str) -> Result<[usize; 2]> {
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::invalid(format!("model.{key} expects two comma-separated widths, got `{value}`")));
    }
    Ok([parse_value(key, parts[0])?, parse_value(key, parts[1])?])
}

impl ModelConfig {
    /// Set one field from its textual key (without the `model.` prefix).
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "encoder_depth" => self.encoder_depth = parse_value(key, value)?,
            "decoder_depth" => self.decoder_depth = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse_value(key, value)?,
            "patch_count" => self.patch_count = parse_value(key, value)?,
            "patch_size" => self.patch_size = parse_value(key, value)?,
            "embed_hidden" => self.embed_hidden = parse_pair(key, value)?,
            "pe_hidden" => self.pe_hidden = parse_value(key, value)?,
            "predict_normals" => self.predict_normals = parse_value(key, value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "cls_hidden" => self.cls_hidden = parse_pair(key, value)?,
            "cls_dropout" => self.cls_dropout = parse_value(key, value)?,
            _ => return Err(Error::invalid(format!("unknown key `model.{key}`"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)` text, round-tripping through [`apply`](Self::apply).
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("embed_dim", self.embed_dim.to_string()),
            ("encoder_depth", self.encoder_depth.to_string()),
            ("decoder_depth", self.decoder_depth.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("patch_count", self.patch_count.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("embed_hidden", format!("{},{}", self.embed_hidden[0], self.embed_hidden[1])),
            ("pe_hidden", self.pe_hidden.to_string()),
            ("predict_normals", self.predict_normals.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("cls_hidden", format!("{},{}", self.cls_hidden[0], self.cls_hidden[1])),
            ("cls_dropout", format!("{:?}", self.cls_dropout)),
        ]
    }
}
