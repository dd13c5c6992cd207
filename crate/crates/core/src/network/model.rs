use rand::Rng;

use super::config::{HeadKind, ModelConfig};
use super::params::{Binder, Init, ParamSpec, ParamStore};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const WEIGHT_STD: f64 = 0.02;

/// Which positional embedding table to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeKind {
    Encoder,
    Decoder,
}

impl PeKind {
    fn prefix(self) -> &'static str {
        match self {
            PeKind::Encoder => "pe_enc",
            PeKind::Decoder => "pe_dec",
        }
    }
}

/// Training stage, selecting which parameter groups exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune(HeadKind),
}

/// Parameter-name prefixes shared by pretraining and fine-tuning.
pub const ENCODER_PREFIXES: [&str; 4] = ["embed.", "pe_enc.", "encoder.", "encoder_norm."];
pub const CLASSIFIER_PREFIX: &str = "cls.";

fn linear_specs(out: &mut Vec<ParamSpec>, name: &str, fan_in: usize, fan_out: usize, init: Init, bias: bool) {
    out.push(ParamSpec::new(format!("{name}.w"), [fan_in, fan_out], init));
    if bias {
        out.push(ParamSpec::new(format!("{name}.b"), [fan_out], Init::Zeros));
    }
}

fn norm_specs(out: &mut Vec<ParamSpec>, name: &str, d: usize) {
    out.push(ParamSpec::new(format!("{name}.g"), [d], Init::Ones));
    out.push(ParamSpec::new(format!("{name}.b"), [d], Init::Zeros));
}

fn block_specs(out: &mut Vec<ParamSpec>, name: &str, cfg: &ModelConfig) {
    let d = cfg.embed_dim;
    let hidden = d * cfg.mlp_ratio;
    let t = Init::TruncNormal(WEIGHT_STD);
    norm_specs(out, &format!("{name}.norm1"), d);
    linear_specs(out, &format!("{name}.attn.qkv"), d, 3 * d, t, false);
    linear_specs(out, &format!("{name}.attn.proj"), d, d, t, true);
    norm_specs(out, &format!("{name}.norm2"), d);
    linear_specs(out, &format!("{name}.mlp.fc1"), d, hidden, t, true);
    linear_specs(out, &format!("{name}.mlp.fc2"), hidden, d, t, true);
}

fn pe_specs(out: &mut Vec<ParamSpec>, kind: PeKind, cfg: &ModelConfig) {
    let p = kind.prefix();
    linear_specs(out, &format!("{p}.fc1"), 3, cfg.pe_hidden, Init::FanIn, true);
    linear_specs(out, &format!("{p}.fc2"), cfg.pe_hidden, cfg.embed_dim, Init::FanIn, true);
}

/// Every parameter array the stage owns, in a fixed order.
pub fn param_specs(cfg: &ModelConfig, stage: Stage) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let d = cfg.embed_dim;
    let [h1, h2] = cfg.embed_hidden;
    linear_specs(&mut out, "embed.fc1", 3, h1, Init::FanIn, true);
    linear_specs(&mut out, "embed.fc2", h1, h2, Init::FanIn, true);
    linear_specs(&mut out, "embed.fc3", h2, d, Init::FanIn, true);
    pe_specs(&mut out, PeKind::Encoder, cfg);
    for i in 0..cfg.encoder_depth {
        block_specs(&mut out, &format!("encoder.{i}"), cfg);
    }
    norm_specs(&mut out, "encoder_norm", d);
    let t = Init::TruncNormal(WEIGHT_STD);
    match stage {
        Stage::Pretrain => {
            pe_specs(&mut out, PeKind::Decoder, cfg);
            out.push(ParamSpec::new("mask_token", [d], t));
            for i in 0..cfg.decoder_depth {
                block_specs(&mut out, &format!("decoder.{i}"), cfg);
            }
            norm_specs(&mut out, "decoder_norm", d);
            linear_specs(&mut out, "head", d, cfg.patch_size * cfg.surfel_width(), t, true);
        }
        Stage::Finetune(HeadKind::Linear) => {
            linear_specs(&mut out, "cls.fc", 2 * d, cfg.num_classes, t, true);
        }
        Stage::Finetune(HeadKind::Nonlinear) => {
            let [c1, c2] = cfg.cls_hidden;
            linear_specs(&mut out, "cls.fc1", 2 * d, c1, t, true);
            linear_specs(&mut out, "cls.fc2", c1, c2, t, true);
            linear_specs(&mut out, "cls.fc3", c2, cfg.num_classes, t, true);
        }
    }
    out
}

/// Number of learnable scalars of a stage.
pub fn param_count(cfg: &ModelConfig, stage: Stage) -> usize {
    param_specs(cfg, stage).iter().map(ParamSpec::numel).sum()
}

/// Stateless forward definitions; parameters come from a [`Binder`].
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSurfNet {
    pub config: ModelConfig,
}

impl MaskSurfNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(MaskSurfNet { config })
    }

    pub fn init_params(&self, stage: Stage, seed: u64) -> ParamStore {
        ParamStore::init(&param_specs(&self.config, stage), seed)
    }

    fn linear(&self, b: &Binder, name: &str, x: Var) -> Result<Var> {
        let w = b.p(&format!("{name}.w"))?;
        match b.p(&format!("{name}.b")) {
            Ok(bias) => b.graph.linear(x, w, bias),
            Err(_) => b.graph.matmul(x, w),
        }
    }

    fn norm(&self, b: &Binder, name: &str, x: Var) -> Result<Var> {
        let g = b.p(&format!("{name}.g"))?;
        let beta = b.p(&format!("{name}.b"))?;
        b.graph.layer_norm(x, g, beta, LAYER_NORM_EPS)
    }

    fn rows(points: &[Vec3]) -> Tensor {
        let data = points.iter().flat_map(|p| p.iter().copied()).collect();
        Tensor::new([points.len(), 3], data).expect("row-major points")
    }

    /// Center-normalized patches (`V·K` points, patch-major) to `V×D` tokens.
    pub fn embed_tokens(&self, b: &Binder, patches: &[Vec3], k: usize) -> Result<Var> {
        if k != self.config.patch_size {
            return Err(Error::invalid(format!(
                "patch size {k} does not match configured {}",
                self.config.patch_size
            )));
        }
        if patches.is_empty() || patches.len() % k != 0 {
            return Err(Error::invalid(format!("{} points is not a whole number of {k}-point patches", patches.len())));
        }
        let g = b.graph;
        let v = patches.len() / k;
        let x = g.constant(Self::rows(patches));
        let h = g.gelu(self.linear(b, "embed.fc1", x)?)?;
        let h = g.gelu(self.linear(b, "embed.fc2", h)?)?;
        let h = g.reshape(h, [v, k, self.config.embed_hidden[1]])?;
        let h = g.max_reduce(h, 1)?;
        self.linear(b, "embed.fc3", h)
    }

    pub fn positional_embed(&self, b: &Binder, centers: &[Vec3], which: PeKind) -> Result<Var> {
        if centers.is_empty() {
            return Err(Error::invalid("positional embedding of zero centers"));
        }
        let g = b.graph;
        let p = which.prefix();
        let x = g.constant(Self::rows(centers));
        let h = g.gelu(self.linear(b, &format!("{p}.fc1"), x)?)?;
        self.linear(b, &format!("{p}.fc2"), h)
    }

    fn attention(&self, b: &Binder, name: &str, x: Var) -> Result<Var> {
        let g = b.graph;
        let n = g.shape(x)[0];
        let (h, dh) = (self.config.heads, self.config.head_dim());
        let qkv = self.linear(b, &format!("{name}.qkv"), x)?;
        let qkv = g.reshape(qkv, [n, 3, h, dh])?;
        let qkv = g.transpose(qkv, [1, 2, 0, 3])?;
        let part = |i: usize| -> Result<Var> { g.reshape(g.gather(qkv, 0, [i])?, [h, n, dh]) };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let kt = g.transpose(k, [0, 2, 1])?;
        let scores = g.scale(g.matmul(q, kt)?, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores)?;
        let out = g.matmul(attn, v)?;
        let out = g.transpose(out, [1, 0, 2])?;
        let out = g.reshape(out, [n, h * dh])?;
        self.linear(b, &format!("{name}.proj"), out)
    }

    fn block(&self, b: &Binder, name: &str, x: Var, pe: Var) -> Result<Var> {
        let g = b.graph;
        let x = g.add(x, pe)?;
        let a = self.attention(b, &format!("{name}.attn"), self.norm(b, &format!("{name}.norm1"), x)?)?;
        let x = g.add(x, a)?;
        let h = self.norm(b, &format!("{name}.norm2"), x)?;
        let h = g.gelu(self.linear(b, &format!("{name}.mlp.fc1"), h)?)?;
        let h = self.linear(b, &format!("{name}.mlp.fc2"), h)?;
        g.add(x, h)
    }

    fn check_rows(&self, b: &Binder, tokens: Var, pe: Var) -> Result<()> {
        let (ts, ps) = (b.graph.shape(tokens), b.graph.shape(pe));
        let d = self.config.embed_dim;
        if ts.len() != 2 || ts[1] != d || ts != ps {
            return Err(Error::invalid(format!("tokens {ts:?} and positional embeddings {ps:?} must both be n×{d}")));
        }
        Ok(())
    }

    /// Encoder blocks over visible tokens.
    pub fn encode(&self, b: &Binder, tokens: Var, pe: Var) -> Result<Var> {
        self.check_rows(b, tokens, pe)?;
        let mut x = tokens;
        for i in 0..self.config.encoder_depth {
            x = self.block(b, &format!("encoder.{i}"), x, pe)?;
        }
        Ok(x)
    }

    /// Final normalization applied to encoder output before any consumer.
    pub fn encoder_norm(&self, b: &Binder, x: Var) -> Result<Var> {
        self.norm(b, "encoder_norm", x)
    }

    /// Decoder over `[encoded visible; mask_count mask tokens]`, returning
    /// every output row in that order.
    pub fn decode_all(&self, b: &Binder, encoded: Var, mask_count: usize, pe_all: Var) -> Result<Var> {
        let g = b.graph;
        let token = g.reshape(b.p("mask_token")?, [1, self.config.embed_dim])?;
        let mut x = if mask_count == 0 {
            encoded
        } else {
            let masks = g.gather(token, 0, vec![0; mask_count])?;
            g.concat(&[encoded, masks], 0)?
        };
        self.check_rows(b, x, pe_all)?;
        for i in 0..self.config.decoder_depth {
            x = self.block(b, &format!("decoder.{i}"), x, pe_all)?;
        }
        Ok(x)
    }

    /// Decoder outputs of the mask tokens only.
    pub fn decode(&self, b: &Binder, encoded: Var, mask_count: usize, pe_all: Var) -> Result<Var> {
        if mask_count == 0 {
            return Err(Error::invalid("decode needs at least one mask token"));
        }
        let v = b.graph.shape(encoded)[0];
        let all = self.decode_all(b, encoded, mask_count, pe_all)?;
        b.graph.gather(all, 0, (v..v + mask_count).collect::<Vec<_>>())
    }

    /// Decoder tokens to predicted positions and normals, each `rows×K×3`.
    ///
    /// Without a normal head the second output is `None`.
    pub fn predict_surfels(&self, b: &Binder, decoded: Var) -> Result<(Var, Option<Var>)> {
        let g = b.graph;
        let rows = g.shape(decoded)[0];
        let k = self.config.patch_size;
        let width = self.config.surfel_width();
        let h = self.norm(b, "decoder_norm", decoded)?;
        let out = g.reshape(self.linear(b, "head", h)?, [rows, k, width])?;
        if width == 3 {
            return Ok((out, None));
        }
        let pos = g.gather(out, 2, [0, 1, 2])?;
        let nrm = g.gather(out, 2, [3, 4, 5])?;
        Ok((pos, Some(nrm)))
    }

    /// Pooled `concat(max, mean)` feature as a `1×2D` row.
    pub fn pool(&self, b: &Binder, tokens: Var) -> Result<Var> {
        let g = b.graph;
        let d = self.config.embed_dim;
        let mx = g.reshape(g.max_reduce(tokens, 0)?, [1, d])?;
        let mean = g.reshape(g.mean(tokens, Some(0))?, [1, d])?;
        g.concat(&[mx, mean], 1)
    }

    /// Class logits `1×C`. Dropout is active only when an rng is given.
    pub fn classify<R: Rng>(&self, b: &Binder, tokens: Var, head: HeadKind, dropout: Option<&mut R>) -> Result<Var> {
        let pooled = self.pool(b, tokens)?;
        self.head(b, pooled, head, dropout)
    }

    /// Classifier on an already pooled `1×2D` feature.
    pub fn head<R: Rng>(&self, b: &Binder, pooled: Var, head: HeadKind, mut dropout: Option<&mut R>) -> Result<Var> {
        let g = b.graph;
        match head {
            HeadKind::Linear => self.linear(b, "cls.fc", pooled),
            HeadKind::Nonlinear => {
                let mut h = pooled;
                for layer in ["cls.fc1", "cls.fc2"] {
                    h = g.gelu(self.linear(b, layer, h)?)?;
                    if let Some(rng) = dropout.as_deref_mut() {
                        h = self.dropout(b, h, rng)?;
                    }
                }
                self.linear(b, "cls.fc3", h)
            }
        }
    }

    fn dropout<R: Rng>(&self, b: &Binder, x: Var, rng: &mut R) -> Result<Var> {
        let p = self.config.cls_dropout;
        if p == 0.0 {
            return Ok(x);
        }
        let shape = b.graph.shape(x);
        let n = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let mask = b.graph.constant(Tensor::new(shape, mask)?);
        b.graph.mul(x, mask)
    }
}
