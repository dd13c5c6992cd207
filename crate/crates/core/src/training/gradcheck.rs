use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pipeline::{prepare_sample, reconstruct, MaskSettings};
use crate::autodiff::{check_many, GradCheckReport, Graph, Primitive, Tensor, Var};
use crate::dataio::{synth_shape, Shape, ShapeSpec};
use crate::error::Result;
use crate::losses::{surfel_loss, NormalMode, SurfelPatches, TargetScope};
use crate::masking::MaskStrategy;
use crate::network::{Binder, HeadKind, MaskSurfNet, ModelConfig, ParamStore, Stage};

/// Finite-difference step used by the suite.
pub const GRADCHECK_EPS: f64 = 1e-4;
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct NamedCheck {
    pub name: String,
    pub report: GradCheckReport,
}

/// The small network used for end-to-end gradient checks.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        encoder_depth: 2,
        decoder_depth: 1,
        heads: 2,
        mlp_ratio: 2,
        patch_count: 4,
        patch_size: 8,
        embed_hidden: [16, 16],
        pe_hidden: 8,
        predict_normals: true,
        num_classes: 3,
        cls_hidden: [8, 8],
        cls_dropout: 0.0,
    }
}

fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

/// Entries with magnitude in `[lo, 1]` and random sign.
fn away_from_zero(shape: &[usize], lo: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..1.0);
            if rng.gen::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

fn positive(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.3..2.0)).collect()).expect("sized")
}

/// Reduce any node to a scalar through fixed random weights.
fn project(g: &Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(uniform(&g.shape(y), &mut rng));
    let prod = g.mul(y, w)?;
    g.sum(prod, None)
}

fn primitive(name: &str, prim: Primitive, inputs: Vec<Tensor>, eps: f64, tol: f64) -> Result<NamedCheck> {
    let report = check_many(|g, v| project(g, g.apply(prim.clone(), v)?, 99), &inputs, eps, tol)?;
    Ok(NamedCheck {
        name: format!("primitive {name}"),
        report,
    })
}

/// Central-difference checks of every primitive.
pub fn primitive_checks(eps: f64, tol: f64) -> Result<Vec<NamedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let r = &mut rng;
    let mut out = Vec::new();
    out.push(primitive("add", Primitive::Add, vec![uniform(&[3, 4], r), uniform(&[4], r)], eps, tol)?);
    out.push(primitive("sub", Primitive::Sub, vec![uniform(&[2, 3, 4], r), uniform(&[3, 1], r)], eps, tol)?);
    out.push(primitive("mul", Primitive::Mul, vec![uniform(&[3, 4], r), uniform(&[3, 4], r)], eps, tol)?);
    out.push(primitive("mul broadcast", Primitive::Mul, vec![uniform(&[2, 1, 4], r), uniform(&[3, 1], r)], eps, tol)?);
    out.push(primitive("matmul", Primitive::MatMul, vec![uniform(&[5, 3], r), uniform(&[3, 4], r)], eps, tol)?);
    out.push(primitive(
        "matmul batched",
        Primitive::MatMul,
        vec![uniform(&[2, 3, 4], r), uniform(&[2, 4, 5], r)],
        eps,
        tol,
    )?);
    out.push(primitive(
        "matmul shared rhs",
        Primitive::MatMul,
        vec![uniform(&[2, 3, 4], r), uniform(&[4, 2], r)],
        eps,
        tol,
    )?);
    out.push(primitive("reshape", Primitive::Reshape(vec![6, 2]), vec![uniform(&[3, 4], r)], eps, tol)?);
    out.push(primitive(
        "transpose",
        Primitive::Transpose(vec![2, 0, 1]),
        vec![uniform(&[2, 3, 4], r)],
        eps,
        tol,
    )?);
    out.push(primitive(
        "concat",
        Primitive::Concat { axis: 1 },
        vec![uniform(&[2, 3], r), uniform(&[2, 1], r), uniform(&[2, 2], r)],
        eps,
        tol,
    )?);
    out.push(primitive(
        "gather",
        Primitive::Gather {
            axis: 1,
            indices: vec![2, 0, 2, 1],
        },
        vec![uniform(&[2, 3, 2], r)],
        eps,
        tol,
    )?);
    out.push(primitive("softmax", Primitive::Softmax, vec![uniform(&[3, 5], r)], eps, tol)?);
    out.push(primitive("log_softmax", Primitive::LogSoftmax, vec![uniform(&[3, 5], r)], eps, tol)?);
    out.push(primitive(
        "layer_norm",
        Primitive::LayerNorm { eps: 1e-5 },
        vec![uniform(&[4, 6], r), uniform(&[6], r), uniform(&[6], r)],
        eps,
        tol,
    )?);
    out.push(primitive("gelu", Primitive::Gelu, vec![uniform(&[4, 5], r)], eps, tol)?);
    out.push(primitive("max_reduce", Primitive::MaxReduce { axis: 1 }, vec![uniform(&[3, 6, 2], r)], eps, tol)?);
    out.push(primitive("mean", Primitive::MeanReduce { axis: Some(0) }, vec![uniform(&[3, 4], r)], eps, tol)?);
    out.push(primitive("mean all", Primitive::MeanReduce { axis: None }, vec![uniform(&[3, 4], r)], eps, tol)?);
    out.push(primitive("sum", Primitive::SumReduce { axis: Some(1) }, vec![uniform(&[3, 4], r)], eps, tol)?);
    out.push(primitive("pow 2", Primitive::Pow(2.0), vec![uniform(&[3, 4], r)], eps, tol)?);
    out.push(primitive("pow -1", Primitive::Pow(-1.0), vec![positive(&[3, 4], r)], eps, tol)?);
    out.push(primitive("pow 1.5", Primitive::Pow(1.5), vec![positive(&[3, 4], r)], eps, tol)?);
    out.push(primitive("abs", Primitive::Abs, vec![away_from_zero(&[3, 4], 0.1, r)], eps, tol)?);
    out.push(primitive("sqrt", Primitive::Sqrt, vec![positive(&[3, 4], r)], eps, tol)?);
    Ok(out)
}

fn random_patches(patches: usize, k: usize, rng: &mut impl Rng) -> Result<SurfelPatches> {
    let pos = (0..patches * k).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let nrm = (0..patches * k).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    SurfelPatches::new(pos, nrm, k)
}

/// Checks of the position loss, both normal-loss modes and their sum,
/// differentiated with respect to predicted positions and normals.
pub fn loss_checks(eps: f64, tol: f64) -> Result<Vec<NamedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (patches, k) = (3, 8);
    let truth = random_patches(patches, k, &mut rng)?;
    let inputs = vec![uniform(&[patches, k, 3], &mut rng), away_from_zero(&[patches, k, 3], 0.2, &mut rng)];
    let cases: [(&str, NormalMode, usize); 4] = [
        ("position loss", NormalMode::Unoriented, 0),
        ("normal loss unoriented", NormalMode::Unoriented, 1),
        ("normal loss oriented", NormalMode::Oriented, 1),
        ("total loss", NormalMode::Unoriented, 2),
    ];
    let mut out = Vec::new();
    for (name, mode, which) in cases {
        let report = check_many(
            |g, v| {
                let l = surfel_loss(g, v[0], v[1], &truth, 0.5, mode)?;
                Ok([l.l_p, l.l_n, l.l_all][which])
            },
            &inputs,
            eps,
            tol,
        )?;
        out.push(NamedCheck {
            name: name.to_string(),
            report,
        });
    }
    Ok(out)
}

/// Random parameters with unit-scale activations. The default small
/// initialization leaves predicted normals short and attention nearly
/// uniform, which makes many gradients too small for finite differences.
pub fn gradcheck_params(store: &ParamStore, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = store.clone();
    for (name, t) in store.names().iter().zip(out.values_mut()) {
        let shape = t.shape().to_vec();
        let fresh: Vec<f64> = if shape.len() >= 2 {
            let bound = (3.0 / shape[0] as f64).sqrt();
            (0..t.numel()).map(|_| rng.gen_range(-bound..bound)).collect()
        } else if name.ends_with(".g") {
            (0..t.numel()).map(|_| 1.0 + rng.gen_range(-0.2..0.2)).collect()
        } else {
            (0..t.numel()).map(|_| rng.gen_range(-0.2..0.2)).collect()
        };
        t.data_mut().copy_from_slice(&fresh);
    }
    out
}

/// Reconstruction loss (with a heavy normal weight) and classification
/// loss of [`tiny_model`], checked against every parameter.
pub fn model_checks(eps: f64, tol: f64) -> Result<Vec<NamedCheck>> {
    let cfg = tiny_model();
    let net = MaskSurfNet::new(cfg.clone())?;
    let spec = ShapeSpec {
        shape: Shape::Torus { major: 1.0, minor: 0.35 },
        label: 0,
    };
    let cloud = synth_shape(&spec, 96, 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mask = MaskSettings {
        ratio: 0.5,
        strategy: MaskStrategy::Random,
    };
    let sample = prepare_sample(&cloud, cfg.patch_count, cfg.patch_size, None, Some(mask), &mut rng)?;
    let mut out = Vec::new();

    let params = gradcheck_params(&net.init_params(Stage::Pretrain, 3), 13);
    let report = check_many(
        |g, v| {
            let b = Binder::with_vars(g, &params, v)?;
            let pass = reconstruct(&net, &b, &sample, TargetScope::MaskedOnly, 0.5, NormalMode::Unoriented)?;
            Ok(pass.loss.l_all)
        },
        params.values(),
        eps,
        tol,
    )?;
    out.push(NamedCheck {
        name: "tiny model reconstruction".into(),
        report,
    });

    let params = gradcheck_params(&net.init_params(Stage::Finetune(HeadKind::Nonlinear), 4), 14);
    let report = check_many(
        |g, v| {
            let b = Binder::with_vars(g, &params, v)?;
            let tokens = super::pipeline::encode_all(&net, &b, &sample)?;
            let logits = net.classify::<ChaCha8Rng>(&b, tokens, HeadKind::Nonlinear, None)?;
            super::pipeline::cross_entropy(g, logits, 1)
        },
        params.values(),
        eps,
        tol,
    )?;
    out.push(NamedCheck {
        name: "tiny model classification".into(),
        report,
    });
    Ok(out)
}

/// Every check above.
pub fn gradient_suite(eps: f64, tol: f64) -> Result<Vec<NamedCheck>> {
    let mut out = primitive_checks(eps, tol)?;
    out.extend(loss_checks(eps, tol)?);
    out.extend(model_checks(eps, tol)?);
    Ok(out)
}
