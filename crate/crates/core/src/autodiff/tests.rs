use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.3..2.0)).collect()).unwrap()
}

/// Reduce an arbitrary output to a scalar with fixed random weights so
/// every output coordinate contributes a distinct gradient.
fn weighted_sum(g: &Graph, y: Var, seed: u64) -> Result<Var, crate::Error> {
    let shape = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(&shape, &mut rng));
    let p = g.mul(y, w)?;
    g.sum(p, None)
}

fn assert_grad<Fun>(f: Fun, inputs: &[Tensor])
where
    Fun: Fn(&Graph, &[Var]) -> Result<Var, crate::Error>,
{
    let report = check_many(|g, v| weighted_sum(g, f(g, v)?, 99), inputs, 1e-5, 1e-4).unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn add_elementwise() {
    let g = Graph::new();
    let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let b = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let c = g.add(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = Graph::new();
    let eye = g.constant(Tensor::new([3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
    let a = random(&[3, 5], &mut rng);
    let av = g.constant(a.clone());
    let c = g.matmul(eye, av).unwrap();
    assert_eq!(g.value(c), a);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![0.0; 3]));
    let y = g.softmax(x).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn shape_errors() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([4]));
    assert!(g.add(a, b).is_err());
    assert!(g.matmul(a, a).is_err());
    assert!(g.reshape(a, [5]).is_err());
    assert!(g.transpose(a, [0, 0]).is_err());
    assert!(g.gather(a, 1, [3]).is_err());
    let empty = g.constant(Tensor::zeros([2, 0]));
    assert!(g.softmax(empty).is_err());
    assert!(g.apply(Primitive::Add, &[a]).is_err());
}

#[test]
fn backward_of_sum_of_squares() {
    let g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq, None).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_of_sum_of_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let g = Graph::new();
    let av = g.param(a.clone());
    let bv = g.constant(b.clone());
    let c = g.matmul(av, bv).unwrap();
    let s = g.sum(c, None).unwrap();
    g.backward(s).unwrap();
    // ones(3x2) · Bᵀ: every row equals the row sums of B.
    let grad = g.grad(av).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expected: f64 = b.data()[k * 2..k * 2 + 2].iter().sum();
            assert!((grad.data()[i * 4 + k] - expected).abs() < 1e-14);
        }
    }
    let report = finite_difference_check(
        |g, a| {
            let bv = g.constant(b.clone());
            let c = g.matmul(a, bv)?;
            g.sum(c, None)
        },
        &a,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn max_reduce_routes_to_argmax() {
    let g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![3.0, 7.0, 2.0]));
    let m = g.max_reduce(x, 0).unwrap();
    g.backward(m).unwrap();
    assert_eq!(g.value(m).item().unwrap(), 7.0);
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn max_reduce_tie_goes_to_lowest_index() {
    let g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 5.0, 5.0]));
    let m = g.max_reduce(x, 0).unwrap();
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn backward_requires_scalar_root() {
    let g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(g.backward(x).is_err());
}

#[test]
fn gather_scatters_repeated_indices() {
    let g = Graph::new();
    let x = g.param(Tensor::new([3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let y = g.gather(x, 0, [2, 0, 2]).unwrap();
    assert_eq!(g.value(y).data(), &[5., 6., 1., 2., 5., 6.]);
    let s = g.sum(y, None).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
}

#[test]
fn constants_receive_no_gradient() {
    let g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let c = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let y = g.mul(x, c).unwrap();
    let s = g.sum(y, None).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn f32_graph_evaluates() {
    let g = Graph::<f32>::default();
    let x = g.param(Tensor::<f32>::from_vec(vec![1.0, -2.0]));
    let a = g.abs(x).unwrap();
    let s = g.sum(a, None).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.value(s).item().unwrap(), 3.0f32);
    assert_eq!(g.grad(x).unwrap().data(), &[1.0f32, -1.0]);
}

// ---- finite-difference checks per primitive, three shapes each --------

const SHAPES: [&[usize]; 3] = [&[5], &[3, 4], &[2, 3, 4]];

#[test]
fn grad_add_sub_mul_with_broadcasting() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pairs: [(&[usize], &[usize]); 4] = [(&[5], &[5]), (&[3, 4], &[4]), (&[2, 3, 4], &[3, 1]), (&[2, 1, 4], &[3, 4])];
    for (sa, sb) in pairs {
        let a = random(sa, &mut rng);
        let b = random(sb, &mut rng);
        assert_grad(|g, v| g.add(v[0], v[1]), &[a.clone(), b.clone()]);
        assert_grad(|g, v| g.sub(v[0], v[1]), &[a.clone(), b.clone()]);
        assert_grad(|g, v| g.mul(v[0], v[1]), &[a, b]);
    }
}

#[test]
fn grad_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases: [(&[usize], &[usize]); 3] = [(&[3, 4], &[4, 2]), (&[2, 3, 4], &[2, 4, 5]), (&[2, 3, 4], &[4, 3])];
    for (sa, sb) in cases {
        let a = random(sa, &mut rng);
        let b = random(sb, &mut rng);
        assert_grad(|g, v| g.matmul(v[0], v[1]), &[a, b]);
    }
}

#[test]
fn grad_reshape_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for shape in SHAPES {
        let x = random(shape, &mut rng);
        let n = x.numel();
        assert_grad(|g, v| g.reshape(v[0], [n]), std::slice::from_ref(&x));
        let perm: Vec<usize> = (0..shape.len()).rev().collect();
        assert_grad(|g, v| g.transpose(v[0], perm.clone()), &[x]);
    }
    let x = random(&[2, 3, 4, 2], &mut rng);
    assert_grad(|g, v| g.transpose(v[0], [1, 2, 0, 3]), &[x]);
}

#[test]
fn grad_concat_gather() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for shape in SHAPES {
        let a = random(shape, &mut rng);
        let b = random(shape, &mut rng);
        let axis = shape.len() - 1;
        assert_grad(|g, v| g.concat(&[v[0], v[1], v[0]], axis), &[a.clone(), b]);
        let len = shape[0];
        let idx: Vec<usize> = (0..len + 2).map(|i| (i * 3) % len).collect();
        assert_grad(|g, v| g.gather(v[0], 0, idx.clone()), std::slice::from_ref(&a));
        let last = shape[axis];
        assert_grad(|g, v| g.gather(v[0], axis, vec![last - 1, 0, last - 1]), &[a]);
    }
}

#[test]
fn grad_softmax_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for shape in SHAPES {
        let x = random(shape, &mut rng);
        assert_grad(|g, v| g.softmax(v[0]), std::slice::from_ref(&x));
        assert_grad(|g, v| g.log_softmax(v[0]), &[x]);
    }
}

#[test]
fn grad_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for shape in SHAPES {
        let d = *shape.last().unwrap();
        let x = random(shape, &mut rng);
        let gamma = random(&[d], &mut rng);
        let beta = random(&[d], &mut rng);
        assert_grad(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), &[x, gamma, beta]);
    }
}

#[test]
fn grad_gelu_abs_sqrt_pow() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for shape in SHAPES {
        let x = random(shape, &mut rng);
        let p = positive(shape, &mut rng);
        assert_grad(|g, v| g.gelu(v[0]), std::slice::from_ref(&x));
        assert_grad(|g, v| g.abs(v[0]), &[x.clone()]);
        assert_grad(|g, v| g.sqrt(v[0]), std::slice::from_ref(&p));
        assert_grad(|g, v| g.pow(v[0], 2.0), &[x]);
        assert_grad(|g, v| g.pow(v[0], -1.0), std::slice::from_ref(&p));
        assert_grad(|g, v| g.pow(v[0], 1.5), &[p]);
    }
}

#[test]
fn grad_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for shape in SHAPES {
        let x = random(shape, &mut rng);
        for axis in 0..shape.len() {
            assert_grad(|g, v| g.max_reduce(v[0], axis), std::slice::from_ref(&x));
            assert_grad(|g, v| g.mean(v[0], Some(axis)), std::slice::from_ref(&x));
            assert_grad(|g, v| g.sum(v[0], Some(axis)), std::slice::from_ref(&x));
        }
        assert_grad(|g, v| g.mean(v[0], None), std::slice::from_ref(&x));
    }
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = random(&[4, 3], &mut rng);
    let w = random(&[3, 2], &mut rng);
    let f = |g: &Graph, x: Var| -> Result<Var, crate::Error> {
        let wv = g.constant(w.clone());
        let y = g.matmul(x, wv)?;
        let y = g.gelu(y)?;
        g.sum(y, None)
    };
    let h = |g: &Graph, x: Var| -> Result<Var, crate::Error> {
        let y = g.softmax(x)?;
        let y = g.mul(y, x)?;
        g.mean(y, None)
    };
    let grad_of = |which: u8| {
        let g = Graph::new();
        let xv = g.param(x.clone());
        let root = match which {
            0 => f(&g, xv).unwrap(),
            1 => h(&g, xv).unwrap(),
            _ => {
                let a = g.scale(f(&g, xv).unwrap(), 2.5).unwrap();
                let b = g.scale(h(&g, xv).unwrap(), -0.75).unwrap();
                g.add(a, b).unwrap()
            }
        };
        g.backward(root).unwrap();
        g.grad(xv).unwrap()
    };
    let (gf, gh, gc) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..x.numel() {
        let expected = 2.5 * gf.data()[i] - 0.75 * gh.data()[i];
        assert!((gc.data()[i] - expected).abs() < 1e-12);
    }
}

#[test]
fn repeated_backward_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = random(&[3, 8], &mut rng);
    let run = || {
        let g = Graph::new();
        let xv = g.param(x.clone());
        let gamma = g.constant(Tensor::full([8], 1.0));
        let beta = g.constant(Tensor::zeros([8]));
        let y = g.layer_norm(xv, gamma, beta, 1e-5).unwrap();
        let y = g.softmax(y).unwrap();
        let s = weighted_sum(&g, y, 5).unwrap();
        g.backward(s).unwrap();
        (g.value(s), g.grad(xv).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn apply_dispatches_every_primitive() {
    let g = Graph::new();
    let x = g.constant(Tensor::new([2, 2], vec![1.0, 4.0, 9.0, 16.0]).unwrap());
    let one = g.constant(Tensor::full([2], 1.0));
    let zero = g.constant(Tensor::zeros([2]));
    let prims = [
        (Primitive::Add, vec![x, x]),
        (Primitive::Sub, vec![x, x]),
        (Primitive::Mul, vec![x, x]),
        (Primitive::MatMul, vec![x, x]),
        (Primitive::Reshape(vec![4]), vec![x]),
        (Primitive::Transpose(vec![1, 0]), vec![x]),
        (Primitive::Concat { axis: 0 }, vec![x, x]),
        (Primitive::Gather { axis: 0, indices: vec![1] }, vec![x]),
        (Primitive::Softmax, vec![x]),
        (Primitive::LogSoftmax, vec![x]),
        (Primitive::LayerNorm { eps: 1e-5 }, vec![x, one, zero]),
        (Primitive::Gelu, vec![x]),
        (Primitive::MaxReduce { axis: 1 }, vec![x]),
        (Primitive::MeanReduce { axis: None }, vec![x]),
        (Primitive::SumReduce { axis: Some(0) }, vec![x]),
        (Primitive::Pow(0.5), vec![x]),
        (Primitive::Abs, vec![x]),
        (Primitive::Sqrt, vec![x]),
    ];
    for (p, inputs) in prims {
        g.apply(p.clone(), &inputs).unwrap_or_else(|e| panic!("{p:?}: {e}"));
    }
    let s = g.apply(Primitive::Sqrt, &[x]).unwrap();
    assert_eq!(g.value(s).data(), &[1.0, 2.0, 3.0, 4.0]);
}
