use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{broadcast_offsets, broadcast_shape, broadcast_strides, strides_of, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive operations of the engine, with their attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    MatMul,
    Reshape(Vec<usize>),
    /// Output axis `i` is input axis `perm[i]`.
    Transpose(Vec<usize>),
    Concat { axis: usize },
    Gather { axis: usize, indices: Vec<usize> },
    /// Over the last axis.
    Softmax,
    /// Over the last axis. Numerically stable `log(softmax(x))`.
    LogSoftmax,
    /// Inputs `(x, gamma, beta)`, normalizing over the last axis.
    LayerNorm { eps: f64 },
    Gelu,
    MaxReduce { axis: usize },
    /// `None` reduces every axis to a scalar.
    MeanReduce { axis: Option<usize> },
    SumReduce { axis: Option<usize> },
    Pow(f64),
    Abs,
    Sqrt,
}

enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize, MatMulDims),
    Reshape(usize),
    Transpose(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Gather(usize, usize, Vec<usize>),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    /// Input and the local derivative saved by the forward pass.
    Gelu(usize, Vec<F>),
    MaxReduce(usize, Vec<usize>),
    Mean(usize, Option<usize>),
    Sum(usize, Option<usize>),
    Pow(usize, F),
    Abs(usize),
    Sqrt(usize),
}

#[derive(Clone, Copy)]
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// `b` is a single matrix shared across the batch.
    shared_rhs: bool,
}

struct Node<F> {
    value: Rc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Eagerly evaluated computation graph recording every operation for
/// reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order. A graph belongs to one thread; build one per sample
/// to evaluate in parallel.
pub struct Graph<F: Element = f64> {
    nodes: RefCell<Vec<Node<F>>>,
    grads: RefCell<Vec<Option<Vec<F>>>>,
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }
}

impl Graph<f64> {
    /// A 64-bit graph; use `Graph::<f32>::default()` for 32-bit values.
    pub fn new() -> Self {
        Self::default()
    }
}

impl<F: Element> Graph<F> {
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor<F> {
        (*self.nodes.borrow()[v.0].value).clone()
    }

    fn val(&self, v: Var) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Gradient accumulated into `v` by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let grads = self.grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        let shape = self.nodes.borrow()[v.0].value.shape().to_vec();
        Some(Tensor::new(shape, g.clone()).expect("gradient matches node shape"))
    }

    /// Hash of every discrete choice made by the forward pass: max-reduce
    /// winners, gather indices and the signs seen by `abs`. Two evaluations
    /// with equal hashes lie on the same smooth piece of the function.
    pub fn decisions(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let nodes = self.nodes.borrow();
        for (id, node) in nodes.iter().enumerate() {
            match &node.op {
                Op::MaxReduce(_, argmax) => (id, argmax).hash(&mut h),
                Op::Gather(_, axis, indices) => (id, axis, indices).hash(&mut h),
                Op::Abs(a) => {
                    id.hash(&mut h);
                    for &x in nodes[*a].value.data() {
                        (x >= F::zero()).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Move the gradient of `v` out of the graph.
    pub fn take_grad(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads.borrow_mut().get_mut(v.0)?.take()?;
        let shape = self.nodes.borrow()[v.0].value.shape().to_vec();
        Some(Tensor::new(shape, g).expect("gradient matches node shape"))
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        inputs.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Evaluate a primitive on graph nodes.
    pub fn apply(&self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let expected = match prim {
            Primitive::Concat { .. } => inputs.len().max(1),
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::MatMul => 2,
            Primitive::LayerNorm { .. } => 3,
            _ => 1,
        };
        if inputs.len() != expected {
            return Err(Error::invalid(format!(
                "{prim:?} takes {expected} input(s), got {}",
                inputs.len()
            )));
        }
        let x = inputs[0];
        match prim {
            Primitive::Add | Primitive::Sub | Primitive::Mul => self.binary(&prim, x, inputs[1]),
            Primitive::MatMul => self.matmul_impl(x, inputs[1]),
            Primitive::Reshape(shape) => self.reshape_impl(x, shape),
            Primitive::Transpose(perm) => self.transpose_impl(x, perm),
            Primitive::Concat { axis } => self.concat_impl(inputs, axis),
            Primitive::Gather { axis, indices } => self.gather_impl(x, axis, indices),
            Primitive::Softmax => self.softmax_impl(x, false),
            Primitive::LogSoftmax => self.softmax_impl(x, true),
            Primitive::LayerNorm { eps } => self.layer_norm_impl(x, inputs[1], inputs[2], eps),
            Primitive::Gelu => self.gelu_impl(x),
            Primitive::MaxReduce { axis } => self.max_impl(x, axis),
            Primitive::MeanReduce { axis } => self.reduce_impl(x, axis, true),
            Primitive::SumReduce { axis } => self.reduce_impl(x, axis, false),
            Primitive::Pow(p) => self.pow_impl(x, F::from_f64(p)),
            Primitive::Abs => self.abs_impl(x),
            Primitive::Sqrt => self.sqrt_impl(x),
        }
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(&Primitive::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(&Primitive::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(&Primitive::Mul, a, b)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b)
    }

    pub fn reshape(&self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.reshape_impl(a, shape.into())
    }

    pub fn transpose(&self, a: Var, perm: impl Into<Vec<usize>>) -> Result<Var> {
        self.transpose_impl(a, perm.into())
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.concat_impl(inputs, axis)
    }

    pub fn gather(&self, a: Var, axis: usize, indices: impl Into<Vec<usize>>) -> Result<Var> {
        self.gather_impl(a, axis, indices.into())
    }

    pub fn softmax(&self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.layer_norm_impl(x, gamma, beta, eps)
    }

    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.gelu_impl(a)
    }

    pub fn max_reduce(&self, a: Var, axis: usize) -> Result<Var> {
        self.max_impl(a, axis)
    }

    pub fn mean(&self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce_impl(a, axis, true)
    }

    pub fn sum(&self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce_impl(a, axis, false)
    }

    pub fn pow(&self, a: Var, p: f64) -> Result<Var> {
        self.pow_impl(a, F::from_f64(p))
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        self.abs_impl(a)
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.sqrt_impl(a)
    }

    /// `a * c` for a constant scalar `c`.
    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let c = self.constant(Tensor::scalar(F::from_f64(c)));
        self.mul(a, c)
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    // ---- forward implementations -------------------------------------

    fn binary(&self, prim: &Primitive, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.clone(), nodes[b.0].value.clone())
        };
        let out_shape = broadcast_shape(va.shape(), vb.shape())?;
        let f = |x: F, y: F| match prim {
            Primitive::Add => x + y,
            Primitive::Sub => x - y,
            _ => x * y,
        };
        let (da, db) = (va.data(), vb.data());
        let data: Vec<F> = if va.shape() == vb.shape() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if out_shape == va.shape() && is_suffix(vb.shape(), va.shape()) {
            let mut out = Vec::with_capacity(da.len());
            for chunk in da.chunks(db.len().max(1)) {
                out.extend(chunk.iter().zip(db).map(|(&x, &y)| f(x, y)));
            }
            out
        } else {
            let oa = broadcast_offsets(&out_shape, &broadcast_strides(va.shape(), &out_shape));
            let ob = broadcast_offsets(&out_shape, &broadcast_strides(vb.shape(), &out_shape));
            oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let op = match prim {
            Primitive::Add => Op::Add(a.0, b.0),
            Primitive::Sub => Op::Sub(a.0, b.0),
            _ => Op::Mul(a.0, b.0),
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, data)?, op, rg))
    }

    fn matmul_impl(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.clone(), nodes[b.0].value.clone())
        };
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::invalid(format!(
                "matmul needs rank >= 2 operands, got {sa:?} and {sb:?}"
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::invalid(format!(
                "matmul inner dimensions differ: {sa:?} x {sb:?}"
            )));
        }
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        let dims = if sb.len() == 2 {
            // Fold a's batch into its rows.
            MatMulDims {
                batch: 1,
                m: m * batch_a,
                k,
                n,
                shared_rhs: true,
            }
        } else if sa[..sa.len() - 2] == sb[..sb.len() - 2] {
            MatMulDims {
                batch: batch_a,
                m,
                k,
                n,
                shared_rhs: false,
            }
        } else {
            return Err(Error::invalid(format!(
                "matmul batch dimensions differ: {sa:?} x {sb:?}"
            )));
        };
        let len = dims.batch * dims.m * n;
        let mut out: Vec<F> = if k == 0 { vec![F::zero(); len] } else { Vec::with_capacity(len) };
        for bi in 0..dims.batch {
            if k == 0 {
                break;
            }
            let pa = va.data()[bi * dims.m * k..].as_ptr();
            let pb = if dims.shared_rhs {
                vb.data().as_ptr()
            } else {
                vb.data()[bi * k * n..].as_ptr()
            };
            // SAFETY: the block lies within the capacity of `out`.
            let pc = unsafe { out.as_mut_ptr().add(bi * dims.m * n) };
            // SAFETY: all three views lie within their buffers by the
            // shape checks above; `out` is distinct from both inputs and
            // beta 0 means it is written without being read.
            unsafe {
                F::gemm(
                    dims.m,
                    k,
                    n,
                    F::one(),
                    pa,
                    k as isize,
                    1,
                    pb,
                    n as isize,
                    1,
                    F::zero(),
                    pc,
                    n as isize,
                    1,
                );
            }
        }
        if k > 0 {
            // SAFETY: the batches overwrote every element.
            unsafe { out.set_len(len) };
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a.0, b.0, dims), rg))
    }

    fn reshape_impl(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a.0), rg))
    }

    fn transpose_impl(&self, a: Var, perm: Vec<usize>) -> Result<Var> {
        let va = self.val(a);
        let offsets = permute_offsets(va.shape(), &perm)?;
        let data = offsets.iter().map(|&o| va.data()[o]).collect();
        let shape: Vec<usize> = perm.iter().map(|&p| va.shape()[p]).collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Transpose(a.0, perm), rg))
    }

    fn concat_impl(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat of zero arrays"));
        }
        let values: Vec<Rc<Tensor<F>>> = inputs.iter().map(|&v| self.val(v)).collect();
        let first = values[0].shape().to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {first:?}")));
        }
        for v in &values[1..] {
            let s = v.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::invalid(format!(
                    "concat along {axis}: incompatible shapes {first:?} and {s:?}"
                )));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        let ids = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(ids, axis), rg))
    }

    fn gather_impl(&self, a: Var, axis: usize, indices: Vec<usize>) -> Result<Var> {
        let va = self.val(a);
        let s = va.shape();
        if axis >= s.len() {
            return Err(Error::invalid(format!("gather axis {axis} out of range for {s:?}")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[axis]) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range for axis of length {}",
                s[axis]
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let len = s[axis];
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in &indices {
                let start = (o * len + i) * inner;
                data.extend_from_slice(&va.data()[start..start + inner]);
            }
        }
        let mut shape = s.to_vec();
        shape[axis] = indices.len();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gather(a.0, axis, indices), rg))
    }

    fn softmax_impl(&self, a: Var, log: bool) -> Result<Var> {
        let va = self.val(a);
        let d = *va.shape().last().ok_or_else(|| Error::invalid("softmax of a scalar"))?;
        if d == 0 {
            return Err(Error::invalid("softmax over an empty axis"));
        }
        let mut data = Vec::with_capacity(va.numel());
        for row in va.data().chunks(d) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let total = row.iter().map(|&x| (x - max).exp()).sum::<F>();
            if log {
                let lse = total.ln() + max;
                data.extend(row.iter().map(|&x| x - lse));
            } else {
                data.extend(row.iter().map(|&x| (x - max).exp() / total));
            }
        }
        let rg = self.any_grad(&[a]);
        let op = if log { Op::LogSoftmax(a.0) } else { Op::Softmax(a.0) };
        Ok(self.push(Tensor::new(va.shape().to_vec(), data)?, op, rg))
    }

    fn layer_norm_impl(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.val(x), self.val(gamma), self.val(beta));
        let d = *vx.shape().last().ok_or_else(|| Error::invalid("layer norm of a scalar"))?;
        if d == 0 || vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::invalid(format!(
                "layer norm: input {:?}, gamma {:?}, beta {:?}",
                vx.shape(),
                vg.shape(),
                vb.shape()
            )));
        }
        let eps = F::from_f64(eps);
        let inv_d = F::one() / F::from_f64(d as f64);
        let rows = vx.numel() / d;
        let mut xhat = Vec::with_capacity(vx.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks(d) {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * vg.data()[j] + vb.data()[j]);
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new(vx.shape().to_vec(), out)?, op, rg))
    }

    fn gelu_impl(&self, a: Var) -> Result<Var> {
        let va = self.val(a);
        let rg = self.any_grad(&[a]);
        let mut data = Vec::with_capacity(va.numel());
        let mut local = Vec::with_capacity(if rg { va.numel() } else { 0 });
        for &x in va.data() {
            let (y, dy) = gelu(x);
            data.push(y);
            if rg {
                local.push(dy);
            }
        }
        Ok(self.push(Tensor::new(va.shape().to_vec(), data)?, Op::Gelu(a.0, local), rg))
    }

    fn max_impl(&self, a: Var, axis: usize) -> Result<Var> {
        let va = self.val(a);
        let s = va.shape();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::invalid(format!("max-reduce over axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = split_axis(s, axis);
        let mut values = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for l in 1..len {
                    let idx = base + l * inner;
                    // Strict comparison keeps the lowest index on ties.
                    if va.data()[idx] > va.data()[best] {
                        best = idx;
                    }
                }
                values.push(va.data()[best]);
                argmax.push(best);
            }
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, values)?, Op::MaxReduce(a.0, argmax), rg))
    }

    fn reduce_impl(&self, a: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let va = self.val(a);
        let s = va.shape();
        let (shape, data) = match axis {
            None => {
                let total = va.data().iter().copied().sum::<F>();
                let v = if mean {
                    if va.numel() == 0 {
                        return Err(Error::invalid("mean of an empty array"));
                    }
                    total / F::from_f64(va.numel() as f64)
                } else {
                    total
                };
                (Vec::new(), vec![v])
            }
            Some(axis) => {
                if axis >= s.len() {
                    return Err(Error::invalid(format!("reduce axis {axis} out of range for {s:?}")));
                }
                let (outer, len, inner) = split_axis(s, axis);
                if mean && len == 0 {
                    return Err(Error::invalid("mean over an empty axis"));
                }
                let mut out = vec![F::zero(); outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &va.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *dst = *dst + v;
                        }
                    }
                }
                if mean {
                    let inv = F::one() / F::from_f64(len as f64);
                    out.iter_mut().for_each(|v| *v = *v * inv);
                }
                let mut shape = s.to_vec();
                shape.remove(axis);
                (shape, out)
            }
        };
        let rg = self.any_grad(&[a]);
        let op = if mean {
            Op::Mean(a.0, axis)
        } else {
            Op::Sum(a.0, axis)
        };
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    fn pow_impl(&self, a: Var, p: F) -> Result<Var> {
        let va = self.val(a);
        let two = F::from_f64(2.0);
        let data = va
            .data()
            .iter()
            .map(|&x| if p == two { x * x } else { x.powf(p) })
            .collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(va.shape().to_vec(), data)?, Op::Pow(a.0, p), rg))
    }

    fn abs_impl(&self, a: Var) -> Result<Var> {
        let va = self.val(a);
        let data = va.data().iter().map(|x| x.abs()).collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(va.shape().to_vec(), data)?, Op::Abs(a.0), rg))
    }

    fn sqrt_impl(&self, a: Var) -> Result<Var> {
        let va = self.val(a);
        let data = va.data().iter().map(|x| x.sqrt()).collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(va.shape().to_vec(), data)?, Op::Sqrt(a.0), rg))
    }

    // ---- reverse pass --------------------------------------------------

    /// Accumulate d(root)/d(leaf) into every node that requires gradients.
    pub fn backward(&self, root: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward from a non-scalar root of shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        if root_node.requires_grad {
            grads[root.0] = Some(vec![F::one()]);
        }
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop_node(&nodes, &node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, node) in nodes.iter().enumerate() {
            if !node.requires_grad && grads[id].is_some() {
                grads[id] = None;
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

/// tanh-approximated GELU and its derivative.
fn gelu<F: Element>(x: F) -> (F, F) {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    let y = half * x * (F::one() + t);
    let dy = half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x);
    (y, dy)
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn permute_offsets(shape: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid(format!(
            "{perm:?} is not a permutation of the axes of {shape:?}"
        )));
    }
    let strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    Ok(broadcast_offsets(&out_shape, &out_strides))
}

fn accumulate<F: Element>(grads: &mut [Option<Vec<F>>], id: usize, len: usize, f: impl FnOnce(&mut [F])) {
    let slot = grads[id].get_or_insert_with(|| vec![F::zero(); len]);
    f(slot);
}

/// Like [`accumulate`] but builds a missing slot with `fresh` instead of
/// zero-filling and adding.
fn accumulate_or<F: Element>(
    grads: &mut [Option<Vec<F>>],
    id: usize,
    fresh: impl FnOnce() -> Vec<F>,
    add: impl FnOnce(&mut [F]),
) {
    match &mut grads[id] {
        Some(slot) => add(slot),
        None => grads[id] = Some(fresh()),
    }
}

/// `c (m×n) = beta·c + a · b` over raw strided views.
///
/// # Safety
/// As for [`Element::gemm`].
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_into<F: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: (*const F, isize, isize),
    b: (*const F, isize, isize),
    beta: F,
    c: *mut F,
    rsc: isize,
) {
    F::gemm(m, k, n, F::one(), a.0, a.1, a.2, b.0, b.1, b.2, beta, c, rsc, 1);
}

/// Matmul gradient into a slot of `len` elements. `write(c, beta, bi)`
/// produces batch `bi`; an unset slot is written with beta 0 and never read.
fn accumulate_gemm<F: Element>(
    grads: &mut [Option<Vec<F>>],
    id: usize,
    len: usize,
    batch: usize,
    shared: bool,
    write: impl Fn(*mut F, F, usize),
) {
    match &mut grads[id] {
        Some(slot) => {
            for bi in 0..batch {
                write(slot.as_mut_ptr(), F::one(), bi);
            }
        }
        None => {
            if batch == 0 || len == 0 {
                grads[id] = Some(vec![F::zero(); len]);
                return;
            }
            let mut buf: Vec<F> = Vec::with_capacity(len);
            for bi in 0..batch {
                let beta = if shared && bi > 0 { F::one() } else { F::zero() };
                write(buf.as_mut_ptr(), beta, bi);
            }
            // SAFETY: with beta 0 gemm overwrites its output without reading
            // it, and the batches together cover all `len` elements.
            unsafe { buf.set_len(len) };
            grads[id] = Some(buf);
        }
    }
}

fn add_into<F: Element>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
}

/// Sum a gradient of broadcast shape `out` back down to `shape`.
fn unbroadcast<F: Element>(g: &[F], out: &[usize], shape: &[usize], dst: &mut [F]) {
    if out == shape {
        dst.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
    } else if is_suffix(shape, out) {
        for chunk in g.chunks(dst.len().max(1)) {
            dst.iter_mut().zip(chunk).for_each(|(d, &v)| *d = *d + v);
        }
    } else {
        let offsets = broadcast_offsets(out, &broadcast_strides(shape, out));
        for (&o, &v) in offsets.iter().zip(g) {
            dst[o] = dst[o] + v;
        }
    }
}

fn backprop_node<F: Element>(
    nodes: &[Node<F>],
    op: &Op<F>,
    value: &Tensor<F>,
    g: &[F],
    grads: &mut [Option<Vec<F>>],
) {
    let wants = |id: usize| nodes[id].requires_grad;
    let val = |id: usize| &nodes[id].value;
    match op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let negate = matches!(op, Op::Sub(..));
            if wants(*a) {
                let s = val(*a).shape().to_vec();
                if s == value.shape() {
                    accumulate_or(grads, *a, || g.to_vec(), |d| add_into(d, g));
                } else {
                    accumulate(grads, *a, val(*a).numel(), |d| unbroadcast(g, value.shape(), &s, d));
                }
            }
            if wants(*b) {
                let s = val(*b).shape().to_vec();
                if negate {
                    let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                    accumulate(grads, *b, val(*b).numel(), |d| unbroadcast(&neg, value.shape(), &s, d));
                } else if s == value.shape() {
                    accumulate_or(grads, *b, || g.to_vec(), |d| add_into(d, g));
                } else {
                    accumulate(grads, *b, val(*b).numel(), |d| unbroadcast(g, value.shape(), &s, d));
                }
            }
        }
        Op::Mul(a, b) => {
            let out = value.shape();
            for (this, other) in [(*a, *b), (*b, *a)] {
                if !wants(this) {
                    continue;
                }
                let vo = val(other);
                let local: Vec<F> = if vo.shape() == out {
                    g.iter().zip(vo.data()).map(|(&x, &y)| x * y).collect()
                } else {
                    let offs = broadcast_offsets(out, &broadcast_strides(vo.shape(), out));
                    g.iter().zip(&offs).map(|(&x, &o)| x * vo.data()[o]).collect()
                };
                let s = val(this).shape().to_vec();
                accumulate(grads, this, val(this).numel(), |d| unbroadcast(&local, out, &s, d));
            }
        }
        Op::MatMul(a, b, dims) => {
            let MatMulDims { batch, m, k, n, shared_rhs } = *dims;
            let (va, vb) = (val(*a), val(*b));
            if wants(*a) {
                // dA[bi] (m×k) = dC[bi] (m×n) · B[bi]ᵀ (n×k).
                accumulate_gemm(grads, *a, va.numel(), batch, false, |d, beta, bi| {
                    let pb = if shared_rhs { vb.data().as_ptr() } else { vb.data()[bi * k * n..].as_ptr() };
                    // SAFETY: views lie within g, B and the m·k block bi of d.
                    unsafe {
                        gemm_into(
                            m, n, k,
                            (g[bi * m * n..].as_ptr(), n as isize, 1),
                            (pb, 1, n as isize),
                            beta,
                            d.add(bi * m * k),
                            k as isize,
                        );
                    }
                });
            }
            if wants(*b) {
                // dB[bi] (k×n) = A[bi]ᵀ (k×m) · dC[bi] (m×n), summed when shared.
                accumulate_gemm(grads, *b, vb.numel(), batch, shared_rhs, |d, beta, bi| {
                    let off = if shared_rhs { 0 } else { bi * k * n };
                    // SAFETY: views lie within A, g and the k·n block of d.
                    unsafe {
                        gemm_into(
                            k, m, n,
                            (va.data()[bi * m * k..].as_ptr(), 1, k as isize),
                            (g[bi * m * n..].as_ptr(), n as isize, 1),
                            beta,
                            d.add(off),
                            n as isize,
                        );
                    }
                });
            }
        }
        Op::Reshape(a) => {
            if wants(*a) {
                accumulate_or(grads, *a, || g.to_vec(), |d| add_into(d, g));
            }
        }
        Op::Transpose(a, perm) => {
            if wants(*a) {
                let offsets = permute_offsets(val(*a).shape(), perm).expect("validated in forward");
                accumulate(grads, *a, g.len(), |d| {
                    for (&o, &v) in offsets.iter().zip(g) {
                        d[o] = d[o] + v;
                    }
                });
            }
        }
        Op::Concat(ids, axis) => {
            let s = value.shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let total = s[*axis];
            let mut start = 0;
            for &id in ids {
                let len = val(id).shape()[*axis];
                if wants(id) {
                    accumulate(grads, id, val(id).numel(), |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + start) * inner..(o * total + start + len) * inner];
                            let dst = &mut d[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
                        }
                    });
                }
                start += len;
            }
        }
        Op::Gather(a, axis, indices) => {
            if wants(*a) {
                let (outer, len, inner) = split_axis(val(*a).shape(), *axis);
                accumulate(grads, *a, val(*a).numel(), |d| {
                    for o in 0..outer {
                        for (j, &i) in indices.iter().enumerate() {
                            let src = &g[(o * indices.len() + j) * inner..][..inner];
                            let dst = &mut d[(o * len + i) * inner..][..inner];
                            dst.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
                        }
                    }
                });
            }
        }
        Op::Softmax(a) => {
            if wants(*a) {
                let dim = *value.shape().last().unwrap();
                accumulate(grads, *a, g.len(), |d| {
                    for ((dr, gr), yr) in d.chunks_mut(dim).zip(g.chunks(dim)).zip(value.data().chunks(dim)) {
                        let dot = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum::<F>();
                        for ((d, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + y * (gv - dot);
                        }
                    }
                });
            }
        }
        Op::LogSoftmax(a) => {
            if wants(*a) {
                let dim = *value.shape().last().unwrap();
                accumulate(grads, *a, g.len(), |d| {
                    for ((dr, gr), yr) in d.chunks_mut(dim).zip(g.chunks(dim)).zip(value.data().chunks(dim)) {
                        let total = gr.iter().copied().sum::<F>();
                        for ((d, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + gv - y.exp() * total;
                        }
                    }
                });
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let dim = *value.shape().last().unwrap();
            let gam = val(*gamma).data();
            if wants(*x) {
                let inv_d = F::one() / F::from_f64(dim as f64);
                accumulate(grads, *x, g.len(), |d| {
                    for (r, ((dr, gr), hr)) in d.chunks_mut(dim).zip(g.chunks(dim)).zip(xhat.chunks(dim)).enumerate() {
                        let mut mean_dh = F::zero();
                        let mut mean_dh_h = F::zero();
                        for j in 0..dim {
                            let dh = gr[j] * gam[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hr[j];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_h = mean_dh_h * inv_d;
                        for j in 0..dim {
                            let dh = gr[j] * gam[j];
                            dr[j] = dr[j] + rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            if wants(*gamma) {
                accumulate(grads, *gamma, dim, |d| {
                    for (gr, hr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                        for j in 0..dim {
                            d[j] = d[j] + gr[j] * hr[j];
                        }
                    }
                });
            }
            if wants(*beta) {
                accumulate(grads, *beta, dim, |d| {
                    for gr in g.chunks(dim) {
                        d.iter_mut().zip(gr).for_each(|(d, &v)| *d = *d + v);
                    }
                });
            }
        }
        Op::Gelu(a, local) => {
            if wants(*a) {
                accumulate_or(
                    grads,
                    *a,
                    || g.iter().zip(local).map(|(&gv, &l)| gv * l).collect(),
                    |d| {
                        for ((d, &gv), &l) in d.iter_mut().zip(g).zip(local) {
                            *d = *d + gv * l;
                        }
                    },
                );
            }
        }
        Op::MaxReduce(a, argmax) => {
            if wants(*a) {
                accumulate(grads, *a, val(*a).numel(), |d| {
                    for (&i, &gv) in argmax.iter().zip(g) {
                        d[i] = d[i] + gv;
                    }
                });
            }
        }
        Op::Mean(a, axis) | Op::Sum(a, axis) => {
            if wants(*a) {
                let s = val(*a).shape().to_vec();
                let mean = matches!(op, Op::Mean(..));
                accumulate(grads, *a, val(*a).numel(), |d| match axis {
                    None => {
                        let v = if mean { g[0] / F::from_f64(d.len() as f64) } else { g[0] };
                        d.iter_mut().for_each(|d| *d = *d + v);
                    }
                    Some(axis) => {
                        let (outer, len, inner) = split_axis(&s, *axis);
                        let scale = if mean { F::one() / F::from_f64(len as f64) } else { F::one() };
                        for o in 0..outer {
                            for l in 0..len {
                                let dst = &mut d[(o * len + l) * inner..][..inner];
                                let src = &g[o * inner..][..inner];
                                dst.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v * scale);
                            }
                        }
                    }
                });
            }
        }
        Op::Pow(a, p) => {
            if wants(*a) {
                let xs = val(*a).data();
                let p = *p;
                let two = F::from_f64(2.0);
                accumulate(grads, *a, g.len(), |d| {
                    for ((d, &gv), &x) in d.iter_mut().zip(g).zip(xs) {
                        let local = if p == two { two * x } else { p * x.powf(p - F::one()) };
                        *d = *d + gv * local;
                    }
                });
            }
        }
        Op::Abs(a) => {
            if wants(*a) {
                let xs = val(*a).data();
                accumulate(grads, *a, g.len(), |d| {
                    for ((d, &gv), &x) in d.iter_mut().zip(g).zip(xs) {
                        let sign = if x > F::zero() {
                            F::one()
                        } else if x < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        *d = *d + gv * sign;
                    }
                });
            }
        }
        Op::Sqrt(a) => {
            if wants(*a) {
                let half = F::from_f64(0.5);
                accumulate(grads, *a, g.len(), |d| {
                    for ((d, &gv), &y) in d.iter_mut().zip(g).zip(value.data()) {
                        // Zero upstream gradient contributes nothing, even at sqrt(0).
                        if gv != F::zero() {
                            *d = *d + gv * half / y;
                        }
                    }
                });
            }
        }
    }
}
