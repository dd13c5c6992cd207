use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// How a parameter array is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation, truncated at two.
    TruncNormal(f64),
    /// Uniform in `±1/sqrt(fan_in)` with `fan_in` the leading dimension.
    FanIn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.into(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Tensor {
        let n = self.numel();
        let data = match self.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => (0..n).map(|_| std * truncated_normal(rng)).collect(),
            Init::FanIn => {
                let bound = 1.0 / (self.shape[0] as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        Tensor::new(self.shape.clone(), data).expect("spec shape")
    }
}

/// Standard normal truncated to `[-2, 2]`, via Box–Muller with rejection.
fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Named parameter arrays in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Initialize every spec from one seeded stream, in order.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in specs {
            let t = spec.sample(&mut rng);
            store.insert(spec.name.clone(), t).expect("unique spec names");
        }
        store
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(())
    }

    /// Insert or overwrite.
    pub fn set(&mut self, name: &str, value: Tensor) {
        match self.index.get(name) {
            Some(&i) => self.values[i] = value,
            None => self.insert(name, value).expect("absent name"),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Copy every parameter whose name starts with one of `prefixes`.
    pub fn copy_from(&mut self, other: &ParamStore, prefixes: &[&str]) -> Result<usize> {
        let mut copied = 0;
        for (name, value) in other.iter() {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            match self.get(name) {
                Some(existing) if existing.shape() != value.shape() => {
                    return Err(Error::invalid(format!(
                        "parameter `{name}` has shape {:?}, source has {:?}",
                        existing.shape(),
                        value.shape()
                    )))
                }
                _ => self.set(name, value.clone()),
            }
            copied += 1;
        }
        Ok(copied)
    }

    /// Names matching any of `prefixes`.
    pub fn matching(&self, prefixes: &[&str]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| prefixes.iter().any(|p| self.names[i].starts_with(p)))
            .collect()
    }
}

/// Lazily binds parameters of a store into one graph.
///
/// Frozen parameters enter the graph as constants.
pub struct Binder<'a> {
    pub graph: &'a Graph,
    store: &'a ParamStore,
    frozen: &'a [bool],
    bound: RefCell<Vec<Option<Var>>>,
}

impl<'a> Binder<'a> {
    pub fn new(graph: &'a Graph, store: &'a ParamStore, frozen: &'a [bool]) -> Self {
        Binder {
            graph,
            store,
            frozen,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Binder whose parameters are already bound to `vars`, in store order.
    pub fn with_vars(graph: &'a Graph, store: &'a ParamStore, vars: &[Var]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::invalid(format!("{} vars for {} parameters", vars.len(), store.len())));
        }
        Ok(Binder {
            graph,
            store,
            frozen: &[],
            bound: RefCell::new(vars.iter().copied().map(Some).collect()),
        })
    }

    pub fn p(&self, name: &str) -> Result<Var> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| Error::invalid(format!("model has no parameter `{name}`")))?;
        if let Some(v) = self.bound.borrow()[i] {
            return Ok(v);
        }
        let value = self.store.values[i].clone();
        let v = if self.frozen.get(i).copied().unwrap_or(false) {
            self.graph.constant(value)
        } else {
            self.graph.param(value)
        };
        self.bound.borrow_mut()[i] = Some(v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter after backward, in
    /// store order; unbound or frozen parameters yield `None`. Moves the
    /// gradients out of the graph.
    pub fn gradients(&self) -> Vec<Option<Tensor>> {
        self.bound
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| self.graph.take_grad(v)))
            .collect()
    }
}
