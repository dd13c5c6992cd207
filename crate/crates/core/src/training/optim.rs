use std::f64::consts::PI;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::network::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moments and the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Moments as named arrays (`m.<param>`, `v.<param>`) for checkpoints.
    pub fn to_store(&self, params: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for (prefix, arrays) in [("m", &self.m), ("v", &self.v)] {
            for (name, t) in params.names().iter().zip(arrays) {
                out.insert(format!("{prefix}.{name}"), t.clone()).expect("unique names");
            }
        }
        out
    }

    pub fn from_store(store: &ParamStore, params: &ParamStore, step: u64) -> Result<Self> {
        let fetch = |prefix: &str| -> Result<Vec<Tensor>> {
            params
                .iter()
                .map(|(name, p)| {
                    let key = format!("{prefix}.{name}");
                    let t = store
                        .get(&key)
                        .ok_or_else(|| Error::data(format!("optimizer state lacks `{key}`")))?;
                    if t.shape() != p.shape() {
                        return Err(Error::data(format!("optimizer array `{key}` has the wrong shape")));
                    }
                    Ok(t.clone())
                })
                .collect()
        };
        Ok(OptimizerState {
            m: fetch("m")?,
            v: fetch("v")?,
            step,
        })
    }
}

/// Weight decay applies to matrices only; biases, norm gains and the mask
/// token (all one-dimensional) are not decayed.
pub fn decays(t: &Tensor) -> bool {
    t.ndim() >= 2
}

/// One AdamW update with decoupled weight decay.
///
/// Parameters whose gradient is `None` are left untouched. All gradients
/// are validated before anything is modified.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} gradients / {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::invalid(format!(
                    "gradient of `{name}` has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for parameter `{name}`")));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let decay = if decays(&params.values()[i]) {
            1.0 - lr * weight_decay
        } else {
            1.0
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.values_mut()[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] = p[j] * decay - lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "parameter `{}` became non-finite",
                params.names()[i]
            )));
        }
    }
    Ok(())
}

/// Half-cosine decay from `lr_init` at epoch 0 to 0 at `total_epochs`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_init: f64) -> f64 {
    if total_epochs == 0 {
        return lr_init;
    }
    let t = epoch.min(total_epochs) as f64 / total_epochs as f64;
    lr_init * 0.5 * (1.0 + (PI * t).cos())
}

/// Linear ramp from 0 at step 0 to `alpha_final` at `total_steps`.
pub fn alpha_schedule(step: usize, total_steps: usize, alpha_final: f64) -> f64 {
    if total_steps == 0 {
        return alpha_final;
    }
    alpha_final * step.min(total_steps) as f64 / total_steps as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in values {
            s.insert(*n, t.clone()).unwrap();
        }
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = store(&[("w", Tensor::new([2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap())]);
        let before = p.clone();
        let mut st = OptimizerState::new(&p);
        for _ in 0..5 {
            adamw_step(&mut p, &[Some(Tensor::zeros([2, 2]))], &mut st, 0.01, 0.0, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn decoupled_decay_scales_parameters() {
        let mut p = store(&[
            ("w", Tensor::new([1, 2], vec![1.0, -4.0]).unwrap()),
            ("b", Tensor::from_vec(vec![2.0])),
        ]);
        let mut st = OptimizerState::new(&p);
        let grads = [Some(Tensor::zeros([1, 2])), Some(Tensor::zeros([1]))];
        for step in 1..=3 {
            adamw_step(&mut p, &grads, &mut st, 0.001, 0.05, &AdamConfig::default()).unwrap();
            let f = (1.0 - 0.001 * 0.05f64).powi(step);
            let w = p.get("w").unwrap().data();
            assert!((w[0] - f).abs() < 1e-15 && (w[1] + 4.0 * f).abs() < 1e-15);
        }
        assert_eq!(p.get("b").unwrap().data(), &[2.0]);
    }

    #[test]
    fn first_moment_tracks_constant_gradient() {
        let mut p = store(&[("x", Tensor::from_vec(vec![0.0]))]);
        let mut st = OptimizerState::new(&p);
        let g = 0.3;
        let cfg = AdamConfig::default();
        for t in 1..=200 {
            adamw_step(&mut p, &[Some(Tensor::from_vec(vec![g]))], &mut st, 1e-3, 0.0, &cfg).unwrap();
            // Closed form of the EMA from zero.
            let expected = g * (1.0 - cfg.beta1.powi(t));
            assert!((st.m[0].data()[0] - expected).abs() < 1e-12);
        }
        assert!((st.m[0].data()[0] - g).abs() < 1e-9);
        // Bias-corrected steps have size lr in the constant-gradient regime.
        assert!((p.get("x").unwrap().data()[0] + 200.0 * 1e-3).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = store(&[
            ("a", Tensor::from_vec(vec![1.0])),
            ("enc.w", Tensor::from_vec(vec![1.0])),
        ]);
        let before = p.clone();
        let mut st = OptimizerState::new(&p);
        let err = adamw_step(
            &mut p,
            &[Some(Tensor::from_vec(vec![1.0])), Some(Tensor::from_vec(vec![f64::NAN]))],
            &mut st,
            0.1,
            0.0,
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("enc.w"));
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn missing_gradients_leave_parameters_alone() {
        let mut p = store(&[("w", Tensor::new([1, 1], vec![5.0]).unwrap())]);
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &[None], &mut st, 0.1, 0.5, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[5.0]);
    }

    #[test]
    fn schedules() {
        assert_eq!(cosine_lr(0, 10, 0.001), 0.001);
        assert!(cosine_lr(10, 10, 0.001).abs() < 1e-18);
        assert!((cosine_lr(5, 10, 0.001) - 0.0005).abs() < 1e-18);
        assert_eq!(alpha_schedule(0, 100, 0.01), 0.0);
        assert_eq!(alpha_schedule(100, 100, 0.01), 0.01);
        assert_eq!(alpha_schedule(25, 100, 0.01), 0.01 / 4.0);
    }

    #[test]
    fn state_store_round_trip() {
        let p = store(&[("w", Tensor::new([1, 2], vec![1.0, 2.0]).unwrap())]);
        let mut st = OptimizerState::new(&p);
        st.m[0] = Tensor::new([1, 2], vec![0.1, 0.2]).unwrap();
        st.step = 4;
        let back = OptimizerState::from_store(&st.to_store(&p), &p, 4).unwrap();
        assert_eq!(back, st);
    }
}
