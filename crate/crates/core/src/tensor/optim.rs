//! AdamW with decoupled weight decay, plus global gradient clipping.
//!
//! Moment math runs in f64 regardless of the parameter dtype so the update
//! rule is identical on the f32 training path and the f64 checking path.

use super::param::ParamStore;
use super::{sc, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay coefficient; applied only to parameters registered
    /// with `weight_decay = true`.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

pub struct AdamW {
    pub config: AdamWConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over every parameter, in registration order. Every
    /// parameter must carry a gradient; grads are cleared afterwards.
    pub fn step<S: Scalar>(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        if self.m.is_empty() {
            for (_, p) in store.iter() {
                self.m.push(vec![0.0; p.value.numel()]);
                self.v.push(vec![0.0; p.value.numel()]);
            }
        }
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer state built for {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        // missing-grad check first so the step is all-or-nothing
        for (_, p) in store.iter() {
            if p.grad.is_none() {
                return Err(Error::Contract(format!(
                    "parameter {:?} has no gradient at optimizer step",
                    p.name
                )));
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (idx, p) in store.iter_mut().enumerate() {
            let grad = p.grad.take().expect("checked above");
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let decay = if p.weight_decay { c.weight_decay } else { 0.0 };
            let w = p.value.data_mut();
            for j in 0..w.len() {
                let g = grad.data()[j].to_f64();
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut wj = w[j].to_f64();
                wj -= lr * decay * wj;
                wj -= lr * mhat / (vhat.sqrt() + c.eps);
                w[j] = sc(wj);
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm<S: Scalar>(store: &mut ParamStore<S>, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0f64;
    for (_, p) in store.iter() {
        let g = p.grad.as_ref().ok_or_else(|| {
            Error::Contract(format!(
                "parameter {:?} has no gradient at clip_grad_norm",
                p.name
            ))
        })?;
        for &x in g.data() {
            let xf = x.to_f64();
            sq += xf * xf;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale: S = sc(max_norm / norm);
        for p in store.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                for x in g.data_mut() {
                    *x = *x * scale;
                }
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Straight-line scalar reference of the update rule.
    fn reference_adamw(w0: f64, grads: &[f64], lr: f64, c: AdamWConfig, decay: bool) -> f64 {
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mhat = m / (1.0 - c.beta1.powi(t));
            let vhat = v / (1.0 - c.beta2.powi(t));
            if decay {
                w -= lr * c.weight_decay * w;
            }
            w -= lr * mhat / (vhat.sqrt() + c.eps);
        }
        w
    }

    fn store_with(w0: f64, decay: bool) -> (ParamStore<f64>, super::super::param::ParamId) {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", Tensor::scalar(w0), decay).unwrap();
        (store, id)
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // with a unit gradient, bias correction makes mhat = vhat = 1
        let (mut store, id) = store_with(1.0, false);
        store.accumulate_grad(id, &[1.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store, 0.1).unwrap();
        let got = store.value(id).item();
        let want = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        assert!(store.grad(id).is_none(), "grads cleared after step");
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        for decay in [false, true] {
            let (mut store, id) = store_with(0.7, decay);
            let mut opt = AdamW::new(AdamWConfig::default());
            for g in [0.3, -1.2] {
                store.accumulate_grad(id, &[g]).unwrap();
                opt.step(&mut store, 0.05).unwrap();
            }
            let want = reference_adamw(0.7, &[0.3, -1.2], 0.05, AdamWConfig::default(), decay);
            let got = store.value(id).item();
            assert!((got - want).abs() < 1e-15, "decay={decay}: {got} vs {want}");
        }
    }

    #[test]
    fn zero_grad_without_decay_leaves_weight_unchanged() {
        let (mut store, id) = store_with(2.5, false);
        store.accumulate_grad(id, &[0.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store, 0.1).unwrap();
        assert_eq!(store.value(id).item(), 2.5);
    }

    #[test]
    fn missing_grad_is_an_error_naming_the_parameter() {
        let (mut store, _) = store_with(1.0, false);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut store, 0.1).unwrap_err();
        assert!(err.to_string().contains("\"w\""), "{err}");
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut store = ParamStore::<f64>::new();
        let a = store.register("a", Tensor::zeros(vec![2]), false).unwrap();
        let b = store.register("b", Tensor::zeros(vec![1]), false).unwrap();
        store.accumulate_grad(a, &[3.0, 0.0]).unwrap();
        store.accumulate_grad(b, &[4.0]).unwrap();
        // global norm = 5
        let norm = clip_grad_norm(&mut store, 1.0).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        let total: f64 = store
            .grad(a)
            .unwrap()
            .data()
            .iter()
            .chain(store.grad(b).unwrap().data())
            .map(|g| g * g)
            .sum();
        assert!((total.sqrt() - 1.0).abs() < 1e-12, "clipped to unit norm");
        // below threshold: untouched
        let norm2 = clip_grad_norm(&mut store, 10.0).unwrap();
        assert!((norm2 - 1.0).abs() < 1e-12);
        assert_eq!(store.grad(b).unwrap().data()[0], 4.0 / 5.0);
    }
}
