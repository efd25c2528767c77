use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay.
///
/// Each step first shrinks every trainable parameter by `1 - lr·wd`, then
/// applies the bias-corrected Adam update.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamSet<T>) -> Self {
        let zeros = |e: &super::ParamEntry<T>| alloc::vec![T::zero(); e.value.len()];
        AdamW {
            config,
            first: params.entries().iter().map(zeros).collect(),
            second: params.entries().iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, slot: usize) -> &[T] {
        &self.first[slot]
    }

    pub fn second_moment(&self, slot: usize) -> &[T] {
        &self.second[slot]
    }

    /// Apply one update. `grads[slot]` is `None` for buffers and for
    /// parameters that did not take part in the forward pass; those are
    /// left untouched. Any non-finite gradient aborts the step before a
    /// single value changes.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "adamw: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (slot, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                let entry = params.entry(slot);
                if g.len() != entry.value.len() {
                    return Err(Error::InvalidArgument(format!(
                        "adamw: gradient of `{}` has {} values, parameter has {}",
                        entry.name,
                        g.len(),
                        entry.value.len()
                    )));
                }
                if g.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(entry.name.clone()));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        let decay = 1.0 - lr * c.weight_decay;
        for (slot, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !params.entry(slot).trainable {
                continue;
            }
            let p = params.value_mut(slot).data_mut();
            let m = &mut self.first[slot];
            let v = &mut self.second[slot];
            for i in 0..p.len() {
                let gi = g.data()[i].as_f64();
                let mi = c.beta1 * m[i].as_f64() + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v[i].as_f64() + (1.0 - c.beta2) * gi * gi;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let decayed = p[i].as_f64() * decay;
                p[i] = T::from_f64(decayed - lr * mhat / (libm::sqrt(vhat) + c.eps));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar_set(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v), true).unwrap();
        p
    }

    #[test]
    fn first_step_matches_hand_arithmetic() {
        let mut p = scalar_set(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &[Some(Tensor::scalar(1.0))], 1e-3).unwrap();
        // m = 0.1, v = 0.001; m̂ = 0.1 / 0.1 = 1, v̂ = 0.001 / 0.001 = 1
        // p = 1·(1 - 1e-3·0.01) - 1e-3 · 1 / (1 + 1e-8)
        let want = (1.0 - 1e-5) - 1e-3 / (1.0 + 1e-8);
        assert!((p.value(0).data()[0] - want).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
        assert!((opt.first_moment(0)[0] - 0.1).abs() < 1e-15);
        assert!((opt.second_moment(0)[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = scalar_set(2.5);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &[Some(Tensor::scalar(0.0))], 1e-3).unwrap();
        assert_eq!(p.value(0).data()[0], 2.5 * (1.0 - 1e-3 * 0.01));
    }

    #[test]
    fn second_step_bias_correction() {
        let mut p = scalar_set(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        let g = [Some(Tensor::scalar(0.5))];
        opt.step(&mut p, &g, 1e-2).unwrap();
        let after1 = p.value(0).data()[0];
        opt.step(&mut p, &g, 1e-2).unwrap();
        // Step 2: m = 0.9·0.05 + 0.1·0.5 = 0.095, v = 0.999·0.00025 + 0.001·0.25 = 0.00049975
        // m̂ = 0.095 / (1 - 0.81) = 0.5, v̂ = 0.00049975 / (1 - 0.998001) = 0.25
        let m: f64 = 0.095;
        let v: f64 = 0.000_499_75;
        let mhat = m / (1.0 - 0.81);
        let vhat = v / (1.0 - 0.998_001);
        assert!((mhat - 0.5).abs() < 1e-12);
        assert!((vhat - 0.25).abs() < 1e-12);
        let want = after1 - 1e-2 * mhat / (libm::sqrt(vhat) + 1e-8);
        assert!((p.value(0).data()[0] - want).abs() < 1e-14);
        // The uncorrected second moment differs between the steps.
        assert!((opt.second_moment(0)[0] - v).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_changes_nothing() {
        let mut p = ParamSet::<f64>::new();
        p.insert("ok", Tensor::scalar(1.0), true).unwrap();
        p.insert("bad", Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let grads = [Some(Tensor::scalar(1.0)), Some(Tensor::vector(vec![0.0, f64::NAN]))];
        match opt.step(&mut p, &grads, 1e-3) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "bad"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p.value(0).data()[0], 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut p = ParamSet::<f64>::new();
        p.insert("running_mean", Tensor::scalar(3.0), false).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &[Some(Tensor::scalar(1.0))], 1e-3).unwrap();
        assert_eq!(p.value(0).data()[0], 3.0);
    }
}
