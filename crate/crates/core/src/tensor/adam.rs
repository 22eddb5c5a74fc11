//! Adam with bias correction, over the trainable entries of a [`ParamSet`].

use std::collections::BTreeMap;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("adam: learning rate must be > 0".into()));
        }
        for (v, name) in [(self.beta1, "beta1"), (self.beta2, "beta2")] {
            if !(0.0 < v && v < 1.0) {
                return Err(Error::Config(format!("adam: {name} must be in (0,1)")));
            }
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("adam: epsilon must be > 0".into()));
        }
        Ok(())
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First/second moment accumulators plus the shared step count.
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    /// Fresh state with zero moments for every trainable parameter.
    pub fn new(config: AdamConfig, params: &ParamSet) -> Result<AdamState> {
        config.validate()?;
        let mut moments = BTreeMap::new();
        for (name, t) in params.trainable() {
            let n = t.numel();
            moments.insert(
                name.to_string(),
                Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                },
            );
        }
        Ok(AdamState {
            config,
            step: 0,
            moments,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One descent step over every trainable parameter. Parameters with no
    /// populated gradient are treated as having zero gradient. Rejects
    /// non-finite gradients and non-finite updated values, naming the
    /// offending parameter; the step count does not advance on rejection.
    pub fn step(&mut self, params: &ParamSet) -> Result<()> {
        let zeros: Vec<f64> = Vec::new();
        // Validate every gradient before touching any state so a rejected
        // step leaves parameters and moments untouched.
        for (name, t) in params.trainable() {
            if let Some(g) = t.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of `{name}`")));
                }
            }
        }
        let t_next = self.step + 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t_next as i32);
        let bc2 = 1.0 - c.beta2.powi(t_next as i32);
        for (name, tensor) in params.trainable() {
            let grad = tensor.grad();
            let g = grad.as_deref().unwrap_or(&zeros);
            let mom = self
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("adam: unknown parameter `{name}`")))?;
            let mut data = tensor.to_vec();
            for i in 0..data.len() {
                let gi = if g.is_empty() { 0.0 } else { g[i] };
                mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * gi;
                mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                data[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                if !data[i].is_finite() {
                    return Err(Error::NonFinite(format!("parameter `{name}` after update")));
                }
            }
            tensor.set_data(data)?;
        }
        self.step = t_next;
        Ok(())
    }

    /// Export moments as named tensors (`m.<param>`, `v.<param>`) for
    /// checkpointing.
    pub fn export(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, mom) in &self.moments {
            out.insert(
                &format!("m.{name}"),
                Tensor::from_data(&[mom.m.len()], mom.m.clone()).unwrap(),
                false,
            );
            out.insert(
                &format!("v.{name}"),
                Tensor::from_data(&[mom.v.len()], mom.v.clone()).unwrap(),
                false,
            );
        }
        out
    }

    /// Rebuild state from exported moments.
    pub fn import(
        config: AdamConfig,
        params: &ParamSet,
        step: u64,
        exported: &ParamSet,
    ) -> Result<AdamState> {
        let mut state = AdamState::new(config, params)?;
        state.step = step;
        for (name, mom) in state.moments.iter_mut() {
            let m = exported
                .get(&format!("m.{name}"))
                .ok_or_else(|| Error::FileFormat(format!("missing moment m.{name}")))?;
            let v = exported
                .get(&format!("v.{name}"))
                .ok_or_else(|| Error::FileFormat(format!("missing moment v.{name}")))?;
            if m.numel() != mom.m.len() || v.numel() != mom.v.len() {
                return Err(Error::FileFormat(format!("moment shape mismatch for {name}")));
            }
            mom.m = m.to_vec();
            mom.v = v.to_vec();
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::param(&[1], vec![value]).unwrap(), true);
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let params = single_param(1.5);
        let mut state = AdamState::new(AdamConfig::default(), &params).unwrap();
        state.step(&params).unwrap();
        assert_eq!(params.get("theta").unwrap().to_vec(), vec![1.5]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // With constant gradient, bias-corrected Adam's first update is
        // lr * g / (|g| + eps) which is lr up to eps.
        let params = single_param(0.0);
        let cfg = AdamConfig {
            learning_rate: 1e-3,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(cfg, &params).unwrap();
        params.get("theta").unwrap().accumulate_grad(&[1.0]);
        state.step(&params).unwrap();
        let v = params.get("theta").unwrap().to_vec()[0];
        assert!((v.abs() - 1e-3).abs() < 1e-9, "step magnitude {v}");
        assert!(v < 0.0, "descent against positive gradient");
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // minimize (theta - 3)^2 from theta = 0
        let params = single_param(0.0);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let mut state = AdamState::new(cfg, &params).unwrap();
        for _ in 0..500 {
            params.zero_grads();
            let theta = params.get("theta").unwrap();
            let loss_in = theta.add_scalar(-3.0);
            let loss = loss_in.mul(&loss_in).unwrap().sum_all();
            loss.backward().unwrap();
            state.step(&params).unwrap();
        }
        let v = params.get("theta").unwrap().to_vec()[0];
        assert!((v - 3.0).abs() < 1e-3, "theta = {v}");
        assert_eq!(state.step_count(), 500);
    }

    #[test]
    fn non_finite_gradient_is_rejected_with_name() {
        let params = single_param(1.0);
        let mut state = AdamState::new(AdamConfig::default(), &params).unwrap();
        params.get("theta").unwrap().accumulate_grad(&[f64::NAN]);
        let err = state.step(&params).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("theta"), "error should name the parameter: {msg}");
        assert_eq!(state.step_count(), 0);
        assert_eq!(params.get("theta").unwrap().to_vec(), vec![1.0]);
    }

    #[test]
    fn export_import_roundtrip() {
        let params = single_param(0.5);
        let mut state = AdamState::new(AdamConfig::default(), &params).unwrap();
        params.get("theta").unwrap().accumulate_grad(&[0.3]);
        state.step(&params).unwrap();
        let exported = state.export();
        let restored =
            AdamState::import(AdamConfig::default(), &params, state.step_count(), &exported)
                .unwrap();
        assert_eq!(restored.step_count(), 1);
        assert_eq!(
            restored.moments.get("theta").unwrap().m,
            state.moments.get("theta").unwrap().m
        );
    }
}
