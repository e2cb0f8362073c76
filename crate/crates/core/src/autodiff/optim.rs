use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::{Scalar, Tensor};
use super::TensorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            weight_decay: 0.01,
            ..Self::adam()
        }
    }
}

/// First and second moments for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
}

/// Adam / AdamW state across steps.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub config: OptimizerConfig,
    step: u64,
    moments: BTreeMap<String, Moments<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_parts(config: OptimizerConfig, step: u64, moments: BTreeMap<String, Moments<F>>) -> Self {
        Self {
            config,
            step,
            moments,
        }
    }

    /// Number of completed steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments<F>> {
        &self.moments
    }

    /// Applies one update to every parameter that has a gradient.
    ///
    /// All gradients are validated first; on a non-finite or mis-shaped
    /// gradient nothing is modified.
    pub fn step(
        &mut self,
        params: &mut ParamSet<F>,
        grads: &BTreeMap<String, Tensor<F>>,
        lr: f64,
    ) -> Result<(), TensorError> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| TensorError::Invalid {
                op: "optimizer",
                msg: format!("gradient for unknown parameter `{name}`"),
            })?;
            if p.shape() != g.shape() {
                return Err(TensorError::Shape {
                    op: "optimizer",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(TensorError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (ob1, ob2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let (bc1, bc2) = (F::of(bc1), F::of(bc2));
        let eps = F::of(c.eps);
        let lr_f = F::of(lr);
        let decay = match c.kind {
            OptimizerKind::AdamW if c.weight_decay > 0.0 => Some(F::of(lr * c.weight_decay)),
            _ => None,
        };
        for (name, g) in grads {
            let p = params.get_mut(name).expect("validated above");
            let st = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![F::zero(); g.len()],
                v: vec![F::zero(); g.len()],
            });
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                if let Some(d) = decay {
                    *w = *w - d * *w;
                }
                st.m[i] = b1 * st.m[i] + ob1 * gi;
                st.v[i] = b2 * st.v[i] + ob2 * gi * gi;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                *w = *w - lr_f * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_f64(&[1], &[v]).unwrap());
        p
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::from_f64(&[1], &[v]).unwrap())])
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = scalar_param(0.7);
        let mut st = OptimizerState::new(OptimizerConfig::adam());
        for _ in 0..5 {
            st.step(&mut p, &grad(0.0), 0.1).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[0.7]);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // m̂ = g, v̂ = g² on the first step, so the update is lr·g/(|g|+ε).
        let mut p = scalar_param(0.0);
        let mut st = OptimizerState::new(OptimizerConfig::adam());
        st.step(&mut p, &grad(1.0), 0.1).unwrap();
        let w = p.get("w").unwrap().data()[0];
        assert!((w + 0.1).abs() < 1e-8, "{w}");
    }

    #[test]
    fn adamw_decay_shrinks_without_gradient() {
        let mut p = scalar_param(2.0);
        let mut st = OptimizerState::new(OptimizerConfig::adamw());
        st.step(&mut p, &grad(0.0), 0.1).unwrap();
        let w = p.get("w").unwrap().data()[0];
        assert!(w.abs() < 2.0);
        assert!((w - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts_and_names_parameter() {
        let mut p = scalar_param(1.0);
        let mut st = OptimizerState::new(OptimizerConfig::adam());
        let err = st.step(&mut p, &grad(f64::NAN), 0.1).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(st.step_count(), 0);
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
    }
}
