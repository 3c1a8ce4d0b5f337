use std::collections::BTreeMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

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

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Adam with bias correction. Moments are keyed by parameter name so the
/// state can be checkpointed and matched back to a rebuilt model.
#[derive(Clone, Debug)]
pub struct Adam<T = f32> {
    config: AdamConfig,
    step: u64,
    slots: BTreeMap<String, AdamSlot<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn from_parts(config: AdamConfig, step: u64, slots: BTreeMap<String, AdamSlot<T>>) -> Self {
        Adam {
            config,
            step,
            slots,
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// Number of completed updates.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> &BTreeMap<String, AdamSlot<T>> {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&AdamSlot<T>> {
        self.slots.get(name)
    }

    /// Applies one update to every parameter. A parameter without a
    /// gradient buffer is treated as having a zero gradient.
    ///
    /// All gradients are checked before anything is modified; a non-finite
    /// entry rejects the whole step and names the offending parameter.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<T>)], lr: T) -> Result<()> {
        for (name, p) in params.iter() {
            if let Some(g) = p.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        layer: name.clone(),
                    });
                }
            }
            if let Some(slot) = self.slots.get(name) {
                if slot.m.len() != p.len() {
                    return Err(Error::shape(
                        "adam_step",
                        format!(
                            "state for `{name}` holds {} values, parameter has {}",
                            slot.m.len(),
                            p.len()
                        ),
                    ));
                }
            }
        }

        self.step += 1;
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let eps = T::lit(self.config.eps);
        let one = T::one();
        let t = self.step as i32;
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);

        for (name, p) in params.iter_mut() {
            let len = p.len();
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: vec![T::zero(); len],
                v: vec![T::zero(); len],
            });
            let grad = p.grad().map(|g| g.to_vec());
            let values = p.data_mut();
            for i in 0..len {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                let m = b1 * slot.m[i] + (one - b1) * g;
                let v = b2 * slot.v[i] + (one - b2) * g * g;
                slot.m[i] = m;
                slot.v[i] = v;
                let m_hat = m / c1;
                let v_hat = v / c2;
                values[i] = values[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
