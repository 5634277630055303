//! Adam optimizer with bias correction, keyed by parameter name so one state
//! object follows one network through training.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::numerics::nn::ParamVisit;

/// First/second-moment state plus hyperparameters for one parameter group.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    /// Standard betas (0.9, 0.999) and eps 1e-8.
    pub fn new(lr: f64) -> AdamState {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter reachable from `net` under
    /// `prefix`, reading gradients by name from `grads` (missing names are
    /// treated as zero gradient). The step counter advances once per call.
    pub fn step(
        &mut self,
        net: &mut dyn ParamVisit,
        prefix: &str,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let (m_all, v_all) = (&mut self.m, &mut self.v);

        let mut failure: Option<CoreError> = None;
        net.visit_mut(prefix, &mut |name, tensor| {
            if failure.is_some() {
                return;
            }
            let n = tensor.len();
            let zero = vec![0.0; n];
            let g = grads.get(name).map(|v| v.as_slice()).unwrap_or(&zero);
            if g.len() != n {
                failure = Some(CoreError::shape(format!(
                    "gradient for {name} has {} elements, parameter has {n}",
                    g.len()
                )));
                return;
            }
            if g.iter().any(|x| !x.is_finite()) {
                failure = Some(CoreError::numeric(format!(
                    "non-finite gradient for {name}"
                )));
                return;
            }
            let m = m_all.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = v_all.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let data = tensor.data_mut();
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
