//! Hidden-context processes: deterministic sinusoids (per-step or per-episode)
//! and a stationary AR(1) chain.

use crate::error::{CoreError, Result};
use crate::numerics::Rng;

/// How the context evolves over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextKind {
    /// `c = b + m * sin(n * t)` — varies every step.
    StepwiseSinusoid,
    /// `c = b + m * sin(n * episode)` — constant within an episode.
    EpisodicSinusoid,
    /// `c = rho_c * c_prev + eta`, `eta ~ N(0, sigma_c^2)`.
    Ar1,
}

impl ContextKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ContextKind::StepwiseSinusoid => "stepwise-sinusoid",
            ContextKind::EpisodicSinusoid => "episodic-sinusoid",
            ContextKind::Ar1 => "ar1",
        }
    }

    pub fn parse(s: &str) -> Result<ContextKind> {
        match s {
            "stepwise-sinusoid" => Ok(ContextKind::StepwiseSinusoid),
            "episodic-sinusoid" => Ok(ContextKind::EpisodicSinusoid),
            "ar1" => Ok(ContextKind::Ar1),
            other => Err(CoreError::config(format!("unknown context kind {other:?}"))),
        }
    }
}

/// Generator for the hidden context sequence; every dimension follows the same
/// law (the synthetic tasks use `dim = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct ContextProcess {
    pub kind: ContextKind,
    /// Offset b.
    pub offset: f64,
    /// Amplitude m.
    pub amplitude: f64,
    /// Frequency n (radians per step or per episode).
    pub frequency: f64,
    /// AR coefficient (ar1 only).
    pub rho_c: f64,
    /// Innovation std (ar1 only).
    pub sigma_c: f64,
    /// Context dimension d_c.
    pub dim: usize,
}

impl ContextProcess {
    pub fn stepwise(offset: f64, amplitude: f64, frequency: f64) -> ContextProcess {
        ContextProcess {
            kind: ContextKind::StepwiseSinusoid,
            offset,
            amplitude,
            frequency,
            rho_c: 0.0,
            sigma_c: 0.0,
            dim: 1,
        }
    }

    pub fn episodic(offset: f64, amplitude: f64, frequency: f64) -> ContextProcess {
        ContextProcess {
            kind: ContextKind::EpisodicSinusoid,
            offset,
            amplitude,
            frequency,
            rho_c: 0.0,
            sigma_c: 0.0,
            dim: 1,
        }
    }

    pub fn ar1(rho_c: f64, sigma_c: f64) -> ContextProcess {
        ContextProcess {
            kind: ContextKind::Ar1,
            offset: 0.0,
            amplitude: 0.0,
            frequency: 0.0,
            rho_c,
            sigma_c,
            dim: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(CoreError::config("context dim must be >= 1"));
        }
        if self.kind == ContextKind::Ar1 {
            if self.sigma_c < 0.0 {
                return Err(CoreError::config("sigma_c must be >= 0"));
            }
            if self.rho_c.abs() >= 1.0 && self.sigma_c > 0.0 {
                return Err(CoreError::config(
                    "ar1 context requires |rho_c| < 1 for stationarity",
                ));
            }
        }
        Ok(())
    }

    /// Context value at step `t` of episode `episode`.
    ///
    /// `c_prev` is required for the ar1 kind (pass zeros at an episode start)
    /// and ignored by the deterministic kinds.
    pub fn next(
        &self,
        t: usize,
        episode: usize,
        c_prev: Option<&[f64]>,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        match self.kind {
            ContextKind::StepwiseSinusoid => {
                let v = self.offset + self.amplitude * (self.frequency * t as f64).sin();
                Ok(vec![v; self.dim])
            }
            ContextKind::EpisodicSinusoid => {
                let v = self.offset + self.amplitude * (self.frequency * episode as f64).sin();
                Ok(vec![v; self.dim])
            }
            ContextKind::Ar1 => {
                let prev = c_prev.ok_or_else(|| {
                    CoreError::contract("ar1 context requires the previous value")
                })?;
                if prev.len() != self.dim {
                    return Err(CoreError::shape(format!(
                        "c_prev has {} dims, context process has {}",
                        prev.len(),
                        self.dim
                    )));
                }
                Ok(prev
                    .iter()
                    .map(|&p| {
                        let eta = if self.sigma_c > 0.0 {
                            self.sigma_c * rng.normal()
                        } else {
                            0.0
                        };
                        self.rho_c * p + eta
                    })
                    .collect())
            }
        }
    }
}
