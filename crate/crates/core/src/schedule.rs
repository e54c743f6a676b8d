//! Diffusion noise schedules.
//!
//! Timesteps are 1-indexed: `t = 1..=T` are the reverse steps and `t = 0`
//! denotes clean data, with `alpha_bar(0) = 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;
const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Linear => f.write_str("linear"),
            ScheduleKind::Cosine => f.write_str("cosine"),
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Which reverse-step standard deviation to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaVariant {
    /// `sigma_t = sqrt(beta_t)`
    Beta,
    /// `sigma_t = sqrt(beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t))`
    #[default]
    BetaTilde,
}

impl fmt::Display for SigmaVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SigmaVariant::Beta => f.write_str("beta"),
            SigmaVariant::BetaTilde => f.write_str("beta_tilde"),
        }
    }
}

impl FromStr for SigmaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SigmaVariant::Beta),
            "beta_tilde" => Ok(SigmaVariant::BetaTilde),
            other => Err(Error::invalid(format!("unknown sigma variant `{other}`"))),
        }
    }
}

/// Per-timestep coefficients of a discrete diffusion process. Immutable once
/// built.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    steps: usize,
    // index 0 is a placeholder so that `beta[t]` matches the 1-indexed t
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let mut beta = vec![0.0; steps + 1];
        match kind {
            ScheduleKind::Linear => {
                for (t, b) in beta.iter_mut().enumerate().skip(1) {
                    let frac = if steps == 1 {
                        0.0
                    } else {
                        (t - 1) as f64 / (steps - 1) as f64
                    };
                    *b = LINEAR_BETA_START + frac * (LINEAR_BETA_END - LINEAR_BETA_START);
                }
            }
            ScheduleKind::Cosine => {
                let f = |u: f64| {
                    let c = ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos();
                    c * c
                };
                for (t, b) in beta.iter_mut().enumerate().skip(1) {
                    let prev = f((t - 1) as f64 / steps as f64);
                    let cur = f(t as f64 / steps as f64);
                    *b = (1.0 - cur / prev).min(MAX_BETA);
                }
            }
        }

        let mut alpha = vec![1.0; steps + 1];
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }

        Ok(Self { kind, steps, beta, alpha, alpha_bar })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of reverse steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check_reverse(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::TimestepOutOfRange { t, min: 1, max: self.steps });
        }
        Ok(())
    }

    fn check_any(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::TimestepOutOfRange { t, min: 0, max: self.steps });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_reverse(t)?;
        Ok(self.beta[t])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_reverse(t)?;
        Ok(self.alpha[t])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_any(t)?;
        Ok(self.alpha_bar[t])
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`: the scale applied to the
    /// data and the standard deviation of the injected noise in `q(x_t | x_0)`.
    pub fn marginal_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_any(t)?;
        let ab = self.alpha_bar[t];
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    pub fn posterior_sigma(&self, t: usize, variant: SigmaVariant) -> Result<f64> {
        self.check_reverse(t)?;
        let beta = self.beta[t];
        Ok(match variant {
            SigmaVariant::Beta => beta.sqrt(),
            SigmaVariant::BetaTilde => {
                (beta * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])).max(0.0).sqrt()
            }
        })
    }

    /// All coefficients as CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha,alpha_bar,sigma_beta,sigma_beta_tilde\n");
        out.push_str(&format!("0,0,1,{},0,0\n", self.alpha_bar[0]));
        for t in 1..=self.steps {
            let sb = self.posterior_sigma(t, SigmaVariant::Beta).unwrap();
            let st = self.posterior_sigma(t, SigmaVariant::BetaTilde).unwrap();
            out.push_str(&format!(
                "{t},{},{},{},{sb},{st}\n",
                self.beta[t], self.alpha[t], self.alpha_bar[t]
            ));
        }
        out
    }

    /// Short identifier used in provenance records, e.g. `cosine:1000`.
    pub fn label(&self) -> String {
        format!("{}:{}", self.kind, self.steps)
    }
}
