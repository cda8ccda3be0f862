//! Forward-process noise schedules.
//!
//! A VP schedule perturbs data as `x_t = α(t) x_0 + σ(t) ξ` with
//! `α(t) = exp(-½ ∫₀ᵗ β)` and `σ(t)² = 1 - α(t)²`. A VE schedule keeps
//! `α ≡ 1` and grows `σ_t` geometrically between `sigma_min` and `sigma_max`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Forward diffusion parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseSchedule {
    /// `β(t) = beta_min + (beta_max - beta_min) t / t_max`.
    VpLinear {
        beta_min: f64,
        beta_max: f64,
        t_max: f64,
    },
    /// `β(t) ≡ beta`. With `beta = 2` this is the canonical OU process
    /// `dx = -x dt + √2 dw`.
    VpConstant { beta: f64, t_max: f64 },
    /// `σ_t = sigma_min (sigma_max / sigma_min)^(t / t_max)`.
    VeGeometric {
        sigma_min: f64,
        sigma_max: f64,
        t_max: f64,
    },
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::VpLinear {
            beta_min: 0.1,
            beta_max: 20.0,
            t_max: 1.0,
        }
    }
}

impl NoiseSchedule {
    pub fn vp_linear(beta_min: f64, beta_max: f64, t_max: f64) -> Result<Self> {
        let s = NoiseSchedule::VpLinear {
            beta_min,
            beta_max,
            t_max,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn vp_constant(beta: f64, t_max: f64) -> Result<Self> {
        let s = NoiseSchedule::VpConstant { beta, t_max };
        s.validate()?;
        Ok(s)
    }

    pub fn ve_geometric(sigma_min: f64, sigma_max: f64, t_max: f64) -> Result<Self> {
        let s = NoiseSchedule::VeGeometric {
            sigma_min,
            sigma_max,
            t_max,
        };
        s.validate()?;
        Ok(s)
    }

    /// The reparameterized OU process `dx = -x dt + √2 dw` (β ≡ 2).
    pub fn canonical_ou(t_max: f64) -> Result<Self> {
        Self::vp_constant(2.0, t_max)
    }

    pub fn validate(&self) -> Result<()> {
        let t_max = self.t_max();
        if !(t_max.is_finite() && t_max > 0.0) {
            return Err(invalid(
                "t_max",
                format!("must be finite and > 0, got {t_max}"),
            ));
        }
        match *self {
            NoiseSchedule::VpLinear {
                beta_min, beta_max, ..
            } => {
                if !(beta_min.is_finite() && beta_min >= 0.0) {
                    return Err(invalid("beta_min", "must be finite and >= 0"));
                }
                if !(beta_max.is_finite() && beta_max >= beta_min && beta_max > 0.0) {
                    return Err(invalid("beta_max", "must be finite, >= beta_min and > 0"));
                }
            }
            NoiseSchedule::VpConstant { beta, .. } => {
                if !(beta.is_finite() && beta > 0.0) {
                    return Err(invalid("beta", "must be finite and > 0"));
                }
            }
            NoiseSchedule::VeGeometric {
                sigma_min,
                sigma_max,
                ..
            } => {
                if !(sigma_min.is_finite() && sigma_min > 0.0) {
                    return Err(invalid("sigma_min", "must be finite and > 0"));
                }
                if !(sigma_max.is_finite() && sigma_max > sigma_min) {
                    return Err(invalid("sigma_max", "must be finite and > sigma_min"));
                }
            }
        }
        Ok(())
    }

    pub fn t_max(&self) -> f64 {
        match *self {
            NoiseSchedule::VpLinear { t_max, .. }
            | NoiseSchedule::VpConstant { t_max, .. }
            | NoiseSchedule::VeGeometric { t_max, .. } => t_max,
        }
    }

    pub fn is_vp(&self) -> bool {
        !matches!(self, NoiseSchedule::VeGeometric { .. })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            NoiseSchedule::VpLinear { .. } => "vp-linear",
            NoiseSchedule::VpConstant { .. } => "vp-constant",
            NoiseSchedule::VeGeometric { .. } => "ve-geometric",
        }
    }

    pub(crate) fn check_time(&self, t: f64) -> Result<()> {
        let t_max = self.t_max();
        if !(0.0..=t_max).contains(&t) {
            return Err(Error::TimeOutOfRange {
                t,
                lower: 0.0,
                upper: t_max,
            });
        }
        Ok(())
    }

    fn require_vp(&self) -> Result<()> {
        if self.is_vp() {
            Ok(())
        } else {
            Err(Error::KindMismatch {
                expected: "a VP schedule",
                actual: self.kind_name(),
            })
        }
    }

    fn require_ve(&self) -> Result<()> {
        if self.is_vp() {
            Err(Error::KindMismatch {
                expected: "a VE schedule",
                actual: self.kind_name(),
            })
        } else {
            Ok(())
        }
    }

    /// `∫₀ᵗ β(r) dr` for VP kinds, in closed form.
    fn integrated_beta(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::VpLinear {
                beta_min,
                beta_max,
                t_max,
            } => beta_min * t + 0.5 * (beta_max - beta_min) * t * t / t_max,
            NoiseSchedule::VpConstant { beta, .. } => beta * t,
            NoiseSchedule::VeGeometric { .. } => unreachable!("VE schedules have no β"),
        }
    }

    /// Instantaneous `β(t)` of a VP schedule.
    pub fn beta(&self, t: f64) -> Result<f64> {
        self.require_vp()?;
        self.check_time(t)?;
        Ok(match *self {
            NoiseSchedule::VpLinear {
                beta_min,
                beta_max,
                t_max,
            } => beta_min + (beta_max - beta_min) * t / t_max,
            NoiseSchedule::VpConstant { beta, .. } => beta,
            NoiseSchedule::VeGeometric { .. } => unreachable!(),
        })
    }

    /// `(α(t), σ(t))` of a VP schedule.
    pub fn vp_coefficients(&self, t: f64) -> Result<(f64, f64)> {
        self.require_vp()?;
        self.check_time(t)?;
        let b = self.integrated_beta(t);
        let alpha = (-0.5 * b).exp();
        let sigma = (-(-b).exp_m1()).sqrt();
        Ok((alpha, sigma))
    }

    /// `σ_t` of a VE schedule.
    pub fn ve_sigma(&self, t: f64) -> Result<f64> {
        self.require_ve()?;
        self.check_time(t)?;
        Ok(self.ve_sigma_unchecked(t))
    }

    fn ve_sigma_unchecked(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::VeGeometric {
                sigma_min,
                sigma_max,
                t_max,
            } => sigma_min * ((sigma_max / sigma_min).ln() * t / t_max).exp(),
            _ => unreachable!(),
        }
    }

    /// Mean scale and noise scale of the perturbation kernel, for either kind
    /// (`α ≡ 1` for VE).
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        if self.is_vp() {
            self.vp_coefficients(t)
        } else {
            Ok((1.0, self.ve_sigma(t)?))
        }
    }

    /// Harnack time `s(t)`: `½ ∫₀ᵗ β` for VP, `½ σ_t²` for VE.
    pub fn reparam_time(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        if self.is_vp() {
            Ok(0.5 * self.integrated_beta(t))
        } else {
            let s = self.ve_sigma_unchecked(t);
            Ok(0.5 * s * s)
        }
    }

    /// Forward SDE coefficients `(f(t), g(t)²)` for `dx = f(t) x dt + g(t) dw`.
    pub fn sde_coefficients(&self, t: f64) -> Result<(f64, f64)> {
        self.check_time(t)?;
        match *self {
            NoiseSchedule::VeGeometric {
                sigma_min,
                sigma_max,
                t_max,
            } => {
                let s = self.ve_sigma_unchecked(t);
                Ok((0.0, 2.0 * s * s * (sigma_max / sigma_min).ln() / t_max))
            }
            _ => {
                let beta = self.beta(t)?;
                Ok((-0.5 * beta, beta))
            }
        }
    }

    /// Envelope of the score-discrepancy bound without the constant:
    /// `α(t)/σ(t)²` (VP) or `1/σ(t)²` (VE).
    pub fn bound_envelope(&self, t: f64) -> Result<f64> {
        let (alpha, sigma) = self.alpha_sigma(t)?;
        if sigma == 0.0 {
            return Err(Error::DegenerateDensity(format!(
                "bound envelope is singular at t = {t}"
            )));
        }
        Ok(alpha / (sigma * sigma))
    }

    /// Discrete `ᾱ_i = α(t_i)²` and `σ_i` for the DDIM recursion.
    pub fn coefficient_table(&self, times: &[f64]) -> Result<CoefficientTable> {
        self.require_vp()?;
        if times.is_empty() {
            return Err(Error::Empty("coefficient table times"));
        }
        for (i, w) in times.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::NonAscendingTimes { index: i + 1 });
            }
        }
        let mut alpha_bar = Vec::with_capacity(times.len());
        let mut sigma = Vec::with_capacity(times.len());
        for &t in times {
            let (a, s) = self.vp_coefficients(t)?;
            alpha_bar.push(a * a);
            sigma.push(s);
        }
        if let Some(i) = alpha_bar.windows(2).position(|w| w[1] >= w[0]) {
            return Err(invalid(
                "times",
                format!("alpha_bar is not strictly decreasing at index {}", i + 1),
            ));
        }
        Ok(CoefficientTable {
            times: times.to_vec(),
            alpha_bar,
            sigma,
        })
    }
}

/// Per-time DDIM coefficients, ascending in time.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTable {
    times: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl CoefficientTable {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}
