//! Guidance-weight schedules `ω(t)` and the combination rule
//! `ŷ = uncond + ω (cond - uncond)`.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::norm;

fn default_outside() -> f64 {
    1.0
}

fn default_baseline() -> f64 {
    1.0
}

fn default_delta() -> f64 {
    1e-8
}

/// A guidance-weight schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GuidanceSpec {
    /// Constant weight (standard CFG).
    Fixed { omega: f64 },
    /// `ω(t) = ω₀ exp(λ (1 - t / t_max))`: grows from `ω₀` at `t_max` to
    /// `ω₀ e^λ` at `t = 0`.
    C2fg {
        omega0: f64,
        lambda: f64,
        t_max: f64,
    },
    /// `omega` on `[t_low, t_high]` (inclusive), `outside` elsewhere.
    Interval {
        omega: f64,
        t_low: f64,
        t_high: f64,
        #[serde(default = "default_outside")]
        outside: f64,
    },
    /// `omega_peak · t / t_max`.
    Linear { omega_peak: f64, t_max: f64 },
    /// `omega_peak · (1 - t / t_max)`.
    ReverseLinear { omega_peak: f64, t_max: f64 },
    /// `omega_peak · sin(π t / t_max)`.
    Sine { omega_peak: f64, t_max: f64 },
    /// `baseline + (omega_peak - baseline) · B(u) / max B` with `B` the
    /// Beta(a, b) density on reverse time `u = 1 - t / t_max`.
    BetaPdf {
        omega_peak: f64,
        a: f64,
        b: f64,
        t_max: f64,
        #[serde(default = "default_baseline")]
        baseline: f64,
    },
    /// `1 + (omega_max - 1) exp(-alpha ρ)` where `ρ` is the guidance ratio
    /// (see [`guidance_ratio`]).
    RatioAdaptive {
        omega_max: f64,
        alpha: f64,
        #[serde(default = "default_delta")]
        delta: f64,
    },
}

impl GuidanceSpec {
    pub fn fixed(omega: f64) -> Self {
        GuidanceSpec::Fixed { omega }
    }

    pub fn c2fg(omega0: f64, lambda: f64, t_max: f64) -> Self {
        GuidanceSpec::C2fg {
            omega0,
            lambda,
            t_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn finite(name: &'static str, v: f64) -> Result<()> {
            if v.is_finite() {
                Ok(())
            } else {
                Err(invalid(name, "must be finite"))
            }
        }
        fn nonneg(name: &'static str, v: f64) -> Result<()> {
            finite(name, v)?;
            if v >= 0.0 {
                Ok(())
            } else {
                Err(invalid(name, format!("must be >= 0, got {v}")))
            }
        }
        fn positive(name: &'static str, v: f64) -> Result<()> {
            finite(name, v)?;
            if v > 0.0 {
                Ok(())
            } else {
                Err(invalid(name, format!("must be > 0, got {v}")))
            }
        }
        match *self {
            GuidanceSpec::Fixed { omega } => nonneg("omega", omega),
            GuidanceSpec::C2fg {
                omega0,
                lambda,
                t_max,
            } => {
                positive("omega0", omega0)?;
                positive("lambda", lambda)?;
                positive("t_max", t_max)
            }
            GuidanceSpec::Interval {
                omega,
                t_low,
                t_high,
                outside,
            } => {
                nonneg("omega", omega)?;
                nonneg("outside", outside)?;
                nonneg("t_low", t_low)?;
                finite("t_high", t_high)?;
                if t_low < t_high {
                    Ok(())
                } else {
                    Err(invalid(
                        "t_low",
                        format!("must be < t_high ({t_low} >= {t_high})"),
                    ))
                }
            }
            GuidanceSpec::Linear { omega_peak, t_max }
            | GuidanceSpec::ReverseLinear { omega_peak, t_max }
            | GuidanceSpec::Sine { omega_peak, t_max } => {
                nonneg("omega_peak", omega_peak)?;
                positive("t_max", t_max)
            }
            GuidanceSpec::BetaPdf {
                omega_peak,
                a,
                b,
                t_max,
                baseline,
            } => {
                nonneg("omega_peak", omega_peak)?;
                nonneg("baseline", baseline)?;
                positive("t_max", t_max)?;
                // a, b < 1 make the density unbounded, so the peak normalization is undefined.
                if !(a.is_finite() && a >= 1.0) {
                    return Err(invalid("a", format!("must be >= 1, got {a}")));
                }
                if !(b.is_finite() && b >= 1.0) {
                    return Err(invalid("b", format!("must be >= 1, got {b}")));
                }
                Ok(())
            }
            GuidanceSpec::RatioAdaptive {
                omega_max,
                alpha,
                delta,
            } => {
                finite("omega_max", omega_max)?;
                if omega_max <= 1.0 {
                    return Err(invalid(
                        "omega_max",
                        format!("must be > 1, got {omega_max}"),
                    ));
                }
                positive("alpha", alpha)?;
                positive("delta", delta)
            }
        }
    }

    /// Horizon the schedule is defined on, if it has one.
    pub fn t_max(&self) -> Option<f64> {
        match *self {
            GuidanceSpec::C2fg { t_max, .. }
            | GuidanceSpec::Linear { t_max, .. }
            | GuidanceSpec::ReverseLinear { t_max, .. }
            | GuidanceSpec::Sine { t_max, .. }
            | GuidanceSpec::BetaPdf { t_max, .. } => Some(t_max),
            GuidanceSpec::Fixed { .. }
            | GuidanceSpec::Interval { .. }
            | GuidanceSpec::RatioAdaptive { .. } => None,
        }
    }

    pub fn needs_ratio(&self) -> bool {
        matches!(self, GuidanceSpec::RatioAdaptive { .. })
    }

    /// Whether `ω` carries an approximation of a formula defined elsewhere
    /// (β-CFG and RAAG shapes).
    pub fn is_approximate_form(&self) -> bool {
        matches!(
            self,
            GuidanceSpec::BetaPdf { .. } | GuidanceSpec::RatioAdaptive { .. }
        )
    }

    /// Stable short name used in artifact rows.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for GuidanceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            GuidanceSpec::Fixed { omega } => write!(f, "fixed(omega={omega})"),
            GuidanceSpec::C2fg { omega0, lambda, .. } => {
                write!(f, "c2fg(omega0={omega0},lambda={lambda})")
            }
            GuidanceSpec::Interval {
                omega,
                t_low,
                t_high,
                outside,
            } => write!(
                f,
                "interval(omega={omega},t_low={t_low},t_high={t_high},outside={outside})"
            ),
            GuidanceSpec::Linear { omega_peak, .. } => write!(f, "linear(omega_peak={omega_peak})"),
            GuidanceSpec::ReverseLinear { omega_peak, .. } => {
                write!(f, "reverse_linear(omega_peak={omega_peak})")
            }
            GuidanceSpec::Sine { omega_peak, .. } => write!(f, "sine(omega_peak={omega_peak})"),
            GuidanceSpec::BetaPdf {
                omega_peak,
                a,
                b,
                baseline,
                ..
            } => write!(
                f,
                "beta_pdf(omega_peak={omega_peak},a={a},b={b},baseline={baseline})"
            ),
            GuidanceSpec::RatioAdaptive {
                omega_max, alpha, ..
            } => write!(f, "ratio_adaptive(omega_max={omega_max},alpha={alpha})"),
        }
    }
}

fn check_range(t: f64, t_max: f64) -> Result<()> {
    if (0.0..=t_max).contains(&t) {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange {
            t,
            lower: 0.0,
            upper: t_max,
        })
    }
}

/// `u^(a-1) (1-u)^(b-1)` relative to its maximum on [0, 1]; the Beta
/// normalizing constant cancels.
fn beta_shape(u: f64, a: f64, b: f64) -> f64 {
    let log_kernel = |u: f64| -> f64 {
        let mut l = 0.0;
        if a != 1.0 {
            l += (a - 1.0) * u.ln();
        }
        if b != 1.0 {
            l += (b - 1.0) * (1.0 - u).ln();
        }
        l
    };
    let mode = if a == 1.0 && b == 1.0 {
        0.5
    } else {
        (a - 1.0) / (a + b - 2.0)
    };
    let v = (log_kernel(u) - log_kernel(mode)).exp();
    if v.is_nan() {
        0.0
    } else {
        v
    }
}

/// Guidance weight at time `t`. `ratio` must be given exactly when the spec
/// is ratio-adaptive.
pub fn omega(spec: &GuidanceSpec, t: f64, ratio: Option<f64>) -> Result<f64> {
    match (spec.needs_ratio(), ratio) {
        (true, None) => return Err(Error::MissingRatio),
        (false, Some(_)) => return Err(Error::UnexpectedRatio),
        _ => {}
    }
    if !t.is_finite() || t < 0.0 {
        return Err(Error::TimeOutOfRange {
            t,
            lower: 0.0,
            upper: spec.t_max().unwrap_or(f64::INFINITY),
        });
    }
    Ok(match *spec {
        GuidanceSpec::Fixed { omega } => omega,
        GuidanceSpec::C2fg {
            omega0,
            lambda,
            t_max,
        } => {
            check_range(t, t_max)?;
            omega0 * (lambda * (1.0 - t / t_max)).exp()
        }
        GuidanceSpec::Interval {
            omega,
            t_low,
            t_high,
            outside,
        } => {
            if (t_low..=t_high).contains(&t) {
                omega
            } else {
                outside
            }
        }
        GuidanceSpec::Linear { omega_peak, t_max } => {
            check_range(t, t_max)?;
            omega_peak * t / t_max
        }
        GuidanceSpec::ReverseLinear { omega_peak, t_max } => {
            check_range(t, t_max)?;
            omega_peak * (1.0 - t / t_max)
        }
        GuidanceSpec::Sine { omega_peak, t_max } => {
            check_range(t, t_max)?;
            omega_peak * (PI * t / t_max).sin().max(0.0)
        }
        GuidanceSpec::BetaPdf {
            omega_peak,
            a,
            b,
            t_max,
            baseline,
        } => {
            check_range(t, t_max)?;
            let u = 1.0 - t / t_max;
            baseline + (omega_peak - baseline) * beta_shape(u, a, b)
        }
        GuidanceSpec::RatioAdaptive {
            omega_max, alpha, ..
        } => {
            let rho = ratio.expect("checked above");
            if !(rho >= 0.0) {
                return Err(invalid("ratio", format!("must be >= 0, got {rho}")));
            }
            1.0 + (omega_max - 1.0) * (-alpha * rho).exp()
        }
    })
}

/// RAAG ratio `‖cond - uncond‖ / (‖uncond‖ + delta)`.
pub fn guidance_ratio(cond: &[f64], uncond: &[f64], delta: f64) -> f64 {
    let diff: f64 = cond
        .iter()
        .zip(uncond)
        .map(|(c, u)| (c - u) * (c - u))
        .sum::<f64>()
        .sqrt();
    diff / (norm(uncond) + delta)
}

/// `w · cond + (1 - w) · uncond`, which equals `uncond + w (cond - uncond)`
/// and is exact at `w = 1` and `w = 0`.
pub fn combine(cond: &[f64], uncond: &[f64], w: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; cond.len()];
    combine_into(cond, uncond, w, &mut out)?;
    Ok(out)
}

pub fn combine_into(cond: &[f64], uncond: &[f64], w: f64, out: &mut [f64]) -> Result<()> {
    if cond.len() != uncond.len() || out.len() != cond.len() {
        return Err(Error::DimensionMismatch {
            expected: cond.len(),
            actual: if uncond.len() != cond.len() {
                uncond.len()
            } else {
                out.len()
            },
        });
    }
    if !w.is_finite() {
        return Err(invalid("w", "must be finite"));
    }
    let v = 1.0 - w;
    for ((o, c), u) in out.iter_mut().zip(cond).zip(uncond) {
        *o = w * c + v * u;
    }
    Ok(())
}

/// `ε = -σ ∇log p` for `x_t = α x₀ + σ ε`.
pub fn eps_from_score(score: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(invalid("sigma", format!("must be > 0, got {sigma}")));
    }
    Ok(score.iter().map(|s| -sigma * s).collect())
}

/// Inverse of [`eps_from_score`].
pub fn score_from_eps(eps: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(invalid("sigma", format!("must be > 0, got {sigma}")));
    }
    Ok(eps.iter().map(|e| -e / sigma).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn c2fg_values() {
        let s = GuidanceSpec::c2fg(1.0, 2f64.ln(), 1.0);
        assert_eq!(omega(&s, 1.0, None).unwrap(), 1.0);
        assert!((omega(&s, 0.0, None).unwrap() - 2.0).abs() < 1e-15);
        let s = GuidanceSpec::c2fg(1.0, 0.6, 2.0);
        assert!((omega(&s, 1.0, None).unwrap() - 0.3f64.exp()).abs() < 1e-15);
        assert!((omega(&s, 1.0, None).unwrap() - 1.34986).abs() < 1e-5);
        assert!(omega(&s, 2.5, None).is_err());
    }

    #[test]
    fn interval_reverts_outside() {
        let s = GuidanceSpec::Interval {
            omega: 1.8,
            t_low: 0.0,
            t_high: 0.7,
            outside: 1.0,
        };
        assert_eq!(omega(&s, 0.9, None).unwrap(), 1.0);
        assert_eq!(omega(&s, 0.7, None).unwrap(), 1.8);
        assert_eq!(omega(&s, 0.0, None).unwrap(), 1.8);
        let bad = GuidanceSpec::Interval {
            omega: 1.8,
            t_low: 0.8,
            t_high: 0.7,
            outside: 1.0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ratio_adaptive() {
        let s = GuidanceSpec::RatioAdaptive {
            omega_max: 18.0,
            alpha: 12.0,
            delta: 1e-8,
        };
        assert_eq!(omega(&s, 0.5, Some(0.0)).unwrap(), 18.0);
        assert!(omega(&s, 0.5, Some(10.0)).unwrap() - 1.0 < 1e-40);
        assert_eq!(omega(&s, 0.5, None), Err(Error::MissingRatio));
        assert_eq!(
            omega(&GuidanceSpec::fixed(2.0), 0.5, Some(1.0)),
            Err(Error::UnexpectedRatio)
        );
        assert_eq!(guidance_ratio(&[3.0, 4.0], &[0.0, 0.0], 1.0), 5.0);
    }

    #[test]
    fn shaped_schedules() {
        let lin = GuidanceSpec::Linear {
            omega_peak: 2.0,
            t_max: 1.0,
        };
        let rev = GuidanceSpec::ReverseLinear {
            omega_peak: 2.0,
            t_max: 1.0,
        };
        let sine = GuidanceSpec::Sine {
            omega_peak: 2.0,
            t_max: 1.0,
        };
        assert_eq!(omega(&lin, 0.25, None).unwrap(), 0.5);
        assert_eq!(omega(&rev, 0.25, None).unwrap(), 1.5);
        assert!((omega(&sine, 0.5, None).unwrap() - 2.0).abs() < 1e-15);
        assert!(omega(&sine, 1.0, None).unwrap().abs() < 1e-15);
    }

    #[test]
    fn beta_pdf_shape() {
        let peak = GuidanceSpec::BetaPdf {
            omega_peak: 3.0,
            a: 2.0,
            b: 2.0,
            t_max: 1.0,
            baseline: 1.0,
        };
        assert!((omega(&peak, 0.5, None).unwrap() - 3.0).abs() < 1e-15);
        assert_eq!(omega(&peak, 0.0, None).unwrap(), 1.0);
        assert_eq!(omega(&peak, 1.0, None).unwrap(), 1.0);
        // Beta(2,2) pdf 6u(1-u), max 1.5: at u = 0.25 the ratio is 0.75
        assert!((omega(&peak, 0.75, None).unwrap() - 2.5).abs() < 1e-14);
        let mult = GuidanceSpec::BetaPdf {
            omega_peak: 1.0,
            a: 2.0,
            b: 2.0,
            t_max: 1.0,
            baseline: 0.0,
        };
        assert_eq!(omega(&mult, 1.0, None).unwrap(), 0.0);
        assert!((omega(&mult, 0.5, None).unwrap() - 1.0).abs() < 1e-15);
        let unbounded = GuidanceSpec::BetaPdf {
            omega_peak: 1.0,
            a: 0.5,
            b: 2.0,
            t_max: 1.0,
            baseline: 0.0,
        };
        assert!(unbounded.validate().is_err());
    }

    #[test]
    fn combination_examples() {
        let c = [0.3, -1.2, 7.0];
        let u = [1.1, 0.4, -2.5];
        assert_eq!(combine(&c, &u, 1.0).unwrap(), c.to_vec());
        assert_eq!(combine(&c, &u, 0.0).unwrap(), u.to_vec());
        assert_eq!(
            combine(&[2.0, 0.0], &[0.0, 0.0], 1.5).unwrap(),
            vec![3.0, 0.0]
        );
        assert!(combine(&c, &u[..2], 1.0).is_err());
    }

    #[test]
    fn eps_conversions() {
        assert_eq!(eps_from_score(&[0.0, 0.0], 0.3).unwrap(), vec![-0.0, -0.0]);
        // pure-noise marginal N(0, I): score = -x, so eps = x at sigma = 1
        let x = [0.4, -1.7];
        let score: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(eps_from_score(&score, 1.0).unwrap(), x.to_vec());
        let s = [0.123, -4.5];
        let back = score_from_eps(&eps_from_score(&s, 0.37).unwrap(), 0.37).unwrap();
        for (a, b) in back.iter().zip(&s) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }
        assert!(eps_from_score(&s, 0.0).is_err());
        assert!(score_from_eps(&s, -1.0).is_err());
    }

    #[test]
    fn labels_are_stable() {
        assert_eq!(
            GuidanceSpec::c2fg(1.0, 0.6, 1.0).label(),
            "c2fg(omega0=1,lambda=0.6)"
        );
    }
}
