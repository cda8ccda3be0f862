//! Forward sampling and guided reverse-time generation.
//!
//! Three generators share one driver:
//!
//! - `reverse_sde`: Euler–Maruyama on `dx = [f x - g² s] dt + g dw̄`,
//! - `pf_ode`: explicit Euler (or midpoint) on `dx = [f x - ½ g² s] dt`,
//! - `ddim`: the deterministic recursion on `ε̂`, `x̂₀ = (x - √(1-ᾱ) ε̂)/√ᾱ`,
//!   `x' = √ᾱ' x̂₀ + √(1-ᾱ') ε̂`,
//!
//! where `s` (or `ε̂`) is the guided combination of the conditional and
//! unconditional analytic scores. Trajectory `j` draws all of its randomness
//! from stream `j` of the batch seed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::guidance::{combine_into, guidance_ratio, omega, GuidanceSpec};
use crate::linalg::SampleMatrix;
use crate::mixtures::{ClassId, DiffusedPair, LabeledDistribution, ScorePair};
use crate::rng::{fill_normal, substream};
use crate::schedule::NoiseSchedule;
use crate::T0_CUTOFF;

/// Any coordinate beyond this magnitude counts as divergence.
const DIVERGENCE_CAP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    ReverseSde,
    PfOde,
    Ddim,
}

impl SamplerKind {
    pub fn name(&self) -> &'static str {
        match self {
            SamplerKind::ReverseSde => "reverse_sde",
            SamplerKind::PfOde => "pf_ode",
            SamplerKind::Ddim => "ddim",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeGrid {
    Uniform,
    Geometric,
}

/// Reverse-time integration settings. Unset fields resolve per kind: the
/// start defaults to `t_max`; the end to the 0.05 cutoff (or 0 for DDIM on
/// atom-free distributions); the grid to geometric for the score-based
/// kinds and uniform for DDIM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<TimeGrid>,
    /// Explicit midpoint rule instead of Euler (pf_ode only).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub midpoint: bool,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, steps: usize) -> Self {
        SamplerConfig {
            kind,
            steps,
            t_start: None,
            t_end: None,
            grid: None,
            midpoint: false,
        }
    }

    pub fn with_midpoint(mut self) -> Self {
        self.midpoint = true;
        self
    }

    pub fn with_t_end(mut self, t_end: f64) -> Self {
        self.t_end = Some(t_end);
        self
    }

    pub fn with_t_start(mut self, t_start: f64) -> Self {
        self.t_start = Some(t_start);
        self
    }

    pub fn with_grid(mut self, grid: TimeGrid) -> Self {
        self.grid = Some(grid);
        self
    }

    /// Descending time grid `t_start = t₀ > … > t_steps = t_end`.
    pub fn time_grid(&self, schedule: &NoiseSchedule, has_atoms: bool) -> Result<Vec<f64>> {
        if self.steps == 0 {
            return Err(invalid("steps", "must be at least 1"));
        }
        if self.midpoint && self.kind != SamplerKind::PfOde {
            return Err(invalid("midpoint", "only available for pf_ode"));
        }
        if self.kind == SamplerKind::Ddim && !schedule.is_vp() {
            return Err(Error::KindMismatch {
                expected: "a VP schedule (ddim)",
                actual: schedule.kind_name(),
            });
        }
        let t_max = schedule.t_max();
        let t_start = self.t_start.unwrap_or(t_max);
        if !(t_start > 0.0 && t_start <= t_max) {
            return Err(Error::TimeOutOfRange {
                t: t_start,
                lower: 0.0,
                upper: t_max,
            });
        }
        let zero_ok = self.kind == SamplerKind::Ddim && !has_atoms;
        let t_end = self.t_end.unwrap_or(if zero_ok { 0.0 } else { T0_CUTOFF });
        let floor = if zero_ok { 0.0 } else { T0_CUTOFF };
        if !(t_end >= floor) {
            return Err(invalid(
                "t_end",
                format!("{t_end} is below the admissible cutoff {floor}"),
            ));
        }
        if !(t_end < t_start) {
            return Err(invalid(
                "t_end",
                format!("must be < t_start ({t_end} >= {t_start})"),
            ));
        }
        let grid = self.grid.unwrap_or(match self.kind {
            SamplerKind::Ddim => TimeGrid::Uniform,
            _ => TimeGrid::Geometric,
        });
        let n = self.steps;
        let mut times: Vec<f64> = match grid {
            TimeGrid::Uniform => (0..=n)
                .map(|i| t_start - (t_start - t_end) * i as f64 / n as f64)
                .collect(),
            TimeGrid::Geometric => {
                if t_end <= 0.0 {
                    return Err(invalid("grid", "a geometric grid needs t_end > 0"));
                }
                let ratio = (t_end / t_start).ln();
                (0..=n)
                    .map(|i| t_start * (ratio * i as f64 / n as f64).exp())
                    .collect()
            }
        };
        times[0] = t_start;
        times[n] = t_end;
        Ok(times)
    }
}

/// Generated or forward-sampled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub samples: SampleMatrix,
    pub target_class: Option<ClassId>,
    pub guidance: Option<GuidanceSpec>,
    pub seed: u64,
    pub trajectory_times: Option<Vec<f64>>,
}

/// Per-step state across all trajectories, recorded before the update at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub x: SampleMatrix,
    pub score_cond: SampleMatrix,
    pub score_uncond: SampleMatrix,
    /// One weight per trajectory (constant unless ratio-adaptive).
    pub omega: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub records: Vec<StepRecord>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// `n` i.i.d. draws from the exact marginal of `dist0` at time `t`.
pub fn forward_sample(
    dist0: &LabeledDistribution,
    schedule: &NoiseSchedule,
    t: f64,
    n: usize,
    seed: u64,
) -> Result<SampleBatch> {
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    let mix = dist0.diffuse(schedule, t, None)?;
    Ok(SampleBatch {
        samples: mix.sample(n, seed),
        target_class: None,
        guidance: None,
        seed,
        trajectory_times: None,
    })
}

/// Guided generation of `n` samples of the target class of `pair`.
pub fn generate(
    pair: &ScorePair,
    schedule: &NoiseSchedule,
    guidance: &GuidanceSpec,
    config: &SamplerConfig,
    n: usize,
    seed: u64,
) -> Result<SampleBatch> {
    run(pair, schedule, guidance, config, n, seed, false).map(|(b, _)| b)
}

/// As [`generate`], also returning the per-step trace.
pub fn generate_with_trace(
    pair: &ScorePair,
    schedule: &NoiseSchedule,
    guidance: &GuidanceSpec,
    config: &SamplerConfig,
    n: usize,
    seed: u64,
) -> Result<(SampleBatch, Trace)> {
    run(pair, schedule, guidance, config, n, seed, true)
        .map(|(b, t)| (b, t.expect("trace requested")))
}

/// Scores and coefficients at one evaluation time.
struct Stage {
    t: f64,
    sigma: f64,
    f: f64,
    g2: f64,
    pair: DiffusedPair,
    /// `None` for ratio-adaptive guidance (per-trajectory weight).
    omega: Option<f64>,
}

impl Stage {
    fn new(
        pair: &ScorePair,
        schedule: &NoiseSchedule,
        guidance: &GuidanceSpec,
        t: f64,
    ) -> Result<Self> {
        let (f, g2) = schedule.sde_coefficients(t)?;
        Ok(Stage {
            t,
            sigma: schedule.alpha_sigma(t)?.1,
            f,
            g2,
            pair: pair.at(schedule, t)?,
            omega: if guidance.needs_ratio() {
                None
            } else {
                Some(omega(guidance, t, None)?)
            },
        })
    }

    /// Fills both scores at `x` and returns the guidance weight.
    fn scores(
        &self,
        x: &[f64],
        sc: &mut [f64],
        su: &mut [f64],
        guidance: &GuidanceSpec,
    ) -> Result<f64> {
        self.pair.scores_into(x, sc, su)?;
        match (self.omega, guidance) {
            (Some(w), _) => Ok(w),
            (None, GuidanceSpec::RatioAdaptive { delta, .. }) => {
                // evaluated on ε = -σ s, so `delta` keeps its scale
                let ec: Vec<f64> = sc.iter().map(|v| -self.sigma * v).collect();
                let eu: Vec<f64> = su.iter().map(|v| -self.sigma * v).collect();
                omega(guidance, self.t, Some(guidance_ratio(&ec, &eu, *delta)))
            }
            (None, _) => Err(Error::MissingRatio),
        }
    }
}

/// Precomputed per-step quantities shared by all trajectories.
struct Step {
    stage: Stage,
    /// Half-step stage of the midpoint rule.
    mid: Option<Stage>,
    update: Update,
}

enum Update {
    /// Explicit step of size `h`.
    Euler { h: f64, noise: bool },
    Ddim {
        sqrt_ab: f64,
        sqrt_ab_next: f64,
        sigma_next: f64,
    },
}

/// State, conditional score, unconditional score and weight at one step.
type StepState = (Vec<f64>, Vec<f64>, Vec<f64>, f64);

struct TrajectoryOutput {
    x: Vec<f64>,
    trace: Option<Vec<StepState>>,
}

fn run(
    pair: &ScorePair,
    schedule: &NoiseSchedule,
    guidance: &GuidanceSpec,
    config: &SamplerConfig,
    n: usize,
    seed: u64,
    want_trace: bool,
) -> Result<(SampleBatch, Option<Trace>)> {
    schedule.validate()?;
    guidance.validate()?;
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    let times = config.time_grid(schedule, pair.has_atoms())?;
    let steps = build_steps(
        pair,
        schedule,
        guidance,
        config.kind,
        config.midpoint,
        &times,
    )?;
    let dim = pair.dim();
    let prior_scale = if schedule.is_vp() {
        1.0
    } else {
        schedule.alpha_sigma(times[0])?.1
    };

    let outputs: Vec<TrajectoryOutput> = (0..n)
        .into_par_iter()
        .map(|j| run_trajectory(j, seed, dim, prior_scale, &steps, guidance, want_trace))
        .collect::<Result<Vec<_>>>()?;

    let mut samples = SampleMatrix::zeros(n, dim);
    for (j, out) in outputs.iter().enumerate() {
        samples.row_mut(j).copy_from_slice(&out.x);
    }
    let trace = if want_trace {
        let mut records = Vec::with_capacity(steps.len());
        for (i, step) in steps.iter().enumerate() {
            let mut x = SampleMatrix::zeros(n, dim);
            let mut sc = SampleMatrix::zeros(n, dim);
            let mut su = SampleMatrix::zeros(n, dim);
            let mut om = Vec::with_capacity(n);
            for (j, out) in outputs.iter().enumerate() {
                let (xi, ci, ui, wi) = &out.trace.as_ref().unwrap()[i];
                x.row_mut(j).copy_from_slice(xi);
                sc.row_mut(j).copy_from_slice(ci);
                su.row_mut(j).copy_from_slice(ui);
                om.push(*wi);
            }
            records.push(StepRecord {
                t: step.stage.t,
                x,
                score_cond: sc,
                score_uncond: su,
                omega: om,
            });
        }
        Some(Trace { records })
    } else {
        None
    };
    let batch = SampleBatch {
        samples,
        target_class: Some(pair.target().clone()),
        guidance: Some(guidance.clone()),
        seed,
        trajectory_times: want_trace.then(|| times.clone()),
    };
    Ok((batch, trace))
}

fn build_steps(
    pair: &ScorePair,
    schedule: &NoiseSchedule,
    guidance: &GuidanceSpec,
    kind: SamplerKind,
    midpoint: bool,
    times: &[f64],
) -> Result<Vec<Step>> {
    let table = if kind == SamplerKind::Ddim {
        let ascending: Vec<f64> = times.iter().rev().copied().collect();
        Some(schedule.coefficient_table(&ascending)?)
    } else {
        None
    };
    let n_steps = times.len() - 1;
    (0..n_steps)
        .into_par_iter()
        .map(|i| {
            let t = times[i];
            let h = t - times[i + 1];
            let (update, mid) = match kind {
                SamplerKind::ReverseSde | SamplerKind::PfOde => {
                    let noise = kind == SamplerKind::ReverseSde;
                    let mid = if midpoint {
                        Some(Stage::new(pair, schedule, guidance, t - 0.5 * h)?)
                    } else {
                        None
                    };
                    (Update::Euler { h, noise }, mid)
                }
                SamplerKind::Ddim => {
                    // table is ascending: time index i sits at n_steps - i
                    let tab = table.as_ref().unwrap();
                    let k = n_steps - i;
                    let update = Update::Ddim {
                        sqrt_ab: tab.alpha_bar()[k].sqrt(),
                        sqrt_ab_next: tab.alpha_bar()[k - 1].sqrt(),
                        sigma_next: tab.sigma()[k - 1],
                    };
                    (update, None)
                }
            };
            Ok(Step {
                stage: Stage::new(pair, schedule, guidance, t)?,
                mid,
                update,
            })
        })
        .collect()
}

fn run_trajectory(
    index: usize,
    seed: u64,
    dim: usize,
    prior_scale: f64,
    steps: &[Step],
    guidance: &GuidanceSpec,
    want_trace: bool,
) -> Result<TrajectoryOutput> {
    let mut rng = substream(seed, index as u64);
    let mut x = vec![0.0; dim];
    fill_normal(&mut rng, &mut x);
    x.iter_mut().for_each(|v| *v *= prior_scale);

    let mut sc = vec![0.0; dim];
    let mut su = vec![0.0; dim];
    let mut guided = vec![0.0; dim];
    let mut z = vec![0.0; dim];
    let mut xm = vec![0.0; dim];
    let mut trace = want_trace.then(|| Vec::with_capacity(steps.len()));

    for (i, step) in steps.iter().enumerate() {
        let stage = &step.stage;
        let w = stage.scores(&x, &mut sc, &mut su, guidance)?;
        if let Some(tr) = trace.as_mut() {
            tr.push((x.clone(), sc.clone(), su.clone(), w));
        }
        match step.update {
            Update::Euler { h, noise } => {
                combine_into(&sc, &su, w, &mut guided)?;
                let diff_coef = if noise { stage.g2 } else { 0.5 * stage.g2 };
                if let Some(mid) = &step.mid {
                    for k in 0..dim {
                        xm[k] = x[k] - 0.5 * h * (stage.f * x[k] - diff_coef * guided[k]);
                    }
                    let wm = mid.scores(&xm, &mut sc, &mut su, guidance)?;
                    combine_into(&sc, &su, wm, &mut guided)?;
                    let diff_mid = if noise { mid.g2 } else { 0.5 * mid.g2 };
                    for k in 0..dim {
                        x[k] -= h * (mid.f * xm[k] - diff_mid * guided[k]);
                    }
                } else {
                    for k in 0..dim {
                        x[k] -= h * (stage.f * x[k] - diff_coef * guided[k]);
                    }
                }
                if noise {
                    fill_normal(&mut rng, &mut z);
                    let scale = (stage.g2 * h).sqrt();
                    for k in 0..dim {
                        x[k] += scale * z[k];
                    }
                }
            }
            Update::Ddim {
                sqrt_ab,
                sqrt_ab_next,
                sigma_next,
            } => {
                let sigma = stage.sigma;
                for k in 0..dim {
                    sc[k] *= -sigma;
                    su[k] *= -sigma;
                }
                combine_into(&sc, &su, w, &mut guided)?;
                for k in 0..dim {
                    let x0 = (x[k] - sigma * guided[k]) / sqrt_ab;
                    x[k] = sqrt_ab_next * x0 + sigma_next * guided[k];
                }
            }
        }
        if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_CAP) {
            return Err(Error::Diverged {
                trajectory: index,
                step: i,
                t: stage.t,
            });
        }
    }
    Ok(TrajectoryOutput { x, trace })
}
