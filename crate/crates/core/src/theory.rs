//! Numerical checks of the score-discrepancy, Harnack, KL and de Bruijn
//! relations, plus discrepancy traces and log-ratio grids.
//!
//! Every check returns a [`BoundReport`]. Inequality reports pass when
//! `bound - measured >= -tolerance * max(1, bound)` at every point; identity
//! reports pass when `|measured - bound| <= tolerance * |bound|`.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::guidance::GuidanceSpec;
use crate::linalg::{cholesky_lower, dot, forward_substitute, norm, SampleMatrix};
use crate::mixtures::{GaussianMixture, LabeledDistribution, ScorePair};
use crate::rng::{fill_normal, substream};
use crate::samplers::{generate_with_trace, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::stats::spearman;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckMode {
    Inequality,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundPoint {
    /// Time, or pair index for randomized checks.
    pub at: f64,
    pub measured: f64,
    pub bound: f64,
    pub margin: f64,
}

impl BoundPoint {
    pub fn new(at: f64, measured: f64, bound: f64) -> Self {
        BoundPoint {
            at,
            measured,
            bound,
            margin: bound - measured,
        }
    }

    fn holds(&self, mode: CheckMode, tol: f64) -> bool {
        match mode {
            CheckMode::Inequality => self.margin >= -tol * self.bound.max(1.0),
            CheckMode::Identity => (self.measured - self.bound).abs() <= tol * self.bound.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub check_name: String,
    /// Name of the `at` column.
    pub axis: String,
    pub mode: CheckMode,
    pub points: Vec<BoundPoint>,
    pub passed: bool,
    pub tolerance: f64,
    /// Diagnostic columns aligned with `points`.
    pub extra: Vec<(String, Vec<f64>)>,
}

impl BoundReport {
    pub fn new(
        check_name: impl Into<String>,
        axis: impl Into<String>,
        mode: CheckMode,
        points: Vec<BoundPoint>,
        tolerance: f64,
    ) -> Self {
        let passed = !points.is_empty() && points.iter().all(|p| p.holds(mode, tolerance));
        BoundReport {
            check_name: check_name.into(),
            axis: axis.into(),
            mode,
            points,
            passed,
            tolerance,
            extra: Vec::new(),
        }
    }

    pub fn with_column(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.points.len());
        self.extra.push((name.into(), values));
        self
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.extra
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    /// Smallest margin (inequality) or largest negated gap (identity).
    pub fn worst_margin(&self) -> f64 {
        self.points
            .iter()
            .map(|p| match self.mode {
                CheckMode::Inequality => p.margin,
                CheckMode::Identity => -(p.measured - p.bound).abs(),
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Number of points outside tolerance.
    pub fn violations(&self) -> usize {
        self.points
            .iter()
            .filter(|p| !p.holds(self.mode, self.tolerance))
            .count()
    }

    /// Largest `|measured - bound| / |bound|` (zero when both vanish).
    pub fn max_relative_gap(&self) -> f64 {
        self.points
            .iter()
            .map(|p| relative_gap(p.measured, p.bound))
            .fold(0.0, f64::max)
    }
}

fn relative_gap(measured: f64, reference: f64) -> f64 {
    let d = (measured - reference).abs();
    if d == 0.0 {
        0.0
    } else {
        d / reference.abs()
    }
}

/// Probe points for the score-discrepancy checks: a lattice covering the
/// bulk of the marginal plus draws from the unconditional marginal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSpec {
    pub total: usize,
    pub lattice_share: f64,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec {
            total: 512,
            lattice_share: 0.5,
            seed: 0,
        }
    }
}

impl ProbeSpec {
    pub fn new(total: usize, seed: u64) -> Self {
        ProbeSpec {
            total,
            seed,
            ..ProbeSpec::default()
        }
    }

    /// Probes at time `t`; the lattice spans `α R + 3σ` per axis.
    pub fn probes(
        &self,
        pair: &ScorePair,
        schedule: &NoiseSchedule,
        t: f64,
        stream: u64,
    ) -> Result<SampleMatrix> {
        if self.total == 0 {
            return Err(invalid("probes", "need at least one probe"));
        }
        let dim = pair.dim();
        let (alpha, sigma) = schedule.alpha_sigma(t)?;
        let half = alpha * pair.radius() + 3.0 * sigma;
        let budget = (self.total as f64 * self.lattice_share).floor();
        let per_axis = (budget.powf(1.0 / dim as f64).floor() as usize).max(1);
        let lattice = per_axis.pow(dim as u32).min(self.total);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(self.total);
        for idx in 0..lattice {
            let mut rem = idx;
            let p = (0..dim)
                .map(|_| {
                    let k = rem % per_axis;
                    rem /= per_axis;
                    if per_axis == 1 {
                        0.0
                    } else {
                        -half + 2.0 * half * k as f64 / (per_axis - 1) as f64
                    }
                })
                .collect();
            rows.push(p);
        }
        let extra = self.total - lattice;
        if extra > 0 {
            let mix = pair.unconditional().diffuse(schedule, t, None)?;
            let mut rng = substream(self.seed, stream);
            let draws = mix.sample_with(&mut rng, extra);
            rows.extend(draws.iter_rows().map(|r| r.to_vec()));
        }
        SampleMatrix::from_rows(&rows)
    }
}

/// `α(t)/σ(t)² · 2R` (VP) or `2R/σ(t)²` (VE).
pub fn score_bound(schedule: &NoiseSchedule, t: f64, radius: f64) -> Result<f64> {
    Ok(schedule.bound_envelope(t)? * 2.0 * radius)
}

fn check_grid(schedule: &NoiseSchedule, t_grid: &[f64]) -> Result<()> {
    if t_grid.is_empty() {
        return Err(Error::Empty("t_grid"));
    }
    for &t in t_grid {
        if !(t >= crate::T0_CUTOFF - 1e-12 && t <= schedule.t_max()) {
            return Err(Error::TimeOutOfRange {
                t,
                lower: crate::T0_CUTOFF,
                upper: schedule.t_max(),
            });
        }
    }
    Ok(())
}

/// Max over probes of `‖∇log p(x,t|c) - ∇log p(x,t|u)‖` against the bound.
pub fn check_score_mse_bound(
    pair: &ScorePair,
    schedule: &NoiseSchedule,
    t_grid: &[f64],
    probes: &ProbeSpec,
    tolerance: f64,
) -> Result<BoundReport> {
    if !pair.is_all_atoms() {
        return Err(Error::UnsupportedDistribution(
            "the score bound is exact only for atom distributions".into(),
        ));
    }
    check_grid(schedule, t_grid)?;
    let dim = pair.dim();
    let radius = pair.radius();
    let points = t_grid
        .par_iter()
        .enumerate()
        .map(|(i, &t)| {
            let diffused = pair.at(schedule, t)?;
            let xs = probes.probes(pair, schedule, t, i as u64)?;
            let mut c = vec![0.0; dim];
            let mut u = vec![0.0; dim];
            let mut worst: f64 = 0.0;
            for x in xs.iter_rows() {
                diffused.scores_into(x, &mut c, &mut u)?;
                let d = c
                    .iter()
                    .zip(&u)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                worst = worst.max(d);
            }
            Ok(BoundPoint::new(t, worst, score_bound(schedule, t, radius)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundReport::new(
        format!("score_bound_{}", schedule.kind_name()),
        "t",
        CheckMode::Inequality,
        points,
        tolerance,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HarnackKind {
    Vp,
    Ve,
}

impl HarnackKind {
    pub fn name(&self) -> &'static str {
        match self {
            HarnackKind::Vp => "vp",
            HarnackKind::Ve => "ve",
        }
    }
}

/// One Harnack evaluation in log space, with `x₁` taken at the earlier
/// time `s₁`.
#[derive(Debug, Clone, PartialEq)]
pub struct HarnackSample {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub s1: f64,
    pub s2: f64,
    pub alpha_h: f64,
    pub m: usize,
    pub log_lhs: f64,
    pub log_rhs: f64,
}

impl HarnackSample {
    pub fn lhs(&self) -> f64 {
        self.log_lhs.exp()
    }

    pub fn rhs(&self) -> f64 {
        self.log_rhs.exp()
    }

    pub fn log_margin(&self) -> f64 {
        self.log_rhs - self.log_lhs
    }
}

/// Log-density of the delta started at `atom`, in reparameterized time `s`:
/// `N(e^{-s} x₀, (1 - e^{-2s}) I)` (VP) or the heat kernel `N(x₀, 2s I)` (VE).
pub fn harnack_log_density(kind: HarnackKind, atom: &[f64], x: &[f64], s: f64) -> Result<f64> {
    if !(s > 0.0) {
        return Err(invalid("s", format!("{s} must be positive")));
    }
    let n = atom.len();
    if x.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: x.len(),
        });
    }
    let (scale, var) = match kind {
        HarnackKind::Vp => ((-s).exp(), -(-2.0 * s).exp_m1()),
        HarnackKind::Ve => (1.0, 2.0 * s),
    };
    let sq: f64 = x
        .iter()
        .zip(atom)
        .map(|(xi, ai)| (xi - scale * ai).powi(2))
        .sum();
    Ok(-0.5 * n as f64 * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var))
}

/// Evaluates both sides of the Harnack inequality at one configuration.
#[allow(clippy::too_many_arguments)]
pub fn harnack_sample(
    kind: HarnackKind,
    atom: &[f64],
    x1: &[f64],
    x2: &[f64],
    s1: f64,
    s2: f64,
    alpha_h: f64,
    m: usize,
) -> Result<HarnackSample> {
    let n = atom.len();
    if !(alpha_h > 1.0) {
        return Err(invalid("alpha_h", format!("{alpha_h} must exceed 1")));
    }
    if m < n {
        return Err(invalid("m", format!("{m} is below the dimension {n}")));
    }
    if !(s1 > 0.0 && s1 < s2) {
        return Err(invalid("s1", format!("need 0 < s1 < s2, got {s1}, {s2}")));
    }
    let log_lhs = harnack_log_density(kind, atom, x1, s1)?;
    let p2 = harnack_log_density(kind, atom, x2, s2)?;
    let dx2: f64 = x1.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum();
    let transport = alpha_h * alpha_h * dx2 / (4.0 * (s2 - s1));
    let log_rhs = match kind {
        HarnackKind::Vp => {
            let norms = 0.5 * (dot(x2, x2) - dot(x1, x1));
            p2 + 0.5 * m as f64 * alpha_h * (s2 / s1).ln() + transport + norms
        }
        HarnackKind::Ve => p2 + 0.5 * n as f64 * alpha_h * (s2 / s1).ln() + transport,
    };
    Ok(HarnackSample {
        x1: x1.to_vec(),
        x2: x2.to_vec(),
        s1,
        s2,
        alpha_h,
        m,
        log_lhs,
        log_rhs,
    })
}

/// Uniform draw from the ball of radius `r`.
fn ball_point<R: Rng + ?Sized>(rng: &mut R, n: usize, r: f64) -> Vec<f64> {
    let mut v = vec![0.0; n];
    loop {
        fill_normal(rng, &mut v);
        let len = norm(&v);
        if len > 1e-12 {
            let u: f64 = rng.random();
            let rad = r * u.powf(1.0 / n as f64) / len;
            return v.into_iter().map(|c| c * rad).collect();
        }
    }
}

pub const HARNACK_S_RANGE: (f64, f64) = (0.05, 5.0);
pub const HARNACK_X_RADIUS: f64 = 3.0;

/// `pairs` random configurations with `‖x‖ ≤ 3` and `0.05 ≤ s₁ < s₂ ≤ 5`.
///
/// Measured and bound are the log-domain sides. The columns `swapped_margin`
/// record the same draw with `x₁` and `x₂` exchanged.
pub fn check_harnack(
    kind: HarnackKind,
    atom: &[f64],
    pairs: usize,
    alpha_h: f64,
    m: usize,
    seed: u64,
    tolerance: f64,
) -> Result<BoundReport> {
    if pairs == 0 {
        return Err(invalid("pairs", "must be at least 1"));
    }
    if atom.is_empty() {
        return Err(invalid("atom", "dimension must be positive"));
    }
    let n = atom.len();
    let (lo, hi) = HARNACK_S_RANGE;
    let samples = (0..pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let x1 = ball_point(&mut rng, n, HARNACK_X_RADIUS);
            let x2 = ball_point(&mut rng, n, HARNACK_X_RADIUS);
            let (s1, s2) = loop {
                let a = lo + (hi - lo) * rng.random::<f64>();
                let b = lo + (hi - lo) * rng.random::<f64>();
                if a != b {
                    break (a.min(b), a.max(b));
                }
            };
            let fwd = harnack_sample(kind, atom, &x1, &x2, s1, s2, alpha_h, m)?;
            let swapped = harnack_sample(kind, atom, &x2, &x1, s1, s2, alpha_h, m)?;
            Ok((fwd, swapped))
        })
        .collect::<Result<Vec<_>>>()?;
    let points = samples
        .iter()
        .enumerate()
        .map(|(i, (f, _))| BoundPoint::new(i as f64, f.log_lhs, f.log_rhs))
        .collect();
    let col = |g: fn(&HarnackSample) -> f64, second: bool| -> Vec<f64> {
        samples
            .iter()
            .map(|(f, s)| g(if second { s } else { f }))
            .collect()
    };
    Ok(BoundReport::new(
        format!("harnack_{}", kind.name()),
        "pair",
        CheckMode::Inequality,
        points,
        tolerance,
    )
    .with_column("s1", col(|h| h.s1, false))
    .with_column("s2", col(|h| h.s2, false))
    .with_column("alpha_h", col(|h| h.alpha_h, false))
    .with_column("m", col(|h| h.m as f64, false))
    .with_column("swapped_margin", col(HarnackSample::log_margin, true)))
}

/// `KL(N(μ₀, Σ₀) ‖ N(μ₁, Σ₁))` for row-major covariances.
pub fn gaussian_kl(mu0: &[f64], cov0: &[f64], mu1: &[f64], cov1: &[f64]) -> Result<f64> {
    let n = mu0.len();
    for (len, expected) in [(mu1.len(), n), (cov0.len(), n * n), (cov1.len(), n * n)] {
        if len != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: len,
            });
        }
    }
    let l0 = cholesky_lower(cov0, n)?;
    let l1 = cholesky_lower(cov1, n)?;
    let logdet = |l: &[f64]| (0..n).map(|i| 2.0 * l[i * n + i].ln()).sum::<f64>();
    // tr(Σ₁⁻¹Σ₀) = ‖L₁⁻¹ L₀‖_F²
    let mut trace = 0.0;
    for j in 0..n {
        let mut col: Vec<f64> = (0..n).map(|i| l0[i * n + j]).collect();
        forward_substitute(&l1, n, &mut col);
        trace += dot(&col, &col);
    }
    let mut d: Vec<f64> = mu1.iter().zip(mu0).map(|(a, b)| a - b).collect();
    forward_substitute(&l1, n, &mut d);
    let maha = dot(&d, &d);
    Ok(0.5 * (trace + maha - n as f64 + logdet(&l1) - logdet(&l0)))
}

fn ou_delta(atom: &[f64], t: f64) -> Result<GaussianMixture> {
    let schedule = NoiseSchedule::canonical_ou(t.max(1.0))?;
    LabeledDistribution::single_atom(atom)?.diffuse(&schedule, t, None)
}

fn ou_kl(a1: &[f64], a2: &[f64], t: f64) -> Result<f64> {
    let p = ou_delta(a1, t)?;
    let q = ou_delta(a2, t)?;
    let (mp, cp) = (p.means().next().unwrap(), p.covariances().next().unwrap());
    let (mq, cq) = (q.means().next().unwrap(), q.covariances().next().unwrap());
    gaussian_kl(mp, cp, mq, cq)
}

/// Antithetic Monte-Carlo estimate of `KL(p ‖ q)` with `draws` samples.
pub fn monte_carlo_kl(
    p: &GaussianMixture,
    q: &GaussianMixture,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if draws < 2 {
        return Err(invalid("draws", "need at least 2"));
    }
    if p.len() != 1 {
        return Err(invalid("p", "antithetic estimate needs a single Gaussian"));
    }
    let dim = p.dim();
    let mean = p.means().next().unwrap().to_vec();
    let chol = cholesky_lower(p.covariances().next().unwrap(), dim)?;
    const BLOCK: usize = 4096;
    let pairs = draws / 2;
    let blocks = pairs.div_ceil(BLOCK);
    let sums = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, b as u64);
            let mut xi = vec![0.0; dim];
            let mut x = vec![0.0; dim];
            let mut acc = 0.0;
            for _ in (b * BLOCK)..((b + 1) * BLOCK).min(pairs) {
                fill_normal(&mut rng, &mut xi);
                for sign in [1.0, -1.0] {
                    for i in 0..dim {
                        let lz: f64 = (0..=i).map(|j| chol[i * dim + j] * xi[j]).sum();
                        x[i] = mean[i] + sign * lz;
                    }
                    acc += p.log_density(&x)? - q.log_density(&x)?;
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sums.iter().sum::<f64>() / (2 * pairs) as f64)
}

/// KL bound for the `±a` deltas under the canonical OU process.
#[derive(Debug, Clone, PartialEq)]
pub struct KlCheck {
    /// Closed-form KL against `2R² e^{-2t}/(1 - e^{-2t})`.
    pub bound: BoundReport,
    /// Monte-Carlo estimate against the closed form.
    pub monte_carlo: BoundReport,
}

pub fn kl_bound_value(radius: f64, t: f64) -> f64 {
    let e = (-2.0 * t).exp();
    2.0 * radius * radius * e / -(-2.0 * t).exp_m1()
}

pub fn check_kl_bound(
    a: &[f64],
    t_grid: &[f64],
    mc_draws: usize,
    seed: u64,
    tolerance: f64,
    mc_tolerance: f64,
) -> Result<KlCheck> {
    if t_grid.is_empty() {
        return Err(Error::Empty("t_grid"));
    }
    let minus: Vec<f64> = a.iter().map(|v| -v).collect();
    let radius = norm(a);
    let rows = t_grid
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if !(t > 0.0) {
                return Err(invalid("t", format!("{t} must be positive")));
            }
            let exact = ou_kl(a, &minus, t)?;
            let mc = monte_carlo_kl(
                &ou_delta(a, t)?,
                &ou_delta(&minus, t)?,
                mc_draws,
                seed.wrapping_add(i as u64),
            )?;
            Ok((t, exact, mc))
        })
        .collect::<Result<Vec<_>>>()?;
    let bound = BoundReport::new(
        "kl_bound",
        "t",
        CheckMode::Inequality,
        rows.iter()
            .map(|&(t, exact, _)| BoundPoint::new(t, exact, kl_bound_value(radius, t)))
            .collect(),
        tolerance,
    )
    .with_column("a_norm", vec![radius; rows.len()]);
    let monte_carlo = BoundReport::new(
        "kl_monte_carlo",
        "t",
        CheckMode::Identity,
        rows.iter()
            .map(|&(t, exact, mc)| BoundPoint::new(t, mc, exact))
            .collect(),
        mc_tolerance,
    )
    .with_column("draws", vec![mc_draws as f64; rows.len()]);
    Ok(KlCheck { bound, monte_carlo })
}

/// Central difference of `KL(t)` against `-I(t)` for the deltas at `a1`, `a2`.
pub fn check_de_bruijn(
    a1: &[f64],
    a2: &[f64],
    t_grid: &[f64],
    step: f64,
    tolerance: f64,
) -> Result<BoundReport> {
    if t_grid.is_empty() {
        return Err(Error::Empty("t_grid"));
    }
    if a1.len() != a2.len() {
        return Err(Error::DimensionMismatch {
            expected: a1.len(),
            actual: a2.len(),
        });
    }
    let points = t_grid
        .iter()
        .map(|&t| {
            if !(t > step) {
                return Err(invalid("t", format!("{t} must exceed the step {step}")));
            }
            let fd = (ou_kl(a1, a2, t + step)? - ou_kl(a1, a2, t - step)?) / (2.0 * step);
            // the score difference of two equal-covariance Gaussians is constant
            let p = ou_delta(a1, t)?;
            let q = ou_delta(a2, t)?;
            let x = p.means().next().unwrap().to_vec();
            let sp = p.score(&x)?;
            let sq = q.score(&x)?;
            let fisher: f64 = sp.iter().zip(&sq).map(|(u, v)| (u - v) * (u - v)).sum();
            Ok(BoundPoint::new(t, fd, -fisher))
        })
        .collect::<Result<Vec<_>>>()?;
    let rel: Vec<f64> = points
        .iter()
        .map(|p: &BoundPoint| relative_gap(p.measured, p.bound))
        .collect();
    Ok(
        BoundReport::new("de_bruijn", "t", CheckMode::Identity, points, tolerance)
            .with_column("relative_error", rel),
    )
}

/// Per-step statistics of the score discrepancy along reverse trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TracePoint {
    pub t: f64,
    pub mse: f64,
    pub cosine: f64,
    pub bound: f64,
}

/// Cosine similarity, 1 when either vector vanishes.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        dot(a, b) / (na * nb)
    }
}

pub fn discrepancy_trace(
    pair: &ScorePair,
    schedule: &NoiseSchedule,
    guidance: &GuidanceSpec,
    config: &SamplerConfig,
    n_traj: usize,
    seed: u64,
) -> Result<Vec<TracePoint>> {
    let (_, trace) = generate_with_trace(pair, schedule, guidance, config, n_traj, seed)?;
    let radius = pair.radius();
    trace
        .records
        .iter()
        .map(|rec| {
            let mut mse = 0.0;
            let mut cos = 0.0;
            for (c, u) in rec.score_cond.iter_rows().zip(rec.score_uncond.iter_rows()) {
                mse += c.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                cos += cosine(c, u);
            }
            let k = rec.x.rows() as f64;
            Ok(TracePoint {
                t: rec.t,
                mse: mse / k,
                cosine: cos / k,
                bound: score_bound(schedule, rec.t, radius)?,
            })
        })
        .collect()
}

/// Checks a trace: `mse ≤ bound²` everywhere (inequality report) and the
/// Spearman correlation of cosine against `t`.
pub fn trace_report(points: &[TracePoint], tolerance: f64) -> (BoundReport, f64) {
    let report = BoundReport::new(
        "trace_mse",
        "t",
        CheckMode::Inequality,
        points
            .iter()
            .map(|p| BoundPoint::new(p.t, p.mse, p.bound * p.bound))
            .collect(),
        tolerance,
    )
    .with_column("cosine", points.iter().map(|p| p.cosine).collect());
    let ts: Vec<f64> = points.iter().map(|p| p.t).collect();
    let cs: Vec<f64> = points.iter().map(|p| p.cosine).collect();
    (report, spearman(&cs, &ts))
}

/// Rectangular 2-D lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            x_min: -3.0,
            x_max: 3.0,
            y_min: -3.0,
            y_max: 3.0,
            nx: 64,
            ny: 64,
        }
    }
}

impl GridSpec {
    fn axis(lo: f64, hi: f64, k: usize) -> Vec<f64> {
        if k == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..k)
            .map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64)
            .collect()
    }

    pub fn xs(&self) -> Vec<f64> {
        Self::axis(self.x_min, self.x_max, self.nx)
    }

    pub fn ys(&self) -> Vec<f64> {
        Self::axis(self.y_min, self.y_max, self.ny)
    }
}

/// `log₂(‖s_c‖ / ‖s_u‖)` on a lattice, row-major in `y` then `x`.
/// `None` where the unconditional score vanishes.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRatioGrid {
    pub t: f64,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub values: Vec<Option<f64>>,
}

impl LogRatioGrid {
    pub fn get(&self, ix: usize, iy: usize) -> Option<f64> {
        self.values[iy * self.xs.len() + ix]
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub const ZERO_SCORE_FLOOR: f64 = 1e-12;

pub fn log_ratio_grid(
    pair: &ScorePair,
    schedule: &NoiseSchedule,
    t: f64,
    grid: &GridSpec,
) -> Result<LogRatioGrid> {
    if grid.nx == 0 || grid.ny == 0 {
        return Err(Error::Empty("grid"));
    }
    if pair.dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            actual: pair.dim(),
        });
    }
    if !(t >= crate::T0_CUTOFF - 1e-12) {
        return Err(Error::TimeOutOfRange {
            t,
            lower: crate::T0_CUTOFF,
            upper: schedule.t_max(),
        });
    }
    let diffused = pair.at(schedule, t)?;
    let xs = grid.xs();
    let ys = grid.ys();
    let values = ys
        .par_iter()
        .map(|&y| {
            let mut c = [0.0; 2];
            let mut u = [0.0; 2];
            xs.iter()
                .map(|&x| {
                    diffused.scores_into(&[x, y], &mut c, &mut u)?;
                    let (nc, nu) = (norm(&c), norm(&u));
                    Ok(if nu < ZERO_SCORE_FLOOR || nc < ZERO_SCORE_FLOOR {
                        None
                    } else {
                        Some((nc / nu).log2())
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    Ok(LogRatioGrid { t, xs, ys, values })
}
