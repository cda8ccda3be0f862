//! Labeled initial distributions and their exact diffused marginals.
//!
//! Every initial component is either a point mass (atom) or a Gaussian. Under
//! `x_t = α x_0 + σ ξ` an atom at `a` becomes `N(α a, σ² I)` and a Gaussian
//! `N(m, Σ)` becomes `N(α m, α² Σ + σ² I)`, so the marginal at any `t > 0`
//! is a Gaussian mixture with closed-form density, score and posterior.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{invalid, Error, Result};
use crate::linalg::{
    backward_substitute, cholesky_lower, forward_substitute, identity, norm, SampleMatrix,
};
use crate::rng::{fill_normal, substream};
use crate::schedule::NoiseSchedule;
use crate::stats::log_sum_exp;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Class label attached to initial-distribution components.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub String);

impl ClassId {
    pub fn new(label: impl Into<String>) -> Self {
        ClassId(label.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClassId {
    fn from(s: &str) -> Self {
        ClassId(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ComponentKind {
    Atom {
        location: Vec<f64>,
    },
    /// `covariance` is row-major `n × n`.
    Gaussian {
        mean: Vec<f64>,
        covariance: Vec<f64>,
    },
}

impl ComponentKind {
    pub fn center(&self) -> &[f64] {
        match self {
            ComponentKind::Atom { location } => location,
            ComponentKind::Gaussian { mean, .. } => mean,
        }
    }

    pub fn is_atom(&self) -> bool {
        matches!(self, ComponentKind::Atom { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledComponent {
    pub weight: f64,
    pub label: ClassId,
    pub kind: ComponentKind,
}

impl LabeledComponent {
    pub fn atom(weight: f64, label: impl Into<String>, location: Vec<f64>) -> Self {
        LabeledComponent {
            weight,
            label: ClassId::new(label),
            kind: ComponentKind::Atom { location },
        }
    }

    pub fn gaussian(
        weight: f64,
        label: impl Into<String>,
        mean: Vec<f64>,
        covariance: Vec<f64>,
    ) -> Self {
        LabeledComponent {
            weight,
            label: ClassId::new(label),
            kind: ComponentKind::Gaussian { mean, covariance },
        }
    }

    /// Gaussian with covariance `variance · I`.
    pub fn isotropic(weight: f64, label: impl Into<String>, mean: Vec<f64>, variance: f64) -> Self {
        let n = mean.len();
        LabeledComponent::gaussian(weight, label, mean, identity(n, variance))
    }
}

/// Initial data distribution `p(x₀)` with class labels and radius bound `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDistribution {
    dim: usize,
    components: Vec<LabeledComponent>,
    radius: f64,
    labels: Vec<ClassId>,
}

impl LabeledDistribution {
    /// Validates the components. `radius` defaults to the largest center norm.
    pub fn new(components: Vec<LabeledComponent>, radius: Option<f64>) -> Result<Self> {
        let first = components.first().ok_or(Error::Empty("components"))?;
        let dim = first.kind.center().len();
        if dim == 0 {
            return Err(invalid("dimension", "must be positive"));
        }
        let mut total = 0.0;
        let mut max_norm: f64 = 0.0;
        let mut labels: Vec<ClassId> = Vec::new();
        for c in &components {
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(invalid("weight", format!("{} is not in (0, 1]", c.weight)));
            }
            total += c.weight;
            let center = c.kind.center();
            if center.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: center.len(),
                });
            }
            if center.iter().any(|v| !v.is_finite()) {
                return Err(invalid("location", "entries must be finite"));
            }
            if let ComponentKind::Gaussian { covariance, .. } = &c.kind {
                cholesky_lower(covariance, dim)?;
            }
            max_norm = max_norm.max(norm(center));
            if !labels.contains(&c.label) {
                labels.push(c.label.clone());
            }
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(
                "weight",
                format!("weights sum to {total}, expected 1"),
            ));
        }
        let radius = match radius {
            Some(r) if r.is_finite() && r >= max_norm => r,
            Some(r) => {
                return Err(invalid(
                    "radius",
                    format!("{r} is smaller than the largest component norm {max_norm}"),
                ))
            }
            None => max_norm,
        };
        Ok(LabeledDistribution {
            dim,
            components,
            radius,
            labels,
        })
    }

    /// Two equally weighted atoms: `+a` labeled `pos`, `-a` labeled `neg`.
    pub fn two_atoms(a: &[f64]) -> Result<Self> {
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        LabeledDistribution::new(
            vec![
                LabeledComponent::atom(0.5, "pos", a.to_vec()),
                LabeledComponent::atom(0.5, "neg", neg),
            ],
            None,
        )
    }

    /// Single atom at `location` (label `atom`).
    pub fn single_atom(location: &[f64]) -> Result<Self> {
        LabeledDistribution::new(
            vec![LabeledComponent::atom(1.0, "atom", location.to_vec())],
            None,
        )
    }

    /// Two-class 2D reference mixture: `orange` has modes at (±1.5, 0) with
    /// variance 0.25, `gray` has modes at (0, ±2.5) with variance 0.35.
    pub fn reference_toy() -> Self {
        LabeledDistribution::new(
            vec![
                LabeledComponent::isotropic(0.25, "orange", vec![-1.5, 0.0], 0.25),
                LabeledComponent::isotropic(0.25, "orange", vec![1.5, 0.0], 0.25),
                LabeledComponent::isotropic(0.25, "gray", vec![0.0, 2.5], 0.35),
                LabeledComponent::isotropic(0.25, "gray", vec![0.0, -2.5], 0.35),
            ],
            Some(3.0),
        )
        .expect("reference mixture is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn components(&self) -> &[LabeledComponent] {
        &self.components
    }

    /// Distinct labels in order of first appearance.
    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn is_all_atoms(&self) -> bool {
        self.components.iter().all(|c| c.kind.is_atom())
    }

    pub fn has_atoms(&self) -> bool {
        self.components.iter().any(|c| c.kind.is_atom())
    }

    fn require_class(&self, class: &ClassId) -> Result<()> {
        if self.labels.contains(class) {
            Ok(())
        } else {
            Err(Error::UnknownClass(class.0.clone()))
        }
    }

    /// `p(y)`: total initial weight of `class`.
    pub fn class_prior(&self, class: &ClassId) -> Result<f64> {
        self.require_class(class)?;
        Ok(self
            .components
            .iter()
            .filter(|c| &c.label == class)
            .map(|c| c.weight)
            .sum())
    }

    /// Conditional initial distribution `p(x₀ | y)` (weights renormalized,
    /// radius kept).
    pub fn restrict(&self, class: &ClassId) -> Result<Self> {
        let prior = self.class_prior(class)?;
        let components: Vec<LabeledComponent> = self
            .components
            .iter()
            .filter(|c| &c.label == class)
            .map(|c| LabeledComponent {
                weight: c.weight / prior,
                ..c.clone()
            })
            .collect();
        // Renormalized weights may miss 1 by rounding; rescale exactly once more.
        let total: f64 = components.iter().map(|c| c.weight).sum();
        let components = components
            .into_iter()
            .map(|c| LabeledComponent {
                weight: c.weight / total,
                ..c
            })
            .collect();
        LabeledDistribution::new(components, Some(self.radius))
    }

    /// Applies `x ↦ x + shift` to every component center.
    pub fn translated(&self, shift: &[f64]) -> Result<Self> {
        if shift.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: shift.len(),
            });
        }
        let move_by = |v: &[f64]| -> Vec<f64> { v.iter().zip(shift).map(|(a, b)| a + b).collect() };
        let components = self
            .components
            .iter()
            .map(|c| LabeledComponent {
                kind: match &c.kind {
                    ComponentKind::Atom { location } => ComponentKind::Atom {
                        location: move_by(location),
                    },
                    ComponentKind::Gaussian { mean, covariance } => ComponentKind::Gaussian {
                        mean: move_by(mean),
                        covariance: covariance.clone(),
                    },
                },
                ..c.clone()
            })
            .collect();
        LabeledDistribution::new(components, None)
    }

    /// Exact marginal `p(·, t)` (or `p(·, t | y)` when `restrict_to` is set).
    pub fn diffuse(
        &self,
        schedule: &NoiseSchedule,
        t: f64,
        restrict_to: Option<&ClassId>,
    ) -> Result<GaussianMixture> {
        match restrict_to {
            Some(class) => self.restrict(class)?.diffuse(schedule, t, None),
            None => self.diffuse_all(schedule, t),
        }
    }

    fn diffuse_all(&self, schedule: &NoiseSchedule, t: f64) -> Result<GaussianMixture> {
        let (alpha, sigma) = schedule.alpha_sigma(t)?;
        let n = self.dim;
        let var = sigma * sigma;
        let mut comps = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let (mean, cov) = match &c.kind {
                ComponentKind::Atom { location } => {
                    if var == 0.0 {
                        return Err(Error::DegenerateDensity(format!(
                            "atom has no density at t = {t}"
                        )));
                    }
                    (
                        location.iter().map(|v| alpha * v).collect(),
                        identity(n, var),
                    )
                }
                ComponentKind::Gaussian { mean, covariance } => {
                    let mut cov: Vec<f64> = covariance.iter().map(|v| alpha * alpha * v).collect();
                    for i in 0..n {
                        cov[i * n + i] += var;
                    }
                    (mean.iter().map(|v| alpha * v).collect(), cov)
                }
            };
            comps.push((c.weight, mean, cov));
        }
        GaussianMixture::new(n, comps)
    }

    /// `E[x₀ | x_t = x]` (optionally given the class).
    pub fn posterior_mean(
        &self,
        schedule: &NoiseSchedule,
        t: f64,
        x: &[f64],
        restrict_to: Option<&ClassId>,
    ) -> Result<Vec<f64>> {
        if let Some(class) = restrict_to {
            return self.restrict(class)?.posterior_mean(schedule, t, x, None);
        }
        if t <= 0.0 {
            return Err(Error::TimeOutOfRange {
                t,
                lower: 0.0,
                upper: schedule.t_max(),
            });
        }
        let (alpha, _) = schedule.alpha_sigma(t)?;
        let mix = self.diffuse_all(schedule, t)?;
        let resp = mix.responsibilities(x)?;
        let n = self.dim;
        let mut out = vec![0.0; n];
        let mut buf = vec![0.0; n];
        for ((c, mc), r) in self.components.iter().zip(&mix.components).zip(&resp) {
            if *r == 0.0 {
                continue;
            }
            match &c.kind {
                ComponentKind::Atom { location } => {
                    for (o, v) in out.iter_mut().zip(location) {
                        *o += r * v;
                    }
                }
                ComponentKind::Gaussian { mean, covariance } => {
                    // m + α Σ S⁻¹ (x - α m), S the diffused covariance.
                    for i in 0..n {
                        buf[i] = x[i] - alpha * mean[i];
                    }
                    forward_substitute(&mc.chol, n, &mut buf);
                    backward_substitute(&mc.chol, n, &mut buf);
                    for i in 0..n {
                        let s: f64 = (0..n).map(|j| covariance[i * n + j] * buf[j]).sum();
                        out[i] += r * (mean[i] + alpha * s);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Exact `p(y | x_t = x)` over all classes.
    pub fn class_posterior(
        &self,
        schedule: &NoiseSchedule,
        t: f64,
        x: &[f64],
    ) -> Result<ClassPosterior> {
        if t <= 0.0 {
            return Err(Error::TimeOutOfRange {
                t,
                lower: 0.0,
                upper: schedule.t_max(),
            });
        }
        let mix = self.diffuse_all(schedule, t)?;
        let resp = mix.responsibilities(x)?;
        let mut probabilities = vec![0.0; self.labels.len()];
        for (c, r) in self.components.iter().zip(&resp) {
            let k = self.labels.iter().position(|l| l == &c.label).unwrap();
            probabilities[k] += r;
        }
        Ok(ClassPosterior {
            labels: self.labels.clone(),
            probabilities,
        })
    }
}

/// Posterior class probabilities `p(y | x_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior {
    pub labels: Vec<ClassId>,
    pub probabilities: Vec<f64>,
}

impl ClassPosterior {
    pub fn probability(&self, class: &ClassId) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l == class)
            .map(|i| self.probabilities[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
struct MixtureComponent {
    weight: f64,
    mean: Vec<f64>,
    covariance: Vec<f64>,
    chol: Vec<f64>,
    /// `ln w - n/2 ln 2π - ln det L`.
    log_norm: f64,
}

/// Gaussian mixture with cached Cholesky factors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<MixtureComponent>,
}

type Buf = SmallVec<[f64; 16]>;

impl GaussianMixture {
    /// Components are `(weight, mean, row-major covariance)`. Zero weights are
    /// allowed; weights must sum to 1.
    pub fn new(dim: usize, components: Vec<(f64, Vec<f64>, Vec<f64>)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Empty("mixture components"));
        }
        let mut total = 0.0;
        let mut out = Vec::with_capacity(components.len());
        for (weight, mean, covariance) in components {
            if !(0.0..=1.0).contains(&weight) {
                return Err(invalid("weight", format!("{weight} is not in [0, 1]")));
            }
            if mean.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: mean.len(),
                });
            }
            total += weight;
            let chol = cholesky_lower(&covariance, dim)?;
            let log_det_l: f64 = (0..dim).map(|i| chol[i * dim + i].ln()).sum();
            out.push(MixtureComponent {
                weight,
                mean,
                covariance,
                chol,
                log_norm: weight.ln() - 0.5 * dim as f64 * LN_2PI - log_det_l,
            });
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(
                "weight",
                format!("weights sum to {total}, expected 1"),
            ));
        }
        Ok(GaussianMixture {
            dim,
            components: out,
        })
    }

    pub fn single(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        GaussianMixture::new(mean.len(), vec![(1.0, mean, covariance)])
    }

    pub fn standard_normal(dim: usize) -> Self {
        GaussianMixture::single(vec![0.0; dim], identity(dim, 1.0)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.components.iter().map(|c| c.weight)
    }

    pub fn means(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.components.iter().map(|c| c.mean.as_slice())
    }

    pub fn covariances(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.components.iter().map(|c| c.covariance.as_slice())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Per-component log terms `ln w_k + ln N(x; μ_k, Σ_k)` into `logs`;
    /// when `grads` is given, also writes `-Σ_k⁻¹ (x - μ_k)` row by row.
    fn component_terms(&self, x: &[f64], logs: &mut Buf, mut grads: Option<&mut Buf>) {
        let n = self.dim;
        let mut y: Buf = SmallVec::from_elem(0.0, n);
        for c in &self.components {
            for i in 0..n {
                y[i] = x[i] - c.mean[i];
            }
            forward_substitute(&c.chol, n, &mut y);
            let quad: f64 = y.iter().map(|v| v * v).sum();
            logs.push(c.log_norm - 0.5 * quad);
            if let Some(g) = grads.as_deref_mut() {
                backward_substitute(&c.chol, n, &mut y);
                g.extend(y.iter().map(|v| -v));
            }
        }
    }

    /// `ln p(x)` via log-sum-exp over components.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let mut logs = Buf::new();
        self.component_terms(x, &mut logs, None);
        Ok(log_sum_exp(&logs))
    }

    pub fn density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density(x)?.exp())
    }

    /// `∇ ln p(x)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.score_into(x, &mut out)?;
        Ok(out)
    }

    /// Writes `∇ ln p(x)` into `out` and returns `ln p(x)`.
    pub fn score_into(&self, x: &[f64], out: &mut [f64]) -> Result<f64> {
        self.check_dim(x)?;
        self.check_dim(out)?;
        let n = self.dim;
        let mut logs = Buf::new();
        let mut grads = Buf::new();
        self.component_terms(x, &mut logs, Some(&mut grads));
        let lse = log_sum_exp(&logs);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, lk) in logs.iter().enumerate() {
            let r = (lk - lse).exp();
            if r == 0.0 {
                continue;
            }
            for i in 0..n {
                out[i] += r * grads[k * n + i];
            }
        }
        Ok(lse)
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut logs = Buf::new();
        self.component_terms(x, &mut logs, None);
        let lse = log_sum_exp(&logs);
        Ok(logs.iter().map(|l| (l - lse).exp()).collect())
    }

    /// Draws `n` samples (categorical component, then `μ + L z`).
    pub fn sample(&self, n: usize, seed: u64) -> SampleMatrix {
        let mut rng = substream(seed, 0);
        self.sample_with(&mut rng, n)
    }

    pub(crate) fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> SampleMatrix {
        let d = self.dim;
        let mut out = SampleMatrix::zeros(n, d);
        let mut z = vec![0.0; d];
        for i in 0..n {
            let c = self.pick_component(rng.random::<f64>());
            fill_normal(rng, &mut z);
            let row = out.row_mut(i);
            for (r, v) in row.iter_mut().enumerate() {
                let lz: f64 = (0..=r).map(|j| c.chol[r * d + j] * z[j]).sum();
                *v = c.mean[r] + lz;
            }
        }
        out
    }

    fn pick_component(&self, u: f64) -> &MixtureComponent {
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                return c;
            }
        }
        // u landed in the rounding gap above the cumulative sum.
        self.components
            .iter()
            .rev()
            .find(|c| c.weight > 0.0)
            .expect("weights sum to 1")
    }
}

/// Draws `n` i.i.d. samples from `mix`; deterministic in `seed`.
pub fn sample_mixture(mix: &GaussianMixture, n: usize, seed: u64) -> Result<SampleMatrix> {
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    Ok(mix.sample(n, seed))
}

/// Conditional and unconditional initial distributions whose scores are
/// fused by guidance.
///
/// In classifier-free guidance the unconditional side is the joint
/// distribution; [`ScorePair::contrast`] instead uses another class, which is
/// the two-distribution setting of the score-discrepancy bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorePair {
    target: ClassId,
    conditional: LabeledDistribution,
    unconditional: LabeledDistribution,
}

impl ScorePair {
    /// `p(x₀ | target)` against the full `p(x₀)`.
    pub fn guided(dist0: &LabeledDistribution, target: &ClassId) -> Result<Self> {
        Ok(ScorePair {
            target: target.clone(),
            conditional: dist0.restrict(target)?,
            unconditional: dist0.clone(),
        })
    }

    /// `p(x₀ | target)` against `p(x₀ | other)`.
    pub fn contrast(
        dist0: &LabeledDistribution,
        target: &ClassId,
        other: &ClassId,
    ) -> Result<Self> {
        Ok(ScorePair {
            target: target.clone(),
            conditional: dist0.restrict(target)?,
            unconditional: dist0.restrict(other)?,
        })
    }

    pub fn new(
        target: ClassId,
        conditional: LabeledDistribution,
        unconditional: LabeledDistribution,
    ) -> Result<Self> {
        if conditional.dim() != unconditional.dim() {
            return Err(Error::DimensionMismatch {
                expected: conditional.dim(),
                actual: unconditional.dim(),
            });
        }
        Ok(ScorePair {
            target,
            conditional,
            unconditional,
        })
    }

    pub fn target(&self) -> &ClassId {
        &self.target
    }

    pub fn conditional(&self) -> &LabeledDistribution {
        &self.conditional
    }

    pub fn unconditional(&self) -> &LabeledDistribution {
        &self.unconditional
    }

    pub fn dim(&self) -> usize {
        self.conditional.dim()
    }

    /// `R` covering both sides.
    pub fn radius(&self) -> f64 {
        self.conditional.radius().max(self.unconditional.radius())
    }

    pub fn is_all_atoms(&self) -> bool {
        self.conditional.is_all_atoms() && self.unconditional.is_all_atoms()
    }

    pub fn has_atoms(&self) -> bool {
        self.conditional.has_atoms() || self.unconditional.has_atoms()
    }

    pub fn at(&self, schedule: &NoiseSchedule, t: f64) -> Result<DiffusedPair> {
        Ok(DiffusedPair {
            conditional: self.conditional.diffuse(schedule, t, None)?,
            unconditional: self.unconditional.diffuse(schedule, t, None)?,
        })
    }
}

/// Both marginals of a [`ScorePair`] at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusedPair {
    pub conditional: GaussianMixture,
    pub unconditional: GaussianMixture,
}

impl DiffusedPair {
    pub fn scores_into(&self, x: &[f64], cond: &mut [f64], uncond: &mut [f64]) -> Result<()> {
        self.conditional.score_into(x, cond)?;
        self.unconditional.score_into(x, uncond)?;
        Ok(())
    }
}
