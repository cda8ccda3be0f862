//! Experiment configuration: TOML parsing, command-dependent defaults and
//! validation.

use std::fmt;
use std::path::PathBuf;

use guidance_lab::theory::GridSpec;
use guidance_lab::{
    ClassId, GuidanceSpec, LabeledComponent, LabeledDistribution, NoiseSchedule, SamplerConfig,
    SamplerKind, ScorePair, T0_CUTOFF,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, ConfigError};

/// `reference_class` value selecting the full mixture as the unconditional side.
pub const ALL_CLASSES: &str = "all";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Verify,
    Toy2d,
    Sweep,
    Trace,
    Heatmap,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Toy2d => "toy2d",
            Command::Sweep => "sweep",
            Command::Trace => "trace",
            Command::Heatmap => "heatmap",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ComponentConfig {
    Atom {
        weight: f64,
        label: String,
        location: Vec<f64>,
    },
    /// Either `covariance` (full matrix) or `variance` (isotropic) is required.
    Gaussian {
        weight: f64,
        label: String,
        mean: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        covariance: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        variance: Option<f64>,
    },
}

impl ComponentConfig {
    fn weight(&self) -> f64 {
        match self {
            ComponentConfig::Atom { weight, .. } | ComponentConfig::Gaussian { weight, .. } => {
                *weight
            }
        }
    }

    fn label(&self) -> &str {
        match self {
            ComponentConfig::Atom { label, .. } | ComponentConfig::Gaussian { label, .. } => label,
        }
    }

    fn center(&self) -> &[f64] {
        match self {
            ComponentConfig::Atom { location, .. } => location,
            ComponentConfig::Gaussian { mean, .. } => mean,
        }
    }

    fn from_component(c: &LabeledComponent) -> Self {
        use guidance_lab::ComponentKind;
        match &c.kind {
            ComponentKind::Atom { location } => ComponentConfig::Atom {
                weight: c.weight,
                label: c.label.to_string(),
                location: location.clone(),
            },
            ComponentKind::Gaussian { mean, covariance } => ComponentConfig::Gaussian {
                weight: c.weight,
                label: c.label.to_string(),
                mean: mean.clone(),
                covariance: Some(covariance.chunks(mean.len()).map(<[f64]>::to_vec).collect()),
                variance: None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<usize>,
    /// Defaults to the largest component-center norm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    pub components: Vec<ComponentConfig>,
}

impl DistributionConfig {
    fn from_distribution(d: &LabeledDistribution) -> Self {
        DistributionConfig {
            dimension: Some(d.dim()),
            radius: Some(d.radius()),
            components: d
                .components()
                .iter()
                .map(ComponentConfig::from_component)
                .collect(),
        }
    }

    /// Validates and normalizes (explicit dimension, radius and covariances).
    fn resolve(&self) -> Result<(DistributionConfig, LabeledDistribution), ConfigError> {
        let bad =
            |field: &str, rule: String| ConfigError::new(format!("distribution.{field}"), rule);
        if self.components.is_empty() {
            return Err(bad(
                "components",
                "at least one component is required".into(),
            ));
        }
        let dim = self
            .dimension
            .unwrap_or_else(|| self.components[0].center().len());
        if dim == 0 {
            return Err(bad("dimension", "must be positive".into()));
        }
        let mut total = 0.0;
        let mut comps = Vec::with_capacity(self.components.len());
        for (i, c) in self.components.iter().enumerate() {
            let w = c.weight();
            if !(w > 0.0 && w <= 1.0) {
                return Err(bad(
                    "components.weight",
                    format!("component {i}: weight must lie in (0, 1], got {w}"),
                ));
            }
            total += w;
            if c.label() == ALL_CLASSES || c.label().is_empty() {
                return Err(bad(
                    "components.label",
                    format!("component {i}: label `{}` is reserved or empty", c.label()),
                ));
            }
            if c.center().len() != dim {
                return Err(bad(
                    "components",
                    format!(
                        "component {i}: expected dimension {dim}, got {}",
                        c.center().len()
                    ),
                ));
            }
            comps.push(match c {
                ComponentConfig::Atom {
                    weight,
                    label,
                    location,
                } => LabeledComponent::atom(*weight, label.as_str(), location.clone()),
                ComponentConfig::Gaussian {
                    weight,
                    label,
                    mean,
                    covariance,
                    variance,
                } => match (covariance, variance) {
                    (Some(rows), None) => {
                        if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                            return Err(bad(
                                "components.covariance",
                                format!("component {i}: must be {dim}×{dim}"),
                            ));
                        }
                        LabeledComponent::gaussian(
                            *weight,
                            label.as_str(),
                            mean.clone(),
                            rows.concat(),
                        )
                    }
                    (None, Some(v)) => {
                        LabeledComponent::isotropic(*weight, label.as_str(), mean.clone(), *v)
                    }
                    _ => {
                        return Err(bad(
                            "components",
                            format!("component {i}: give exactly one of covariance, variance"),
                        ))
                    }
                },
            });
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(bad(
                "components.weight",
                format!("weights must sum to 1, got {total}"),
            ));
        }
        let dist = LabeledDistribution::new(comps, self.radius)
            .map_err(|e| bad("components", e.to_string()))?;
        Ok((DistributionConfig::from_distribution(&dist), dist))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Probability mass inside the outlier contour.
    pub mass: f64,
    /// Diffusion time at which class posteriors are evaluated.
    pub t_eval: f64,
    pub contour_samples: usize,
    pub contour_seed: u64,
    /// Exact conditional draws compared against each batch.
    pub reference_samples: usize,
    pub projections: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            mass: 0.99,
            t_eval: T0_CUTOFF,
            contour_samples: 1_000_000,
            contour_seed: 0,
            reference_samples: 2000,
            projections: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub tightness_times: Vec<f64>,
    pub tightness_tolerance: f64,
    pub random_configs: usize,
    pub t_points: usize,
    pub probes: usize,
    pub max_atoms: usize,
    pub max_dim: usize,
    pub max_radius: f64,
    pub ve_sigma_min: f64,
    pub ve_sigma_max: f64,
    pub score_tolerance: f64,
    pub harnack_pairs: usize,
    pub harnack_alpha: Vec<f64>,
    pub harnack_dims: Vec<usize>,
    pub harnack_tolerance: f64,
    pub kl_a: Vec<f64>,
    pub kl_times: Vec<f64>,
    pub kl_draws: usize,
    pub kl_tolerance: f64,
    pub kl_mc_tolerance: f64,
    pub de_bruijn_a: f64,
    pub de_bruijn_t_points: usize,
    pub de_bruijn_t_min: f64,
    pub de_bruijn_t_max: f64,
    pub de_bruijn_step: f64,
    pub de_bruijn_tolerance: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            tightness_times: vec![0.1, 0.5, 1.0, 2.0],
            tightness_tolerance: 1e-9,
            random_configs: 100,
            t_points: 50,
            probes: 512,
            max_atoms: 8,
            max_dim: 3,
            max_radius: 2.0,
            ve_sigma_min: 0.01,
            ve_sigma_max: 50.0,
            score_tolerance: 1e-8,
            harnack_pairs: 10_000,
            harnack_alpha: vec![1.5, 2.0, 4.0],
            harnack_dims: vec![1, 2, 3],
            harnack_tolerance: 1e-9,
            kl_a: vec![0.5, 1.0],
            kl_times: vec![0.5, 1.0, 2.0],
            kl_draws: 1_000_000,
            kl_tolerance: 1e-6,
            kl_mc_tolerance: 1e-2,
            de_bruijn_a: 1.0,
            de_bruijn_t_points: 20,
            de_bruijn_t_min: 0.2,
            de_bruijn_t_max: 3.0,
            de_bruijn_step: 1e-4,
            de_bruijn_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub omega0: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Adds a `fixed(ω₀)` run per `ω₀`.
    pub include_fixed: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            omega0: vec![1.0, 1.35, 1.5, 1.7, 1.8],
            lambda: vec![0.03, 0.15, 0.6, std::f64::consts::LN_2, 1.0],
            include_fixed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub trajectories: usize,
    pub tolerance: f64,
    /// Required Spearman correlation between mean cosine and `t`.
    pub min_spearman: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            trajectories: 256,
            tolerance: 1e-9,
            min_spearman: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapConfig {
    pub times: Vec<f64>,
    pub grid: GridSpec,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        HeatmapConfig {
            times: vec![0.1, 0.5, 1.0, 2.0, 3.0],
            grid: GridSpec::default(),
        }
    }
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    pub seeds: Vec<u64>,
    pub n_samples: usize,
    pub output_dir: PathBuf,
    pub target_class: String,
    /// A class label, or `"all"` for the full mixture.
    pub reference_class: String,
    pub distribution: DistributionConfig,
    pub schedule: NoiseSchedule,
    pub guidance: Vec<GuidanceSpec>,
    pub sampler: SamplerConfig,
    pub metrics: MetricsConfig,
    pub verify: VerifyConfig,
    pub sweep: SweepConfig,
    pub trace: TraceConfig,
    pub heatmap: HeatmapConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    command: Option<Command>,
    seeds: Option<Vec<u64>>,
    n_samples: Option<usize>,
    output_dir: Option<PathBuf>,
    target_class: Option<String>,
    reference_class: Option<String>,
    distribution: Option<DistributionConfig>,
    schedule: Option<NoiseSchedule>,
    guidance: Option<Vec<toml::Value>>,
    sampler: Option<SamplerConfig>,
    #[serde(default)]
    metrics: MetricsConfig,
    #[serde(default)]
    verify: VerifyConfig,
    #[serde(default)]
    sweep: SweepConfig,
    #[serde(default)]
    trace: TraceConfig,
    #[serde(default)]
    heatmap: HeatmapConfig,
}

fn default_distribution(command: Command) -> LabeledDistribution {
    match command {
        Command::Toy2d | Command::Sweep => LabeledDistribution::reference_toy(),
        Command::Verify => LabeledDistribution::two_atoms(&[1.0]).expect("valid atoms"),
        Command::Trace | Command::Heatmap => {
            LabeledDistribution::two_atoms(&[1.0, 0.0]).expect("valid atoms")
        }
    }
}

fn default_schedule(command: Command) -> NoiseSchedule {
    match command {
        Command::Toy2d | Command::Sweep => NoiseSchedule::default(),
        _ => NoiseSchedule::canonical_ou(5.0).expect("valid schedule"),
    }
}

fn default_sampler(command: Command) -> SamplerConfig {
    match command {
        Command::Toy2d | Command::Sweep => SamplerConfig::new(SamplerKind::Ddim, 250),
        _ => SamplerConfig::new(SamplerKind::ReverseSde, 200),
    }
}

fn default_guidance(command: Command, t_max: f64) -> Vec<GuidanceSpec> {
    match command {
        Command::Toy2d => vec![
            GuidanceSpec::fixed(1.0),
            GuidanceSpec::BetaPdf {
                omega_peak: 1.0,
                a: 2.0,
                b: 2.0,
                t_max,
                baseline: 0.0,
            },
            GuidanceSpec::c2fg(1.0, 0.6, t_max),
        ],
        Command::Trace => vec![GuidanceSpec::fixed(1.0)],
        Command::Verify | Command::Sweep | Command::Heatmap => Vec::new(),
    }
}

const NEEDS_T_MAX: [&str; 5] = ["c2fg", "linear", "reverse_linear", "sine", "beta_pdf"];

fn resolve_guidance(raw: &[toml::Value], t_max: f64) -> Result<Vec<GuidanceSpec>, ConfigError> {
    raw.iter()
        .enumerate()
        .map(|(i, v)| {
            let mut table = v
                .as_table()
                .cloned()
                .ok_or_else(|| ConfigError::new(format!("guidance[{i}]"), "must be a table"))?;
            let kind = table
                .get("kind")
                .and_then(toml::Value::as_str)
                .ok_or_else(|| {
                    ConfigError::new(format!("guidance[{i}].kind"), "missing or not a string")
                })?
                .to_owned();
            if NEEDS_T_MAX.contains(&kind.as_str()) && !table.contains_key("t_max") {
                table.insert("t_max".into(), toml::Value::Float(t_max));
            }
            let spec: GuidanceSpec =
                toml::Value::Table(table)
                    .try_into()
                    .map_err(|e: toml::de::Error| {
                        ConfigError::new(format!("guidance[{i}]"), e.message().to_owned())
                    })?;
            spec.validate()
                .map_err(|e| ConfigError::new(format!("guidance.{kind}"), e.to_string()))?;
            if let Some(tm) = spec.t_max() {
                if tm > t_max {
                    return Err(ConfigError::new(
                        format!("guidance.{kind}"),
                        format!("t_max {tm} exceeds the schedule horizon {t_max}"),
                    ));
                }
            }
            Ok(spec)
        })
        .collect()
}

/// Parses a configuration whose `command` is given in the document.
pub fn parse_config(text: &[u8]) -> Result<ExperimentConfig, CliError> {
    parse(text, None)
}

/// Parses a configuration for `command`; a `command` key in the document
/// must agree with it.
pub fn parse_config_with_command(
    text: &[u8],
    command: Command,
) -> Result<ExperimentConfig, CliError> {
    parse(text, Some(command))
}

fn parse(text: &[u8], command: Option<Command>) -> Result<ExperimentConfig, CliError> {
    let text = std::str::from_utf8(text)
        .map_err(|e| CliError::Config(ConfigError::new("<document>", format!("not UTF-8: {e}"))))?;
    let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Syntax(e.to_string()))?;
    resolve(raw, command).map_err(CliError::Config)
}

fn resolve(raw: RawConfig, command: Option<Command>) -> Result<ExperimentConfig, ConfigError> {
    let command = match (raw.command, command) {
        (Some(a), Some(b)) if a != b => {
            return Err(ConfigError::new(
                "command",
                format!("document says `{a}` but `{b}` was requested"),
            ))
        }
        (Some(c), _) | (None, Some(c)) => c,
        (None, None) => return Err(ConfigError::new("command", "missing")),
    };

    let schedule = raw.schedule.unwrap_or_else(|| default_schedule(command));
    schedule
        .validate()
        .map_err(|e| ConfigError::new("schedule", e.to_string()))?;

    let default_dist = raw.distribution.is_none();
    let (distribution, dist) = match raw.distribution {
        Some(d) => d.resolve()?,
        None => {
            let d = default_distribution(command);
            (DistributionConfig::from_distribution(&d), d)
        }
    };
    let labels: Vec<String> = dist.labels().iter().map(|c| c.to_string()).collect();

    let target_class = match raw.target_class {
        Some(t) => t,
        None if default_dist && matches!(command, Command::Toy2d | Command::Sweep) => {
            "orange".into()
        }
        None => labels[0].clone(),
    };
    if !labels.contains(&target_class) {
        return Err(ConfigError::new(
            "target_class",
            format!(
                "`{target_class}` is not a label of the distribution ({})",
                labels.join(", ")
            ),
        ));
    }
    let reference_class = match raw.reference_class {
        Some(r) => r,
        // the score bound is attained on the two-class contrast
        None if matches!(command, Command::Verify | Command::Trace) && labels.len() == 2 => labels
            .iter()
            .find(|l| **l != target_class)
            .cloned()
            .expect("two labels"),
        None => ALL_CLASSES.into(),
    };
    if reference_class != ALL_CLASSES && !labels.contains(&reference_class) {
        return Err(ConfigError::new(
            "reference_class",
            format!("`{reference_class}` is neither `all` nor a label of the distribution"),
        ));
    }
    if reference_class == target_class {
        return Err(ConfigError::new(
            "reference_class",
            "must differ from target_class",
        ));
    }

    let guidance = match raw.guidance {
        Some(g) => resolve_guidance(&g, schedule.t_max())?,
        None => default_guidance(command, schedule.t_max()),
    };
    if matches!(command, Command::Toy2d | Command::Trace) && guidance.is_empty() {
        return Err(ConfigError::new(
            "guidance",
            "at least one schedule is required",
        ));
    }

    let sampler = raw.sampler.unwrap_or_else(|| default_sampler(command));
    sampler
        .time_grid(&schedule, dist.has_atoms())
        .map_err(|e| ConfigError::new("sampler", e.to_string()))?;

    let seeds = raw.seeds.unwrap_or_else(|| match command {
        Command::Toy2d => (0..10).collect(),
        _ => vec![0],
    });
    if seeds.is_empty() {
        return Err(ConfigError::new("seeds", "must not be empty"));
    }
    check_seeds(&seeds)?;
    let n_samples = raw.n_samples.unwrap_or(5000);
    if n_samples == 0 {
        return Err(ConfigError::new("n_samples", "must be positive"));
    }

    let cfg = ExperimentConfig {
        command,
        seeds,
        n_samples,
        output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("runs")),
        target_class,
        reference_class,
        distribution,
        schedule,
        guidance,
        sampler,
        metrics: raw.metrics,
        verify: raw.verify,
        sweep: raw.sweep,
        trace: raw.trace,
        heatmap: raw.heatmap,
    };
    cfg.validate_sections()?;
    Ok(cfg)
}

/// TOML integers are signed 64-bit.
pub fn check_seeds(seeds: &[u64]) -> Result<(), ConfigError> {
    match seeds.iter().find(|s| **s > i64::MAX as u64) {
        Some(s) => Err(ConfigError::new(
            "seeds",
            format!("{s} exceeds the largest representable seed {}", i64::MAX),
        )),
        None => Ok(()),
    }
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::new(
            field,
            format!("must be finite and > 0, got {v}"),
        ))
    }
}

fn nonzero(field: &str, v: usize) -> Result<(), ConfigError> {
    if v == 0 {
        Err(ConfigError::new(field, "must be at least 1"))
    } else {
        Ok(())
    }
}

fn nonempty<T>(field: &str, v: &[T]) -> Result<(), ConfigError> {
    if v.is_empty() {
        Err(ConfigError::new(field, "must not be empty"))
    } else {
        Ok(())
    }
}

impl ExperimentConfig {
    fn validate_sections(&self) -> Result<(), ConfigError> {
        let m = &self.metrics;
        if !(m.mass > 0.0 && m.mass < 1.0) {
            return Err(ConfigError::new("metrics.mass", "must lie in (0, 1)"));
        }
        if !(m.t_eval >= 0.0 && m.t_eval <= self.schedule.t_max()) {
            return Err(ConfigError::new(
                "metrics.t_eval",
                "must lie in [0, t_max] of the schedule",
            ));
        }
        nonzero("metrics.contour_samples", m.contour_samples)?;
        nonzero("metrics.reference_samples", m.reference_samples)?;
        nonzero("metrics.projections", m.projections)?;
        let t_max = self.schedule.t_max();

        match self.command {
            Command::Verify => {
                let v = &self.verify;
                if !self.schedule.is_vp() {
                    return Err(ConfigError::new("schedule", "verify needs a VP schedule"));
                }
                if !self.score_pair().map(|p| p.is_all_atoms()).unwrap_or(false) {
                    return Err(ConfigError::new(
                        "distribution.components",
                        "verify needs an atom distribution",
                    ));
                }
                nonempty("verify.tightness_times", &v.tightness_times)?;
                for t in &v.tightness_times {
                    if !(*t >= T0_CUTOFF && *t <= t_max) {
                        return Err(ConfigError::new(
                            "verify.tightness_times",
                            format!("{t} is outside [{T0_CUTOFF}, {t_max}]"),
                        ));
                    }
                }
                nonzero("verify.t_points", v.t_points)?;
                nonzero("verify.probes", v.probes)?;
                if v.max_atoms < 2 {
                    return Err(ConfigError::new("verify.max_atoms", "must be at least 2"));
                }
                nonzero("verify.max_dim", v.max_dim)?;
                positive("verify.max_radius", v.max_radius)?;
                positive("verify.ve_sigma_min", v.ve_sigma_min)?;
                if !(v.ve_sigma_max > v.ve_sigma_min) {
                    return Err(ConfigError::new(
                        "verify.ve_sigma_max",
                        "must exceed ve_sigma_min",
                    ));
                }
                nonzero("verify.harnack_pairs", v.harnack_pairs)?;
                nonempty("verify.harnack_alpha", &v.harnack_alpha)?;
                if v.harnack_alpha.iter().any(|a| !(*a > 1.0)) {
                    return Err(ConfigError::new(
                        "verify.harnack_alpha",
                        "values must exceed 1",
                    ));
                }
                nonempty("verify.harnack_dims", &v.harnack_dims)?;
                if v.harnack_dims.contains(&0) {
                    return Err(ConfigError::new(
                        "verify.harnack_dims",
                        "values must be positive",
                    ));
                }
                nonempty("verify.kl_a", &v.kl_a)?;
                nonempty("verify.kl_times", &v.kl_times)?;
                if v.kl_times.iter().any(|t| !(*t > 0.0)) {
                    return Err(ConfigError::new(
                        "verify.kl_times",
                        "values must be positive",
                    ));
                }
                nonzero("verify.kl_draws", v.kl_draws)?;
                nonzero("verify.de_bruijn_t_points", v.de_bruijn_t_points)?;
                positive("verify.de_bruijn_step", v.de_bruijn_step)?;
                if !(v.de_bruijn_t_min - v.de_bruijn_step > 0.0
                    && v.de_bruijn_t_max >= v.de_bruijn_t_min)
                {
                    return Err(ConfigError::new(
                        "verify.de_bruijn_t_min",
                        "need step < t_min <= t_max",
                    ));
                }
                for (f, tol) in [
                    ("verify.tightness_tolerance", v.tightness_tolerance),
                    ("verify.score_tolerance", v.score_tolerance),
                    ("verify.harnack_tolerance", v.harnack_tolerance),
                    ("verify.kl_tolerance", v.kl_tolerance),
                    ("verify.kl_mc_tolerance", v.kl_mc_tolerance),
                    ("verify.de_bruijn_tolerance", v.de_bruijn_tolerance),
                ] {
                    positive(f, tol)?;
                }
            }
            Command::Sweep => {
                nonempty("sweep.omega0", &self.sweep.omega0)?;
                nonempty("sweep.lambda", &self.sweep.lambda)?;
                for &w in &self.sweep.omega0 {
                    for &l in &self.sweep.lambda {
                        GuidanceSpec::c2fg(w, l, t_max)
                            .validate()
                            .map_err(|e| ConfigError::new("sweep", e.to_string()))?;
                    }
                }
            }
            Command::Trace => {
                nonzero("trace.trajectories", self.trace.trajectories)?;
                positive("trace.tolerance", self.trace.tolerance)?;
            }
            Command::Heatmap => {
                if self.distribution.dimension != Some(2) {
                    return Err(ConfigError::new(
                        "distribution.dimension",
                        "heatmap needs 2",
                    ));
                }
                nonempty("heatmap.times", &self.heatmap.times)?;
                for t in &self.heatmap.times {
                    if !(*t > 0.0 && *t <= t_max) {
                        return Err(ConfigError::new(
                            "heatmap.times",
                            format!("{t} is outside (0, {t_max}]"),
                        ));
                    }
                }
                let g = &self.heatmap.grid;
                if g.nx == 0 || g.ny == 0 || !(g.x_max > g.x_min) || !(g.y_max > g.y_min) {
                    return Err(ConfigError::new(
                        "heatmap.grid",
                        "empty or inverted lattice",
                    ));
                }
            }
            Command::Toy2d => {}
        }
        Ok(())
    }

    pub fn labeled_distribution(&self) -> Result<LabeledDistribution, ConfigError> {
        self.distribution.resolve().map(|(_, d)| d)
    }

    pub fn target(&self) -> ClassId {
        ClassId::new(self.target_class.as_str())
    }

    pub fn score_pair(&self) -> Result<ScorePair, ConfigError> {
        let d = self.labeled_distribution()?;
        let target = self.target();
        let pair = if self.reference_class == ALL_CLASSES {
            ScorePair::guided(&d, &target)
        } else {
            ScorePair::contrast(&d, &target, &ClassId::new(self.reference_class.as_str()))
        };
        pair.map_err(|e| ConfigError::new("target_class", e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Serialization with `output_dir` replaced by `.`, so that it does not
    /// depend on where the run is written.
    pub fn canonical_toml(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::from(".");
        c.to_toml()
    }

    /// 64-bit digest of [`Self::canonical_toml`].
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }
}
