//! Experiment runner for `guidance-lab`: configuration, pipelines and
//! deterministic artifacts.
//!
//! Each run writes `<out>/<command>/<config-hash>/` containing the CSV
//! artifacts, `config.toml`, `summary.json` and `manifest.json`.

// Negated comparisons are used on purpose so that NaN inputs fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod output;
mod pipelines;

use std::time::Instant;

use serde_json::json;

pub use config::{parse_config, parse_config_with_command, Command, ExperimentConfig};
pub use error::{CliError, ConfigError};
pub use output::{RunManifest, Verdict};

use output::{RunDir, StageTiming, Table};

pub(crate) struct Run<'a> {
    pub cfg: &'a ExperimentConfig,
    pub dir: RunDir,
    pub verdicts: Vec<Verdict>,
    pub stages: Vec<StageTiming>,
}

impl Run<'_> {
    pub fn stage<T>(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Self) -> Result<T, CliError>,
    ) -> Result<T, CliError> {
        let start = Instant::now();
        let out = f(self);
        self.stages.push(StageTiming {
            stage: name.to_owned(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn write(&mut self, table: &Table) -> Result<(), CliError> {
        self.dir.write_table(table)
    }
}

/// Executes the configured pipeline on the current rayon pool.
pub fn run(cfg: &ExperimentConfig) -> Result<RunManifest, CliError> {
    let hash = cfg.hash_hex();
    let dir = RunDir::create(&cfg.output_dir, cfg.command.name(), &hash)?;
    let mut run = Run {
        cfg,
        dir,
        verdicts: Vec::new(),
        stages: Vec::new(),
    };
    run.dir.write_text("config.toml", &cfg.canonical_toml())?;
    let results = match cfg.command {
        Command::Verify => pipelines::verify(&mut run)?,
        Command::Toy2d => pipelines::toy2d(&mut run)?,
        Command::Sweep => pipelines::sweep(&mut run)?,
        Command::Trace => pipelines::trace(&mut run)?,
        Command::Heatmap => pipelines::heatmap(&mut run)?,
    };
    let passed = run.verdicts.iter().all(|v| v.passed);
    let approximate: Vec<String> = cfg
        .guidance
        .iter()
        .filter(|g| g.is_approximate_form())
        .map(|g| g.label())
        .collect();
    let summary = json!({
        "command": cfg.command.name(),
        "config_hash": hash,
        "seeds": cfg.seeds,
        "sampler": cfg.sampler,
        "schedule": cfg.schedule,
        "approximate_guidance_forms": approximate,
        "checks": run.verdicts,
        "passed": passed,
        "results": results,
    });
    run.dir.write_json("summary.json", &summary)?;
    let manifest = RunManifest {
        command: cfg.command.name().to_owned(),
        config_hash: hash,
        run_dir: run.dir.path.clone(),
        sampler_kind: cfg.sampler.kind.name().to_owned(),
        artifacts: run.dir.artifacts.clone(),
        verdicts: run.verdicts,
        stages: run.stages,
        passed,
    };
    let path = manifest.run_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(manifest)
}

/// [`run`] on a dedicated pool of `threads` workers.
pub fn run_with_threads(cfg: &ExperimentConfig, threads: usize) -> Result<RunManifest, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Threads(e.to_string()))?
        .install(|| run(cfg))
}
