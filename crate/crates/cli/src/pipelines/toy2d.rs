use guidance_lab::rng::substream;
use guidance_lab::stats::{summarize, Summary};
use guidance_lab::{
    class_fidelity, contour_threshold, energy_distance, generate, omega, outlier_rate,
    sliced_wasserstein, ContourThreshold, GaussianMixture, GuidanceSpec, LabeledDistribution,
    SampleBatch, SampleMatrix, ScorePair,
};
use rand::Rng;
use serde_json::{json, Value};

use crate::error::CliError;
use crate::output::{num, Table};
use crate::{ExperimentConfig, Run};

const REFERENCE_TAG: u64 = 3 << 40;
const PROJECTION_TAG: u64 = 4 << 40;

/// Everything shared by the runs of one toy experiment.
struct Bench {
    dist: LabeledDistribution,
    pair: ScorePair,
    contour: ContourThreshold,
    /// Exact target-class law at the sampler's final time.
    reference: GaussianMixture,
    times: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Scores {
    outlier_rate: f64,
    class_fidelity: f64,
    energy_distance: f64,
    sliced_w2: f64,
}

impl Bench {
    fn new(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let dist = cfg.labeled_distribution()?;
        let pair = cfg.score_pair()?;
        let target = cfg.target();
        let m = &cfg.metrics;
        let at_zero = dist.diffuse(&cfg.schedule, 0.0, Some(&target))?;
        let contour = contour_threshold(&at_zero, m.mass, m.contour_samples, m.contour_seed)?;
        let times = cfg.sampler.time_grid(&cfg.schedule, pair.has_atoms())?;
        let t_end = *times.last().expect("non-empty grid");
        let reference = dist.diffuse(&cfg.schedule, t_end, Some(&target))?;
        Ok(Bench {
            dist,
            pair,
            contour,
            reference,
            times,
        })
    }

    fn evaluate(
        &self,
        cfg: &ExperimentConfig,
        g: &GuidanceSpec,
        seed: u64,
    ) -> Result<(Scores, SampleBatch), CliError> {
        let m = &cfg.metrics;
        let batch = generate(
            &self.pair,
            &cfg.schedule,
            g,
            &cfg.sampler,
            cfg.n_samples,
            seed,
        )?;
        let xs = &batch.samples;
        let exact = self
            .reference
            .sample(m.reference_samples, substream(seed, REFERENCE_TAG).random());
        let k = m.reference_samples.min(xs.rows());
        let head: Vec<Vec<f64>> = xs.iter_rows().take(k).map(<[f64]>::to_vec).collect();
        let scores = Scores {
            outlier_rate: outlier_rate(xs, &self.contour)?,
            class_fidelity: class_fidelity(xs, &self.dist, &cfg.schedule, m.t_eval, &cfg.target())?,
            energy_distance: energy_distance(&SampleMatrix::from_rows(&head)?, &exact)?,
            sliced_w2: sliced_wasserstein(
                xs,
                &exact,
                m.projections,
                substream(seed, PROJECTION_TAG).random(),
            )?,
        };
        Ok((scores, batch))
    }
}

fn stats(s: Summary) -> Value {
    json!({ "mean": s.mean, "std": s.std, "ci95": s.ci95 })
}

fn aggregate(runs: &[Scores]) -> Value {
    let col = |f: fn(&Scores) -> f64| summarize(&runs.iter().map(f).collect::<Vec<_>>());
    json!({
        "runs": runs.len(),
        "outlier_rate": stats(col(|s| s.outlier_rate)),
        "class_fidelity": stats(col(|s| s.class_fidelity)),
        "energy_distance": stats(col(|s| s.energy_distance)),
        "sliced_w2": stats(col(|s| s.sliced_w2)),
    })
}

fn score_cells(s: &Scores) -> [String; 4] {
    [
        num(s.outlier_rate),
        num(s.class_fidelity),
        num(s.energy_distance),
        num(s.sliced_w2),
    ]
}

fn contour_json(c: &ContourThreshold) -> Value {
    json!({
        "mass": c.mass,
        "log_threshold": c.log_threshold,
        "density_threshold": c.density_threshold,
        "mc_samples": c.mc_samples,
    })
}

fn omega_table(
    cfg: &ExperimentConfig,
    times: &[f64],
    specs: &[GuidanceSpec],
) -> Result<Table, CliError> {
    let mut t = Table::new("omega", &["guidance", "t", "omega"]);
    for g in specs.iter().filter(|g| !g.needs_ratio()) {
        for &time in times {
            t.push(
                cfg.seeds[0],
                vec![g.label(), num(time), num(omega(g, time, None)?)],
            );
        }
    }
    Ok(t)
}

pub(crate) fn toy2d(run: &mut Run) -> Result<Value, CliError> {
    let cfg = run.cfg;
    let bench = run.stage("contour", |_| Bench::new(cfg))?;
    let dim = bench.dist.dim();
    let mut runs = Table::new(
        "toy2d_runs",
        &[
            "guidance",
            "outlier_rate",
            "class_fidelity",
            "energy_distance",
            "sliced_w2",
        ],
    );
    let mut cols = vec!["guidance".to_owned(), "index".to_owned()];
    cols.extend((0..dim).map(|i| format!("x{i}")));
    cols.extend(["log_density".to_owned(), "outlier".to_owned()]);
    let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut samples = Table::new("toy2d_samples", &cols);

    let mut per_guidance = Vec::new();
    for g in &cfg.guidance {
        let label = g.label();
        let scores = run.stage(&format!("generate {label}"), |_| {
            let mut out = Vec::with_capacity(cfg.seeds.len());
            for &seed in &cfg.seeds {
                let (s, batch) = bench.evaluate(cfg, g, seed)?;
                let mut row = vec![label.clone()];
                row.extend(score_cells(&s));
                runs.push(seed, row);
                for (i, x) in batch.samples.iter_rows().enumerate() {
                    let ld = bench.contour.mixture.log_density(x)?;
                    let mut row = vec![label.clone(), i.to_string()];
                    row.extend(x.iter().map(|v| num(*v)));
                    row.push(num(ld));
                    row.push(u8::from(ld < bench.contour.log_threshold).to_string());
                    samples.push(seed, row);
                }
                out.push(s);
            }
            Ok(out)
        })?;
        per_guidance.push((g, scores));
    }

    let omegas = omega_table(cfg, &bench.times, &cfg.guidance)?;
    run.stage("write", |run| {
        run.write(&runs)?;
        run.write(&samples)?;
        run.write(&omegas)
    })?;

    let mut ranked: Vec<(String, f64)> = per_guidance
        .iter()
        .map(|(g, s)| {
            (
                g.label(),
                s.iter().map(|x| x.outlier_rate).sum::<f64>() / s.len() as f64,
            )
        })
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(json!({
        "contour": contour_json(&bench.contour),
        "target_class": cfg.target_class,
        "n_samples": cfg.n_samples,
        "guidance": per_guidance
            .iter()
            .map(|(g, s)| {
                let mut v = aggregate(s);
                v["label"] = json!(g.label());
                v["spec"] = json!(g);
                v["approximate_form"] = json!(g.is_approximate_form());
                v
            })
            .collect::<Vec<_>>(),
        "outlier_rate_order": ranked.iter().map(|(l, _)| l.clone()).collect::<Vec<_>>(),
    }))
}

pub(crate) fn sweep(run: &mut Run) -> Result<Value, CliError> {
    let cfg = run.cfg;
    let t_max = cfg.schedule.t_max();
    let bench = run.stage("contour", |_| Bench::new(cfg))?;
    let mut specs: Vec<(f64, Option<f64>, GuidanceSpec)> = Vec::new();
    for &w in &cfg.sweep.omega0 {
        if cfg.sweep.include_fixed {
            specs.push((w, None, GuidanceSpec::fixed(w)));
        }
        for &l in &cfg.sweep.lambda {
            specs.push((w, Some(l), GuidanceSpec::c2fg(w, l, t_max)));
        }
    }
    let mut rows = Table::new(
        "sweep",
        &[
            "guidance",
            "omega0",
            "lambda",
            "outlier_rate",
            "class_fidelity",
            "energy_distance",
            "sliced_w2",
        ],
    );
    let mut cells = Vec::new();
    for (w, l, g) in &specs {
        let scores = run.stage(&format!("generate {}", g.label()), |_| {
            let mut out = Vec::new();
            for &seed in &cfg.seeds {
                let (s, _) = bench.evaluate(cfg, g, seed)?;
                let mut row = vec![g.label(), num(*w), l.map(num).unwrap_or_default()];
                row.extend(score_cells(&s));
                rows.push(seed, row);
                out.push(s);
            }
            Ok(out)
        })?;
        let mut v = aggregate(&scores);
        v["label"] = json!(g.label());
        v["omega0"] = json!(w);
        v["lambda"] = json!(l);
        cells.push(v);
    }
    let all: Vec<GuidanceSpec> = specs.iter().map(|s| s.2.clone()).collect();
    let omegas = omega_table(cfg, &bench.times, &all)?;
    run.stage("write", |run| {
        run.write(&rows)?;
        run.write(&omegas)
    })?;
    Ok(json!({
        "contour": contour_json(&bench.contour),
        "target_class": cfg.target_class,
        "cells": cells,
    }))
}
