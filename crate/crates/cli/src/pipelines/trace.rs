use guidance_lab::theory::{discrepancy_trace, log_ratio_grid, trace_report};
use guidance_lab::BoundReport;
use serde_json::{json, Value};

use crate::error::CliError;
use crate::output::{num, Table, Verdict};
use crate::Run;

pub(crate) fn trace(run: &mut Run) -> Result<Value, CliError> {
    let cfg = run.cfg;
    let tc = &cfg.trace;
    let pair = cfg.score_pair()?;
    let mut table = Table::new(
        "trace",
        &["guidance", "step", "t", "mse", "bound_sq", "cosine"],
    );
    let mut reports: Vec<BoundReport> = Vec::new();
    let mut results = Vec::new();
    for g in &cfg.guidance {
        let label = g.label();
        for &seed in &cfg.seeds {
            let pts = run.stage(&format!("trace {label} [{seed}]"), |_| {
                Ok(discrepancy_trace(
                    &pair,
                    &cfg.schedule,
                    g,
                    &cfg.sampler,
                    tc.trajectories,
                    seed,
                )?)
            })?;
            for (i, p) in pts.iter().enumerate() {
                table.push(
                    seed,
                    vec![
                        label.clone(),
                        i.to_string(),
                        num(p.t),
                        num(p.mse),
                        num(p.bound * p.bound),
                        num(p.cosine),
                    ],
                );
            }
            let (rep, rho) = trace_report(&pts, tc.tolerance);
            let trend = Verdict::threshold(
                &format!("cosine_trend {label} [{seed}]"),
                rho,
                tc.min_spearman,
            );
            results.push(json!({
                "guidance": label,
                "seed": seed,
                "spearman_cosine_t": rho,
                "mse_within_bound": rep.passed,
                "worst_margin": rep.worst_margin(),
            }));
            run.verdicts.push(trend);
            reports.push(rep);
        }
    }
    let refs: Vec<&BoundReport> = reports.iter().collect();
    run.verdicts
        .insert(0, Verdict::from_reports("trace_mse", &refs));
    run.stage("write", |run| run.write(&table))?;
    Ok(json!({
        "trajectories": tc.trajectories,
        "target_class": cfg.target_class,
        "reference_class": cfg.reference_class,
        "traces": results,
    }))
}

pub(crate) fn heatmap(run: &mut Run) -> Result<Value, CliError> {
    let cfg = run.cfg;
    let pair = cfg.score_pair()?;
    let seed = cfg.seeds[0];
    let mut table = Table::new("heatmap", &["t", "x", "y", "log2_ratio"]);
    let mut results = Vec::new();
    for &t in &cfg.heatmap.times {
        let grid = run.stage(&format!("grid t={t}"), |_| {
            Ok(log_ratio_grid(&pair, &cfg.schedule, t, &cfg.heatmap.grid)?)
        })?;
        for (iy, y) in grid.ys.iter().enumerate() {
            for (ix, x) in grid.xs.iter().enumerate() {
                let v = grid.get(ix, iy).map(num).unwrap_or_default();
                table.push(seed, vec![num(t), num(*x), num(*y), v]);
            }
        }
        results.push(json!({
            "t": t,
            "max_abs_log2_ratio": grid.max_abs(),
            "undefined_cells": grid.values.iter().filter(|v| v.is_none()).count(),
        }));
    }
    run.stage("write", |run| run.write(&table))?;
    Ok(json!({
        "target_class": cfg.target_class,
        "reference_class": cfg.reference_class,
        "grid": cfg.heatmap.grid,
        "times": results,
    }))
}
