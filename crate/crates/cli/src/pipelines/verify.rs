use guidance_lab::rng::substream;
use guidance_lab::theory::{
    check_de_bruijn, check_harnack, check_kl_bound, check_score_mse_bound, harnack_sample,
    CheckMode,
};
use guidance_lab::{
    BoundPoint, BoundReport, ClassId, HarnackKind, LabeledComponent, LabeledDistribution,
    NoiseSchedule, ProbeSpec, ScorePair, T0_CUTOFF,
};
use rand::Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::VerifyConfig;
use crate::error::CliError;
use crate::output::{num, Table, Verdict};
use crate::Run;

const HARNACK_TAG: u64 = 1 << 40;
const KL_TAG: u64 = 2 << 40;

fn derived_seed(seed: u64, tag: u64) -> u64 {
    substream(seed, tag).random()
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Random atoms labelled `a` / `b` (both present) inside a ball.
fn random_atoms(seed: u64, index: u64, v: &VerifyConfig) -> (LabeledDistribution, u64) {
    let mut rng = substream(seed, index);
    let dim = rng.random_range(1..=v.max_dim);
    let n = rng.random_range(2..=v.max_atoms);
    let radius = rng.random_range(0.1 * v.max_radius..=v.max_radius);
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let comps = raw
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let loc = loop {
                let p: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
                if p.iter().map(|c| c * c).sum::<f64>() <= 1.0 {
                    break p.into_iter().map(|c| c * radius).collect();
                }
            };
            let label = match i {
                0 => "a",
                1 => "b",
                _ if rng.random_bool(0.5) => "a",
                _ => "b",
            };
            LabeledComponent::atom(w / total, label, loc)
        })
        .collect();
    let d = LabeledDistribution::new(comps, None).expect("random atoms are valid");
    (d, rng.random())
}

struct Collected {
    name: String,
    reports: Vec<BoundReport>,
}

fn collect(into: &mut Vec<Collected>, name: &str, report: BoundReport) {
    match into.iter_mut().find(|c| c.name == name) {
        Some(c) => c.reports.push(report),
        None => into.push(Collected {
            name: name.to_owned(),
            reports: vec![report],
        }),
    }
}

pub(crate) fn verify(run: &mut Run) -> Result<Value, CliError> {
    let cfg = run.cfg;
    let v = &cfg.verify;
    let schedule = cfg.schedule;
    let t_max = schedule.t_max();
    let pair = cfg.score_pair()?;
    let ve = NoiseSchedule::ve_geometric(v.ve_sigma_min, v.ve_sigma_max, t_max)?;
    let grid = linspace(T0_CUTOFF, t_max, v.t_points);

    let mut checks: Vec<Collected> = Vec::new();
    let mut tight = Table::new("score_tightness", &["t", "measured", "bound", "margin"]);
    let mut suite = Table::new(
        "score_suite",
        &[
            "schedule", "config", "atoms", "dim", "radius", "t", "measured", "bound", "margin",
        ],
    );
    let mut harnack = Table::new(
        "harnack",
        &[
            "kind",
            "alpha_h",
            "m",
            "pair",
            "s1",
            "s2",
            "log_lhs",
            "log_rhs",
            "margin",
            "swapped_margin",
        ],
    );
    let mut kl = Table::new("kl", &["check", "a", "t", "measured", "bound", "margin"]);
    let mut debruijn = Table::new(
        "de_bruijn",
        &["t", "dkl_dt", "minus_fisher", "relative_error"],
    );
    let mut closed = Table::new("harnack_closed_form", &["side", "measured", "expected"]);

    for &seed in &cfg.seeds {
        run.stage(&format!("score_tightness[{seed}]"), |_| {
            let r = check_score_mse_bound(
                &pair,
                &schedule,
                &v.tightness_times,
                &ProbeSpec::new(v.probes, seed),
                v.score_tolerance,
            )?;
            for p in &r.points {
                tight.push(
                    seed,
                    vec![num(p.at), num(p.measured), num(p.bound), num(p.margin)],
                );
            }
            let identity = BoundReport::new(
                "score_tightness",
                "t",
                CheckMode::Identity,
                r.points.clone(),
                v.tightness_tolerance,
            );
            collect(&mut checks, "score_bound_configured", r);
            collect(&mut checks, "score_tightness", identity);
            Ok(())
        })?;

        run.stage(&format!("score_suite[{seed}]"), |_| {
            let results = (0..v.random_configs as u64)
                .into_par_iter()
                .map(|i| {
                    let (d, probe_seed) = random_atoms(seed, i, v);
                    let p = ScorePair::guided(&d, &ClassId::from("a"))?;
                    let probes = ProbeSpec::new(v.probes, probe_seed);
                    let vp =
                        check_score_mse_bound(&p, &schedule, &grid, &probes, v.score_tolerance)?;
                    let ve = check_score_mse_bound(&p, &ve, &grid, &probes, v.score_tolerance)?;
                    Ok((d, vp, ve))
                })
                .collect::<guidance_lab::Result<Vec<_>>>()?;
            for (i, (d, vp, ve)) in results.into_iter().enumerate() {
                for (name, r) in [("vp", vp), ("ve", ve)] {
                    for p in &r.points {
                        suite.push(
                            seed,
                            vec![
                                name.into(),
                                i.to_string(),
                                d.components().len().to_string(),
                                d.dim().to_string(),
                                num(d.radius()),
                                num(p.at),
                                num(p.measured),
                                num(p.bound),
                                num(p.margin),
                            ],
                        );
                    }
                    collect(&mut checks, &format!("score_bound_{name}"), r);
                }
            }
            Ok(())
        })?;

        run.stage(&format!("harnack[{seed}]"), |_| {
            let mut k = 0;
            for kind in [HarnackKind::Vp, HarnackKind::Ve] {
                for &alpha in &v.harnack_alpha {
                    for &m in &v.harnack_dims {
                        let r = check_harnack(
                            kind,
                            &vec![0.0; m],
                            v.harnack_pairs,
                            alpha,
                            m,
                            derived_seed(seed, HARNACK_TAG + k),
                            v.harnack_tolerance,
                        )?;
                        k += 1;
                        let col = |n: &str| r.column(n).expect("harnack column");
                        let (s1, s2, sw) = (col("s1"), col("s2"), col("swapped_margin"));
                        for (j, p) in r.points.iter().enumerate() {
                            harnack.push(
                                seed,
                                vec![
                                    kind.name().into(),
                                    num(alpha),
                                    m.to_string(),
                                    j.to_string(),
                                    num(s1[j]),
                                    num(s2[j]),
                                    num(p.measured),
                                    num(p.bound),
                                    num(p.margin),
                                    num(sw[j]),
                                ],
                            );
                        }
                        collect(&mut checks, &format!("harnack_{}", kind.name()), r);
                    }
                }
            }
            // heat kernel at x₁ = x₂ = 0, s₁ = 1, s₂ = 2, α = 2
            let h = harnack_sample(HarnackKind::Ve, &[0.0], &[0.0], &[0.0], 1.0, 2.0, 2.0, 1)?;
            let c = (4.0 * std::f64::consts::PI).powf(-0.5);
            let pts = vec![
                BoundPoint::new(0.0, h.lhs(), c),
                BoundPoint::new(1.0, h.rhs(), c * 2f64.sqrt()),
            ];
            for (side, p) in ["lhs", "rhs"].iter().zip(&pts) {
                closed.push(seed, vec![(*side).into(), num(p.measured), num(p.bound)]);
            }
            collect(
                &mut checks,
                "harnack_ve_closed_form",
                BoundReport::new(
                    "harnack_ve_closed_form",
                    "side",
                    CheckMode::Identity,
                    pts,
                    1e-12,
                ),
            );
            Ok(())
        })?;

        run.stage(&format!("kl[{seed}]"), |_| {
            for (j, &a) in v.kl_a.iter().enumerate() {
                let r = check_kl_bound(
                    &[a],
                    &v.kl_times,
                    v.kl_draws,
                    derived_seed(seed, KL_TAG + j as u64),
                    v.kl_tolerance,
                    v.kl_mc_tolerance,
                )?;
                for (name, rep) in [("kl_bound", r.bound), ("kl_monte_carlo", r.monte_carlo)] {
                    for p in &rep.points {
                        kl.push(
                            seed,
                            vec![
                                name.into(),
                                num(a),
                                num(p.at),
                                num(p.measured),
                                num(p.bound),
                                num(p.margin),
                            ],
                        );
                    }
                    collect(&mut checks, name, rep);
                }
            }
            Ok(())
        })?;

        run.stage(&format!("de_bruijn[{seed}]"), |_| {
            let ts = linspace(v.de_bruijn_t_min, v.de_bruijn_t_max, v.de_bruijn_t_points);
            let a = v.de_bruijn_a;
            let r = check_de_bruijn(&[a], &[-a], &ts, v.de_bruijn_step, v.de_bruijn_tolerance)?;
            let rel = r.column("relative_error").expect("de Bruijn column");
            for (p, e) in r.points.iter().zip(rel) {
                debruijn.push(
                    seed,
                    vec![num(p.at), num(p.measured), num(p.bound), num(*e)],
                );
            }
            collect(&mut checks, "de_bruijn", r);
            Ok(())
        })?;
    }

    run.stage("write", |run| {
        for t in [&tight, &suite, &harnack, &closed, &kl, &debruijn] {
            run.write(t)?;
        }
        Ok(())
    })?;

    let mut results = serde_json::Map::new();
    for c in &checks {
        let refs: Vec<&BoundReport> = c.reports.iter().collect();
        let verdict = Verdict::from_reports(&c.name, &refs);
        results.insert(
            c.name.clone(),
            json!({
                "reports": c.reports.len(),
                "violations": verdict.violations,
                "worst_margin": verdict.worst_margin,
                "max_relative_gap": verdict.max_relative_gap,
            }),
        );
        run.verdicts.push(verdict);
    }
    Ok(Value::Object(results))
}
