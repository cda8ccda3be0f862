//! Sample-quality metrics for the toy experiments.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::linalg::{norm, SampleMatrix};
use crate::mixtures::{ClassId, GaussianMixture, LabeledDistribution};
use crate::rng::substream;
use crate::schedule::NoiseSchedule;

/// Density level whose super-level set holds `mass` of `mixture`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourThreshold {
    pub mixture: GaussianMixture,
    pub mass: f64,
    pub density_threshold: f64,
    pub log_threshold: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

/// Monte-Carlo `(1 - mass)`-quantile of `p(X)` for `X ~ mix`.
pub fn contour_threshold(
    mix: &GaussianMixture,
    mass: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<ContourThreshold> {
    if !(mass > 0.0 && mass < 1.0) {
        return Err(invalid("mass", format!("{mass} is not in (0, 1)")));
    }
    if mc_samples == 0 {
        return Err(invalid("mc_samples", "must be at least 1"));
    }
    let draws = mix.sample(mc_samples, seed);
    let mut logs = draws
        .as_slice()
        .par_chunks_exact(mix.dim())
        .map(|x| mix.log_density(x))
        .collect::<Result<Vec<f64>>>()?;
    logs.sort_by(f64::total_cmp);
    let k = (((1.0 - mass) * mc_samples as f64).floor() as usize).min(mc_samples - 1);
    let log_threshold = logs[k];
    Ok(ContourThreshold {
        mixture: mix.clone(),
        mass,
        density_threshold: log_threshold.exp(),
        log_threshold,
        mc_samples,
        seed,
    })
}

/// Fraction of samples whose reference density lies below the contour.
pub fn outlier_rate(samples: &SampleMatrix, threshold: &ContourThreshold) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    if samples.dim() != threshold.mixture.dim() {
        return Err(Error::DimensionMismatch {
            expected: threshold.mixture.dim(),
            actual: samples.dim(),
        });
    }
    let flags = samples
        .as_slice()
        .par_chunks_exact(samples.dim())
        .map(|x| Ok(threshold.mixture.log_density(x)? < threshold.log_threshold))
        .collect::<Result<Vec<bool>>>()?;
    let count = flags.iter().filter(|&&o| o).count();
    Ok(count as f64 / samples.rows() as f64)
}

/// Mean pairwise distance; rows of `a` in parallel, summed in row order.
fn mean_cross_distance(a: &SampleMatrix, b: &SampleMatrix) -> f64 {
    let dim = a.dim();
    let row_sums: Vec<f64> = a
        .as_slice()
        .par_chunks_exact(dim)
        .map(|x| {
            b.iter_rows()
                .map(|y| {
                    x.iter()
                        .zip(y)
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum::<f64>()
        })
        .collect();
    row_sums.iter().sum::<f64>() / (a.rows() as f64 * b.rows() as f64)
}

fn check_pair(a: &SampleMatrix, b: &SampleMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(invalid("samples", "each batch needs at least 2 rows"));
    }
    Ok(())
}

/// Energy distance `2 E‖a-b‖ - E‖a-a'‖ - E‖b-b'‖` over all pairs (V-statistic).
pub fn energy_distance(a: &SampleMatrix, b: &SampleMatrix) -> Result<f64> {
    check_pair(a, b)?;
    let ab = mean_cross_distance(a, b);
    let aa = mean_cross_distance(a, a);
    let bb = mean_cross_distance(b, b);
    Ok((2.0 * ab - aa - bb).max(0.0))
}

/// Squared 1-D Wasserstein-2 between empirical quantile functions.
fn w2_squared_1d(mut p: Vec<f64>, mut q: Vec<f64>) -> f64 {
    p.sort_by(f64::total_cmp);
    q.sort_by(f64::total_cmp);
    let (n, m) = (p.len(), q.len());
    if n == m {
        return p
            .iter()
            .zip(&q)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n as f64;
    }
    // merge the two step functions on [0, 1]
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_p = (i + 1) as f64 / n as f64;
        let next_q = (j + 1) as f64 / m as f64;
        let next = next_p.min(next_q);
        total += (next - u) * (p[i] - q[j]) * (p[i] - q[j]);
        u = next;
        if next_p <= next {
            i += 1;
        }
        if next_q <= next {
            j += 1;
        }
    }
    total
}

/// Sliced Wasserstein-2 distance over `projections` random unit directions.
pub fn sliced_wasserstein(
    a: &SampleMatrix,
    b: &SampleMatrix,
    projections: usize,
    seed: u64,
) -> Result<f64> {
    check_pair(a, b)?;
    if projections == 0 {
        return Err(invalid("projections", "must be at least 1"));
    }
    let dim = a.dim();
    let mut rng = substream(seed, 0);
    let dirs: Vec<Vec<f64>> = (0..projections)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let len = norm(&v);
            if len > 1e-12 {
                break v.into_iter().map(|c| c / len).collect();
            }
        })
        .collect();
    let project = |m: &SampleMatrix, d: &[f64]| -> Vec<f64> {
        m.iter_rows()
            .map(|x| x.iter().zip(d).map(|(p, q)| p * q).sum())
            .collect()
    };
    let per_dir: Vec<f64> = dirs
        .par_iter()
        .map(|d| w2_squared_1d(project(a, d), project(b, d)))
        .collect();
    Ok((per_dir.iter().sum::<f64>() / projections as f64).sqrt())
}

/// Mean exact posterior probability of `target` at time `t_eval`.
pub fn class_fidelity(
    samples: &SampleMatrix,
    dist0: &LabeledDistribution,
    schedule: &NoiseSchedule,
    t_eval: f64,
    target: &ClassId,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    if !dist0.labels().contains(target) {
        return Err(Error::UnknownClass(target.to_string()));
    }
    if samples.dim() != dist0.dim() {
        return Err(Error::DimensionMismatch {
            expected: dist0.dim(),
            actual: samples.dim(),
        });
    }
    let probs = samples
        .as_slice()
        .par_chunks_exact(samples.dim())
        .map(|x| {
            let post = dist0.class_posterior(schedule, t_eval, x)?;
            Ok(post.probability(target).unwrap_or(0.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(probs.iter().sum::<f64>() / probs.len() as f64)
}
