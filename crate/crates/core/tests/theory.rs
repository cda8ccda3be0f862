use guidance_lab::theory::{
    check_de_bruijn, check_harnack, check_kl_bound, check_score_mse_bound, discrepancy_trace,
    harnack_sample, kl_bound_value, log_ratio_grid, trace_report, GridSpec,
};
use guidance_lab::{
    ClassId, GuidanceSpec, HarnackKind, LabeledComponent, LabeledDistribution, NoiseSchedule,
    ProbeSpec, SamplerConfig, SamplerKind, ScorePair,
};

fn pos() -> ClassId {
    ClassId::from("pos")
}

fn neg() -> ClassId {
    ClassId::from("neg")
}

#[test]
fn score_bound_is_attained_by_two_atoms() {
    let d = LabeledDistribution::two_atoms(&[1.0]).unwrap();
    let pair = ScorePair::contrast(&d, &pos(), &neg()).unwrap();
    let s = NoiseSchedule::canonical_ou(5.0).unwrap();
    let r = check_score_mse_bound(
        &pair,
        &s,
        &[0.1, 0.5, 1.0, 2.0],
        &ProbeSpec::default(),
        1e-8,
    )
    .unwrap();
    assert!(r.passed);
    for p in &r.points {
        let e = (-p.at).exp();
        let closed = 2.0 * e / (1.0 - e * e);
        assert!((p.measured - closed).abs() <= 1e-9 * closed);
        assert!((p.bound - closed).abs() <= 1e-12 * closed);
    }
}

#[test]
fn identical_sides_have_zero_discrepancy() {
    let d = LabeledDistribution::two_atoms(&[0.5, -0.2]).unwrap();
    let pair = ScorePair::new(pos(), d.clone(), d).unwrap();
    let s = NoiseSchedule::canonical_ou(2.0).unwrap();
    let r =
        check_score_mse_bound(&pair, &s, &[0.05, 1.0, 2.0], &ProbeSpec::default(), 1e-8).unwrap();
    assert!(r.passed);
    assert!(r.points.iter().all(|p| p.measured == 0.0));
}

#[test]
fn score_bound_rejects_gaussian_components() {
    let d = LabeledDistribution::reference_toy();
    let pair = ScorePair::guided(&d, &ClassId::from("orange")).unwrap();
    assert!(check_score_mse_bound(
        &pair,
        &NoiseSchedule::default(),
        &[0.5],
        &ProbeSpec::default(),
        1e-8
    )
    .is_err());
}

#[test]
fn score_bound_holds_for_random_atoms_vp_and_ve() {
    let vp = NoiseSchedule::canonical_ou(5.0).unwrap();
    let ve = NoiseSchedule::ve_geometric(0.01, 50.0, 5.0).unwrap();
    let grid: Vec<f64> = (0..20)
        .map(|i| 0.05 + (5.0 - 0.05) * i as f64 / 19.0)
        .collect();
    for seed in 0..6u64 {
        let comps: Vec<LabeledComponent> = (0..6)
            .map(|i| {
                let x = ((seed * 7 + i) as f64 * 0.77).sin() * 1.4;
                let y = ((seed * 3 + i) as f64 * 1.31).cos() * 1.4;
                LabeledComponent::atom(1.0 / 6.0, if i < 3 { "a" } else { "b" }, vec![x, y])
            })
            .collect();
        let d = LabeledDistribution::new(comps, Some(2.0)).unwrap();
        let pair = ScorePair::guided(&d, &ClassId::from("a")).unwrap();
        for s in [&vp, &ve] {
            let r =
                check_score_mse_bound(&pair, s, &grid, &ProbeSpec::new(256, seed), 1e-8).unwrap();
            assert!(r.passed, "{} worst {}", r.check_name, r.worst_margin());
        }
    }
}

#[test]
fn harnack_origin_atom_has_no_violations() {
    for kind in [HarnackKind::Vp, HarnackKind::Ve] {
        for alpha in [1.5, 2.0, 4.0] {
            for n in 1..=3 {
                let atom = vec![0.0; n];
                let r = check_harnack(kind, &atom, 2000, alpha, n, 9, 1e-9).unwrap();
                assert!(r.passed, "{kind:?} α={alpha} n={n}: {}", r.worst_margin());
            }
        }
    }
}

#[test]
fn harnack_vp_printed_form_fails_off_origin() {
    // x₀ = x₁ = 3, s₁ = 0.05, x₂ = 0, s₂ = 5, α = 1.5
    let h = harnack_sample(HarnackKind::Vp, &[3.0], &[3.0], &[0.0], 0.05, 5.0, 1.5, 1).unwrap();
    assert!(h.log_lhs > h.log_rhs);
    assert!((h.log_lhs - 0.145).abs() < 1e-2 && (h.log_rhs + 0.942).abs() < 1e-2);
}

#[test]
fn harnack_near_diagonal_limit() {
    let h = harnack_sample(
        HarnackKind::Ve,
        &[0.0],
        &[0.3],
        &[0.3],
        1.0,
        1.0 + 1e-9,
        2.0,
        1,
    )
    .unwrap();
    assert!(h.log_margin() >= 0.0 && h.log_margin() < 1e-8);
}

#[test]
fn harnack_argument_checks() {
    assert!(check_harnack(HarnackKind::Vp, &[0.0], 10, 1.0, 1, 0, 1e-9).is_err());
    assert!(check_harnack(HarnackKind::Vp, &[0.0, 0.0], 10, 2.0, 1, 0, 1e-9).is_err());
}

#[test]
fn kl_bound_equality_and_monte_carlo() {
    let grid = [0.5, 1.0, 2.0];
    for a in [0.5, 1.0] {
        let r = check_kl_bound(&[a], &grid, 200_000, 4, 1e-6, 1e-2).unwrap();
        assert!(r.bound.passed && r.monte_carlo.passed);
        for p in &r.bound.points {
            let closed = 2.0 * a * a * (-2.0 * p.at).exp() / (1.0 - (-2.0 * p.at).exp());
            assert!((p.measured - closed).abs() <= 1e-9 * closed);
            assert!((p.bound - kl_bound_value(a, p.at)).abs() == 0.0);
        }
    }
    let zero = check_kl_bound(&[0.0, 0.0], &grid, 1000, 4, 1e-6, 1e-2).unwrap();
    assert!(zero.bound.points.iter().all(|p| p.measured == 0.0));
    assert!(zero.bound.passed && zero.monte_carlo.passed);
}

#[test]
fn de_bruijn_on_random_pairs() {
    let grid: Vec<f64> = (0..20).map(|i| 0.2 + 2.8 * i as f64 / 19.0).collect();
    let r = check_de_bruijn(&[0.3, -1.1], &[1.2, 0.4], &grid, 1e-4, 1e-3).unwrap();
    assert!(r.passed, "{}", r.max_relative_gap());
    let same = check_de_bruijn(&[0.5], &[0.5], &grid, 1e-4, 1e-3).unwrap();
    assert!(same
        .points
        .iter()
        .all(|p| p.measured == 0.0 && p.bound == 0.0));
}

#[test]
fn trace_identical_sides() {
    let d = LabeledDistribution::two_atoms(&[1.0, 0.0]).unwrap();
    let pair = ScorePair::new(
        pos(),
        d.restrict(&pos()).unwrap(),
        d.restrict(&pos()).unwrap(),
    )
    .unwrap();
    let s = NoiseSchedule::canonical_ou(5.0).unwrap();
    let pts = discrepancy_trace(
        &pair,
        &s,
        &GuidanceSpec::fixed(1.0),
        &SamplerConfig::new(SamplerKind::ReverseSde, 50),
        32,
        0,
    )
    .unwrap();
    assert!(pts.iter().all(|p| p.mse == 0.0 && p.cosine == 1.0));
}

#[test]
fn trace_trends_on_two_atoms() {
    let d = LabeledDistribution::two_atoms(&[1.0, 0.0]).unwrap();
    let pair = ScorePair::contrast(&d, &pos(), &neg()).unwrap();
    let s = NoiseSchedule::canonical_ou(5.0).unwrap();
    let pts = discrepancy_trace(
        &pair,
        &s,
        &GuidanceSpec::fixed(1.0),
        &SamplerConfig::new(SamplerKind::ReverseSde, 100),
        256,
        2,
    )
    .unwrap();
    let (rep, rho) = trace_report(&pts, 1e-9);
    assert!(rep.passed);
    assert!(rho >= 0.8, "{rho}");
}

#[test]
fn log_ratio_grid_shapes_and_decay() {
    let d = LabeledDistribution::two_atoms(&[1.0, 0.0]).unwrap();
    let pair = ScorePair::guided(&d, &pos()).unwrap();
    let s = NoiseSchedule::canonical_ou(5.0).unwrap();
    let grid = GridSpec::default();
    let late = log_ratio_grid(&pair, &s, 3.0, &grid).unwrap();
    let early = log_ratio_grid(&pair, &s, 0.1, &grid).unwrap();
    assert_eq!(late.values.len(), 64 * 64);
    assert_eq!((late.xs.len(), late.ys.len()), (64, 64));
    assert!(late.max_abs() < early.max_abs());

    let same = ScorePair::new(pos(), d.clone(), d).unwrap();
    let flat = log_ratio_grid(&same, &s, 1.0, &grid).unwrap();
    assert!(flat.values.iter().flatten().all(|v| *v == 0.0));
    // the joint score vanishes at the origin by symmetry
    let odd = GridSpec {
        nx: 3,
        ny: 3,
        ..GridSpec::default()
    };
    let g = log_ratio_grid(&same, &s, 1.0, &odd).unwrap();
    assert_eq!(g.get(1, 1), None);
    assert!(log_ratio_grid(
        &pair,
        &s,
        1.0,
        &GridSpec {
            nx: 0,
            ..GridSpec::default()
        }
    )
    .is_err());
}
