mod common;

use std::collections::BTreeMap;

use common::*;
use placedid::conley::{pairwise_exhaustive, pairwise_within_cutoff};
use placedid::estimator::subset_groups;
use placedid::income::{inflate_shares, BucketScheme};
use placedid::panel::{LonLat, Role};
use placedid::simgen::{generate, true_beta, DgpSpec, OutcomeSpec};
use placedid::{build_stack, cohort_weights, fit_wls, FitOptions, Spec, Term};
use proptest::prelude::*;
use rand::Rng;

fn fit(panel: &placedid::Panel, spec: Spec) -> placedid::EventStudyFit {
    let design = build_stack(panel, &cohort_weights(panel).unwrap(), panel.window()).unwrap();
    fit_wls(&design, &FitOptions::new("y", spec)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn wls_residuals_are_weighted_orthogonal(seed in any::<u64>(), n in 9usize..30) {
        let panel = random_panel(&mut rng(seed), n, 10.0);
        for spec in [Spec::Dynamic, Spec::Static] {
            let f = fit(&panel, spec);
            let scale = f.design.amax() * f.residuals.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
            for c in 0..f.design.ncols() {
                let dot: f64 = (0..f.design.nrows()).map(|i| f.design[(i, c)] * f.weights[i] * f.residuals[i]).sum();
                prop_assert!(dot.abs() <= 1e-9 * scale * f.design.nrows() as f64);
            }
        }
    }

    #[test]
    fn coefficients_are_affine_equivariant(seed in any::<u64>(), a in -5.0f64..5.0, b in 0.1f64..4.0) {
        let panel = random_panel(&mut rng(seed), 15, 10.0);
        let moved = panel.with_outcome("y", |o| o.outcome("y").map(|y| a + b * y)).unwrap();
        let (f0, f1) = (fit(&panel, Spec::Dynamic), fit(&moved, Spec::Dynamic));
        for t in f0.terms.iter().filter(|t| matches!(t, Term::Gamma(_))) {
            let (g0, g1) = (f0.estimate(t).unwrap(), f1.estimate(t).unwrap());
            prop_assert!((g1 - b * g0).abs() <= 1e-9 * (1.0 + g0.abs()));
        }
    }

    #[test]
    fn pair_search_matches_exhaustive(seed in any::<u64>(), cutoff in 0.1f64..40.0) {
        let mut r = rng(seed);
        let origin = LonLat::new(-100.0, r.random_range(-60.0..60.0));
        let pts: Vec<LonLat> = (0..1000)
            .map(|_| offset(origin, r.random_range(-60.0..60.0), r.random_range(-60.0..60.0)))
            .collect();
        let fast = pairwise_within_cutoff(&pts, cutoff);
        let slow = pairwise_exhaustive(&pts, cutoff);
        prop_assert_eq!(fast.len(), slow.len());
        for (x, y) in fast.iter().zip(&slow) {
            prop_assert_eq!((x.i, x.j), (y.i, y.j));
            prop_assert!((x.distance - haversine(pts[x.i], pts[x.j])).abs() < 1e-9);
        }
    }

    #[test]
    fn inflation_conserves_mass(raw in prop::collection::vec(0.0f64..1.0, 5), f in 1.0f64..3.0) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-6);
        let shares: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let out = inflate_shares(&shares, f, &BucketScheme::default());
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(out.iter().all(|s| *s >= -1e-15));
        // Deflating mass only moves upward.
        prop_assert!(out[0] <= shares[0] + 1e-15);
        prop_assert!(out[4] >= shares[4] - 1e-15);
    }

    #[test]
    fn two_bucket_inflation_closed_form(b in 1e4f64..1e5, cap in 1.05f64..5.0, p in 0.0f64..1.0, f in 1.0f64..4.0) {
        let scheme = BucketScheme { boundaries: vec![b], top_cap: b * cap, outcomes: vec!["lo".into(), "hi".into()] };
        let out = inflate_shares(&[p, 1.0 - p], f, &scheme);
        prop_assert!((out[0] - p / f).abs() < 1e-12);
    }

    #[test]
    fn true_beta_is_the_weighted_double_sum(
        att in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 8), 1..5),
        raw in prop::collection::vec(0.01f64..1.0, 5),
    ) {
        let k = att.len();
        let total: f64 = raw[..k].iter().sum();
        let omega: BTreeMap<i32, f64> = (0..k).map(|i| (2010 + i as i32, raw[i] / total)).collect();
        let table: BTreeMap<i32, BTreeMap<i32, f64>> = (0..k)
            .map(|i| (2010 + i as i32, (0..8).map(|e| (e as i32, att[i][e])).collect()))
            .collect();
        let mut want = 0.0;
        for (w, row) in raw.iter().zip(&att) {
            for a in &row[4..8] {
                want += w / total * a / 4.0;
            }
        }
        prop_assert!((true_beta(&table, &omega) - want).abs() < 1e-12);
    }

    #[test]
    fn subset_matches_manual_filtering(seed in any::<u64>()) {
        let panel = random_panel(&mut rng(seed), 24, 10.0);
        let keep = |t: &placedid::TractId| t.as_str().as_bytes()[3].is_multiple_of(2);
        let via = subset_groups(&panel, panel.window(), |t, _| keep(t), |t, _| keep(t));
        let manual = panel.filter_tracts(|t, l| l.role != Role::Neither && keep(t));
        match via {
            Ok(d) => {
                let w = cohort_weights(&manual).unwrap();
                prop_assert_eq!(d, build_stack(&manual, &w, manual.window()).unwrap());
            }
            Err(_) => prop_assert!(
                manual.tracts_with_role(Role::Designee).next().is_none()
                    || manual.tracts_with_role(Role::Finalist).next().is_none()
            ),
        }
    }
}

/// The simulated spatial field, read off a panel that contains nothing
/// else, has correlogram `exp(-d / range)` within each city and year.
#[test]
fn simulated_field_has_exponential_correlogram() {
    let range = 3.0;
    let mut bins: BTreeMap<i64, (f64, f64, f64)> = BTreeMap::new();
    for rep in 0..200u64 {
        let sim = generate(&DgpSpec {
            seed: rep,
            range_miles: range,
            averaging: false,
            zone_rows: 3,
            zone_cols: 3,
            outcomes: vec![OutcomeSpec {
                mean: 0.0,
                trend: 0.0,
                unit_sd: 0.0,
                field_sd: 1.0,
                noise_sd: 0.0,
                ..OutcomeSpec::constant_effect("y", 0.0)
            }],
            ..Default::default()
        })
        .unwrap();
        let p = &sim.panel;
        let mut by_zone: BTreeMap<_, Vec<_>> = BTreeMap::new();
        for (t, l) in p.labels() {
            by_zone.entry(l.zone_id.clone()).or_default().push(t.clone());
        }
        let years = p.study_years().unwrap();
        for tracts in by_zone.values() {
            for (i, a) in tracts.iter().enumerate() {
                for b in &tracts[i + 1..] {
                    let d = haversine(p.tract_info(a).unwrap().1, p.tract_info(b).unwrap().1);
                    let bin = bins.entry((d * 100.0).round() as i64).or_default();
                    for y in years.clone() {
                        let (va, vb) = (
                            p.get(a, y).unwrap().outcome("y").unwrap(),
                            p.get(b, y).unwrap().outcome("y").unwrap(),
                        );
                        bin.0 += va * vb;
                        bin.1 += (va * va + vb * vb) / 2.0;
                        bin.2 += 1.0;
                    }
                }
            }
        }
    }
    for (&key, &(xy, xx, n)) in &bins {
        let d = key as f64 / 100.0;
        if n < 2000.0 {
            continue;
        }
        let rho = xy / xx;
        assert!(
            (rho - (-d / range).exp()).abs() < 0.05,
            "distance {d}: correlation {rho:.3}, n {n}"
        );
    }
}
