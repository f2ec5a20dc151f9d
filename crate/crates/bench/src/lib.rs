//! Fixtures shared by the benchmarks.

use nalgebra::DMatrix;
use placedid::estimator::{fit_wls, EventStudyFit, FitOptions, Spec};
use placedid::panel::POVERTY_RATE;
use placedid::sdid::SdidProblem;
use placedid::simgen::{generate, DgpSpec};
use placedid::stack::{build_stack, cohort_weights, StackedDesign};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Stack from a simulated panel with `zones` designee zones per cohort.
pub fn design(zones: usize) -> StackedDesign {
    let spec = DgpSpec {
        designee_zones_per_cohort: zones,
        finalist_zones_per_cohort: 2 * zones,
        ..Default::default()
    };
    let panel = generate(&spec).expect("valid spec").panel;
    let w = cohort_weights(&panel).expect("cohorts");
    build_stack(&panel, &w, panel.window()).expect("stack")
}

pub fn fit(design: &StackedDesign) -> EventStudyFit {
    fit_wls(design, &FitOptions::new(POVERTY_RATE, Spec::Dynamic)).expect("fit")
}

/// Random SDID problem with `donors` donors over event times −5..=7.
pub fn sdid_problem(donors: usize, seed: u64) -> SdidProblem {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let times: Vec<i32> = (-5..=7).collect();
    let m = DMatrix::from_fn(donors, times.len(), |_, _| rng.random::<f64>());
    let treated = (0..times.len()).map(|_| rng.random::<f64>()).collect();
    SdidProblem::new(times, treated, m).expect("problem")
}
