//! Stacked event-study estimation for place-based policy evaluations.
//!
//! Tract-by-year panels are stacked into one sub-experiment per adoption
//! cohort, reweighted so the pooled coefficient targets a population-weighted
//! ATT, and fit by weighted least squares. Inference uses Conley spatial HAC
//! covariances. Around the estimator sit polygon overlay, a status index,
//! pre-trend sensitivity, synthetic DiD, trailing-average unsmoothing, income
//! bucket corrections, spillover rings and a synthetic data generator.

pub mod conley;
pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod geo;
pub mod income;
pub mod nsi;
pub mod panel;
pub mod pipeline;
pub mod sdid;
pub mod sensitivity;
pub mod simgen;
pub mod spillover;
pub mod stack;

pub use conley::{conley_covariance, with_conley, ConleyCovariance, KernelSpec, SpatialKernel};
pub use error::{Error, Result};
pub use estimator::{aggregate_att, fit_wls, AttEstimate, EventStudyFit, FitOptions, Spec, Term};
pub use geo::{RingClass, ZoneAssignment};
pub use panel::{EventWindow, GroupLabel, LonLat, Panel, PanelObservation, Role, TractId, ZoneId};
pub use pipeline::{run_pipeline, RunConfig, Stages};
pub use simgen::{generate, DgpSpec, GroundTruth};
pub use stack::{build_stack, cohort_weights, CohortWeights, StackedDesign};
