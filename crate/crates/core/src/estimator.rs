//! Weighted least squares for the stacked event study.
//!
//! Dynamic specification:
//!
//! ```text
//! y = Σ_{t≠-1} γ_t·D·1[e=t] + α·D + δ_e + ε
//! ```
//!
//! The static specification replaces γ_4..γ_7 with a single β on
//! `D·1[e ∈ 4..7]`. Both are weighted by the stack's regression weights.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::panel::{fmt_f64, EventWindow, GroupLabel, LonLat, Panel, Role, TractId};
use crate::stack::{build_stack, cohort_weights, StackTract, StackedDesign};

/// Event times pooled into the ATT.
pub const POST_START: i32 = 4;
pub const POST_END: i32 = 7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spec {
    Static,
    #[default]
    Dynamic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedEffects {
    /// Treated-arm intercept plus event-time dummies.
    #[default]
    EventTime,
    /// Tract × sub-experiment effects plus event-time dummies, absorbed by a
    /// weighted within transformation.
    TractBySubExperiment,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Treated,
    EventTime(i32),
    Gamma(i32),
    Beta,
    Interacted { dummy: String, base: Box<Term> },
}

impl Term {
    pub fn interacted(dummy: &str, base: Term) -> Term {
        Term::Interacted {
            dummy: dummy.to_string(),
            base: Box::new(base),
        }
    }

    /// Columns constant within a tract × sub-experiment group.
    fn is_unit_level(&self) -> bool {
        match self {
            Term::Treated => true,
            Term::Interacted { base, .. } => base.is_unit_level(),
            _ => false,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Treated => write!(f, "treated"),
            Term::EventTime(e) => write!(f, "event_time[{e}]"),
            Term::Gamma(e) => write!(f, "gamma[{e}]"),
            Term::Beta => write!(f, "beta"),
            Term::Interacted { dummy, base } => write!(f, "{dummy}:{base}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub outcome: String,
    pub spec: Spec,
    pub fixed_effects: FixedEffects,
}

impl FitOptions {
    pub fn new(outcome: impl Into<String>, spec: Spec) -> Self {
        FitOptions {
            outcome: outcome.into(),
            spec,
            fixed_effects: FixedEffects::default(),
        }
    }

    pub fn with_fixed_effects(mut self, fe: FixedEffects) -> Self {
        self.fixed_effects = fe;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObsMeta {
    /// Index into [`EventStudyFit::tracts`].
    pub tract: usize,
    pub data_year: i32,
    pub sub_experiment: i32,
    pub event_time: i32,
    pub treated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventStudyFit {
    pub outcome: String,
    pub spec: Spec,
    pub fixed_effects: FixedEffects,
    pub window: EventWindow,
    pub terms: Vec<Term>,
    pub coefficients: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Label of the estimator that produced `covariance`.
    pub covariance_kind: String,
    /// Design after fixed-effect absorption, one row per observation.
    pub design: DMatrix<f64>,
    pub weights: Vec<f64>,
    pub residuals: Vec<f64>,
    /// (X'WX)^{-1}.
    pub bread: DMatrix<f64>,
    pub obs: Vec<ObsMeta>,
    pub tracts: Vec<(TractId, LonLat)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoefRow {
    pub term: String,
    pub estimate: f64,
    pub se: f64,
    pub p: f64,
}

pub fn normal_p_value(estimate: f64, se: f64) -> f64 {
    if !(se > 0.0) {
        return if estimate == 0.0 { 1.0 } else { 0.0 };
    }
    let n = Normal::standard();
    (2.0 * (1.0 - n.cdf((estimate / se).abs()))).clamp(0.0, 1.0)
}

/// Two-sided standard normal critical value for confidence `level`.
pub fn z_critical(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + level / 2.0)
}

impl EventStudyFit {
    pub fn index_of(&self, term: &Term) -> Option<usize> {
        self.terms.iter().position(|t| t == term)
    }

    pub fn estimate(&self, term: &Term) -> Option<f64> {
        self.index_of(term).map(|i| self.coefficients[i])
    }

    pub fn std_error(&self, term: &Term) -> Option<f64> {
        self.index_of(term).map(|i| self.covariance[(i, i)].max(0.0).sqrt())
    }

    /// γ_e with its SE; the omitted period returns exactly (0, 0).
    pub fn gamma(&self, e: i32) -> Option<(f64, f64)> {
        if e == -1 {
            return Some((0.0, 0.0));
        }
        let t = Term::Gamma(e);
        Some((self.estimate(&t)?, self.std_error(&t)?))
    }

    /// Value and SE of `Σ c·coef` under the current covariance.
    pub fn linear_combination(&self, combo: &[(Term, f64)]) -> Result<(f64, f64)> {
        let mut a = DVector::zeros(self.terms.len());
        for (term, c) in combo {
            let i = self
                .index_of(term)
                .ok_or_else(|| Error::Argument(format!("fit has no term {term}")))?;
            a[i] += c;
        }
        let value = a.dot(&self.coefficients);
        let var = (a.transpose() * &self.covariance * &a)[(0, 0)];
        Ok((value, var.max(0.0).sqrt()))
    }

    pub fn with_covariance(mut self, covariance: DMatrix<f64>, kind: impl Into<String>) -> Self {
        self.covariance = covariance;
        self.covariance_kind = kind.into();
        self
    }

    /// Observation scores `w_i·u_i·x_i`, one row per observation.
    pub fn scores(&self) -> DMatrix<f64> {
        let mut s = self.design.clone();
        for (i, mut row) in s.row_iter_mut().enumerate() {
            row *= self.weights[i] * self.residuals[i];
        }
        s
    }

    pub fn n_obs(&self) -> usize {
        self.obs.len()
    }

    pub fn coefficient_table(&self) -> Vec<CoefRow> {
        self.terms
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let estimate = self.coefficients[i];
                let se = self.covariance[(i, i)].max(0.0).sqrt();
                CoefRow {
                    term: t.to_string(),
                    estimate,
                    se,
                    p: normal_p_value(estimate, se),
                }
            })
            .collect()
    }

    pub fn write_coefficients(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["outcome", "term", "estimate", "se", "p"])?;
        for r in self.coefficient_table() {
            w.write_record([
                self.outcome.clone(),
                r.term,
                fmt_f64(r.estimate),
                fmt_f64(r.se),
                fmt_f64(r.p),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Symmetrized `B M B`.
pub fn sandwich(bread: &DMatrix<f64>, meat: &DMatrix<f64>) -> DMatrix<f64> {
    let v = bread * meat * bread;
    (&v + v.transpose()) * 0.5
}

/// Σ_g S_g S_g' with S_g the summed scores of cluster `g`.
pub fn cluster_meat(scores: &DMatrix<f64>, cluster: &[usize], n_clusters: usize) -> DMatrix<f64> {
    let k = scores.ncols();
    let mut sums = DMatrix::zeros(n_clusters, k);
    for (i, &g) in cluster.iter().enumerate() {
        let mut row = sums.row_mut(g);
        row += scores.row(i);
    }
    sums.transpose() * sums
}

pub fn cluster_covariance(fit: &EventStudyFit) -> DMatrix<f64> {
    let cluster: Vec<usize> = fit.obs.iter().map(|o| o.tract).collect();
    sandwich(&fit.bread, &cluster_meat(&fit.scores(), &cluster, fit.tracts.len()))
}

/// Heteroskedasticity-robust (observation-level) covariance.
pub fn robust_covariance(fit: &EventStudyFit) -> DMatrix<f64> {
    let s = fit.scores();
    sandwich(&fit.bread, &(s.transpose() * &s))
}

/// Classical covariance assuming i.i.d. errors: σ̂²(X'WX)^{-1}.
pub fn iid_covariance(fit: &EventStudyFit) -> DMatrix<f64> {
    let n = fit.obs.len();
    let k = fit.terms.len();
    let ssr: f64 = fit.weights.iter().zip(&fit.residuals).map(|(w, u)| w * u * u).sum();
    let sigma2 = ssr / (n.saturating_sub(k).max(1)) as f64;
    &fit.bread * sigma2
}

pub(crate) struct WlsSolution {
    pub coefficients: DVector<f64>,
    pub bread: DMatrix<f64>,
    pub residuals: Vec<f64>,
}

/// Solves weighted least squares through a QR factorization of `√W X`,
/// checking the rank from the singular values of `R`.
pub(crate) fn weighted_lstsq(x: &DMatrix<f64>, y: &[f64], w: &[f64], names: &[String]) -> Result<WlsSolution> {
    let (n, k) = x.shape();
    if n < k || k == 0 {
        return Err(Error::Validation(format!("{n} observations for {k} terms")));
    }
    let sw: Vec<f64> = w.iter().map(|w| w.sqrt()).collect();
    let mut xw = x.clone();
    for (i, mut row) in xw.row_iter_mut().enumerate() {
        row *= sw[i];
    }
    let mut yw = DVector::from_iterator(n, y.iter().zip(&sw).map(|(y, s)| y * s));

    let qr = xw.qr();
    let r = qr.r();
    let svd = r.clone().svd(false, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-9;
    let v_t = svd.v_t.as_ref().expect("requested V");
    let mut collinear = BTreeSet::new();
    for (j, &s) in svd.singular_values.iter().enumerate() {
        if s <= tol {
            let v = v_t.row(j);
            let scale = v.amax();
            for (c, &val) in v.iter().enumerate() {
                if val.abs() > 1e-6 * scale {
                    collinear.insert(c);
                }
            }
        }
    }
    if !collinear.is_empty() || !(smax > 0.0) {
        let terms = if collinear.is_empty() {
            names.to_vec()
        } else {
            collinear.into_iter().map(|c| names[c].clone()).collect()
        };
        return Err(Error::RankDeficient { terms });
    }

    qr.q_tr_mul(&mut yw);
    let qty = yw.rows(0, k).into_owned();
    let coefficients = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient { terms: names.to_vec() })?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::RankDeficient { terms: names.to_vec() })?;
    let bread = &r_inv * r_inv.transpose();
    let fitted = x * &coefficients;
    let residuals = y.iter().zip(fitted.iter()).map(|(y, f)| y - f).collect();
    Ok(WlsSolution {
        coefficients,
        bread,
        residuals,
    })
}

/// How a tract-level dummy enters the specification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionMode {
    /// Dummy × every treatment term, plus dummy × treated and dummy × δ_e.
    FullInteraction,
    /// Dummy × δ_e only.
    EventTimeControl,
}

struct Interaction<'a> {
    name: &'a str,
    mode: InteractionMode,
    values: Vec<bool>,
}

fn base_terms(window: EventWindow, spec: Spec) -> Result<Vec<Term>> {
    let mut terms = vec![Term::Treated];
    terms.extend(window.times().map(Term::EventTime));
    match spec {
        Spec::Dynamic => terms.extend(window.times().filter(|&t| t != -1).map(Term::Gamma)),
        Spec::Static => {
            terms.extend(window.times().filter(|&t| t != -1 && t < POST_START).map(Term::Gamma));
            if !window.times().any(|t| (POST_START..=POST_END).contains(&t)) {
                return Err(Error::Argument(format!(
                    "static specification needs event times {POST_START}..{POST_END} in the window"
                )));
            }
            terms.push(Term::Beta);
        }
    }
    Ok(terms)
}

fn term_value(term: &Term, treated: bool, e: i32, dummy: Option<bool>) -> f64 {
    let d = if treated { 1.0 } else { 0.0 };
    match term {
        Term::Treated => d,
        Term::EventTime(t) => f64::from(u8::from(*t == e)),
        Term::Gamma(t) => d * f64::from(u8::from(*t == e)),
        Term::Beta => d * f64::from(u8::from((POST_START..=POST_END).contains(&e))),
        Term::Interacted { base, .. } => {
            f64::from(u8::from(dummy.unwrap_or(false))) * term_value(base, treated, e, None)
        }
    }
}

fn fit_impl(design: &StackedDesign, opts: &FitOptions, interaction: Option<&Interaction>) -> Result<EventStudyFit> {
    let oi = design
        .outcome_index(&opts.outcome)
        .ok_or_else(|| Error::Argument(format!("outcome `{}` not in the stack", opts.outcome)))?;

    let mut terms = base_terms(design.window, opts.spec)?;
    if let Some(ix) = interaction {
        let extra: Vec<Term> = match ix.mode {
            InteractionMode::FullInteraction => terms.clone(),
            InteractionMode::EventTimeControl => terms
                .iter()
                .filter(|t| matches!(t, Term::EventTime(_)))
                .cloned()
                .collect(),
        };
        terms.extend(extra.into_iter().map(|t| Term::interacted(ix.name, t)));
    }
    if opts.fixed_effects == FixedEffects::TractBySubExperiment {
        terms.retain(|t| !t.is_unit_level());
    }

    let rows: Vec<_> = design.rows.iter().filter(|r| r.outcomes[oi].is_some()).collect();
    if rows.is_empty() {
        return Err(Error::Validation(format!("no observations of `{}`", opts.outcome)));
    }
    let n = rows.len();
    let k = terms.len();
    let mut x = DMatrix::zeros(n, k);
    let mut y = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut obs = Vec::with_capacity(n);
    for (i, r) in rows.iter().enumerate() {
        let dummy = interaction.map(|ix| ix.values[r.tract]);
        for (j, t) in terms.iter().enumerate() {
            x[(i, j)] = term_value(t, r.treated, r.event_time, dummy);
        }
        y.push(r.outcomes[oi].expect("filtered"));
        w.push(r.regression_weight);
        obs.push(ObsMeta {
            tract: r.tract,
            data_year: r.data_year,
            sub_experiment: r.sub_experiment,
            event_time: r.event_time,
            treated: r.treated,
        });
    }

    if opts.fixed_effects == FixedEffects::TractBySubExperiment {
        let mut groups: BTreeMap<(usize, i32), Vec<usize>> = BTreeMap::new();
        for (i, o) in obs.iter().enumerate() {
            groups.entry((o.tract, o.sub_experiment)).or_default().push(i);
        }
        for members in groups.values() {
            let wsum: f64 = members.iter().map(|&i| w[i]).sum();
            let ybar = members.iter().map(|&i| w[i] * y[i]).sum::<f64>() / wsum;
            for &i in members {
                y[i] -= ybar;
            }
            for j in 0..k {
                let xbar = members.iter().map(|&i| w[i] * x[(i, j)]).sum::<f64>() / wsum;
                for &i in members {
                    x[(i, j)] -= xbar;
                }
            }
        }
    }

    let names: Vec<String> = terms.iter().map(|t| t.to_string()).collect();
    let sol = weighted_lstsq(&x, &y, &w, &names)?;
    let tracts = design.tracts.iter().map(|t| (t.id.clone(), t.centroid)).collect();
    let mut fit = EventStudyFit {
        outcome: opts.outcome.clone(),
        spec: opts.spec,
        fixed_effects: opts.fixed_effects,
        window: design.window,
        terms,
        coefficients: sol.coefficients,
        covariance: DMatrix::zeros(k, k),
        covariance_kind: String::new(),
        design: x,
        weights: w,
        residuals: sol.residuals,
        bread: sol.bread,
        obs,
        tracts,
    };
    let cov = cluster_covariance(&fit);
    fit = fit.with_covariance(cov, "cluster_tract");
    Ok(fit)
}

/// Fits the specification with cluster-by-tract covariance. Callers wanting
/// spatial HAC replace the covariance via [`EventStudyFit::with_covariance`].
pub fn fit_wls(design: &StackedDesign, opts: &FitOptions) -> Result<EventStudyFit> {
    fit_impl(design, opts, None)
}

/// Adds a tract-level dummy to the specification. An all-zero dummy yields
/// the base fit unchanged; a constant nonzero dummy is rank deficient.
pub fn interact_dummy(
    design: &StackedDesign,
    opts: &FitOptions,
    name: &str,
    dummy: impl Fn(&StackTract) -> Option<bool>,
    mode: InteractionMode,
) -> Result<EventStudyFit> {
    let values = design
        .tracts
        .iter()
        .map(|t| dummy(t).ok_or_else(|| Error::Argument(format!("dummy `{name}` undefined for tract {}", t.id))))
        .collect::<Result<Vec<bool>>>()?;
    if values.iter().all(|v| !v) {
        return fit_wls(design, opts);
    }
    fit_impl(design, opts, Some(&Interaction { name, mode, values }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AttEstimate {
    pub value: f64,
    pub std_error: f64,
    pub p_value: f64,
    pub window: (i32, i32),
}

impl AttEstimate {
    pub fn new(value: f64, std_error: f64) -> Self {
        AttEstimate {
            value,
            std_error,
            p_value: normal_p_value(value, std_error),
            window: (POST_START, POST_END),
        }
    }

    pub fn ci(&self, level: f64) -> (f64, f64) {
        let z = z_critical(level);
        (self.value - z * self.std_error, self.value + z * self.std_error)
    }
}

fn post_combination(fit: &EventStudyFit, wrap: impl Fn(Term) -> Term) -> Result<Vec<(Term, f64)>> {
    let combo: Vec<(Term, f64)> = match fit.spec {
        Spec::Static => vec![(wrap(Term::Beta), 1.0)],
        Spec::Dynamic => (POST_START..=POST_END)
            .map(|e| (wrap(Term::Gamma(e)), 1.0 / f64::from(POST_END - POST_START + 1)))
            .collect(),
    };
    if let Some((t, _)) = combo.iter().find(|(t, _)| fit.index_of(t).is_none()) {
        return Err(Error::Argument(format!("fit lacks post-period term {t}")));
    }
    Ok(combo)
}

/// Equal average of γ_4..γ_7 (dynamic) or β (static). Cohort weighting is
/// already carried by the regression weights.
pub fn aggregate_att(fit: &EventStudyFit) -> Result<AttEstimate> {
    let (v, se) = fit.linear_combination(&post_combination(fit, |t| t)?)?;
    Ok(AttEstimate::new(v, se))
}

/// ATT difference between dummy = 1 and dummy = 0 tracts from a
/// [`InteractionMode::FullInteraction`] fit.
pub fn interaction_contrast(fit: &EventStudyFit, dummy: &str) -> Result<AttEstimate> {
    let (v, se) = fit.linear_combination(&post_combination(fit, |t| Term::interacted(dummy, t))?)?;
    Ok(AttEstimate::new(v, se))
}

pub fn share_of_change(att: f64, observed_change: f64) -> Result<f64> {
    if observed_change == 0.0 || !observed_change.is_finite() {
        return Err(Error::Argument("observed change must be nonzero".into()));
    }
    Ok(att / observed_change)
}

/// Rebuilds the stack from the tracts passing each arm's filter, refitting
/// cohort weights on the restricted treated set.
pub fn subset_groups(
    panel: &Panel,
    window: EventWindow,
    treated_filter: impl Fn(&TractId, &GroupLabel) -> bool,
    control_filter: impl Fn(&TractId, &GroupLabel) -> bool,
) -> Result<StackedDesign> {
    let sub = panel.filter_tracts(|t, l| match l.role {
        Role::Designee => treated_filter(t, l),
        Role::Finalist => control_filter(t, l),
        Role::Neither => false,
    });
    if sub.tracts_with_role(Role::Designee).next().is_none() {
        return Err(Error::EmptyArm("treated".into()));
    }
    if sub.tracts_with_role(Role::Finalist).next().is_none() {
        return Err(Error::EmptyArm("control".into()));
    }
    let weights = cohort_weights(&sub)?;
    build_stack(&sub, &weights, window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{PanelObservation, ZoneId};

    fn panel_from(cells: &[(&str, Role, i32, f64, Vec<(i32, f64)>)], window: EventWindow) -> Panel {
        let mut obs = Vec::new();
        let mut labels = BTreeMap::new();
        for (i, (id, role, a, pop, ys)) in cells.iter().enumerate() {
            for &(year, y) in ys {
                obs.push(PanelObservation {
                    tract_id: TractId::new(*id),
                    data_year: year,
                    outcomes: BTreeMap::from([("y".to_string(), y)]),
                    population: *pop,
                    centroid: LonLat::new(-90.0 + 0.02 * i as f64, 40.0),
                });
            }
            labels.insert(
                TractId::new(*id),
                GroupLabel::new(*role, Some(ZoneId::new("z")), Some(*a))
                    .unwrap()
                    .with_pop_in_zone(*pop),
            );
        }
        Panel::new(obs, labels, window).unwrap()
    }

    fn stack_of(p: &Panel) -> StackedDesign {
        build_stack(p, &cohort_weights(p).unwrap(), p.window()).unwrap()
    }

    #[test]
    fn two_by_two_difference_in_differences() {
        let w = EventWindow::new(-1, 0).unwrap();
        let p = panel_from(
            &[
                ("t", Role::Designee, 2015, 1.0, vec![(2014, 1.0), (2015, 4.0)]),
                ("c", Role::Finalist, 2015, 1.0, vec![(2014, 2.0), (2015, 3.5)]),
            ],
            w,
        );
        let fit = fit_wls(&stack_of(&p), &FitOptions::new("y", Spec::Dynamic)).unwrap();
        let (g, _) = fit.gamma(0).unwrap();
        assert!((g - ((4.0 - 1.0) - (3.5 - 2.0))).abs() < 1e-12);
        assert_eq!(fit.gamma(-1), Some((0.0, 0.0)));
        assert!(fit.index_of(&Term::Gamma(-1)).is_none());
    }

    #[test]
    fn zero_outcomes_give_zero_coefficients() {
        let w = EventWindow::new(-2, 4).unwrap();
        let years: Vec<(i32, f64)> = (2012..=2020).map(|y| (y, 0.0)).collect();
        let p = panel_from(
            &[
                ("t1", Role::Designee, 2015, 2.0, years.clone()),
                ("t2", Role::Designee, 2016, 1.0, years.clone()),
                ("c1", Role::Finalist, 2015, 1.0, years.clone()),
                ("c2", Role::Finalist, 2015, 3.0, years),
            ],
            w,
        );
        for spec in [Spec::Static, Spec::Dynamic] {
            let fit = fit_wls(&stack_of(&p), &FitOptions::new("y", spec)).unwrap();
            assert!(fit.coefficients.iter().all(|c| c.abs() < 1e-12));
        }
    }

    #[test]
    fn constant_dummy_is_rank_deficient_and_zero_dummy_is_base() {
        let w = EventWindow::new(-1, 1).unwrap();
        let years = |s: f64| (2013..=2016).map(|y| (y, s * f64::from(y - 2013))).collect::<Vec<_>>();
        let p = panel_from(
            &[
                ("t1", Role::Designee, 2015, 1.0, years(1.0)),
                ("t2", Role::Designee, 2015, 2.0, years(2.0)),
                ("c1", Role::Finalist, 2015, 1.0, years(0.5)),
                ("c2", Role::Finalist, 2015, 1.0, years(0.1)),
            ],
            w,
        );
        let s = stack_of(&p);
        let opts = FitOptions::new("y", Spec::Dynamic);
        let base = fit_wls(&s, &opts).unwrap();
        let zero = interact_dummy(&s, &opts, "h", |_| Some(false), InteractionMode::FullInteraction).unwrap();
        assert_eq!(base, zero);
        let err = interact_dummy(&s, &opts, "h", |_| Some(true), InteractionMode::FullInteraction).unwrap_err();
        match err {
            Error::RankDeficient { terms } => assert!(terms.iter().any(|t| t.starts_with("h:")), "{terms:?}"),
            e => panic!("{e}"),
        }
        let err = interact_dummy(
            &s,
            &opts,
            "h",
            |t| (t.id.as_str() != "c2").then_some(true),
            InteractionMode::EventTimeControl,
        );
        assert!(matches!(err, Err(Error::Argument(_))));
    }

    #[test]
    fn aggregate_att_is_post_average() {
        let w = EventWindow::default();
        let mut cells = Vec::new();
        let prof = [0.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.3, 0.4];
        for (id, role) in [("t", Role::Designee), ("c1", Role::Finalist), ("c2", Role::Finalist)] {
            let ys: Vec<(i32, f64)> = (2010..=2022)
                .map(|y| {
                    let e = y - 2015;
                    let base = 0.01 * f64::from(y - 2010) + if id == "c2" { 0.3 } else { 0.0 };
                    let eff = if role == Role::Designee && e >= 0 {
                        prof[e as usize]
                    } else {
                        0.0
                    };
                    (y, base + eff)
                })
                .collect();
            cells.push((id, role, 2015, 1.0, ys));
        }
        let p = panel_from(&cells, w);
        let fit = fit_wls(&stack_of(&p), &FitOptions::new("y", Spec::Dynamic)).unwrap();
        let att = aggregate_att(&fit).unwrap();
        assert!((att.value - 0.25).abs() < 1e-12);
        assert_eq!(att.window, (4, 7));
    }

    #[test]
    fn share_of_change_values() {
        assert!((share_of_change(0.198, 0.66).unwrap() - 0.30).abs() < 1e-12);
        assert_eq!(share_of_change(0.0, 2.0).unwrap(), 0.0);
        assert_eq!(share_of_change(0.7, 0.7).unwrap(), 1.0);
        assert!(share_of_change(0.2, 0.0).is_err());
    }

    #[test]
    fn p_values() {
        assert_eq!(normal_p_value(0.0, 0.0), 1.0);
        assert!((normal_p_value(1.959963984540054, 1.0) - 0.05).abs() < 1e-9);
        assert!((z_critical(0.95) - 1.959963984540054).abs() < 1e-9);
    }
}
