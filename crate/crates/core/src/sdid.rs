//! Synthetic difference-in-differences with unit weights only.
//!
//! For each zone the treated trajectory is matched, over the last three
//! pre-treatment periods, by a simplex-weighted combination of donor tracts
//! lying 2 to 10 miles outside the zone border. Standard errors come from
//! placebo reassignment within the donor pool.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::ZoneAssignment;
use crate::panel::{fmt_f64, Panel, Role, TractId, ZoneId};

/// Event times used to fit the weights.
pub const FIT_WINDOW: [i32; 3] = [-3, -2, -1];

#[derive(Clone, Debug, PartialEq)]
pub struct SdidProblem {
    pub event_times: Vec<i32>,
    pub treated: Vec<f64>,
    /// Donor outcomes, one row per donor, columns aligned with `event_times`.
    pub donors: DMatrix<f64>,
    fit: Vec<usize>,
}

impl SdidProblem {
    pub fn new(event_times: Vec<i32>, treated: Vec<f64>, donors: DMatrix<f64>) -> Result<Self> {
        if treated.len() != event_times.len() || donors.ncols() != event_times.len() {
            return Err(Error::Argument(
                "trajectory lengths do not match the event times".into(),
            ));
        }
        if donors.nrows() == 0 {
            return Err(Error::EmptyArm("donor".into()));
        }
        let fit = FIT_WINDOW
            .iter()
            .map(|e| {
                event_times
                    .iter()
                    .position(|t| t == e)
                    .ok_or_else(|| Error::Argument(format!("event time {e} of the fit window is missing")))
            })
            .collect::<Result<Vec<_>>>()?;
        if treated.iter().chain(donors.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite outcome in SDID problem".into()));
        }
        Ok(SdidProblem {
            event_times,
            treated,
            donors,
            fit,
        })
    }

    pub fn n_donors(&self) -> usize {
        self.donors.nrows()
    }

    /// Fit-window data demeaned over time: (treated, donors × fit periods).
    fn centered(&self) -> (Vec<f64>, DMatrix<f64>, f64, Vec<f64>) {
        let t = self.fit.len() as f64;
        let y: Vec<f64> = self.fit.iter().map(|&c| self.treated[c]).collect();
        let ybar = y.iter().sum::<f64>() / t;
        let mut a = DMatrix::zeros(self.n_donors(), self.fit.len());
        let mut means = Vec::with_capacity(self.n_donors());
        for j in 0..self.n_donors() {
            let m = self.fit.iter().map(|&c| self.donors[(j, c)]).sum::<f64>() / t;
            means.push(m);
            for (k, &c) in self.fit.iter().enumerate() {
                a[(j, k)] = self.donors[(j, c)] - m;
            }
        }
        (y.into_iter().map(|v| v - ybar).collect(), a, ybar, means)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnitWeights {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub objective: f64,
    pub iterations: usize,
    pub gap: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-10,
            max_iterations: 100_000,
        }
    }
}

/// Penalty multiplier on ‖w‖² for regularization `zeta`.
pub fn penalty(zeta: f64) -> f64 {
    zeta * zeta * FIT_WINDOW.len() as f64
}

/// Σ_fit (treated_t − intercept − Σ_j w_j donor_jt)² + ζ²·T_fit·‖w‖².
pub fn objective(problem: &SdidProblem, weights: &[f64], intercept: f64, zeta: f64) -> f64 {
    let mut sse = 0.0;
    for &c in &problem.fit {
        let synth: f64 = weights
            .iter()
            .enumerate()
            .map(|(j, w)| w * problem.donors[(j, c)])
            .sum();
        sse += (problem.treated[c] - intercept - synth).powi(2);
    }
    sse + penalty(zeta) * weights.iter().map(|w| w * w).sum::<f64>()
}

/// Canonical regularization: σ̂·(n_treated·T_post)^{1/4}, with σ̂ the standard
/// deviation of first-differenced donor outcomes over pre-periods.
pub fn default_zeta(problem: &SdidProblem, n_treated: usize) -> f64 {
    let pre: Vec<usize> = (0..problem.event_times.len())
        .filter(|&c| problem.event_times[c] < 0)
        .collect();
    let mut diffs = Vec::new();
    for j in 0..problem.n_donors() {
        for w in pre.windows(2) {
            diffs.push(problem.donors[(j, w[1])] - problem.donors[(j, w[0])]);
        }
    }
    if diffs.len() < 2 {
        return 0.0;
    }
    let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let var = diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
    let t_post = problem.event_times.iter().filter(|&&e| e >= 0).count().max(1);
    var.sqrt() * ((n_treated.max(1) * t_post) as f64).powf(0.25)
}

/// Pairwise Frank–Wolfe over the simplex with exact line search. The
/// intercept is profiled out by demeaning over the fit window.
pub fn solve_unit_weights(problem: &SdidProblem, zeta: f64, opts: &SolverOptions) -> Result<UnitWeights> {
    if !(zeta >= 0.0) || !zeta.is_finite() {
        return Err(Error::Argument(format!(
            "regularization must be nonnegative, got {zeta}"
        )));
    }
    let (y, a, ybar, means) = problem.centered();
    let n = a.nrows();
    let t = a.ncols();
    let lambda = penalty(zeta);
    let f = |r: &[f64], w: &[f64]| r.iter().map(|v| v * v).sum::<f64>() + lambda * w.iter().map(|v| v * v).sum::<f64>();

    // Start from the best vertex.
    let start = (0..n)
        .map(|j| {
            let r: Vec<f64> = (0..t).map(|k| y[k] - a[(j, k)]).collect();
            (f(&r, &[1.0]), j)
        })
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .map(|(_, j)| j)
        .expect("at least one donor");
    let mut w = vec![0.0; n];
    w[start] = 1.0;
    let mut r: Vec<f64> = (0..t).map(|k| y[k] - a[(start, k)]).collect();
    let mut value = f(&r, &w);
    let mut grad = vec![0.0; n];
    let mut gap = f64::INFINITY;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        for j in 0..n {
            let mut g = 2.0 * lambda * w[j];
            for k in 0..t {
                g -= 2.0 * a[(j, k)] * r[k];
            }
            grad[j] = g;
        }
        let (s, gs) = grad
            .iter()
            .copied()
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .expect("nonempty");
        let (v, _) = grad
            .iter()
            .copied()
            .enumerate()
            .filter(|&(j, _)| w[j] > 0.0)
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .expect("weights on the simplex");
        gap = grad.iter().zip(&w).map(|(g, w)| g * w).sum::<f64>() - gs;
        if gap <= opts.tolerance || s == v {
            break;
        }
        iterations += 1;

        let delta: Vec<f64> = (0..t).map(|k| a[(s, k)] - a[(v, k)]).collect();
        let dd: f64 = delta.iter().map(|d| d * d).sum();
        let denom = dd + 2.0 * lambda;
        if !(denom > 0.0) {
            break;
        }
        let dr: f64 = delta.iter().zip(&r).map(|(d, r)| d * r).sum();
        let step = ((dr - lambda * (w[s] - w[v])) / denom).clamp(0.0, w[v]);
        if step == 0.0 {
            break;
        }
        w[s] += step;
        if step == w[v] {
            w[v] = 0.0;
        } else {
            w[v] -= step;
        }
        for k in 0..t {
            r[k] -= step * delta[k];
        }
        let next = f(&r, &w);
        debug_assert!(
            next <= value + 1e-12 * value.abs().max(1.0),
            "objective increased: {value} -> {next}"
        );
        value = next;
    }
    if gap > opts.tolerance && iterations >= opts.max_iterations {
        return Err(Error::NoConvergence { iterations, gap });
    }

    // Renormalize away rounding drift.
    for x in &mut w {
        *x = x.max(0.0);
    }
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    debug_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12 && w.iter().all(|&x| x >= 0.0));
    let intercept = ybar - w.iter().zip(&means).map(|(w, m)| w * m).sum::<f64>();
    let objective = objective(problem, &w, intercept, zeta);
    Ok(UnitWeights {
        weights: w,
        intercept,
        objective,
        iterations,
        gap: gap.max(0.0),
    })
}

/// Treated minus synthetic trajectory, normalized to zero at e = −1.
pub fn sdid_event_study(problem: &SdidProblem, weights: &UnitWeights) -> Vec<(i32, f64)> {
    let diff: Vec<f64> = (0..problem.event_times.len())
        .map(|c| {
            let synth: f64 = weights
                .weights
                .iter()
                .enumerate()
                .map(|(j, w)| w * problem.donors[(j, c)])
                .sum();
            problem.treated[c] - synth
        })
        .collect();
    let base = diff[problem.fit[FIT_WINDOW.len() - 1]];
    problem
        .event_times
        .iter()
        .zip(diff)
        .map(|(&e, d)| (e, d - base))
        .collect()
}

/// Donor tracts with their full trajectories, kept sorted by tract id.
#[derive(Clone, Debug, PartialEq)]
pub struct DonorPool {
    pub ids: Vec<TractId>,
    pub populations: Vec<f64>,
    /// One row per donor.
    pub outcomes: DMatrix<f64>,
    pub event_times: Vec<i32>,
}

impl DonorPool {
    pub fn new(mut members: Vec<(TractId, f64, Vec<f64>)>, event_times: Vec<i32>) -> Result<Self> {
        members.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(m) = members.iter().find(|m| m.2.len() != event_times.len()) {
            return Err(Error::Argument(format!("donor {} trajectory length mismatch", m.0)));
        }
        let outcomes = DMatrix::from_fn(members.len(), event_times.len(), |i, c| members[i].2[c]);
        Ok(DonorPool {
            ids: members.iter().map(|m| m.0.clone()).collect(),
            populations: members.iter().map(|m| m.1).collect(),
            outcomes,
            event_times,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn rows(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), self.event_times.len(), |i, c| self.outcomes[(idx[i], c)])
    }
}

/// Weighted mean trajectory; equal weights when all weights are zero.
pub fn weighted_trajectory(rows: &DMatrix<f64>, weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    (0..rows.ncols())
        .map(|c| {
            if total > 0.0 {
                (0..rows.nrows()).map(|i| weights[i] * rows[(i, c)]).sum::<f64>() / total
            } else {
                (0..rows.nrows()).map(|i| rows[(i, c)]).sum::<f64>() / rows.nrows() as f64
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdidConfig {
    pub replications: usize,
    /// Placebo seed; `None` takes the run's root seed.
    pub seed: Option<u64>,
    /// Fixed regularization; `None` uses [`default_zeta`].
    pub zeta: Option<f64>,
    pub donor_min_miles: f64,
    pub donor_max_miles: f64,
}

impl Default for SdidConfig {
    fn default() -> Self {
        SdidConfig {
            replications: 100,
            seed: None,
            zeta: None,
            donor_min_miles: 2.0,
            donor_max_miles: 10.0,
        }
    }
}

fn fit_series(
    problem: &SdidProblem,
    n_treated: usize,
    zeta: Option<f64>,
    opts: &SolverOptions,
) -> Result<(Vec<(i32, f64)>, UnitWeights, f64)> {
    let z = zeta.unwrap_or_else(|| default_zeta(problem, n_treated));
    let w = solve_unit_weights(problem, z, opts)?;
    Ok((sdid_event_study(problem, &w), w, z))
}

/// Per-coefficient standard deviation of placebo estimates. Replication `r`
/// draws from a ChaCha stream seeded by `seed` with stream id `r`.
pub fn placebo_se(
    pool: &DonorPool,
    n_treated: usize,
    replications: usize,
    seed: u64,
    zeta: Option<f64>,
) -> Result<Vec<f64>> {
    if replications < 2 {
        return Err(Error::Argument(format!(
            "placebo inference needs at least 2 replications, got {replications}"
        )));
    }
    if n_treated == 0 || pool.len() <= n_treated {
        return Err(Error::Argument(format!(
            "donor pool of {} cannot supply {n_treated} placebo tracts plus donors",
            pool.len()
        )));
    }
    let opts = SolverOptions::default();
    let draws: Vec<Vec<f64>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut picked = rand::seq::index::sample(&mut rng, pool.len(), n_treated).into_vec();
            picked.sort_unstable();
            let chosen: BTreeSet<usize> = picked.iter().copied().collect();
            let rest: Vec<usize> = (0..pool.len()).filter(|i| !chosen.contains(i)).collect();
            let pops: Vec<f64> = picked.iter().map(|&i| pool.populations[i]).collect();
            let treated = weighted_trajectory(&pool.rows(&picked), &pops);
            let problem = SdidProblem::new(pool.event_times.clone(), treated, pool.rows(&rest))?;
            let (series, _, _) = fit_series(&problem, n_treated, zeta, &opts)?;
            Ok(series.into_iter().map(|(_, v)| v).collect())
        })
        .collect::<Result<_>>()?;
    let k = pool.event_times.len();
    let n = draws.len() as f64;
    Ok((0..k)
        .map(|c| {
            let m = draws.iter().map(|d| d[c]).sum::<f64>() / n;
            (draws.iter().map(|d| (d[c] - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZoneSeries {
    pub zone_id: ZoneId,
    pub population: f64,
    pub event_times: Vec<i32>,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
}

/// Population-weighted pooling; SEs combine as a weighted root sum of
/// squares assuming independence across zones.
pub fn aggregate_zones(series: &[ZoneSeries]) -> Result<ZoneSeries> {
    let first = series
        .first()
        .ok_or_else(|| Error::Argument("no zone series to aggregate".into()))?;
    if let Some(s) = series.iter().find(|s| s.event_times != first.event_times) {
        return Err(Error::Argument(format!(
            "zone {} has a different event window",
            s.zone_id
        )));
    }
    let total: f64 = series.iter().map(|s| s.population).sum();
    if !(total > 0.0) {
        return Err(Error::Validation("zone populations sum to zero".into()));
    }
    let k = first.event_times.len();
    let mut estimates = vec![0.0; k];
    let mut var = vec![0.0; k];
    for s in series {
        let w = s.population / total;
        for c in 0..k {
            estimates[c] += w * s.estimates[c];
            var[c] += (w * s.std_errors[c]).powi(2);
        }
    }
    Ok(ZoneSeries {
        zone_id: ZoneId::new("pooled"),
        population: total,
        event_times: first.event_times.clone(),
        estimates,
        std_errors: var.into_iter().map(f64::sqrt).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZoneProblem {
    pub zone_id: ZoneId,
    pub adoption_year: i32,
    pub treated_ids: Vec<TractId>,
    pub population: f64,
    pub problem: SdidProblem,
    pub pool: DonorPool,
}

fn trajectory(panel: &Panel, tract: &TractId, outcome: &str, years: &[i32]) -> Option<Vec<f64>> {
    years.iter().map(|&y| panel.get(tract, y)?.outcome(outcome)).collect()
}

/// One problem per designee zone. Donors are unlabeled tracts whose
/// centroids lie outside the zone between the configured distances and
/// which have complete trajectories.
pub fn build_zone_problems(
    panel: &Panel,
    assignments: &[ZoneAssignment],
    outcome: &str,
    cfg: &SdidConfig,
) -> Result<Vec<ZoneProblem>> {
    let window = panel.window();
    let event_times: Vec<i32> = window.times().collect();
    let mut zones: BTreeMap<ZoneId, (i32, Vec<TractId>)> = BTreeMap::new();
    for (t, l) in panel.tracts_with_role(Role::Designee) {
        if let (Some(z), Some(a)) = (&l.zone_id, l.adoption_year) {
            zones.entry(z.clone()).or_insert((a, Vec::new())).1.push(t.clone());
        }
    }
    let mut out = Vec::new();
    for (zone_id, (a, treated_ids)) in zones {
        let years: Vec<i32> = event_times.iter().map(|e| a + e).collect();
        let mut rows = Vec::new();
        let mut pops = Vec::new();
        for t in &treated_ids {
            let traj = trajectory(panel, t, outcome, &years).ok_or_else(|| Error::MissingYears {
                cohort: a,
                years: years
                    .iter()
                    .copied()
                    .filter(|&y| panel.get(t, y).and_then(|o| o.outcome(outcome)).is_none())
                    .collect(),
            })?;
            rows.push(traj);
            pops.push(panel.zone_population(t).unwrap_or(0.0));
        }
        let treated_rows = DMatrix::from_fn(rows.len(), years.len(), |i, c| rows[i][c]);
        let treated = weighted_trajectory(&treated_rows, &pops);

        let mut seen = BTreeSet::new();
        let mut members = Vec::new();
        for asg in assignments.iter().filter(|x| x.zone_id == zone_id) {
            let in_band = !asg.centroid_inside
                && asg.area_overlap_share <= 0.0
                && asg.centroid_border_distance >= cfg.donor_min_miles
                && asg.centroid_border_distance <= cfg.donor_max_miles;
            let unlabeled = panel.label(&asg.tract_id).is_some_and(|l| l.role == Role::Neither);
            if in_band && unlabeled && seen.insert(asg.tract_id.clone()) {
                if let Some(traj) = trajectory(panel, &asg.tract_id, outcome, &years) {
                    let pop = panel.tract_info(&asg.tract_id).map_or(0.0, |(p, _)| p);
                    members.push((asg.tract_id.clone(), pop, traj));
                }
            }
        }
        if members.is_empty() {
            return Err(Error::EmptyArm(format!("donor pool of zone {zone_id}")));
        }
        let pool = DonorPool::new(members, event_times.clone())?;
        let problem = SdidProblem::new(event_times.clone(), treated, pool.outcomes.clone())?;
        out.push(ZoneProblem {
            zone_id,
            adoption_year: a,
            population: pops.iter().sum(),
            treated_ids,
            problem,
            pool,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyArm("treated".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SdidReport {
    pub outcome: String,
    pub zones: Vec<ZoneSeries>,
    pub pooled: ZoneSeries,
    pub zetas: BTreeMap<String, f64>,
}

/// Fits every zone, attaches placebo SEs and pools. Zone `i` uses placebo
/// seed `cfg.seed + i`.
pub fn run_sdid(panel: &Panel, assignments: &[ZoneAssignment], outcome: &str, cfg: &SdidConfig) -> Result<SdidReport> {
    let problems = build_zone_problems(panel, assignments, outcome, cfg)?;
    let opts = SolverOptions::default();
    let mut zones = Vec::new();
    let mut zetas = BTreeMap::new();
    for (i, zp) in problems.iter().enumerate() {
        let n_treated = zp.treated_ids.len();
        let (series, _, z) = fit_series(&zp.problem, n_treated, cfg.zeta, &opts)?;
        let se = placebo_se(
            &zp.pool,
            n_treated,
            cfg.replications,
            cfg.seed.unwrap_or(0).wrapping_add(i as u64),
            cfg.zeta,
        )?;
        zetas.insert(zp.zone_id.0.clone(), z);
        zones.push(ZoneSeries {
            zone_id: zp.zone_id.clone(),
            population: zp.population,
            event_times: series.iter().map(|s| s.0).collect(),
            estimates: series.iter().map(|s| s.1).collect(),
            std_errors: se,
        });
    }
    let pooled = aggregate_zones(&zones)?;
    Ok(SdidReport {
        outcome: outcome.to_string(),
        zones,
        pooled,
        zetas,
    })
}

pub fn write_sdid_series(path: &Path, report: &SdidReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "outcome",
        "zone_id",
        "event_time",
        "estimate",
        "se",
        "ci_low",
        "ci_high",
        "fit_window",
    ])?;
    for s in report.zones.iter().chain(std::iter::once(&report.pooled)) {
        for c in 0..s.event_times.len() {
            let (e, est, se) = (s.event_times[c], s.estimates[c], s.std_errors[c]);
            let z = 1.959963984540054;
            w.write_record([
                report.outcome.clone(),
                s.zone_id.0.clone(),
                e.to_string(),
                fmt_f64(est),
                fmt_f64(se),
                fmt_f64(est - z * se),
                fmt_f64(est + z * se),
                FIT_WINDOW.contains(&e).to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn times() -> Vec<i32> {
        (-5..=7).collect()
    }

    #[test]
    fn perfect_match_up_to_constant() {
        let base: Vec<f64> = times().iter().map(|&e| (e as f64 * 0.7).sin()).collect();
        let treated: Vec<f64> = base.iter().map(|v| v + 2.5).collect();
        let other: Vec<f64> = times().iter().map(|&e| e as f64 * 0.3).collect();
        let donors = DMatrix::from_fn(2, 13, |i, c| if i == 0 { other[c] } else { base[c] });
        let p = SdidProblem::new(times(), treated, donors).unwrap();
        let w = solve_unit_weights(&p, 0.0, &SolverOptions::default()).unwrap();
        assert!(w.weights[1] >= 1.0 - 1e-8, "{:?}", w.weights);
        assert!((w.intercept - 2.5).abs() < 1e-8);
        assert!(w.objective <= 1e-10);
        for (_, v) in sdid_event_study(&p, &w) {
            assert!(v.abs() < 1e-8);
        }
    }

    #[test]
    fn identical_donors_split_evenly() {
        let d: Vec<f64> = times().iter().map(|&e| e as f64).collect();
        let donors = DMatrix::from_fn(2, 13, |_, c| d[c]);
        let treated: Vec<f64> = times().iter().map(|&e| 0.5 * e as f64).collect();
        let p = SdidProblem::new(times(), treated, donors).unwrap();
        let w = solve_unit_weights(&p, 0.3, &SolverOptions::default()).unwrap();
        assert!((w.weights[0] - 0.5).abs() < 1e-12 && (w.weights[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn post_shift_is_recovered() {
        let d: Vec<f64> = times().iter().map(|&e| 1.0 + 0.1 * e as f64).collect();
        let donors = DMatrix::from_fn(1, 13, |_, c| d[c]);
        let treated: Vec<f64> = times()
            .iter()
            .zip(&d)
            .map(|(&e, v)| v + if e >= 0 { 0.4 } else { 0.0 })
            .collect();
        let p = SdidProblem::new(times(), treated, donors).unwrap();
        let w = solve_unit_weights(&p, 0.0, &SolverOptions::default()).unwrap();
        for (e, v) in sdid_event_study(&p, &w) {
            let want = if e >= 0 { 0.4 } else { 0.0 };
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn placebo_contracts() {
        let members: Vec<(TractId, f64, Vec<f64>)> = (0..6)
            .map(|i| (TractId::new(format!("d{i}")), 1.0, vec![1.0; 13]))
            .collect();
        let pool = DonorPool::new(members, times()).unwrap();
        assert!(placebo_se(&pool, 2, 1, 7, None).is_err());
        assert!(placebo_se(&pool, 6, 10, 7, None).is_err());
        let se = placebo_se(&pool, 2, 5, 7, None).unwrap();
        assert!(se.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn aggregation() {
        let mk = |id: &str, pop: f64, v: f64, se: f64| ZoneSeries {
            zone_id: ZoneId::new(id),
            population: pop,
            event_times: vec![4],
            estimates: vec![v],
            std_errors: vec![se],
        };
        let pooled = aggregate_zones(&[mk("a", 1.0, 0.1, 0.3), mk("b", 1.0, 0.3, 0.4)]).unwrap();
        assert!((pooled.estimates[0] - 0.2).abs() < 1e-15);
        assert!((pooled.std_errors[0] - 0.25).abs() < 1e-15);
        let single = aggregate_zones(&[mk("a", 3.0, 0.1, 0.3)]).unwrap();
        assert_eq!(single.estimates, vec![0.1]);
        let mut bad = mk("c", 1.0, 0.0, 0.0);
        bad.event_times = vec![5];
        assert!(aggregate_zones(&[mk("a", 1.0, 0.1, 0.3), bad]).is_err());
    }
}
