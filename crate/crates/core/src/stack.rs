//! Stacked sub-experiment construction.
//!
//! One sub-experiment per adoption year `a`: that cohort's designee tracts
//! against the pooled finalist tracts, aligned on event time. Rows carry the
//! corrective weight
//!
//! ```text
//! Q = ω(a) / (N_a / N)   treated rows
//! Q = ω(a)               control rows
//! ```
//!
//! with `ω(a) = Pop_a / Pop` over designee population-in-zone, multiplied by
//! the tract's population-in-zone normalized to mean one within its
//! (sub-experiment, arm) cell.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::{fmt_f64, EventWindow, GroupLabel, LonLat, Panel, Role, TractId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CohortWeight {
    pub adoption_year: i32,
    /// N_a: designee tracts in the cohort.
    pub n_treated: usize,
    /// Pop_a: designee population-in-zone in the cohort.
    pub population: f64,
    /// ω(a) = Pop_a / Pop.
    pub omega: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CohortWeights {
    pub cohorts: BTreeMap<i32, CohortWeight>,
    pub n_treated: usize,
    pub population: f64,
}

impl CohortWeights {
    /// Builds weights from per-cohort (tract count, population) totals.
    pub fn from_totals(totals: &BTreeMap<i32, (usize, f64)>) -> Result<Self> {
        if totals.is_empty() {
            return Err(Error::Validation("no designee cohorts".into()));
        }
        for (&a, &(n, pop)) in totals {
            if n == 0 || !(pop > 0.0) {
                return Err(Error::EmptyCohort(a));
            }
        }
        let n_treated = totals.values().map(|t| t.0).sum();
        let population: f64 = totals.values().map(|t| t.1).sum();
        let cohorts = totals
            .iter()
            .map(|(&a, &(n, pop))| {
                (
                    a,
                    CohortWeight {
                        adoption_year: a,
                        n_treated: n,
                        population: pop,
                        omega: pop / population,
                    },
                )
            })
            .collect();
        Ok(CohortWeights {
            cohorts,
            n_treated,
            population,
        })
    }

    pub fn omega(&self, a: i32) -> Option<f64> {
        self.cohorts.get(&a).map(|c| c.omega)
    }

    pub fn years(&self) -> impl Iterator<Item = i32> + '_ {
        self.cohorts.keys().copied()
    }

    /// Q for a treated row of cohort `a`.
    pub fn treated_q(&self, a: i32) -> Option<f64> {
        let c = self.cohorts.get(&a)?;
        Some(c.omega / (c.n_treated as f64 / self.n_treated as f64))
    }

    /// Q for a control row of sub-experiment `a`.
    pub fn control_q(&self, a: i32) -> Option<f64> {
        self.omega(a)
    }
}

/// ω(a) from the designee tracts present in `panel`.
pub fn cohort_weights(panel: &Panel) -> Result<CohortWeights> {
    let mut totals: BTreeMap<i32, (usize, f64)> = BTreeMap::new();
    for (tract, label) in panel.tracts_with_role(Role::Designee) {
        let a = label.adoption_year.expect("designee labels carry an adoption year");
        let pop = panel.zone_population(tract).unwrap_or(0.0);
        let e = totals.entry(a).or_default();
        e.0 += 1;
        e.1 += pop;
    }
    CohortWeights::from_totals(&totals)
}

/// Like [`cohort_weights`] but requires each listed year to have designees.
pub fn cohort_weights_for(panel: &Panel, years: &[i32]) -> Result<CohortWeights> {
    let all = cohort_weights(panel);
    let mut totals = BTreeMap::new();
    for &a in years {
        let c = all
            .as_ref()
            .ok()
            .and_then(|w| w.cohorts.get(&a))
            .ok_or(Error::EmptyCohort(a))?;
        totals.insert(a, (c.n_treated, c.population));
    }
    CohortWeights::from_totals(&totals)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackTract {
    pub id: TractId,
    pub centroid: LonLat,
    pub label: GroupLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackedRow {
    pub sub_experiment: i32,
    /// Index into [`StackedDesign::tracts`].
    pub tract: usize,
    pub treated: bool,
    pub event_time: i32,
    pub data_year: i32,
    /// Aligned with [`StackedDesign::outcome_names`].
    pub outcomes: Vec<Option<f64>>,
    /// Cohort-level Q before the unit weight is applied.
    pub cohort_q: f64,
    /// Population-in-zone normalized to mean one within (sub-experiment, arm).
    pub unit_weight: f64,
    pub regression_weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackedDesign {
    pub window: EventWindow,
    pub cohorts: CohortWeights,
    pub outcome_names: Vec<String>,
    pub tracts: Vec<StackTract>,
    pub rows: Vec<StackedRow>,
}

impl StackedDesign {
    pub fn outcome_index(&self, name: &str) -> Option<usize> {
        self.outcome_names.iter().position(|n| n == name)
    }

    pub fn tract(&self, row: &StackedRow) -> &StackTract {
        &self.tracts[row.tract]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = [
            "sub_experiment",
            "tract_id",
            "treated",
            "event_time",
            "data_year",
            "cohort_q",
            "unit_weight",
            "regression_weight",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(self.outcome_names.iter().cloned());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.sub_experiment.to_string(),
                self.tracts[r.tract].id.0.clone(),
                u8::from(r.treated).to_string(),
                r.event_time.to_string(),
                r.data_year.to_string(),
                fmt_f64(r.cohort_q),
                fmt_f64(r.unit_weight),
                fmt_f64(r.regression_weight),
            ];
            rec.extend(r.outcomes.iter().map(|v| v.map(fmt_f64).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn normalized_unit_weights(panel: &Panel, tracts: &[&TractId]) -> Result<Vec<f64>> {
    let raw: Vec<f64> = tracts.iter().map(|t| panel.zone_population(t).unwrap_or(0.0)).collect();
    if let Some((t, _)) = tracts.iter().zip(&raw).find(|(_, &w)| !(w > 0.0)) {
        return Err(Error::Validation(format!(
            "tract {t} has no positive population-in-zone weight"
        )));
    }
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

/// Builds one sub-experiment per cohort in `weights`. Every finalist tract
/// serves as a control in every sub-experiment.
pub fn build_stack(panel: &Panel, weights: &CohortWeights, window: EventWindow) -> Result<StackedDesign> {
    let outcome_names: Vec<String> = panel.outcome_names().into_iter().collect();
    let controls: Vec<&TractId> = panel.tracts_with_role(Role::Finalist).map(|(t, _)| t).collect();
    if controls.is_empty() {
        return Err(Error::EmptyArm("control".into()));
    }

    let mut tract_index: BTreeMap<TractId, usize> = BTreeMap::new();
    let mut tracts = Vec::new();
    let mut index_of = |t: &TractId| -> usize {
        *tract_index.entry(t.clone()).or_insert_with(|| {
            let (_, centroid) = panel.tract_info(t).expect("labelled tract has observations");
            tracts.push(StackTract {
                id: t.clone(),
                centroid,
                label: panel.label(t).cloned().expect("tract is labelled"),
            });
            tracts.len() - 1
        })
    };

    let control_units = normalized_unit_weights(panel, &controls)?;
    let mut rows = Vec::new();
    for cohort in weights.cohorts.values() {
        let a = cohort.adoption_year;
        let treated: Vec<&TractId> = panel
            .tracts_with_role(Role::Designee)
            .filter(|(_, l)| l.adoption_year == Some(a))
            .map(|(t, _)| t)
            .collect();
        if treated.is_empty() {
            return Err(Error::EmptyCohort(a));
        }
        let treated_units = normalized_unit_weights(panel, &treated)?;
        let q_t = weights.treated_q(a).expect("cohort present");
        let q_c = weights.control_q(a).expect("cohort present");

        let mut missing = BTreeSet::new();
        let arms = [
            (true, &treated, &treated_units, q_t),
            (false, &controls, &control_units, q_c),
        ];
        for (is_treated, members, units, q) in arms {
            for (tract, &u) in members.iter().zip(units.iter()) {
                if panel.tract_info(tract).is_none() {
                    missing.extend(window.times().map(|e| a + e));
                    continue;
                }
                let idx = index_of(tract);
                for e in window.times() {
                    let year = a + e;
                    let Some(obs) = panel.get(tract, year) else {
                        missing.insert(year);
                        continue;
                    };
                    rows.push(StackedRow {
                        sub_experiment: a,
                        tract: idx,
                        treated: is_treated,
                        event_time: e,
                        data_year: year,
                        outcomes: outcome_names.iter().map(|n| obs.outcome(n)).collect(),
                        cohort_q: q,
                        unit_weight: u,
                        regression_weight: q * u,
                    });
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingYears {
                cohort: a,
                years: missing.into_iter().collect(),
            });
        }
    }

    Ok(StackedDesign {
        window,
        cohorts: weights.clone(),
        outcome_names,
        tracts,
        rows,
    })
}
