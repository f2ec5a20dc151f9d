//! Neighborhood Status Index: equal-weighted average of sign-oriented
//! z-scores, normalized to a reference population of tracts in a baseline
//! year.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{Panel, PanelObservation, Role, EMP_POP_RATIO, LOG_MEDIAN_INCOME, POVERTY_RATE};

pub const NSI: &str = "nsi";

/// Which tracts define the baseline mean and standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationPopulation {
    #[default]
    Designees,
    DesigneesAndFinalists,
    AllTracts,
}

impl NormalizationPopulation {
    fn includes(self, role: Role) -> bool {
        match self {
            NormalizationPopulation::Designees => role == Role::Designee,
            NormalizationPopulation::DesigneesAndFinalists => role != Role::Neither,
            NormalizationPopulation::AllTracts => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexComponent {
    pub outcome: String,
    /// +1 when higher values mean better status, −1 otherwise.
    pub sign: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexSpec {
    pub components: Vec<IndexComponent>,
    /// Defaults to the first study-window year.
    pub baseline_year: Option<i32>,
    pub population: NormalizationPopulation,
}

impl Default for IndexSpec {
    fn default() -> Self {
        IndexSpec {
            components: vec![
                IndexComponent {
                    outcome: POVERTY_RATE.into(),
                    sign: -1.0,
                },
                IndexComponent {
                    outcome: LOG_MEDIAN_INCOME.into(),
                    sign: 1.0,
                },
                IndexComponent {
                    outcome: EMP_POP_RATIO.into(),
                    sign: 1.0,
                },
            ],
            baseline_year: None,
            population: NormalizationPopulation::Designees,
        }
    }
}

impl IndexSpec {
    fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Argument("index needs at least one component".into()));
        }
        if let Some(c) = self.components.iter().find(|c| c.sign != 1.0 && c.sign != -1.0) {
            return Err(Error::Argument(format!(
                "component `{}` has sign {}; expected +1 or -1",
                c.outcome, c.sign
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub baseline_year: i32,
    pub moments: BTreeMap<String, Moments>,
}

/// Population-weighted mean and (population) standard deviation.
pub fn weighted_moments(values: &[(f64, f64)]) -> Option<Moments> {
    let w: f64 = values.iter().map(|(_, w)| w).sum();
    if !(w > 0.0) {
        return None;
    }
    let mean = values.iter().map(|(x, w)| x * w).sum::<f64>() / w;
    let var = values.iter().map(|(x, w)| w * (x - mean).powi(2)).sum::<f64>() / w;
    Some(Moments { mean, sd: var.sqrt() })
}

pub fn fit_normalization(panel: &Panel, spec: &IndexSpec) -> Result<Normalization> {
    spec.validate()?;
    let baseline_year = match spec.baseline_year {
        Some(y) => y,
        None => *panel
            .study_years()
            .ok_or_else(|| Error::Validation("panel has no observations".into()))?
            .start(),
    };
    let mut moments = BTreeMap::new();
    for comp in &spec.components {
        let values: Vec<(f64, f64)> = panel
            .labels()
            .iter()
            .filter(|(_, l)| spec.population.includes(l.role))
            .filter_map(|(t, _)| {
                let obs = panel.get(t, baseline_year)?;
                Some((obs.outcome(&comp.outcome)?, obs.population))
            })
            .collect();
        let m = weighted_moments(&values).ok_or_else(|| {
            Error::Validation(format!(
                "no weighted baseline observations of `{}` in {baseline_year}",
                comp.outcome
            ))
        })?;
        if !(m.sd > 1e-12 * m.mean.abs().max(1.0)) {
            return Err(Error::Validation(format!(
                "component `{}` has zero variance over the normalization population",
                comp.outcome
            )));
        }
        moments.insert(comp.outcome.clone(), m);
    }
    Ok(Normalization { baseline_year, moments })
}

/// `None` when any component is missing.
pub fn compute_index(obs: &PanelObservation, spec: &IndexSpec, norm: &Normalization) -> Option<f64> {
    let k = spec.components.len() as f64;
    let mut total = 0.0;
    for comp in &spec.components {
        let x = obs.outcome(&comp.outcome)?;
        let m = norm.moments.get(&comp.outcome)?;
        total += comp.sign * (x - m.mean) / m.sd;
    }
    Some(total / k)
}

/// Fits the normalization and appends the index as outcome `name`.
pub fn add_index(panel: &Panel, spec: &IndexSpec, name: &str) -> Result<(Panel, Normalization)> {
    let norm = fit_normalization(panel, spec)?;
    let out = panel.with_outcome(name, |o| compute_index(o, spec, &norm))?;
    Ok((out, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{EventWindow, GroupLabel, LonLat, TractId};

    fn panel(values: &[(&str, Role, f64, f64)]) -> Panel {
        let mut obs = Vec::new();
        let mut labels = BTreeMap::new();
        for &(id, role, x, pop) in values {
            obs.push(PanelObservation {
                tract_id: TractId::new(id),
                data_year: 2009,
                outcomes: BTreeMap::from([("x".to_string(), x)]),
                population: pop,
                centroid: LonLat::new(0.0, 0.0),
            });
            let year = (role != Role::Neither).then_some(2014);
            labels.insert(TractId::new(id), GroupLabel::new(role, None, year).unwrap());
        }
        Panel::new(obs, labels, EventWindow::default()).unwrap()
    }

    fn spec_x() -> IndexSpec {
        IndexSpec {
            components: vec![IndexComponent {
                outcome: "x".into(),
                sign: 1.0,
            }],
            baseline_year: None,
            population: NormalizationPopulation::Designees,
        }
    }

    #[test]
    fn two_equal_weight_tracts() {
        let p = panel(&[
            ("a", Role::Designee, 0.0, 1.0),
            ("b", Role::Designee, 2.0, 1.0),
            ("c", Role::Finalist, 100.0, 1.0),
        ]);
        let norm = fit_normalization(&p, &spec_x()).unwrap();
        assert_eq!(norm.baseline_year, 2009);
        assert_eq!(norm.moments["x"], Moments { mean: 1.0, sd: 1.0 });
    }

    #[test]
    fn constant_component_is_rejected() {
        let p = panel(&[("a", Role::Designee, 3.0, 1.0), ("b", Role::Designee, 3.0, 5.0)]);
        let err = fit_normalization(&p, &spec_x()).unwrap_err();
        assert!(err.to_string().contains("`x`"), "{err}");
    }

    #[test]
    fn normalization_population_variants() {
        let p = panel(&[
            ("a", Role::Designee, 0.0, 1.0),
            ("b", Role::Designee, 2.0, 1.0),
            ("c", Role::Finalist, 4.0, 2.0),
        ]);
        let mut spec = spec_x();
        spec.population = NormalizationPopulation::DesigneesAndFinalists;
        let m = fit_normalization(&p, &spec).unwrap().moments["x"];
        assert!((m.mean - 2.5).abs() < 1e-15);
    }

    #[test]
    fn index_values() {
        let spec = IndexSpec::default();
        let norm = Normalization {
            baseline_year: 2009,
            moments: spec
                .components
                .iter()
                .map(|c| (c.outcome.clone(), Moments { mean: 0.5, sd: 0.1 }))
                .collect(),
        };
        let mut obs = PanelObservation {
            tract_id: TractId::new("t"),
            data_year: 2009,
            outcomes: spec.components.iter().map(|c| (c.outcome.clone(), 0.5)).collect(),
            population: 1.0,
            centroid: LonLat::new(0.0, 0.0),
        };
        assert_eq!(compute_index(&obs, &spec, &norm), Some(0.0));
        obs.outcomes.insert(EMP_POP_RATIO.into(), 0.6);
        assert!((compute_index(&obs, &spec, &norm).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        obs.outcomes.remove(POVERTY_RATE);
        assert_eq!(compute_index(&obs, &spec, &norm), None);
    }

    #[test]
    fn bad_signs_rejected() {
        let mut spec = spec_x();
        spec.components[0].sign = 0.5;
        let p = panel(&[("a", Role::Designee, 0.0, 1.0), ("b", Role::Designee, 2.0, 1.0)]);
        assert!(matches!(fit_normalization(&p, &spec), Err(Error::Argument(_))));
    }
}
