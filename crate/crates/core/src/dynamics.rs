//! Single-year effects from coefficients on 5-year trailing averages.
//!
//! If the observed outcome at event time `e` averages years `e−4..=e`, then
//! `γ_e − γ_{e−1} = (τ_e − τ_{e−5}) / 5`, which inverts to
//!
//! ```text
//! τ_e = 5·(γ_e − γ_{e−1}) + τ_{e−5},   γ_{−1} = 0.
//! ```

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{AttEstimate, EventStudyFit, Term, POST_END, POST_START};

/// Years in each averaged observation.
pub const SPAN: i32 = 5;
pub const FIRST_EFFECT: i32 = 0;
pub const LAST_EFFECT: i32 = 7;
const FIRST_PRE: i32 = -5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreTreatment {
    /// Single-year effects before adoption are exactly zero.
    #[default]
    ForceZero,
    /// Pre-adoption effects recovered from the estimated pre-period γ, with
    /// the unobserved γ_{−6} taken equal to γ_{−5}. Diagnostic only.
    RawEstimates,
}

#[derive(Clone, Debug, PartialEq)]
pub struct YearlyEffects {
    pub mode: PreTreatment,
    /// τ_e for e in 0..=7.
    pub tau: Vec<(i32, f64)>,
    /// Event times of the γ inputs, matching the columns of `map`.
    pub inputs: Vec<i32>,
    /// τ = map · γ.
    pub map: DMatrix<f64>,
}

fn input_times() -> Vec<i32> {
    (FIRST_PRE..=LAST_EFFECT).filter(|&e| e != -1).collect()
}

/// Coefficient vectors (over [`input_times`]) expressing each τ_s.
fn recursion(mode: PreTreatment) -> BTreeMap<i32, DVector<f64>> {
    let inputs = input_times();
    let k = inputs.len();
    let unit = |e: i32| -> DVector<f64> {
        let mut v = DVector::zeros(k);
        if let Some(i) = inputs.iter().position(|&t| t == e) {
            v[i] = 1.0;
        }
        v
    };
    // γ_{-1} = 0 is the zero vector through `unit`.
    let gamma = |e: i32| -> DVector<f64> {
        if e < FIRST_PRE {
            unit(FIRST_PRE)
        } else {
            unit(e)
        }
    };
    let mut tau: BTreeMap<i32, DVector<f64>> = BTreeMap::new();
    let first = match mode {
        PreTreatment::ForceZero => FIRST_EFFECT,
        PreTreatment::RawEstimates => FIRST_PRE,
    };
    for e in first..=LAST_EFFECT {
        let prev = tau.get(&(e - SPAN)).cloned().unwrap_or_else(|| DVector::zeros(k));
        tau.insert(e, (gamma(e) - gamma(e - 1)) * f64::from(SPAN) + prev);
    }
    tau
}

/// Inverts the trailing average. Requires γ_0..γ_7, plus γ_{−5}..γ_{−2} in
/// [`PreTreatment::RawEstimates`] mode.
pub fn unsmooth(gamma: &BTreeMap<i32, f64>, mode: PreTreatment) -> Result<YearlyEffects> {
    let inputs = input_times();
    let needed = inputs
        .iter()
        .filter(|&&e| mode == PreTreatment::RawEstimates || e >= FIRST_EFFECT);
    let mut g = DVector::zeros(inputs.len());
    for (i, &e) in inputs.iter().enumerate() {
        match gamma.get(&e) {
            Some(v) => g[i] = *v,
            None if needed.clone().any(|&n| n == e) => {
                return Err(Error::Argument(format!("missing coefficient for event time {e}")));
            }
            None => {}
        }
    }
    let rec = recursion(mode);
    let mut map = DMatrix::zeros((LAST_EFFECT - FIRST_EFFECT + 1) as usize, inputs.len());
    let mut tau = Vec::new();
    for (r, e) in (FIRST_EFFECT..=LAST_EFFECT).enumerate() {
        let row = &rec[&e];
        map.row_mut(r).copy_from(&row.transpose());
        tau.push((e, row.dot(&g)));
    }
    Ok(YearlyEffects { mode, tau, inputs, map })
}

impl YearlyEffects {
    pub fn get(&self, e: i32) -> Option<f64> {
        self.tau.iter().find(|(t, _)| *t == e).map(|(_, v)| *v)
    }

    /// Standard errors of each τ under the γ covariance `cov` (ordered like
    /// `inputs`).
    pub fn std_errors(&self, cov: &DMatrix<f64>) -> Vec<f64> {
        let v = &self.map * cov * self.map.transpose();
        (0..v.nrows()).map(|i| v[(i, i)].max(0.0).sqrt()).collect()
    }
}

/// γ covariance from a dynamic fit, ordered like [`YearlyEffects::inputs`].
pub fn gamma_covariance(fit: &EventStudyFit) -> Result<(BTreeMap<i32, f64>, DMatrix<f64>)> {
    let inputs = input_times();
    let idx: Vec<Option<usize>> = inputs.iter().map(|&e| fit.index_of(&Term::Gamma(e))).collect();
    let mut cov = DMatrix::zeros(inputs.len(), inputs.len());
    let mut gamma = BTreeMap::new();
    for (a, ia) in idx.iter().enumerate() {
        let Some(ia) = ia else { continue };
        gamma.insert(inputs[a], fit.coefficients[*ia]);
        for (b, ib) in idx.iter().enumerate() {
            if let Some(ib) = ib {
                cov[(a, b)] = fit.covariance[(*ia, *ib)];
            }
        }
    }
    Ok((gamma, cov))
}

/// Mean of τ_4..τ_7 with its delta-method SE.
pub fn unsmooth_att(effects: &YearlyEffects, cov: Option<&DMatrix<f64>>) -> AttEstimate {
    let n = f64::from(POST_END - POST_START + 1);
    let rows: Vec<usize> = (POST_START..=POST_END).map(|e| (e - FIRST_EFFECT) as usize).collect();
    let mut a = DVector::zeros(effects.inputs.len());
    let mut value = 0.0;
    for &r in &rows {
        a += effects.map.row(r).transpose() / n;
        value += effects.tau[r].1 / n;
    }
    let se = cov.map_or(0.0, |c| (a.transpose() * c * &a)[(0, 0)].max(0.0).sqrt());
    AttEstimate::new(value, se)
}

/// Equal-weight 5-year trailing average of yearly effects, with τ = 0 before
/// adoption: γ_e = (1/5)·Σ_{k=e−4}^{e} τ_k for e in 0..=7.
pub fn trailing_average(tau: &BTreeMap<i32, f64>) -> BTreeMap<i32, f64> {
    (FIRST_EFFECT..=LAST_EFFECT)
        .map(|e| {
            let s: f64 = (e - SPAN + 1..=e).map(|k| tau.get(&k).copied().unwrap_or(0.0)).sum();
            (e, s / f64::from(SPAN))
        })
        .collect()
}

/// γ_e·5/(e+1): the full-treatment equivalent of a partially treated average.
pub fn scale_partial(gamma: f64, e: i32) -> Result<f64> {
    if !(0..SPAN - 1).contains(&e) {
        return Err(Error::Argument(format!(
            "event time {e} is not partially treated; scaling applies to 0..={}",
            SPAN - 2
        )));
    }
    Ok(gamma * f64::from(SPAN) / f64::from(e + 1))
}
