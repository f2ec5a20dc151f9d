//! Income-bucket share outcomes and the correction for nominal bucket
//! boundaries under inflation.
//!
//! Incomes are modelled as uniform within each bucket, with the open top
//! bucket given a finite cap. Inflating every income by a common factor
//! moves mass across the nominal boundaries; the difference of that drift
//! between treated and control baselines is the spurious DiD that gets
//! subtracted from the raw ATTs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{aggregate_att, fit_wls, AttEstimate, FitOptions};
use crate::panel::{Panel, Role};
use crate::stack::StackedDesign;

pub const SHARE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BucketScheme {
    /// Interior nominal cutoffs, strictly ascending.
    pub boundaries: Vec<f64>,
    /// Upper end of the top bucket's assumed support.
    pub top_cap: f64,
    /// Outcome column holding each bucket's share, lowest bucket first.
    pub outcomes: Vec<String>,
}

impl Default for BucketScheme {
    fn default() -> Self {
        BucketScheme {
            boundaries: vec![25_000.0, 50_000.0, 75_000.0, 100_000.0],
            top_cap: 150_000.0,
            outcomes: [
                "inc_lt25k_share",
                "inc_25_50k_share",
                "inc_50_75k_share",
                "inc_75_100k_share",
                "inc_100k_plus_share",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

impl BucketScheme {
    pub fn n_buckets(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.boundaries.is_empty() {
            return Err(Error::Argument("bucket scheme needs at least one boundary".into()));
        }
        if self.boundaries[0] <= 0.0 || self.boundaries.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Argument(
                "bucket boundaries must be positive and strictly ascending".into(),
            ));
        }
        if !(self.top_cap > *self.boundaries.last().expect("nonempty")) {
            return Err(Error::Argument("top cap must exceed the last boundary".into()));
        }
        if !self.outcomes.is_empty() && self.outcomes.len() != self.n_buckets() {
            return Err(Error::Argument(format!(
                "{} outcome names for {} buckets",
                self.outcomes.len(),
                self.n_buckets()
            )));
        }
        Ok(())
    }

    pub fn with_cap(&self, cap: f64) -> Self {
        BucketScheme {
            top_cap: cap,
            ..self.clone()
        }
    }

    /// Support `[low, high]` of each bucket under the uniform model.
    fn supports(&self) -> Vec<(f64, f64)> {
        let mut edges = vec![0.0];
        edges.extend(&self.boundaries);
        edges.push(self.top_cap);
        edges.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn labels(&self) -> Vec<String> {
        let k = |v: f64| format!("{}k", v / 1000.0);
        let n = self.boundaries.len();
        (0..=n)
            .map(|i| match i {
                0 => format!("under_{}", k(self.boundaries[0])),
                i if i == n => format!("over_{}", k(self.boundaries[n - 1])),
                i => format!("{}_{}", k(self.boundaries[i - 1]), k(self.boundaries[i])),
            })
            .collect()
    }
}

fn check_shares(shares: &[f64], scheme: &BucketScheme, what: &str) -> Result<()> {
    if shares.len() != scheme.n_buckets() {
        return Err(Error::Argument(format!(
            "{what}: {} shares for {} buckets",
            shares.len(),
            scheme.n_buckets()
        )));
    }
    if shares.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::Argument(format!("{what}: shares must be nonnegative")));
    }
    let total: f64 = shares.iter().sum();
    if (total - 1.0).abs() > SHARE_TOLERANCE {
        return Err(Error::Argument(format!("{what}: shares sum to {total}")));
    }
    Ok(())
}

/// Nominal-bucket shares after scaling every income by `factor`.
pub fn inflate_shares(shares: &[f64], factor: f64, scheme: &BucketScheme) -> Vec<f64> {
    if factor == 1.0 {
        return shares.to_vec();
    }
    let supports = scheme.supports();
    let n = supports.len();
    let mut out = vec![0.0; n];
    for (k, &(lo, hi)) in supports.iter().enumerate() {
        let (a, b) = (lo * factor, hi * factor);
        for (j, &(nlo, nhi)) in supports.iter().enumerate() {
            let nhi = if j == n - 1 { f64::INFINITY } else { nhi };
            let overlap = (b.min(nhi) - a.max(nlo)).max(0.0);
            out[j] += shares[k] * overlap / (b - a);
        }
    }
    out
}

/// Per-bucket DiD produced by inflation alone:
/// (treated post − treated pre) − (control post − control pre).
pub fn inflation_correction(treated: &[f64], control: &[f64], factor: f64, scheme: &BucketScheme) -> Result<Vec<f64>> {
    scheme.validate()?;
    if !(factor >= 1.0) || !factor.is_finite() {
        return Err(Error::Argument(format!(
            "inflation factor must be at least 1, got {factor}"
        )));
    }
    check_shares(treated, scheme, "treated baseline")?;
    check_shares(control, scheme, "control baseline")?;
    let t = inflate_shares(treated, factor, scheme);
    let c = inflate_shares(control, factor, scheme);
    Ok((0..scheme.n_buckets())
        .map(|j| (t[j] - treated[j]) - (c[j] - control[j]))
        .collect())
}

/// Range of each bucket's correction as the top cap moves over
/// `caps.0..=caps.1` in `steps` equal increments.
pub fn correction_band(
    treated: &[f64],
    control: &[f64],
    factor: f64,
    scheme: &BucketScheme,
    caps: (f64, f64),
    steps: usize,
) -> Result<Vec<(f64, f64)>> {
    let mut band = vec![(f64::INFINITY, f64::NEG_INFINITY); scheme.n_buckets()];
    let steps = steps.max(1);
    for i in 0..=steps {
        let cap = caps.0 + (caps.1 - caps.0) * i as f64 / steps as f64;
        let corr = inflation_correction(treated, control, factor, &scheme.with_cap(cap))?;
        for (b, c) in band.iter_mut().zip(corr) {
            b.0 = b.0.min(c);
            b.1 = b.1.max(c);
        }
    }
    Ok(band)
}

/// Population-weighted mean share vectors at e = −1 for designees and
/// finalists.
pub fn baseline_shares(panel: &Panel, scheme: &BucketScheme) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut out = Vec::new();
    for role in [Role::Designee, Role::Finalist] {
        let mut acc = vec![0.0; scheme.n_buckets()];
        let mut wsum = 0.0;
        for (t, l) in panel.tracts_with_role(role) {
            let Some(a) = l.adoption_year else { continue };
            let Some(obs) = panel.get(t, a - 1) else { continue };
            let w = panel.zone_population(t).unwrap_or(0.0);
            for (j, name) in scheme.outcomes.iter().enumerate() {
                acc[j] += w * obs.outcome(name).unwrap_or(0.0);
            }
            wsum += w;
        }
        if !(wsum > 0.0) {
            return Err(Error::EmptyArm(role.as_str().into()));
        }
        out.push(acc.into_iter().map(|v| v / wsum).collect());
    }
    let control = out.pop().expect("two roles");
    Ok((out.pop().expect("two roles"), control))
}

/// Fails on the first tract-year whose shares do not sum to one.
pub fn validate_panel_shares(panel: &Panel, scheme: &BucketScheme) -> Result<()> {
    for obs in panel.observations() {
        let vals: Option<Vec<f64>> = scheme.outcomes.iter().map(|n| obs.outcome(n)).collect();
        let Some(vals) = vals else { continue };
        let total: f64 = vals.iter().sum();
        if (total - 1.0).abs() > SHARE_TOLERANCE {
            return Err(Error::Validation(format!(
                "income shares of tract {} in {} sum to {total}",
                obs.tract_id, obs.data_year
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BucketAtt {
    pub bucket: String,
    pub outcome: String,
    pub baseline_share: f64,
    pub raw: AttEstimate,
    pub correction: f64,
    pub corrected: f64,
    pub band_low: f64,
    pub band_high: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InflationOptions {
    pub factor: f64,
    pub cap_low: f64,
    pub cap_high: f64,
    pub cap_steps: usize,
}

impl Default for InflationOptions {
    fn default() -> Self {
        InflationOptions {
            factor: 1.0,
            cap_low: 125_000.0,
            cap_high: 200_000.0,
            cap_steps: 75,
        }
    }
}

/// Baseline specification once per bucket share, with inflation-corrected
/// values. `fit` maps (stack, outcome) to the ATT so callers control
/// inference.
pub fn bucket_atts(
    panel: &Panel,
    design: &StackedDesign,
    scheme: &BucketScheme,
    inflation: &InflationOptions,
    att_of: impl Fn(&StackedDesign, &str) -> Result<AttEstimate>,
) -> Result<Vec<BucketAtt>> {
    scheme.validate()?;
    validate_panel_shares(panel, scheme)?;
    let (treated, control) = baseline_shares(panel, scheme)?;
    let correction = inflation_correction(&treated, &control, inflation.factor, scheme)?;
    let band = correction_band(
        &treated,
        &control,
        inflation.factor,
        scheme,
        (inflation.cap_low, inflation.cap_high),
        inflation.cap_steps,
    )?;
    let labels = scheme.labels();
    let mut out = Vec::new();
    for (j, outcome) in scheme.outcomes.iter().enumerate() {
        let raw = att_of(design, outcome)?;
        let corrected = raw.value - correction[j];
        out.push(BucketAtt {
            bucket: labels[j].clone(),
            outcome: outcome.clone(),
            baseline_share: treated[j],
            raw,
            correction: correction[j],
            corrected,
            band_low: raw.value - band[j].1,
            band_high: raw.value - band[j].0,
        });
    }
    Ok(out)
}

/// [`bucket_atts`] with the default cluster-robust dynamic fit.
pub fn bucket_atts_default(
    panel: &Panel,
    design: &StackedDesign,
    scheme: &BucketScheme,
    inflation: &InflationOptions,
) -> Result<Vec<BucketAtt>> {
    bucket_atts(panel, design, scheme, inflation, |d, o| {
        aggregate_att(&fit_wls(d, &FitOptions::new(o, crate::estimator::Spec::Dynamic))?)
    })
}

/// Outcome → share map for convenience in simulations.
pub fn shares_map(scheme: &BucketScheme, shares: &[f64]) -> BTreeMap<String, f64> {
    scheme.outcomes.iter().cloned().zip(shares.iter().copied()).collect()
}
