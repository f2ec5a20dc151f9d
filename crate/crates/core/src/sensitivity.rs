//! Robustness of the ATT to linear differential pre-trends.
//!
//! A slope `m` is feasible when the line `m·(t+1)`, anchored at zero in the
//! omitted period, passes through every pre-period confidence band. The
//! robust interval shifts the ATT by the most extreme feasible trends
//! extrapolated to the mean post-period offset.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{z_critical, AttEstimate, EventStudyFit, POST_END, POST_START};

/// Pre-periods used to bound the trend.
pub const PRE_PERIODS: [i32; 4] = [-5, -4, -3, -2];

/// Mean of `e + 1` over the post window.
pub fn mean_post_offset() -> f64 {
    let n = f64::from(POST_END - POST_START + 1);
    (POST_START..=POST_END).map(|e| f64::from(e + 1)).sum::<f64>() / n
}

/// Closed slope interval consistent with every pre-period band
/// `γ̂_t ± z·se_t`, or `None` when the bands admit no line.
pub fn feasible_slopes_z(pre: &BTreeMap<i32, (f64, f64)>, z: f64) -> Option<(f64, f64)> {
    let mut low = f64::NEG_INFINITY;
    let mut high = f64::INFINITY;
    for (&t, &(g, se)) in pre {
        let offset = f64::from(t + 1);
        let (a, b) = ((g - z * se) / offset, (g + z * se) / offset);
        low = low.max(a.min(b));
        high = high.min(a.max(b));
    }
    (low <= high).then_some((low, high))
}

fn check_pre(pre: &BTreeMap<i32, (f64, f64)>) -> Result<()> {
    if pre.is_empty() {
        return Err(Error::Argument("no pre-period coefficients".into()));
    }
    if let Some((t, _)) = pre.iter().find(|(&t, _)| t >= -1) {
        return Err(Error::Argument(format!("event time {t} is not a pre-period")));
    }
    if let Some((t, _)) = pre.iter().find(|(_, &(g, se))| !g.is_finite() || !(se >= 0.0)) {
        return Err(Error::Argument(format!("invalid coefficient or SE at event time {t}")));
    }
    Ok(())
}

/// Feasible slopes at confidence `level`.
pub fn feasible_slopes(pre: &BTreeMap<i32, (f64, f64)>, level: f64) -> Result<Option<(f64, f64)>> {
    check_pre(pre)?;
    check_level(level)?;
    Ok(feasible_slopes_z(pre, z_critical(level)))
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Argument(format!("confidence level {level} outside (0, 1)")));
    }
    Ok(())
}

/// `[att − m_high·ē − z·se, att − m_low·ē + z·se]`.
pub fn robust_interval(att: f64, se: f64, slopes: (f64, f64), z: f64) -> (f64, f64) {
    let ebar = mean_post_offset();
    (att - slopes.1 * ebar - z * se, att - slopes.0 * ebar + z * se)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensitivityResult {
    pub level: f64,
    pub conventional_ci: (f64, f64),
    pub slopes: Option<(f64, f64)>,
    pub robust_ci: Option<(f64, f64)>,
    /// Smallest α at which the level-(1−α) robust interval excludes zero or
    /// the pre-period bands stop admitting any line.
    pub breakdown_p: f64,
    /// True when the breakdown is reached through an empty slope set.
    pub breakdown_by_empty_set: bool,
}

const BREAKDOWN_TOLERANCE: f64 = 1e-4;

fn rejects(att: &AttEstimate, pre: &BTreeMap<i32, (f64, f64)>, alpha: f64) -> Option<bool> {
    let z = z_critical(1.0 - alpha);
    match feasible_slopes_z(pre, z) {
        None => None,
        Some(s) => {
            let (lo, hi) = robust_interval(att.value, att.std_error, s, z);
            Some(lo > 0.0 || hi < 0.0)
        }
    }
}

pub fn breakdown_p(att: &AttEstimate, pre: &BTreeMap<i32, (f64, f64)>) -> (f64, bool) {
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while hi - lo > BREAKDOWN_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if rejects(att, pre, mid).unwrap_or(true) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let by_empty = hi < 1.0 && rejects(att, pre, hi).is_none();
    (0.5 * (lo + hi), by_empty)
}

pub fn sensitivity(att: &AttEstimate, pre: &BTreeMap<i32, (f64, f64)>, level: f64) -> Result<SensitivityResult> {
    check_pre(pre)?;
    check_level(level)?;
    let z = z_critical(level);
    let slopes = feasible_slopes_z(pre, z);
    let robust_ci = slopes.map(|s| robust_interval(att.value, att.std_error, s, z));
    let (p, by_empty) = breakdown_p(att, pre);
    Ok(SensitivityResult {
        level,
        conventional_ci: (att.value - z * att.std_error, att.value + z * att.std_error),
        slopes,
        robust_ci,
        breakdown_p: p,
        breakdown_by_empty_set: by_empty,
    })
}

/// Pre-period γ and SEs from a fit, over [`PRE_PERIODS`] present in it.
pub fn pre_coefficients(fit: &EventStudyFit) -> BTreeMap<i32, (f64, f64)> {
    PRE_PERIODS.iter().filter_map(|&t| Some((t, fit.gamma(t)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(se: f64) -> BTreeMap<i32, (f64, f64)> {
        PRE_PERIODS.iter().map(|&t| (t, (0.0, se))).collect()
    }

    #[test]
    fn offset_is_six_and_a_half() {
        assert_eq!(mean_post_offset(), 6.5);
    }

    #[test]
    fn zero_coefficients_bind_at_earliest_period() {
        let z = z_critical(0.95);
        let (lo, hi) = feasible_slopes(&flat(0.1), 0.95).unwrap().unwrap();
        assert!((hi - z * 0.1 / 4.0).abs() < 1e-15);
        assert_eq!(lo, -hi);
    }

    #[test]
    fn exact_line_collapses() {
        let pre: BTreeMap<i32, (f64, f64)> = PRE_PERIODS
            .iter()
            .map(|&t| (t, (0.03 * f64::from(t + 1), 1e-12)))
            .collect();
        let (lo, hi) = feasible_slopes(&pre, 0.95).unwrap().unwrap();
        assert!((lo - 0.03).abs() < 1e-10 && (hi - 0.03).abs() < 1e-10);
    }

    #[test]
    fn empty_set_is_not_an_error() {
        let pre = BTreeMap::from([(-5, (1.0, 0.001)), (-2, (1.0, 0.001))]);
        assert_eq!(feasible_slopes(&pre, 0.95).unwrap(), None);
        let pre = BTreeMap::from([(0, (1.0, 0.1))]);
        assert!(feasible_slopes(&pre, 0.95).is_err());
    }

    #[test]
    fn zero_slope_gives_conventional_interval() {
        let att = AttEstimate::new(0.2, 0.05);
        let z = z_critical(0.95);
        let r = robust_interval(att.value, att.std_error, (0.0, 0.0), z);
        assert_eq!(r, (0.2 - z * 0.05, 0.2 + z * 0.05));
    }

    #[test]
    fn breakdown_p_of_a_pure_att() {
        // Negligible pre-period noise: breakdown is the conventional p-value.
        let att = AttEstimate::new(0.2, 0.1);
        let pre: BTreeMap<i32, (f64, f64)> = PRE_PERIODS.iter().map(|&t| (t, (0.0, 1e-9))).collect();
        let (p, empty) = breakdown_p(&att, &pre);
        assert!((p - att.p_value).abs() < 2e-4, "{p} vs {}", att.p_value);
        assert!(!empty);
    }
}
