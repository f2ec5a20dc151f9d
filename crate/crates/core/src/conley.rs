//! Spatial HAC covariance with a distance cutoff.
//!
//! The meat sums score cross-products over every pair of observations from
//! the same tract (weight one) and over pairs from distinct tracts within
//! the cutoff, weighted by the spatial kernel. By default only
//! contemporaneous (same data year) cross-tract pairs enter.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{cluster_meat, sandwich, EventStudyFit};
use crate::geo::EARTH_RADIUS_MILES;
use crate::panel::{LonLat, TractId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialKernel {
    #[default]
    Bartlett,
    Uniform,
}

impl SpatialKernel {
    pub fn weight(self, d: f64, cutoff: f64) -> f64 {
        if d > cutoff {
            return 0.0;
        }
        match self {
            SpatialKernel::Bartlett => (1.0 - d / cutoff).max(0.0),
            SpatialKernel::Uniform => 1.0,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bartlett" => Some(SpatialKernel::Bartlett),
            "uniform" => Some(SpatialKernel::Uniform),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSpec {
    pub cutoff_miles: f64,
    pub kernel: SpatialKernel,
    /// Also weight cross-tract pairs from different years.
    pub full_product: bool,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            cutoff_miles: 10.0,
            kernel: SpatialKernel::Bartlett,
            full_product: false,
        }
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_miles > 0.0) || !self.cutoff_miles.is_finite() {
            return Err(Error::Argument(format!(
                "Conley cutoff must be positive, got {}",
                self.cutoff_miles
            )));
        }
        Ok(())
    }
}

const PAIR_CHUNK: usize = 512;

/// Great-circle distance in miles.
pub fn haversine_miles(a: LonLat, b: LonLat) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_MILES * h.sqrt().min(1.0).asin()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
}

/// All unordered pairs `i < j` with great-circle distance ≤ `cutoff`,
/// sorted by `(i, j)`.
///
/// Candidates come from a latitude sweep: the great-circle distance is never
/// less than `R·|Δφ|`, so points whose latitudes differ by more than
/// `cutoff / R` cannot qualify.
pub fn pairwise_within_cutoff(locations: &[LonLat], cutoff: f64) -> Vec<Pair> {
    let mut order: Vec<usize> = (0..locations.len()).collect();
    order.sort_by(|&a, &b| locations[a].lat.total_cmp(&locations[b].lat).then(a.cmp(&b)));
    let band = (cutoff / EARTH_RADIUS_MILES).to_degrees() * (1.0 + 1e-9) + 1e-12;
    let mut pairs: Vec<Pair> = (0..order.len())
        .into_par_iter()
        .flat_map_iter(|p| {
            let i = order[p];
            let li = locations[i];
            order[p + 1..]
                .iter()
                .take_while(move |&&j| locations[j].lat - li.lat <= band)
                .filter_map(move |&j| {
                    let d = haversine_miles(li, locations[j]);
                    (d <= cutoff).then(|| Pair {
                        i: i.min(j),
                        j: i.max(j),
                        distance: d,
                    })
                })
        })
        .collect();
    pairs.sort_by_key(|p| (p.i, p.j));
    pairs
}

/// Exhaustive O(n²) version of [`pairwise_within_cutoff`].
pub fn pairwise_exhaustive(locations: &[LonLat], cutoff: f64) -> Vec<Pair> {
    let mut pairs = Vec::new();
    for i in 0..locations.len() {
        for j in i + 1..locations.len() {
            let d = haversine_miles(locations[i], locations[j]);
            if d <= cutoff {
                pairs.push(Pair { i, j, distance: d });
            }
        }
    }
    pairs
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConleyCovariance {
    /// Sandwich before any repair.
    pub raw: DMatrix<f64>,
    /// PSD matrix to use for inference.
    pub covariance: DMatrix<f64>,
    pub repaired: bool,
    pub min_eigenvalue: f64,
    pub n_pairs: usize,
}

/// Clamps negative eigenvalues of a symmetric matrix at zero. Returns the
/// matrix, whether any clamping happened and the smallest eigenvalue.
pub fn psd_repair(m: &DMatrix<f64>) -> (DMatrix<f64>, bool, f64) {
    if m.nrows() == 0 {
        return (m.clone(), false, 0.0);
    }
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.min();
    let scale = eig.eigenvalues.amax();
    if min >= -1e-12 * scale {
        return (m.clone(), false, min);
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    ((&r + r.transpose()) * 0.5, true, min)
}

/// Conley covariance for a fitted event study. `locations` may override the
/// centroids carried by the fit.
pub fn conley_covariance(
    fit: &EventStudyFit,
    locations: Option<&BTreeMap<TractId, LonLat>>,
    spec: &KernelSpec,
) -> Result<ConleyCovariance> {
    spec.validate()?;
    let coords: Vec<LonLat> = fit
        .tracts
        .iter()
        .map(|(id, c)| match locations {
            Some(m) => m.get(id).copied().ok_or_else(|| Error::MissingCentroid(id.0.clone())),
            None if c.lon.is_finite() && c.lat.is_finite() => Ok(*c),
            None => Err(Error::MissingCentroid(id.0.clone())),
        })
        .collect::<Result<_>>()?;

    let scores = fit.scores();
    let k = scores.ncols();
    let n_tracts = coords.len();
    let cluster: Vec<usize> = fit.obs.iter().map(|o| o.tract).collect();
    let mut meat = cluster_meat(&scores, &cluster, n_tracts);

    let pairs = pairwise_within_cutoff(&coords, spec.cutoff_miles);
    let weighted: Vec<(usize, usize, f64)> = pairs
        .iter()
        .map(|p| (p.i, p.j, spec.kernel.weight(p.distance, spec.cutoff_miles)))
        .filter(|&(_, _, w)| w > 0.0)
        .collect();

    if !weighted.is_empty() {
        // Score sums per (tract, year) slot; the full product kernel collapses
        // years into one slot per tract.
        let mut slot_of: BTreeMap<(usize, i32), usize> = BTreeMap::new();
        for o in &fit.obs {
            let year = if spec.full_product { 0 } else { o.data_year };
            let next = slot_of.len();
            slot_of.entry((o.tract, year)).or_insert(next);
        }
        let mut sums = DMatrix::zeros(slot_of.len(), k);
        for (i, o) in fit.obs.iter().enumerate() {
            let year = if spec.full_product { 0 } else { o.data_year };
            let mut row = sums.row_mut(slot_of[&(o.tract, year)]);
            row += scores.row(i);
        }
        let mut by_tract: Vec<Vec<(i32, usize)>> = vec![Vec::new(); n_tracts];
        for (&(t, y), &s) in &slot_of {
            by_tract[t].push((y, s));
        }

        // Fixed-size chunks reduced in order keep the sum independent of
        // thread scheduling.
        let partials: Vec<DMatrix<f64>> = weighted
            .par_chunks(PAIR_CHUNK)
            .map(|chunk| {
                let mut acc = DMatrix::<f64>::zeros(k, k);
                for &(a, b, w) in chunk {
                    let (ta, tb) = (&by_tract[a], &by_tract[b]);
                    let (mut p, mut q) = (0, 0);
                    while p < ta.len() && q < tb.len() {
                        match ta[p].0.cmp(&tb[q].0) {
                            std::cmp::Ordering::Less => p += 1,
                            std::cmp::Ordering::Greater => q += 1,
                            std::cmp::Ordering::Equal => {
                                let prod = sums.row(ta[p].1).transpose() * sums.row(tb[q].1);
                                acc += (&prod + prod.transpose()) * w;
                                p += 1;
                                q += 1;
                            }
                        }
                    }
                }
                acc
            })
            .collect();
        let mut cross = DMatrix::zeros(k, k);
        for part in partials {
            cross += part;
        }
        meat += cross;
    }

    let raw = sandwich(&fit.bread, &meat);
    let (covariance, repaired, min_eigenvalue) = psd_repair(&raw);
    if repaired {
        log::warn!("Conley covariance was indefinite (min eigenvalue {min_eigenvalue:e}); clamped to PSD");
    }
    Ok(ConleyCovariance {
        raw,
        covariance,
        repaired,
        min_eigenvalue,
        n_pairs: weighted.len(),
    })
}

/// Replaces the fit's covariance with the Conley estimate.
pub fn with_conley(fit: EventStudyFit, spec: &KernelSpec) -> Result<(EventStudyFit, ConleyCovariance)> {
    let c = conley_covariance(&fit, None, spec)?;
    let label = format!(
        "conley_{}_{}mi",
        match spec.kernel {
            SpatialKernel::Bartlett => "bartlett",
            SpatialKernel::Uniform => "uniform",
        },
        spec.cutoff_miles
    );
    Ok((fit.with_covariance(c.covariance.clone(), label), c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn haversine_known_distance() {
        // One degree of latitude.
        let d = haversine_miles(LonLat::new(0.0, 0.0), LonLat::new(0.0, 1.0));
        assert!((d - EARTH_RADIUS_MILES * std::f64::consts::PI / 180.0).abs() < 1e-9);
        assert_eq!(haversine_miles(LonLat::new(5.0, 5.0), LonLat::new(5.0, 5.0)), 0.0);
    }

    #[test]
    fn five_mile_pair() {
        let deg = (5.0 / EARTH_RADIUS_MILES).to_degrees();
        let pts = [LonLat::new(-80.0, 35.0), LonLat::new(-80.0, 35.0 + deg)];
        assert_eq!(pairwise_within_cutoff(&pts, 10.0).len(), 1);
        assert!(pairwise_within_cutoff(&pts, 4.0).is_empty());
    }

    #[test]
    fn kernel_weights() {
        assert_eq!(SpatialKernel::Bartlett.weight(5.0, 10.0), 0.5);
        assert_eq!(SpatialKernel::Bartlett.weight(11.0, 10.0), 0.0);
        assert_eq!(SpatialKernel::Uniform.weight(9.9, 10.0), 1.0);
        assert!(KernelSpec {
            cutoff_miles: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn repair_clamps_negative_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let (r, repaired, min) = psd_repair(&m);
        assert!(repaired);
        assert!((min + 1.0).abs() < 1e-12);
        let eig = SymmetricEigen::new(r).eigenvalues;
        assert!(eig.min() > -1e-10);
        let (same, flagged, _) = psd_repair(&DMatrix::identity(3, 3));
        assert!(!flagged);
        assert_eq!(same, DMatrix::identity(3, 3));
    }
}
