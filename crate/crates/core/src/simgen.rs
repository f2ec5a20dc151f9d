//! Synthetic panels with known treatment effects.
//!
//! Each zone sits in its own city: a square grid of tracts around a
//! rectangular zone, optionally surrounded by layers of unlabelled tracts.
//! Cities are far enough apart that spatial dependence never crosses them.
//! Labels come from running the polygon overlay on the generated geometry.
//!
//! Latent yearly outcomes combine a level, a linear trend, a persistent
//! tract effect, a spatially correlated shock with exponential covariance,
//! idiosyncratic noise and the treatment effect. Observed values are 5-year
//! trailing averages of the latent series when averaging is on.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{POST_END, POST_START};
use crate::geo::{
    compute_assignments, BlockRecord, LocalProjection, OverlayOptions, Point, RingClass, ZoneAssignment, ZonePolygon,
};
use crate::income::BucketScheme;
use crate::panel::{
    is_rate_outcome, EventWindow, GroupLabel, LonLat, Panel, PanelObservation, Role, TractId, ZoneId, EMP_POP_RATIO,
    LOG_MEDIAN_INCOME, POVERTY_RATE,
};
use crate::spillover::{resolve_rings, OverlapPolicy};

/// Years averaged into one observation.
pub const AVERAGING_SPAN: i32 = 5;
/// Overlap share below which a tract is not labelled with the zone.
pub const LABEL_MIN_SHARE: f64 = 0.01;
const CITY_SPACING_DEG: f64 = 1.5;
const CITY_COLUMNS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutcomeSpec {
    pub name: String,
    pub mean: f64,
    /// Common change per year.
    pub trend: f64,
    /// SD of the persistent tract effect.
    pub unit_sd: f64,
    /// SD of the spatially correlated yearly shock.
    pub field_sd: f64,
    /// SD of the idiosyncratic yearly shock.
    pub noise_sd: f64,
    /// τ_0..τ_7 on the latent scale; later years repeat τ_7.
    pub effect: Vec<f64>,
    /// Extra trend per year since adoption for designee tracts.
    pub violation_slope: f64,
}

impl Default for OutcomeSpec {
    fn default() -> Self {
        OutcomeSpec {
            name: "y".into(),
            mean: 0.0,
            trend: 0.0,
            unit_sd: 0.0,
            field_sd: 0.0,
            noise_sd: 0.0,
            effect: vec![0.0; 8],
            violation_slope: 0.0,
        }
    }
}

impl OutcomeSpec {
    pub fn constant_effect(name: &str, tau: f64) -> Self {
        OutcomeSpec {
            name: name.into(),
            effect: vec![tau; 8],
            ..Default::default()
        }
    }

    /// Latent effect `e` years after adoption.
    pub fn tau(&self, e: i32) -> f64 {
        if e < 0 || self.effect.is_empty() {
            0.0
        } else {
            self.effect[(e as usize).min(self.effect.len() - 1)]
        }
    }
}

/// Designee tracts with the attribute set have their effect multiplied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeterogeneitySpec {
    pub attribute: String,
    pub probability: f64,
    pub effect_scale: f64,
}

/// Tracts with the attribute get an extra calendar-year trend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeShockSpec {
    pub attribute: String,
    pub probability_designee: f64,
    pub probability_other: f64,
    pub slope_per_year: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncomeSpec {
    pub baseline: Vec<f64>,
    /// Additive effect on each bucket share from adoption on.
    pub effects: Vec<f64>,
    /// Relative SD of persistent tract deviations.
    pub tract_sd: f64,
    /// Relative SD of yearly deviations.
    pub noise_sd: f64,
    pub scheme: BucketScheme,
}

impl Default for IncomeSpec {
    fn default() -> Self {
        IncomeSpec {
            baseline: vec![0.444, 0.289, 0.139, 0.063, 0.065],
            effects: vec![0.0; 5],
            tract_sd: 0.1,
            noise_sd: 0.05,
            scheme: BucketScheme::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpSpec {
    pub seed: u64,
    pub cohorts: Vec<i32>,
    pub designee_zones_per_cohort: usize,
    pub finalist_zones_per_cohort: usize,
    pub zone_rows: usize,
    pub zone_cols: usize,
    /// Rings of unlabelled tracts around each zone.
    pub buffer_tracts: usize,
    pub tract_spacing_miles: f64,
    /// Shift zone polygons by a third of a tract so edge tracts straddle the
    /// border.
    pub border_offset: bool,
    pub population_min: f64,
    pub population_max: f64,
    /// Exponential covariance range of the spatial shock.
    pub range_miles: f64,
    pub averaging: bool,
    pub outcomes: Vec<OutcomeSpec>,
    /// Effects outside a designee zone decay linearly to zero at this
    /// centroid distance; `None` confines effects to centroids inside.
    pub spillover_reach_miles: Option<f64>,
    pub heterogeneity: Option<HeterogeneitySpec>,
    pub time_shock: Option<TimeShockSpec>,
    pub income: Option<IncomeSpec>,
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            seed: 0,
            cohorts: vec![2014, 2015, 2016],
            designee_zones_per_cohort: 5,
            finalist_zones_per_cohort: 10,
            zone_rows: 2,
            zone_cols: 2,
            buffer_tracts: 0,
            tract_spacing_miles: 0.7,
            border_offset: false,
            population_min: 1500.0,
            population_max: 6000.0,
            range_miles: 5.0,
            averaging: true,
            outcomes: vec![
                OutcomeSpec {
                    name: POVERTY_RATE.into(),
                    mean: 0.35,
                    trend: -0.002,
                    unit_sd: 0.03,
                    field_sd: 0.01,
                    noise_sd: 0.01,
                    effect: vec![-0.03; 8],
                    violation_slope: 0.0,
                },
                OutcomeSpec {
                    name: LOG_MEDIAN_INCOME.into(),
                    mean: 10.3,
                    trend: 0.01,
                    unit_sd: 0.15,
                    field_sd: 0.05,
                    noise_sd: 0.05,
                    effect: vec![0.08; 8],
                    violation_slope: 0.0,
                },
                OutcomeSpec {
                    name: EMP_POP_RATIO.into(),
                    mean: 0.5,
                    trend: 0.002,
                    unit_sd: 0.03,
                    field_sd: 0.01,
                    noise_sd: 0.01,
                    effect: vec![0.02; 8],
                    violation_slope: 0.0,
                },
            ],
            spillover_reach_miles: None,
            heterogeneity: None,
            time_shock: None,
            income: None,
        }
    }
}

impl DgpSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: DgpSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        DgpSpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.range_miles > 0.0) {
            return bad(format!("range_miles must be positive, got {}", self.range_miles));
        }
        if self.cohorts.is_empty() || self.designee_zones_per_cohort == 0 || self.finalist_zones_per_cohort == 0 {
            return bad("need at least one cohort with designee and finalist zones".into());
        }
        if self.zone_rows == 0 || self.zone_cols == 0 || !(self.tract_spacing_miles > 0.0) {
            return bad("zone grid must be nonempty with positive spacing".into());
        }
        if !(self.population_min > 0.0 && self.population_max >= self.population_min) {
            return bad("population range must be positive and ordered".into());
        }
        if let Some(o) = self.outcomes.iter().find(|o| o.effect.len() != 8) {
            return bad(format!(
                "outcome `{}` needs an effect profile over event times 0..7",
                o.name
            ));
        }
        if let Some(r) = self.spillover_reach_miles {
            if !(r > 0.0) {
                return bad("spillover reach must be positive".into());
            }
        }
        if let Some(inc) = &self.income {
            inc.scheme.validate()?;
            let n = inc.scheme.n_buckets();
            if inc.baseline.len() != n || inc.effects.len() != n {
                return bad(format!("income baseline and effects need {n} buckets"));
            }
            if (inc.baseline.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("income baseline shares must sum to 1".into());
            }
        }
        Ok(())
    }

    /// Observed data years.
    pub fn study_years(&self) -> (i32, i32) {
        let lo = *self.cohorts.iter().min().expect("validated");
        let hi = *self.cohorts.iter().max().expect("validated");
        (lo + EventWindow::MIN, hi + EventWindow::MAX)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// ω(a) from designee population-in-zone.
    pub omega: BTreeMap<i32, f64>,
    /// outcome → cohort → event time → ATT on the observed scale.
    pub att: BTreeMap<String, BTreeMap<i32, BTreeMap<i32, f64>>>,
    /// Same on the latent (single-year) scale.
    pub latent_att: BTreeMap<String, BTreeMap<i32, BTreeMap<i32, f64>>>,
    pub beta: BTreeMap<String, f64>,
    /// outcome → ring → ring-level β.
    pub ring_beta: BTreeMap<String, BTreeMap<String, f64>>,
    pub spillover_reach_miles: Option<f64>,
}

/// `(1/4)·Σ_{e=4..7} Σ_a ω(a)·ATT(a, e)`.
pub fn true_beta(att: &BTreeMap<i32, BTreeMap<i32, f64>>, omega: &BTreeMap<i32, f64>) -> f64 {
    let n = f64::from(POST_END - POST_START + 1);
    let mut total = 0.0;
    for e in POST_START..=POST_END {
        for (a, w) in omega {
            total += w * att.get(a).and_then(|m| m.get(&e)).copied().unwrap_or(0.0);
        }
    }
    total / n
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub panel: Panel,
    pub truth: GroundTruth,
    pub zones: Vec<ZonePolygon>,
    pub blocks: Vec<BlockRecord>,
    pub assignments: Vec<ZoneAssignment>,
}

struct City {
    zone: ZonePolygon,
    adoption_year: i32,
    /// (tract id, planar centre, lon/lat centre).
    tracts: Vec<(TractId, Point, LonLat)>,
}

fn rect(proj: &LocalProjection, x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Vec<Vec<LonLat>>> {
    let ring = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
        .iter()
        .map(|&(x, y)| proj.inverse(Point::new(x, y)))
        .collect();
    vec![vec![ring]]
}

fn layout(spec: &DgpSpec, rng: &mut ChaCha20Rng) -> (Vec<City>, Vec<BlockRecord>, BTreeMap<TractId, f64>) {
    let s = spec.tract_spacing_miles;
    let b = spec.buffer_tracts;
    let (rows, cols) = (spec.zone_rows + 2 * b, spec.zone_cols + 2 * b);
    let xc = |j: usize| (j as f64 - (cols as f64 - 1.0) / 2.0) * s;
    let yc = |i: usize| (i as f64 - (rows as f64 - 1.0) / 2.0) * s;

    let mut plan = Vec::new();
    for &a in &spec.cohorts {
        for k in 0..spec.designee_zones_per_cohort {
            plan.push((Role::Designee, a, format!("D{a}_{k:02}")));
        }
        for k in 0..spec.finalist_zones_per_cohort {
            plan.push((Role::Finalist, a, format!("F{a}_{k:02}")));
        }
    }

    let mut cities = Vec::new();
    let mut blocks = Vec::new();
    let mut populations = BTreeMap::new();
    for (c, (role, a, zone_id)) in plan.into_iter().enumerate() {
        let center = LonLat::new(
            -100.0 + CITY_SPACING_DEG * (c % CITY_COLUMNS) as f64,
            32.0 + CITY_SPACING_DEG * (c / CITY_COLUMNS) as f64,
        );
        let proj = LocalProjection::new(center);
        let shift = if spec.border_offset { s / 3.0 } else { 0.0 };
        let zx0 = xc(b) - s / 2.0 + shift;
        let zx1 = xc(b + spec.zone_cols - 1) + s / 2.0 + shift;
        let zy0 = yc(b) - s / 2.0;
        let zy1 = yc(b + spec.zone_rows - 1) + s / 2.0;
        let zone = ZonePolygon {
            zone_id: ZoneId::new(zone_id.clone()),
            role,
            adoption_year: Some(a),
            parts: rect(&proj, zx0, zy0, zx1, zy1),
        };
        let mut tracts = Vec::new();
        for i in 0..rows {
            for j in 0..cols {
                let id = TractId::new(format!("{zone_id}_{i:02}_{j:02}"));
                let p = Point::new(xc(j), yc(i));
                let pop = rng.random_range(spec.population_min..=spec.population_max).round();
                populations.insert(id.clone(), pop);
                for (q, (dx, dy)) in [(0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5)].into_iter().enumerate() {
                    let x0 = p.x - s / 2.0 + dx * s;
                    let y0 = p.y - s / 2.0 + dy * s;
                    blocks.push(BlockRecord {
                        block_id: format!("{id}_{q}"),
                        tract_id: id.clone(),
                        population: pop / 4.0,
                        parts: rect(&proj, x0, y0, x0 + s / 2.0, y0 + s / 2.0),
                    });
                }
                tracts.push((id, p, proj.inverse(p)));
            }
        }
        cities.push(City {
            zone,
            adoption_year: a,
            tracts,
        });
    }
    (cities, blocks, populations)
}

/// Lower Cholesky factor of the exponential covariance between points.
fn field_factor(points: &[Point], range: f64) -> DMatrix<f64> {
    let n = points.len();
    let cov = DMatrix::from_fn(n, n, |i, j| {
        (-points[i].distance(points[j]) / range).exp() + if i == j { 1e-10 } else { 0.0 }
    });
    cov.cholesky().expect("exponential covariance is positive definite").l()
}

fn normals(rng: &mut ChaCha20Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Effect multiplier by centroid position relative to the nearest designee
/// zone.
fn multiplier(asg: Option<&ZoneAssignment>, reach: Option<f64>) -> f64 {
    match asg {
        Some(a) if a.centroid_inside => 1.0,
        Some(a) => reach.map_or(0.0, |r| (1.0 - a.centroid_border_distance / r).max(0.0)),
        None => 0.0,
    }
}

fn trailing(latent: &[f64], k: usize, span: usize) -> f64 {
    latent[k + 1 - span..=k].iter().sum::<f64>() / span as f64
}

struct TractState {
    role: Role,
    adoption_year: i32,
    multiplier: f64,
    effect_scale: f64,
    shock: bool,
}

pub fn generate(spec: &DgpSpec) -> Result<SimOutput> {
    spec.validate()?;
    let mut layout_rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let (cities, blocks, populations) = layout(spec, &mut layout_rng);
    let zones: Vec<ZonePolygon> = cities.iter().map(|c| c.zone.clone()).collect();
    let centroids: BTreeMap<TractId, LonLat> = cities
        .iter()
        .flat_map(|c| c.tracts.iter().map(|(id, _, ll)| (id.clone(), *ll)))
        .collect();
    let (assignments, _) = compute_assignments(&zones, &blocks, Some(&centroids), &OverlayOptions::default())?;

    let mut by_tract: BTreeMap<&TractId, Vec<&ZoneAssignment>> = BTreeMap::new();
    for a in &assignments {
        by_tract.entry(&a.tract_id).or_default().push(a);
    }

    // Labels and per-tract effect modifiers.
    let mut labels = BTreeMap::new();
    let mut states: BTreeMap<TractId, TractState> = BTreeMap::new();
    for city in &cities {
        for (id, _, _) in &city.tracts {
            let own = by_tract
                .get(id)
                .and_then(|v| v.iter().find(|a| a.zone_id == city.zone.zone_id).copied());
            let labelled = own.filter(|a| a.area_overlap_share >= LABEL_MIN_SHARE);
            let mut label = match labelled {
                Some(a) => GroupLabel::new(
                    city.zone.role,
                    Some(city.zone.zone_id.clone()),
                    Some(city.adoption_year),
                )?
                .with_pop_in_zone(a.pop_in_zone),
                None => GroupLabel::neither(),
            };
            let role = label.role;
            let mut effect_scale = 1.0;
            if let Some(h) = &spec.heterogeneity {
                let on = layout_rng.random_bool(h.probability.clamp(0.0, 1.0));
                label = label.with_attribute(h.attribute.clone(), f64::from(u8::from(on)));
                if on {
                    effect_scale = h.effect_scale;
                }
            }
            let mut shock = false;
            if let Some(t) = &spec.time_shock {
                let p = if role == Role::Designee {
                    t.probability_designee
                } else {
                    t.probability_other
                };
                shock = layout_rng.random_bool(p.clamp(0.0, 1.0));
                label = label.with_attribute(t.attribute.clone(), f64::from(u8::from(shock)));
            }
            let m = if city.zone.role == Role::Designee {
                multiplier(own, spec.spillover_reach_miles)
            } else {
                0.0
            };
            states.insert(
                id.clone(),
                TractState {
                    role,
                    adoption_year: city.adoption_year,
                    multiplier: m,
                    effect_scale,
                    shock,
                },
            );
            labels.insert(id.clone(), label);
        }
    }

    let (y0, y1) = spec.study_years();
    let span = if spec.averaging { AVERAGING_SPAN } else { 1 };
    let latent_start = y0 - (span - 1);
    let n_latent = (y1 - latent_start + 1) as usize;

    let mut observations = Vec::new();
    for (c, city) in cities.iter().enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
        rng.set_stream(1 + c as u64);
        let points: Vec<Point> = city.tracts.iter().map(|t| t.1).collect();
        let n = points.len();
        let factor = spec
            .outcomes
            .iter()
            .any(|o| o.field_sd > 0.0)
            .then(|| field_factor(&points, spec.range_miles));

        // outcome → tract → latent series
        let mut series: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
        for o in &spec.outcomes {
            let unit = normals(&mut rng, n);
            let mut lat = vec![vec![0.0; n_latent]; n];
            for k in 0..n_latent {
                let year = latent_start + k as i32;
                let field = match &factor {
                    Some(l) if o.field_sd > 0.0 => l * normals(&mut rng, n),
                    _ => DVector::zeros(n),
                };
                let noise = normals(&mut rng, n);
                for (i, (id, _, _)) in city.tracts.iter().enumerate() {
                    let st = &states[id];
                    let e = year - st.adoption_year;
                    let mut v = o.mean
                        + o.unit_sd * unit[i]
                        + o.trend * f64::from(year - y0)
                        + o.field_sd * field[i]
                        + o.noise_sd * noise[i];
                    v += st.multiplier * st.effect_scale * o.tau(e);
                    if st.role == Role::Designee {
                        v += o.violation_slope * f64::from(e);
                    }
                    if let (Some(t), true) = (&spec.time_shock, st.shock) {
                        v += t.slope_per_year * f64::from(year - y0);
                    }
                    lat[i][k] = v;
                }
            }
            series.insert(o.name.clone(), lat);
        }
        if let Some(inc) = &spec.income {
            let nb = inc.baseline.len();
            let deviation = |rng: &mut ChaCha20Rng, sd: f64| -> Vec<f64> {
                let raw: Vec<f64> = inc
                    .baseline
                    .iter()
                    .map(|b| b * sd * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let total: f64 = raw.iter().sum();
                raw.iter().zip(&inc.baseline).map(|(r, b)| r - b * total).collect()
            };
            let unit: Vec<Vec<f64>> = (0..n).map(|_| deviation(&mut rng, inc.tract_sd)).collect();
            let mut lat = vec![vec![vec![0.0; n_latent]; n]; nb];
            for k in 0..n_latent {
                let year = latent_start + k as i32;
                for (i, (id, _, _)) in city.tracts.iter().enumerate() {
                    let st = &states[id];
                    let noise = deviation(&mut rng, inc.noise_sd);
                    let post = year >= st.adoption_year;
                    for q in 0..nb {
                        let eff = if post {
                            st.multiplier * st.effect_scale * inc.effects[q]
                        } else {
                            0.0
                        };
                        lat[q][i][k] = inc.baseline[q] + unit[i][q] + noise[q] + eff;
                    }
                }
            }
            for (q, name) in inc.scheme.outcomes.iter().enumerate() {
                series.insert(name.clone(), std::mem::take(&mut lat[q]));
            }
        }

        for (i, (id, _, ll)) in city.tracts.iter().enumerate() {
            for year in y0..=y1 {
                let k = (year - latent_start) as usize;
                let mut outcomes = BTreeMap::new();
                for (name, lat) in &series {
                    let mut v = trailing(&lat[i], k, span as usize);
                    let is_income = spec
                        .income
                        .as_ref()
                        .is_some_and(|inc| inc.scheme.outcomes.contains(name));
                    if is_rate_outcome(name) && !is_income {
                        v = v.clamp(0.0, 1.0);
                    }
                    outcomes.insert(name.clone(), v);
                }
                observations.push(PanelObservation {
                    tract_id: id.clone(),
                    data_year: year,
                    outcomes,
                    population: populations[id],
                    centroid: *ll,
                });
            }
        }
    }

    let panel = Panel::new(observations, labels, EventWindow::default())?;
    let truth = ground_truth(spec, &panel, &assignments, &states);
    Ok(SimOutput {
        panel,
        truth,
        zones,
        blocks,
        assignments,
    })
}

fn observed_tau(profile: &dyn Fn(i32) -> f64, e: i32, span: i32) -> f64 {
    (e - span + 1..=e).map(profile).sum::<f64>() / f64::from(span)
}

fn ground_truth(
    spec: &DgpSpec,
    panel: &Panel,
    assignments: &[ZoneAssignment],
    states: &BTreeMap<TractId, TractState>,
) -> GroundTruth {
    let span = if spec.averaging { AVERAGING_SPAN } else { 1 };
    let mut profiles: Vec<(String, Box<dyn Fn(i32) -> f64>)> = spec
        .outcomes
        .iter()
        .map(|o| {
            let o = o.clone();
            (
                o.name.clone(),
                Box::new(move |e: i32| o.tau(e)) as Box<dyn Fn(i32) -> f64>,
            )
        })
        .collect();
    if let Some(inc) = &spec.income {
        for (q, name) in inc.scheme.outcomes.iter().enumerate() {
            let eff = inc.effects[q];
            profiles.push((name.clone(), Box::new(move |e: i32| if e >= 0 { eff } else { 0.0 })));
        }
    }

    // (tract, cohort, weight) for the main designee set and for each ring.
    let mut groups: Vec<(Option<RingClass>, Vec<(TractId, i32, f64)>)> = Vec::new();
    let main: Vec<(TractId, i32, f64)> = panel
        .tracts_with_role(Role::Designee)
        .map(|(t, l)| {
            (
                t.clone(),
                l.adoption_year.expect("designee"),
                panel.zone_population(t).unwrap_or(0.0),
            )
        })
        .collect();
    groups.push((None, main));
    let members = resolve_rings(assignments, OverlapPolicy::default());
    for ring in RingClass::ALL {
        let g: Vec<(TractId, i32, f64)> = members
            .values()
            .filter(|m| m.ring == ring && m.side == Role::Designee && m.weight > 0.0)
            .map(|m| (m.tract_id.clone(), m.adoption_year, m.weight))
            .collect();
        if !g.is_empty() {
            groups.push((Some(ring), g));
        }
    }

    let mut truth = GroundTruth {
        spillover_reach_miles: spec.spillover_reach_miles,
        ..Default::default()
    };
    for (ring, group) in &groups {
        let mut pop: BTreeMap<i32, f64> = BTreeMap::new();
        for (_, a, w) in group {
            *pop.entry(*a).or_default() += w;
        }
        let total: f64 = pop.values().sum();
        let omega: BTreeMap<i32, f64> = pop.iter().map(|(&a, &p)| (a, p / total)).collect();
        for (name, profile) in &profiles {
            let mut att: BTreeMap<i32, BTreeMap<i32, f64>> = BTreeMap::new();
            let mut latent: BTreeMap<i32, BTreeMap<i32, f64>> = BTreeMap::new();
            for (&a, &pa) in &pop {
                for e in 0..=EventWindow::MAX {
                    let mut obs_sum = 0.0;
                    let mut lat_sum = 0.0;
                    for (t, _, w) in group.iter().filter(|g| g.1 == a) {
                        let st = &states[t];
                        let scale = st.multiplier * st.effect_scale;
                        obs_sum += w * scale * observed_tau(profile.as_ref(), e, span);
                        lat_sum += w * scale * profile(e);
                    }
                    att.entry(a).or_default().insert(e, obs_sum / pa);
                    latent.entry(a).or_default().insert(e, lat_sum / pa);
                }
            }
            let beta = true_beta(&att, &omega);
            match ring {
                None => {
                    truth.beta.insert(name.clone(), beta);
                    truth.att.insert(name.clone(), att);
                    truth.latent_att.insert(name.clone(), latent);
                }
                Some(r) => {
                    truth
                        .ring_beta
                        .entry(name.clone())
                        .or_default()
                        .insert(r.as_str().to_string(), beta);
                }
            }
        }
        if ring.is_none() {
            truth.omega = omega;
        }
    }
    truth
}

impl SimOutput {
    /// Column map covering every generated outcome and attribute.
    pub fn schema(&self) -> crate::panel::ColumnMap {
        let mut schema = crate::panel::ColumnMap::default().with_outcomes(self.panel.outcome_names());
        let attrs: std::collections::BTreeSet<String> = self
            .panel
            .labels()
            .values()
            .flat_map(|l| l.attributes.keys().cloned())
            .collect();
        schema.attributes = attrs.into_iter().collect();
        schema
    }

    /// Writes panel CSV, zone and block GeoJSON, assignments and truth JSON.
    pub fn write(&self, dir: &Path, schema: &crate::panel::ColumnMap) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            dir.join("panel.csv"),
            dir.join("zones.geojson"),
            dir.join("blocks.geojson"),
            dir.join("assignments.csv"),
            dir.join("truth.json"),
        ];
        crate::panel::write_panel(&self.panel, &files[0], schema)?;
        let zones = serde_json::to_string_pretty(&crate::geo::zones_to_geojson(&self.zones))?;
        std::fs::write(&files[1], zones).map_err(|e| Error::io(&files[1], e))?;
        let blocks = serde_json::to_string(&crate::geo::blocks_to_geojson(&self.blocks))?;
        std::fs::write(&files[2], blocks).map_err(|e| Error::io(&files[2], e))?;
        crate::geo::write_assignments(&files[3], &self.assignments)?;
        let truth = serde_json::to_string_pretty(&self.truth)?;
        std::fs::write(&files[4], truth).map_err(|e| Error::io(&files[4], e))?;
        Ok(files.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DgpSpec {
        DgpSpec {
            designee_zones_per_cohort: 1,
            finalist_zones_per_cohort: 2,
            ..Default::default()
        }
    }

    #[test]
    fn true_beta_examples() {
        let omega = BTreeMap::from([(2015, 1.0)]);
        let att = BTreeMap::from([(2015, (0..=7).map(|e| (e, 0.2)).collect())]);
        assert!((true_beta(&att, &omega) - 0.2).abs() < 1e-15);
        let omega = BTreeMap::from([(2014, 0.25), (2015, 0.75)]);
        let att = BTreeMap::from([
            (2014, (0..=7).map(|e| (e, 0.1)).collect()),
            (2015, (0..=7).map(|e| (e, 0.3)).collect()),
        ]);
        assert!((true_beta(&att, &omega) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn labels_and_truth() {
        let out = generate(&small()).unwrap();
        let p = &out.panel;
        assert_eq!(p.tracts_with_role(Role::Designee).count(), 12);
        assert_eq!(p.tracts_with_role(Role::Finalist).count(), 24);
        let beta = out.truth.beta[POVERTY_RATE];
        assert!((beta + 0.03).abs() < 1e-12, "{beta}");
        // Partial treatment: e = 1 averages two treated years out of five.
        let a = out.truth.att[POVERTY_RATE][&2015][&1];
        assert!((a + 0.03 * 2.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.panel, b.panel);
        let c = generate(&small().with_seed(9)).unwrap();
        assert_ne!(a.panel, c.panel);
    }

    #[test]
    fn averaging_off_means_latent() {
        let mut spec = small();
        spec.averaging = false;
        spec.outcomes = vec![OutcomeSpec {
            noise_sd: 0.0,
            unit_sd: 0.0,
            field_sd: 0.0,
            trend: 0.1,
            ..OutcomeSpec::constant_effect("y", 0.2)
        }];
        let out = generate(&spec).unwrap();
        let (t, l) = out.panel.tracts_with_role(Role::Designee).next().unwrap();
        let a = l.adoption_year.unwrap();
        let v = out.panel.get(t, a + 1).unwrap().outcome("y").unwrap();
        let (y0, _) = spec.study_years();
        assert!((v - (0.1 * f64::from(a + 1 - y0) + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn toml_round_trip() {
        let text = toml::to_string(&small()).unwrap();
        assert_eq!(DgpSpec::from_toml(&text).unwrap(), small());
        assert!(DgpSpec::from_toml("range_miles = 0.0").is_err());
    }
}
