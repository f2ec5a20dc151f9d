#![allow(dead_code)]

use std::collections::BTreeMap;

use placedid::panel::{EventWindow, GroupLabel, LonLat, Panel, PanelObservation, Role, TractId, ZoneId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const EARTH_RADIUS_MILES: f64 = 3958.7613;

#[derive(Clone, Debug)]
pub struct Tract {
    pub id: String,
    pub role: Role,
    pub adoption_year: i32,
    pub population: f64,
    pub pop_in_zone: f64,
    pub centroid: LonLat,
    /// year → outcome `y`
    pub y: BTreeMap<i32, f64>,
}

pub fn build(tracts: &[Tract], window: EventWindow) -> Panel {
    let mut obs = Vec::new();
    let mut labels = BTreeMap::new();
    for t in tracts {
        for (&year, &y) in &t.y {
            obs.push(PanelObservation {
                tract_id: TractId::new(t.id.clone()),
                data_year: year,
                outcomes: BTreeMap::from([("y".to_string(), y)]),
                population: t.population,
                centroid: t.centroid,
            });
        }
        let label = GroupLabel::new(
            t.role,
            Some(ZoneId::new(format!("Z{}", t.adoption_year))),
            Some(t.adoption_year),
        )
        .unwrap()
        .with_pop_in_zone(t.pop_in_zone);
        labels.insert(TractId::new(t.id.clone()), label);
    }
    Panel::new(obs, labels, window).unwrap()
}

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Offsets a point by (east, north) miles.
pub fn offset(origin: LonLat, east: f64, north: f64) -> LonLat {
    let lat = origin.lat + (north / EARTH_RADIUS_MILES).to_degrees();
    let lon = origin.lon + (east / (EARTH_RADIUS_MILES * origin.lat.to_radians().cos())).to_degrees();
    LonLat::new(lon, lat)
}

pub fn haversine(a: LonLat, b: LonLat) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_MILES * h.sqrt().min(1.0).asin()
}

/// Random staggered panel: `n` tracts split between designees in two
/// cohorts and finalists, scattered within `spread` miles of one point.
pub fn random_panel(r: &mut ChaCha20Rng, n: usize, spread: f64) -> Panel {
    let origin = LonLat::new(-90.0, 38.0);
    let cohorts = [2014, 2016];
    let tracts: Vec<Tract> = (0..n)
        .map(|i| {
            let role = if i % 3 == 0 { Role::Finalist } else { Role::Designee };
            let a = cohorts[i % 2];
            let base: f64 = r.random_range(-1.0..1.0);
            let y = (2009..=2023)
                .map(|year| (year, base + 0.1 * f64::from(year - 2009) + r.random_range(-0.5..0.5)))
                .collect();
            let population = f64::from(r.random_range(500..5000));
            Tract {
                id: format!("t{i:03}"),
                role,
                adoption_year: a,
                population,
                pop_in_zone: population * r.random_range(0.2..1.0),
                centroid: offset(origin, r.random_range(-spread..spread), r.random_range(-spread..spread)),
                y,
            }
        })
        .collect();
    build(&tracts, EventWindow::default())
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}
