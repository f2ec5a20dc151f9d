//! Ring-level event studies and linear spatial decay of effects.
//!
//! Every tract with an overlay assignment is resolved to one ring and one
//! side (designee or finalist zone). Each ring then gets its own stack:
//! designee-side ring tracts against finalist-side ring tracts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{AttEstimate, EventStudyFit};
use crate::geo::{RingClass, ZoneAssignment};
use crate::panel::{fmt_f64, GroupLabel, Panel, Role, TractId, ZoneId};
use crate::stack::{build_stack, cohort_weights, StackedDesign};

/// What to do with a tract whose best ring is reached on both sides.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapPolicy {
    #[default]
    PreferDesignee,
    PreferFinalist,
    Drop,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RingMember {
    pub tract_id: TractId,
    pub side: Role,
    pub zone_id: ZoneId,
    pub adoption_year: i32,
    pub ring: RingClass,
    /// Population-in-zone for inside and border tracts, tract population
    /// otherwise.
    pub weight: f64,
    pub distance: f64,
    /// Negative when the centroid lies inside the zone.
    pub signed_distance: f64,
}

fn ring_rank(r: RingClass) -> usize {
    RingClass::ALL.iter().position(|&x| x == r).expect("known ring")
}

fn member(a: &ZoneAssignment) -> Option<RingMember> {
    let adoption_year = a.adoption_year?;
    let weight = match a.ring {
        RingClass::Inside | RingClass::Border => a.pop_in_zone,
        _ => a.tract_population,
    };
    Some(RingMember {
        tract_id: a.tract_id.clone(),
        side: a.zone_role,
        zone_id: a.zone_id.clone(),
        adoption_year,
        ring: a.ring,
        weight,
        distance: a.centroid_border_distance,
        signed_distance: if a.centroid_inside {
            -a.centroid_border_distance
        } else {
            a.centroid_border_distance
        },
    })
}

/// One ring per tract: the innermost ring over all of its assignments, with
/// cross-side ties settled by `policy`. Within a side, ties go to the
/// larger overlap, then the nearer border, then the zone id.
pub fn resolve_rings(assignments: &[ZoneAssignment], policy: OverlapPolicy) -> BTreeMap<TractId, RingMember> {
    let mut best: BTreeMap<(TractId, Role), (&ZoneAssignment, RingMember)> = BTreeMap::new();
    for a in assignments.iter().filter(|a| a.zone_role != Role::Neither) {
        let Some(m) = member(a) else { continue };
        let key = (a.tract_id.clone(), a.zone_role);
        let better = match best.get(&key) {
            None => true,
            Some((b, bm)) => {
                (
                    ring_rank(m.ring),
                    -a.area_overlap_share,
                    a.centroid_border_distance,
                    &a.zone_id,
                ) < (
                    ring_rank(bm.ring),
                    -b.area_overlap_share,
                    b.centroid_border_distance,
                    &b.zone_id,
                )
            }
        };
        if better {
            best.insert(key, (a, m));
        }
    }
    let mut by_tract: BTreeMap<TractId, Vec<RingMember>> = BTreeMap::new();
    for ((t, _), (_, m)) in best {
        by_tract.entry(t).or_default().push(m);
    }
    let mut out = BTreeMap::new();
    for (t, mut ms) in by_tract {
        ms.sort_by_key(|m| ring_rank(m.ring));
        let chosen = if ms.len() > 1 && ms[0].ring == ms[1].ring {
            let want = match policy {
                OverlapPolicy::PreferDesignee => Role::Designee,
                OverlapPolicy::PreferFinalist => Role::Finalist,
                OverlapPolicy::Drop => continue,
            };
            ms.into_iter().find(|m| m.side == want).expect("both sides present")
        } else {
            ms.into_iter().next().expect("nonempty")
        };
        out.insert(t, chosen);
    }
    out
}

/// The panel relabelled so that the ring's designee-side tracts are treated
/// and its finalist-side tracts are controls. Tract attributes carry over.
pub fn ring_panel(panel: &Panel, members: &BTreeMap<TractId, RingMember>, ring: RingClass) -> Result<Panel> {
    let mut labels = BTreeMap::new();
    for (t, old) in panel.labels() {
        let label = match members.get(t) {
            Some(m) if m.ring == ring && m.weight > 0.0 => {
                let mut l =
                    GroupLabel::new(m.side, Some(m.zone_id.clone()), Some(m.adoption_year))?.with_pop_in_zone(m.weight);
                l.attributes = old.attributes.clone();
                l
            }
            _ => {
                let mut l = GroupLabel::neither();
                l.attributes = old.attributes.clone();
                l
            }
        };
        labels.insert(t.clone(), label);
    }
    panel.relabel(labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RingResult {
    pub ring: RingClass,
    pub n_treated: usize,
    pub n_control: usize,
    /// Weighted mean unsigned centroid distance of designee-side tracts.
    pub mean_distance: f64,
    pub mean_signed_distance: f64,
    pub att: AttEstimate,
    pub fit: EventStudyFit,
}

/// Stacks one ring and hands it to `estimate`.
pub fn ring_design(panel: &Panel, members: &BTreeMap<TractId, RingMember>, ring: RingClass) -> Result<StackedDesign> {
    let rp = ring_panel(panel, members, ring)?;
    for (role, side) in [(Role::Designee, "designee"), (Role::Finalist, "finalist")] {
        if rp.tracts_with_role(role).next().is_none() {
            return Err(Error::EmptyArm(format!("{side} side of ring {}", ring.as_str())));
        }
    }
    build_stack(&rp, &cohort_weights(&rp)?, panel.window())
}

pub fn ring_event_studies(
    panel: &Panel,
    assignments: &[ZoneAssignment],
    rings: &[RingClass],
    policy: OverlapPolicy,
    estimate: impl Fn(&StackedDesign) -> Result<(EventStudyFit, AttEstimate)>,
) -> Result<Vec<RingResult>> {
    let members = resolve_rings(assignments, policy);
    let mut out = Vec::new();
    for &ring in rings {
        let design = ring_design(panel, &members, ring)?;
        let (fit, att) = estimate(&design)?;
        let treated: Vec<&RingMember> = members
            .values()
            .filter(|m| {
                m.ring == ring && m.side == Role::Designee && panel.label(&m.tract_id).is_some() && m.weight > 0.0
            })
            .collect();
        let wsum: f64 = treated.iter().map(|m| m.weight).sum();
        let mean = |f: &dyn Fn(&RingMember) -> f64| treated.iter().map(|m| m.weight * f(m)).sum::<f64>() / wsum;
        let count = |role| design.tracts.iter().filter(|t| t.label.role == role).count();
        out.push(RingResult {
            ring,
            n_treated: count(Role::Designee),
            n_control: count(Role::Finalist),
            mean_distance: mean(&|m| m.distance),
            mean_signed_distance: mean(&|m| m.signed_distance),
            att,
            fit,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DecayPoint {
    pub distance: f64,
    pub att: f64,
    pub se: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayWeighting {
    #[default]
    Unweighted,
    InverseVariance,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecayFit {
    pub points: Vec<DecayPoint>,
    pub slope: f64,
    pub intercept: f64,
    /// Distance where the line reaches zero, when the effect shrinks toward
    /// zero with distance.
    pub zero_crossing: Option<f64>,
}

/// Least-squares line through (distance, ATT).
pub fn decay_fit(points: &[DecayPoint], weighting: DecayWeighting) -> Result<DecayFit> {
    if points.len() < 2 {
        return Err(Error::Argument("decay fit needs at least two points".into()));
    }
    let w: Vec<f64> = match weighting {
        DecayWeighting::Unweighted => vec![1.0; points.len()],
        DecayWeighting::InverseVariance => points
            .iter()
            .map(|p| {
                if p.se > 0.0 {
                    Ok(1.0 / (p.se * p.se))
                } else {
                    Err(Error::Argument("inverse-variance weighting needs positive SEs".into()))
                }
            })
            .collect::<Result<_>>()?,
    };
    let sw: f64 = w.iter().sum();
    let xbar = points.iter().zip(&w).map(|(p, w)| w * p.distance).sum::<f64>() / sw;
    let ybar = points.iter().zip(&w).map(|(p, w)| w * p.att).sum::<f64>() / sw;
    let sxx: f64 = points
        .iter()
        .zip(&w)
        .map(|(p, w)| w * (p.distance - xbar).powi(2))
        .sum();
    if !(sxx > 0.0) {
        return Err(Error::Argument("decay fit needs distinct distances".into()));
    }
    let sxy: f64 = points
        .iter()
        .zip(&w)
        .map(|(p, w)| w * (p.distance - xbar) * (p.att - ybar))
        .sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let zero_crossing = (intercept != 0.0 && slope * intercept < 0.0).then(|| -intercept / slope);
    Ok(DecayFit {
        points: points.to_vec(),
        slope,
        intercept,
        zero_crossing,
    })
}

pub fn decay_points(results: &[RingResult], rings: &[RingClass]) -> Vec<DecayPoint> {
    results
        .iter()
        .filter(|r| rings.contains(&r.ring))
        .map(|r| DecayPoint {
            distance: r.mean_signed_distance,
            att: r.att.value,
            se: r.att.std_error,
        })
        .collect()
}

pub fn write_ring_table(path: &Path, outcome: &str, results: &[RingResult], decay: Option<&DecayFit>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "outcome",
        "ring",
        "n_treated",
        "n_control",
        "mean_distance_mi",
        "mean_signed_distance_mi",
        "att",
        "se",
        "p",
        "decay_slope",
        "decay_intercept",
        "zero_crossing_mi",
    ])?;
    let (slope, intercept, cross) = match decay {
        Some(d) => (
            fmt_f64(d.slope),
            fmt_f64(d.intercept),
            d.zero_crossing.map(fmt_f64).unwrap_or_default(),
        ),
        None => Default::default(),
    };
    for r in results {
        w.write_record([
            outcome.to_string(),
            r.ring.as_str().to_string(),
            r.n_treated.to_string(),
            r.n_control.to_string(),
            fmt_f64(r.mean_distance),
            fmt_f64(r.mean_signed_distance),
            fmt_f64(r.att.value),
            fmt_f64(r.att.std_error),
            fmt_f64(r.att.p_value),
            slope.clone(),
            intercept.clone(),
            cross.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
