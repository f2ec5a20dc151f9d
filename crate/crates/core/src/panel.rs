//! Tract-by-year panel: data model, CSV ingestion, crosswalk averaging and
//! balanced-panel enforcement.
//!
//! Every `data_year` is the final year of a trailing 5-year survey average.
//! Outcomes are stored per observation in a name-keyed map; an absent key
//! means the value is missing for that tract-year.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const POVERTY_RATE: &str = "poverty_rate";
pub const LOG_MEDIAN_INCOME: &str = "log_median_income";
pub const EMP_POP_RATIO: &str = "emp_pop_ratio";

/// The three outcomes that define the balanced panel.
pub const PRIMARY_OUTCOMES: [&str; 3] = [POVERTY_RATE, LOG_MEDIAN_INCOME, EMP_POP_RATIO];

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TractId(pub String);

impl TractId {
    pub fn new(id: impl Into<String>) -> Self {
        TractId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TractId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ZoneId(pub String);

impl ZoneId {
    pub fn new(id: impl Into<String>) -> Self {
        ZoneId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ZoneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// (longitude, latitude) in decimal degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LonLat {
    pub lon: f64,
    pub lat: f64,
}

impl LonLat {
    pub fn new(lon: f64, lat: f64) -> Self {
        LonLat { lon, lat }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Designee,
    Finalist,
    Neither,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Designee => "designee",
            Role::Finalist => "finalist",
            Role::Neither => "neither",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        match s.trim().to_ascii_lowercase().as_str() {
            "designee" | "d" | "treated" => Some(Role::Designee),
            "finalist" | "f" | "control" => Some(Role::Finalist),
            "neither" | "n" | "" => Some(Role::Neither),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelObservation {
    pub tract_id: TractId,
    pub data_year: i32,
    pub outcomes: BTreeMap<String, f64>,
    /// 2010 baseline population of the whole tract.
    pub population: f64,
    pub centroid: LonLat,
}

impl PanelObservation {
    pub fn outcome(&self, name: &str) -> Option<f64> {
        self.outcomes.get(name).copied()
    }
}

/// A tract's relationship to the designation process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLabel {
    pub role: Role,
    pub zone_id: Option<ZoneId>,
    /// Designation year for designees; application round for finalists.
    pub adoption_year: Option<i32>,
    /// Population living inside the zone border. Falls back to the tract
    /// population when absent.
    pub pop_in_zone: Option<f64>,
    /// Tract-level covariates used by heterogeneity filters and dummies.
    #[serde(default)]
    pub attributes: BTreeMap<String, f64>,
}

impl GroupLabel {
    pub fn neither() -> Self {
        GroupLabel {
            role: Role::Neither,
            zone_id: None,
            adoption_year: None,
            pop_in_zone: None,
            attributes: BTreeMap::new(),
        }
    }

    pub fn new(role: Role, zone_id: Option<ZoneId>, adoption_year: Option<i32>) -> Result<Self> {
        let label = GroupLabel {
            role,
            zone_id,
            adoption_year,
            pop_in_zone: None,
            attributes: BTreeMap::new(),
        };
        label.validate()?;
        Ok(label)
    }

    pub fn with_pop_in_zone(mut self, pop: f64) -> Self {
        self.pop_in_zone = Some(pop);
        self
    }

    pub fn with_attribute(mut self, name: impl Into<String>, value: f64) -> Self {
        self.attributes.insert(name.into(), value);
        self
    }

    pub fn attribute(&self, name: &str) -> Option<f64> {
        self.attributes.get(name).copied()
    }

    fn validate(&self) -> Result<()> {
        match (self.role, self.adoption_year) {
            (Role::Neither, Some(_)) => Err(Error::Validation(
                "adoption_year must be absent for role `neither`".into(),
            )),
            (Role::Designee | Role::Finalist, None) => Err(Error::Validation(format!(
                "adoption_year is required for role `{}`",
                self.role
            ))),
            _ => Ok(()),
        }?;
        if let Some(p) = self.pop_in_zone {
            if !(p >= 0.0) {
                return Err(Error::Validation(format!("pop_in_zone must be >= 0, got {p}")));
            }
        }
        Ok(())
    }
}

/// Inclusive event-time bounds. Always contains the omitted period −1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventWindow {
    pub lower: i32,
    pub upper: i32,
}

impl EventWindow {
    pub const MIN: i32 = -5;
    pub const MAX: i32 = 7;

    pub fn new(lower: i32, upper: i32) -> Result<Self> {
        if lower < Self::MIN || upper > Self::MAX {
            return Err(Error::Validation(format!(
                "event window [{lower}, {upper}] must lie within [{}, {}]",
                Self::MIN,
                Self::MAX
            )));
        }
        if !(lower <= -1 && upper >= 0) {
            return Err(Error::Validation(format!(
                "event window [{lower}, {upper}] must contain -1 and 0"
            )));
        }
        Ok(EventWindow { lower, upper })
    }

    pub fn times(&self) -> RangeInclusive<i32> {
        self.lower..=self.upper
    }

    pub fn len(&self) -> usize {
        (self.upper - self.lower + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, e: i32) -> bool {
        (self.lower..=self.upper).contains(&e)
    }
}

impl Default for EventWindow {
    fn default() -> Self {
        EventWindow {
            lower: Self::MIN,
            upper: Self::MAX,
        }
    }
}

pub fn event_time(data_year: i32, adoption_year: i32) -> i32 {
    data_year - adoption_year
}

/// Outcomes constrained to `[0, 1]`.
pub fn is_rate_outcome(name: &str) -> bool {
    name == POVERTY_RATE
        || name == EMP_POP_RATIO
        || name.ends_with("_share")
        || name.ends_with("_rate")
        || name.ends_with("_ratio")
}

/// Immutable tract-by-year panel.
#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    observations: Vec<PanelObservation>,
    labels: BTreeMap<TractId, GroupLabel>,
    window: EventWindow,
    index: BTreeMap<(TractId, i32), usize>,
}

impl Panel {
    /// Builds a panel, checking one record per (tract, year), the outcome
    /// range invariants and label consistency. Tracts without a label are
    /// given role `neither`.
    pub fn new(
        mut observations: Vec<PanelObservation>,
        mut labels: BTreeMap<TractId, GroupLabel>,
        window: EventWindow,
    ) -> Result<Self> {
        observations.sort_by(|a, b| (&a.tract_id, a.data_year).cmp(&(&b.tract_id, b.data_year)));
        let mut index = BTreeMap::new();
        for (i, obs) in observations.iter().enumerate() {
            if !(obs.population >= 0.0) {
                return Err(Error::Validation(format!(
                    "tract {} year {}: population must be >= 0",
                    obs.tract_id, obs.data_year
                )));
            }
            for (name, &v) in &obs.outcomes {
                if !v.is_finite() {
                    return Err(Error::Validation(format!(
                        "tract {} year {}: outcome `{name}` is not finite",
                        obs.tract_id, obs.data_year
                    )));
                }
                if is_rate_outcome(name) && !(0.0..=1.0).contains(&v) {
                    return Err(Error::Validation(format!(
                        "tract {} year {}: rate outcome `{name}` = {v} outside [0, 1]",
                        obs.tract_id, obs.data_year
                    )));
                }
            }
            if index.insert((obs.tract_id.clone(), obs.data_year), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate record for tract {} year {}",
                    obs.tract_id, obs.data_year
                )));
            }
        }
        for (tract, label) in &labels {
            label
                .validate()
                .map_err(|e| Error::Validation(format!("tract {tract}: {e}")))?;
        }
        for obs in &observations {
            labels.entry(obs.tract_id.clone()).or_insert_with(GroupLabel::neither);
        }
        Ok(Panel {
            observations,
            labels,
            window,
            index,
        })
    }

    pub fn observations(&self) -> &[PanelObservation] {
        &self.observations
    }

    pub fn labels(&self) -> &BTreeMap<TractId, GroupLabel> {
        &self.labels
    }

    pub fn label(&self, tract: &TractId) -> Option<&GroupLabel> {
        self.labels.get(tract)
    }

    pub fn window(&self) -> EventWindow {
        self.window
    }

    pub fn with_window(mut self, window: EventWindow) -> Self {
        self.window = window;
        self
    }

    pub fn get(&self, tract: &TractId, year: i32) -> Option<&PanelObservation> {
        self.index.get(&(tract.clone(), year)).map(|&i| &self.observations[i])
    }

    /// Observations for one tract, ordered by year.
    pub fn tract_observations<'a>(&'a self, tract: &'a TractId) -> impl Iterator<Item = &'a PanelObservation> + 'a {
        self.index
            .range((tract.clone(), i32::MIN)..=(tract.clone(), i32::MAX))
            .map(move |(_, &i)| &self.observations[i])
    }

    pub fn tracts(&self) -> impl Iterator<Item = &TractId> {
        self.labels.keys()
    }

    pub fn tracts_with_role(&self, role: Role) -> impl Iterator<Item = (&TractId, &GroupLabel)> {
        self.labels.iter().filter(move |(_, l)| l.role == role)
    }

    /// Baseline population and centroid of a tract, taken from its first
    /// observation.
    pub fn tract_info(&self, tract: &TractId) -> Option<(f64, LonLat)> {
        self.tract_observations(tract)
            .next()
            .map(|o| (o.population, o.centroid))
    }

    /// Population-in-zone weight for a labelled tract, falling back to the
    /// tract population.
    pub fn zone_population(&self, tract: &TractId) -> Option<f64> {
        let label = self.labels.get(tract)?;
        label.pop_in_zone.or_else(|| self.tract_info(tract).map(|(p, _)| p))
    }

    pub fn adoption_years(&self) -> BTreeSet<i32> {
        self.labels.values().filter_map(|l| l.adoption_year).collect()
    }

    /// Calendar years spanned by the event window across all adoption rounds.
    /// Falls back to the years present in the data when no tract carries an
    /// adoption year.
    pub fn study_years(&self) -> Option<RangeInclusive<i32>> {
        let years = self.adoption_years();
        match (years.first(), years.last()) {
            (Some(&lo), Some(&hi)) => Some(lo + self.window.lower..=hi + self.window.upper),
            _ => {
                let lo = self.observations.iter().map(|o| o.data_year).min()?;
                let hi = self.observations.iter().map(|o| o.data_year).max()?;
                Some(lo..=hi)
            }
        }
    }

    pub fn outcome_names(&self) -> BTreeSet<String> {
        self.observations
            .iter()
            .flat_map(|o| o.outcomes.keys().cloned())
            .collect()
    }

    /// Keeps only the tracts accepted by `keep`.
    pub fn filter_tracts(&self, mut keep: impl FnMut(&TractId, &GroupLabel) -> bool) -> Panel {
        let kept: BTreeSet<TractId> = self
            .labels
            .iter()
            .filter(|(t, l)| keep(t, l))
            .map(|(t, _)| t.clone())
            .collect();
        self.restrict_to(&kept)
    }

    fn restrict_to(&self, kept: &BTreeSet<TractId>) -> Panel {
        let observations: Vec<_> = self
            .observations
            .iter()
            .filter(|o| kept.contains(&o.tract_id))
            .cloned()
            .collect();
        let labels: BTreeMap<_, _> = self
            .labels
            .iter()
            .filter(|(t, _)| kept.contains(*t))
            .map(|(t, l)| (t.clone(), l.clone()))
            .collect();
        Panel::new(observations, labels, self.window).expect("subset of a valid panel is valid")
    }

    /// Returns a copy with `name` set on every observation where `value`
    /// yields `Some`.
    pub fn with_outcome(&self, name: &str, mut value: impl FnMut(&PanelObservation) -> Option<f64>) -> Result<Panel> {
        let observations = self
            .observations
            .iter()
            .map(|o| {
                let mut o = o.clone();
                match value(&o) {
                    Some(v) => {
                        o.outcomes.insert(name.to_string(), v);
                    }
                    None => {
                        o.outcomes.remove(name);
                    }
                }
                o
            })
            .collect();
        Panel::new(observations, self.labels.clone(), self.window)
    }

    /// Replaces labels wholesale (used to relabel tracts for ring studies).
    pub fn relabel(&self, labels: BTreeMap<TractId, GroupLabel>) -> Result<Panel> {
        Panel::new(self.observations.clone(), labels, self.window)
    }
}

/// One input to a crosswalk average: a source-geography value (or missing)
/// with its crosswalk weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrosswalkEntry {
    pub value: Option<f64>,
    pub weight: f64,
}

impl CrosswalkEntry {
    pub fn present(value: f64, weight: f64) -> Self {
        CrosswalkEntry {
            value: Some(value),
            weight,
        }
    }

    pub fn missing(weight: f64) -> Self {
        CrosswalkEntry { value: None, weight }
    }
}

/// Weighted mean over the non-missing entries. Missing entries drop out of
/// both numerator and denominator; the result is missing when nothing
/// non-missing carries positive weight.
pub fn crosswalk_average(entries: &[CrosswalkEntry]) -> Result<Option<f64>> {
    let mut num = 0.0;
    let mut den = 0.0;
    for entry in entries {
        if !(entry.weight >= 0.0) || !entry.weight.is_finite() {
            return Err(Error::Argument(format!(
                "crosswalk weight must be finite and >= 0, got {}",
                entry.weight
            )));
        }
        if let Some(v) = entry.value {
            num += entry.weight * v;
            den += entry.weight;
        }
    }
    Ok(if den > 0.0 { Some(num / den) } else { None })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BalanceReport {
    /// Dropped tract with the first reason found.
    pub dropped: BTreeMap<TractId, String>,
}

impl BalanceReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["tract_id", "reason"])?;
        for (tract, reason) in &self.dropped {
            w.write_record([tract.as_str(), reason.as_str()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Keeps exactly the tracts that have every `required` outcome in every
/// study-window year.
pub fn enforce_balance(panel: &Panel, required: &BTreeSet<String>) -> (Panel, BalanceReport) {
    let mut report = BalanceReport::default();
    let Some(years) = panel.study_years() else {
        return (panel.clone(), report);
    };
    let mut kept = BTreeSet::new();
    'tracts: for tract in panel.tracts() {
        for year in years.clone() {
            let Some(obs) = panel.get(tract, year) else {
                report
                    .dropped
                    .insert(tract.clone(), format!("no observation for {year}"));
                continue 'tracts;
            };
            if let Some(name) = required.iter().find(|n| obs.outcome(n).is_none()) {
                report
                    .dropped
                    .insert(tract.clone(), format!("missing {name} in {year}"));
                continue 'tracts;
            }
        }
        kept.insert(tract.clone());
    }
    (panel.restrict_to(&kept), report)
}

pub fn primary_outcome_set() -> BTreeSet<String> {
    PRIMARY_OUTCOMES.iter().map(|s| s.to_string()).collect()
}

/// Column names for panel CSV files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub tract_id: String,
    pub year: String,
    pub lon: String,
    pub lat: String,
    pub population: String,
    pub role: String,
    pub zone_id: String,
    pub adoption_year: String,
    /// Optional column; absent from the file means no population-in-zone.
    pub pop_in_zone: String,
    /// Outcome name → column name.
    pub outcomes: BTreeMap<String, String>,
    /// Tract-level numeric attributes (e.g. `opportunity_zone`).
    pub attributes: Vec<String>,
    pub delimiter: char,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            tract_id: "tract_id".into(),
            year: "year".into(),
            lon: "lon".into(),
            lat: "lat".into(),
            population: "population".into(),
            role: "role".into(),
            zone_id: "zone_id".into(),
            adoption_year: "adoption_year".into(),
            pop_in_zone: "pop_in_zone".into(),
            outcomes: PRIMARY_OUTCOMES
                .iter()
                .map(|s| (s.to_string(), s.to_string()))
                .collect(),
            attributes: Vec::new(),
            delimiter: ',',
        }
    }
}

impl ColumnMap {
    pub fn with_outcomes<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.outcomes = names
            .into_iter()
            .map(|s| {
                let s = s.into();
                (s.clone(), s)
            })
            .collect();
        self
    }

    pub fn with_attributes<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.attributes = names.into_iter().map(Into::into).collect();
        self
    }

    fn delimiter_byte(&self) -> Result<u8> {
        u8::try_from(self.delimiter)
            .ok()
            .filter(|b| b.is_ascii())
            .ok_or_else(|| Error::Schema(format!("delimiter {:?} is not ASCII", self.delimiter)))
    }
}

struct Columns {
    tract_id: usize,
    year: usize,
    lon: usize,
    lat: usize,
    population: usize,
    role: usize,
    zone_id: usize,
    adoption_year: usize,
    pop_in_zone: Option<usize>,
    outcomes: Vec<(String, String, usize)>,
    attributes: Vec<(String, usize)>,
}

fn resolve_columns(headers: &csv::StringRecord, schema: &ColumnMap) -> Result<Columns> {
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let need = |name: &str| find(name).ok_or_else(|| Error::Schema(format!("missing required column `{name}`")));
    Ok(Columns {
        tract_id: need(&schema.tract_id)?,
        year: need(&schema.year)?,
        lon: need(&schema.lon)?,
        lat: need(&schema.lat)?,
        population: need(&schema.population)?,
        role: need(&schema.role)?,
        zone_id: need(&schema.zone_id)?,
        adoption_year: need(&schema.adoption_year)?,
        pop_in_zone: find(&schema.pop_in_zone),
        outcomes: schema
            .outcomes
            .iter()
            .map(|(name, col)| Ok((name.clone(), col.clone(), need(col)?)))
            .collect::<Result<_>>()?,
        attributes: schema
            .attributes
            .iter()
            .map(|col| Ok((col.clone(), need(col)?)))
            .collect::<Result<_>>()?,
    })
}

fn parse_f64(record: &csv::StringRecord, idx: usize, column: &str, row: usize) -> Result<Option<f64>> {
    let raw = record.get(idx).unwrap_or("").trim();
    if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    raw.parse::<f64>().map(Some).map_err(|_| Error::Row {
        row,
        column: column.to_string(),
        message: format!("cannot parse `{raw}` as a number"),
    })
}

fn require_f64(record: &csv::StringRecord, idx: usize, column: &str, row: usize) -> Result<f64> {
    parse_f64(record, idx, column, row)?.ok_or_else(|| Error::Row {
        row,
        column: column.to_string(),
        message: "value is required".into(),
    })
}

fn parse_year(record: &csv::StringRecord, idx: usize, column: &str, row: usize) -> Result<Option<i32>> {
    let raw = record.get(idx).unwrap_or("").trim();
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse::<i32>().map(Some).map_err(|_| Error::Row {
        row,
        column: column.to_string(),
        message: format!("cannot parse `{raw}` as a year"),
    })
}

/// Reads a panel from delimited text. Rows are validated as they are read;
/// the first failure is returned with its 1-based line number.
pub fn load_panel(path: &Path, schema: &ColumnMap, window: EventWindow) -> Result<Panel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_panel(file, schema, window)
}

pub fn read_panel(reader: impl std::io::Read, schema: &ColumnMap, window: EventWindow) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter_byte()?)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = resolve_columns(&headers, schema)?;

    let mut observations = Vec::new();
    let mut labels: BTreeMap<TractId, (GroupLabel, usize)> = BTreeMap::new();
    let mut seen = BTreeSet::new();

    for (i, record) in rdr.records().enumerate() {
        let row = i + 2;
        let record = record?;
        let tract_raw = record.get(cols.tract_id).unwrap_or("").trim();
        if tract_raw.is_empty() {
            return Err(Error::Row {
                row,
                column: schema.tract_id.clone(),
                message: "tract id is empty".into(),
            });
        }
        let tract = TractId::new(tract_raw);
        let year = parse_year(&record, cols.year, &schema.year, row)?.ok_or_else(|| Error::Row {
            row,
            column: schema.year.clone(),
            message: "year is required".into(),
        })?;
        if !seen.insert((tract.clone(), year)) {
            return Err(Error::Row {
                row,
                column: schema.year.clone(),
                message: format!("duplicate record for tract {tract} year {year}"),
            });
        }
        let population = require_f64(&record, cols.population, &schema.population, row)?;
        if population < 0.0 {
            return Err(Error::Row {
                row,
                column: schema.population.clone(),
                message: format!("population must be >= 0, got {population}"),
            });
        }
        let lon = require_f64(&record, cols.lon, &schema.lon, row)?;
        let lat = require_f64(&record, cols.lat, &schema.lat, row)?;

        let mut outcomes = BTreeMap::new();
        for (name, col, idx) in &cols.outcomes {
            if let Some(v) = parse_f64(&record, *idx, col, row)? {
                if is_rate_outcome(name) && !(0.0..=1.0).contains(&v) {
                    return Err(Error::Row {
                        row,
                        column: col.clone(),
                        message: format!("rate outcome {v} outside [0, 1]"),
                    });
                }
                outcomes.insert(name.clone(), v);
            }
        }

        let role_raw = record.get(cols.role).unwrap_or("");
        let role = Role::parse(role_raw).ok_or_else(|| Error::Row {
            row,
            column: schema.role.clone(),
            message: format!("unknown role `{role_raw}`"),
        })?;
        let zone_raw = record.get(cols.zone_id).unwrap_or("").trim();
        let zone_id = (!zone_raw.is_empty()).then(|| ZoneId::new(zone_raw));
        let adoption_year = parse_year(&record, cols.adoption_year, &schema.adoption_year, row)?;
        let pop_in_zone = match cols.pop_in_zone {
            Some(idx) => parse_f64(&record, idx, &schema.pop_in_zone, row)?,
            None => None,
        };
        let mut label = GroupLabel {
            role,
            zone_id,
            adoption_year,
            pop_in_zone,
            attributes: BTreeMap::new(),
        };
        for (col, idx) in &cols.attributes {
            if let Some(v) = parse_f64(&record, *idx, col, row)? {
                label.attributes.insert(col.clone(), v);
            }
        }
        label.validate().map_err(|e| Error::Row {
            row,
            column: schema.adoption_year.clone(),
            message: e.to_string(),
        })?;
        match labels.get(&tract) {
            Some((existing, first_row)) if *existing != label => {
                return Err(Error::Row {
                    row,
                    column: schema.role.clone(),
                    message: format!("group label for tract {tract} conflicts with row {first_row}"),
                });
            }
            Some(_) => {}
            None => {
                labels.insert(tract.clone(), (label, row));
            }
        }

        observations.push(PanelObservation {
            tract_id: tract,
            data_year: year,
            outcomes,
            population,
            centroid: LonLat::new(lon, lat),
        });
    }

    let labels = labels.into_iter().map(|(t, (l, _))| (t, l)).collect();
    Panel::new(observations, labels, window)
}

/// Writes a panel in the layout `load_panel` reads with the same schema.
pub fn write_panel(panel: &Panel, path: &Path, schema: &ColumnMap) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_panel_to(panel, &mut out, schema)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_panel_to(panel: &Panel, out: impl std::io::Write, schema: &ColumnMap) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(schema.delimiter_byte()?)
        .from_writer(out);
    let mut header = vec![
        schema.tract_id.clone(),
        schema.year.clone(),
        schema.lon.clone(),
        schema.lat.clone(),
        schema.population.clone(),
        schema.role.clone(),
        schema.zone_id.clone(),
        schema.adoption_year.clone(),
        schema.pop_in_zone.clone(),
    ];
    header.extend(schema.outcomes.values().cloned());
    header.extend(schema.attributes.iter().cloned());
    w.write_record(&header)?;

    let fmt_opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for obs in panel.observations() {
        let label = panel.label(&obs.tract_id).cloned().unwrap_or_else(GroupLabel::neither);
        let mut rec = vec![
            obs.tract_id.0.clone(),
            obs.data_year.to_string(),
            fmt_f64(obs.centroid.lon),
            fmt_f64(obs.centroid.lat),
            fmt_f64(obs.population),
            label.role.as_str().to_string(),
            label.zone_id.as_ref().map(|z| z.0.clone()).unwrap_or_default(),
            label.adoption_year.map(|y| y.to_string()).unwrap_or_default(),
            fmt_opt(label.pop_in_zone),
        ];
        rec.extend(schema.outcomes.keys().map(|name| fmt_opt(obs.outcome(name))));
        rec.extend(schema.attributes.iter().map(|a| fmt_opt(label.attribute(a))));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<panel>", e))?;
    Ok(())
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str =
        "tract_id,year,lon,lat,population,role,zone_id,adoption_year,poverty_rate,log_median_income,emp_pop_ratio";

    fn read(csv: &str) -> Result<Panel> {
        read_panel(csv.as_bytes(), &ColumnMap::default(), EventWindow::default())
    }

    #[test]
    fn parses_three_well_formed_rows() {
        let csv = format!(
            "{HEADER}\n\
             A,2013,-118.2,34.0,4000,designee,Z1,2014,0.3,10.2,0.4\n\
             A,2014,-118.2,34.0,4000,designee,Z1,2014,0.29,10.25,0.41\n\
             B,2013,-90.1,38.6,3500,finalist,F1,2014,0.35,10.0,0.38\n"
        );
        let panel = read(&csv).unwrap();
        assert_eq!(panel.observations().len(), 3);
        assert_eq!(panel.label(&TractId::new("A")).unwrap().role, Role::Designee);
        assert_eq!(
            panel.get(&TractId::new("B"), 2013).unwrap().outcome(POVERTY_RATE),
            Some(0.35)
        );
    }

    #[test]
    fn missing_year_column_is_a_schema_error() {
        let csv =
            "tract_id,lon,lat,population,role,zone_id,adoption_year,poverty_rate,log_median_income,emp_pop_ratio\n";
        let err = read(csv).unwrap_err();
        assert!(matches!(&err, Error::Schema(m) if m.contains("`year`")), "{err}");
    }

    #[test]
    fn out_of_range_rate_is_a_row_error() {
        let csv = format!("{HEADER}\nA,2013,-118.2,34.0,4000,designee,Z1,2014,1.3,10.2,0.4\n");
        match read(&csv).unwrap_err() {
            Error::Row { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "poverty_rate");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unparseable_number_reports_location() {
        let csv = format!(
            "{HEADER}\nA,2013,-118.2,34.0,4000,designee,Z1,2014,0.3,10.2,0.4\nA,2014,-118.2,34.0,abc,designee,Z1,2014,0.3,10.2,0.4\n"
        );
        match read(&csv).unwrap_err() {
            Error::Row { row, column, .. } => {
                assert_eq!(row, 3);
                assert_eq!(column, "population");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_tract_year_and_conflicting_labels_are_rejected() {
        let dup =
            format!("{HEADER}\nA,2013,0,0,1,designee,Z1,2014,0.3,10,0.4\nA,2013,0,0,1,designee,Z1,2014,0.3,10,0.4\n");
        assert!(matches!(read(&dup).unwrap_err(), Error::Row { row: 3, .. }));
        let conflict =
            format!("{HEADER}\nA,2013,0,0,1,designee,Z1,2014,0.3,10,0.4\nA,2014,0,0,1,finalist,F2,2015,0.3,10,0.4\n");
        assert!(matches!(read(&conflict).unwrap_err(), Error::Row { row: 3, .. }));
    }

    #[test]
    fn adoption_year_iff_labelled() {
        let csv = format!("{HEADER}\nA,2013,0,0,1,neither,,2014,0.3,10,0.4\n");
        assert!(read(&csv).is_err());
        let csv = format!("{HEADER}\nA,2013,0,0,1,designee,Z,,0.3,10,0.4\n");
        assert!(read(&csv).is_err());
    }

    #[test]
    fn empty_cells_are_missing_outcomes() {
        let csv = format!("{HEADER}\nA,2013,0,0,1,neither,,,,10,0.4\n");
        let panel = read(&csv).unwrap();
        assert_eq!(panel.observations()[0].outcome(POVERTY_RATE), None);
    }

    #[test]
    fn alternate_delimiter_and_renamed_columns() {
        let mut schema = ColumnMap::default().with_outcomes(["y"]);
        schema.year = "data_year".into();
        schema.delimiter = ';';
        let csv = "tract_id;data_year;lon;lat;population;role;zone_id;adoption_year;y\nA;2013;0;0;1;neither;;;2.5\n";
        let panel = read_panel(csv.as_bytes(), &schema, EventWindow::default()).unwrap();
        assert_eq!(panel.observations()[0].outcome("y"), Some(2.5));
    }

    #[test]
    fn crosswalk_examples() {
        let e = CrosswalkEntry::present;
        assert_eq!(crosswalk_average(&[e(2.0, 1.0), e(4.0, 1.0)]).unwrap(), Some(3.0));
        assert_eq!(
            crosswalk_average(&[e(2.0, 1.0), CrosswalkEntry::missing(1.0)]).unwrap(),
            Some(2.0)
        );
        assert_eq!(
            crosswalk_average(&[CrosswalkEntry::missing(1.0), CrosswalkEntry::missing(3.0)]).unwrap(),
            None
        );
        assert_eq!(crosswalk_average(&[e(2.0, 0.0)]).unwrap(), None);
        assert!(matches!(crosswalk_average(&[e(2.0, -1.0)]), Err(Error::Argument(_))));
    }

    #[test]
    fn event_time_examples() {
        assert_eq!(event_time(2014, 2014), 0);
        assert_eq!(event_time(2023, 2016), 7);
        assert_eq!(event_time(2009, 2014), -5);
    }

    #[test]
    fn window_validation() {
        assert!(EventWindow::new(-5, 7).is_ok());
        assert!(EventWindow::new(-5, 9).is_err());
        assert!(EventWindow::new(-6, 7).is_err());
        assert!(EventWindow::new(0, 3).is_err());
        assert_eq!(EventWindow::new(-1, 1).unwrap().len(), 3);
    }

    fn obs(tract: &str, year: i32, pov: Option<f64>) -> PanelObservation {
        let mut outcomes = BTreeMap::new();
        if let Some(p) = pov {
            outcomes.insert(POVERTY_RATE.to_string(), p);
        }
        outcomes.insert(LOG_MEDIAN_INCOME.to_string(), 10.0);
        outcomes.insert(EMP_POP_RATIO.to_string(), 0.4);
        PanelObservation {
            tract_id: TractId::new(tract),
            data_year: year,
            outcomes,
            population: 1000.0,
            centroid: LonLat::new(0.0, 0.0),
        }
    }

    #[test]
    fn balance_drops_tract_missing_one_year() {
        let window = EventWindow::new(-1, 1).unwrap();
        let mut observations = Vec::new();
        for year in 2016..=2018 {
            observations.push(obs("A", year, Some(0.3)));
            observations.push(obs("B", year, if year == 2017 { None } else { Some(0.3) }));
        }
        let labels = BTreeMap::from([
            (
                TractId::new("A"),
                GroupLabel::new(Role::Designee, None, Some(2017)).unwrap(),
            ),
            (
                TractId::new("B"),
                GroupLabel::new(Role::Finalist, None, Some(2017)).unwrap(),
            ),
        ]);
        let panel = Panel::new(observations, labels, window).unwrap();
        let (balanced, report) = enforce_balance(&panel, &primary_outcome_set());
        assert_eq!(report.dropped.len(), 1);
        assert!(report.dropped[&TractId::new("B")].contains("2017"));
        assert_eq!(balanced.tracts().count(), 1);

        let (again, report) = enforce_balance(&balanced, &primary_outcome_set());
        assert!(report.dropped.is_empty());
        assert_eq!(again.observations().len(), balanced.observations().len());
    }

    #[test]
    fn optional_outcomes_do_not_trigger_drops() {
        let window = EventWindow::new(-1, 0).unwrap();
        let mut a = obs("A", 2016, Some(0.2));
        a.outcomes.insert("black_share".into(), 0.5);
        let b = obs("A", 2017, Some(0.2));
        let labels = BTreeMap::from([(
            TractId::new("A"),
            GroupLabel::new(Role::Designee, None, Some(2017)).unwrap(),
        )]);
        let panel = Panel::new(vec![a, b], labels, window).unwrap();
        let (_, report) = enforce_balance(&panel, &primary_outcome_set());
        assert!(report.dropped.is_empty());
    }

    #[test]
    fn write_then_read_preserves_panel() {
        let csv = format!(
            "{HEADER},pop_in_zone\nA,2013,-118.25,34.05,4000,designee,Z1,2014,0.3,10.2,0.4,2500\nB,2013,-90.1,38.6,3500,neither,,,0.35,10.0,0.38,\n"
        );
        let panel = read(&csv).unwrap();
        let mut buf = Vec::new();
        write_panel_to(&panel, &mut buf, &ColumnMap::default()).unwrap();
        let back = read_panel(buf.as_slice(), &ColumnMap::default(), EventWindow::default()).unwrap();
        assert_eq!(back.observations(), panel.observations());
        assert_eq!(back.labels(), panel.labels());
        assert_eq!(back.zone_population(&TractId::new("A")), Some(2500.0));
    }
}
