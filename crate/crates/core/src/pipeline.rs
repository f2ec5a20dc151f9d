//! Batch runs: configuration, stage orchestration and output files.
//!
//! Every output is written under `output_dir` with a `manifest.json` listing
//! input and output digests. The manifest contains no timestamps or absolute
//! paths, so identical configs and seeds yield identical manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conley::{with_conley, KernelSpec};
use crate::dynamics::{gamma_covariance, scale_partial, unsmooth, unsmooth_att, PreTreatment};
use crate::error::{Error, Result};
use crate::estimator::{
    aggregate_att, fit_wls, interact_dummy, interaction_contrast, subset_groups, z_critical, AttEstimate,
    EventStudyFit, FitOptions, InteractionMode, Spec,
};
use crate::geo::{
    compute_assignments, read_assignments, read_blocks_geojson, read_zones_geojson, write_assignments, OverlayOptions,
    RingClass, ZoneAssignment,
};
use crate::income::{bucket_atts, BucketScheme, InflationOptions};
use crate::nsi::{add_index, IndexSpec, NSI};
use crate::panel::{
    enforce_balance, fmt_f64, load_panel, ColumnMap, EventWindow, LonLat, Panel, Role, TractId, PRIMARY_OUTCOMES,
};
use crate::sdid::{run_sdid, write_sdid_series, SdidConfig};
use crate::sensitivity::{pre_coefficients, sensitivity};
use crate::simgen::{generate, DgpSpec};
use crate::spillover::{decay_fit, decay_points, ring_event_studies, write_ring_table, DecayWeighting, OverlapPolicy};
use crate::stack::{build_stack, cohort_weights, StackedDesign};

pub const MANIFEST: &str = "manifest.json";
/// Bumped whenever an output table changes its columns.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inference {
    #[default]
    Conley,
    ClusterTract,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeterogeneityMode {
    /// Separate stacks for attribute = 1 and attribute = 0 tracts.
    Subset,
    /// Full dummy interaction; reports the contrast.
    Interaction,
    /// Dummy × event-time controls only.
    EventTimeControl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeterogeneityConfig {
    pub attribute: String,
    pub mode: HeterogeneityMode,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncomeConfig {
    pub scheme: BucketScheme,
    pub inflation: InflationOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub panel: Option<PathBuf>,
    pub schema: ColumnMap,
    pub zones: Option<PathBuf>,
    pub blocks: Option<PathBuf>,
    pub assignments: Option<PathBuf>,
    /// Generate inputs instead of reading them.
    pub simulate: Option<DgpSpec>,
    pub outcomes: Vec<String>,
    /// Adds the neighbourhood status index as an extra outcome.
    pub nsi: bool,
    pub index: IndexSpec,
    pub window: [i32; 2],
    pub balance: bool,
    pub level: f64,
    pub inference: Inference,
    pub conley: KernelSpec,
    pub heterogeneity: Vec<HeterogeneityConfig>,
    pub rings: Vec<String>,
    pub overlap_policy: OverlapPolicy,
    pub decay_weighting: DecayWeighting,
    pub sdid: Option<SdidConfig>,
    pub income: Option<IncomeConfig>,
    pub scaled_plot: bool,
    pub output_dir: PathBuf,
    /// Root seed for simulation and placebo draws.
    pub seed: u64,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            panel: None,
            schema: ColumnMap::default(),
            zones: None,
            blocks: None,
            assignments: None,
            simulate: None,
            outcomes: PRIMARY_OUTCOMES.iter().map(|s| s.to_string()).collect(),
            nsi: true,
            index: IndexSpec::default(),
            window: [EventWindow::MIN, EventWindow::MAX],
            balance: true,
            level: 0.95,
            inference: Inference::Conley,
            conley: KernelSpec::default(),
            heterogeneity: Vec::new(),
            rings: Vec::new(),
            overlap_policy: OverlapPolicy::default(),
            decay_weighting: DecayWeighting::default(),
            sdid: None,
            income: None,
            scaled_plot: true,
            output_dir: PathBuf::from("out"),
            seed: 0,
            base_dir: PathBuf::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn event_window(&self) -> Result<EventWindow> {
        EventWindow::new(self.window[0], self.window[1])
    }

    pub fn ring_classes(&self) -> Result<Vec<RingClass>> {
        self.rings
            .iter()
            .map(|r| RingClass::parse(r).ok_or_else(|| Error::Config(format!("unknown ring `{r}`"))))
            .collect()
    }

    fn has_geometry(&self) -> bool {
        self.simulate.is_some() || self.assignments.is_some() || (self.zones.is_some() && self.blocks.is_some())
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> Result<()> {
        self.event_window()?;
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("level must lie in (0, 1), got {}", self.level)));
        }
        self.conley.validate()?;
        self.ring_classes()?;
        match (&self.panel, &self.simulate) {
            (None, None) => return Err(Error::Config("either `panel` or `simulate` is required".into())),
            (Some(_), Some(_)) => return Err(Error::Config("`panel` and `simulate` are mutually exclusive".into())),
            (_, Some(s)) => s.validate()?,
            _ => {}
        }
        if self.zones.is_some() != self.blocks.is_some() {
            return Err(Error::Config("`zones` and `blocks` must be given together".into()));
        }
        for p in [&self.panel, &self.zones, &self.blocks, &self.assignments]
            .into_iter()
            .flatten()
        {
            let full = self.resolve(p);
            if !full.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", full.display())));
            }
        }
        if self.outcomes.is_empty() && !self.nsi {
            return Err(Error::Config("no outcomes requested".into()));
        }
        if (!self.rings.is_empty() || self.sdid.is_some()) && !self.has_geometry() {
            return Err(Error::Config("spillover and SDID stages need zone assignments".into()));
        }
        if let Some(inc) = &self.income {
            inc.scheme.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Which optional stages a run executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stages {
    pub estimate: bool,
    pub heterogeneity: bool,
    pub income: bool,
    pub spillover: bool,
    pub sdid: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        estimate: true,
        heterogeneity: true,
        income: true,
        spillover: true,
        sdid: true,
    };
    pub const NONE: Stages = Stages {
        estimate: false,
        heterogeneity: false,
        income: false,
        spillover: false,
        sdid: false,
    };
}

/// A failed stage with its cause.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}` failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        std::error::Error::source(&self.source)
    }
}

impl StageError {
    pub fn is_validation(&self) -> bool {
        self.source.is_validation()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub schema_version: u32,
    pub status: String,
    pub config_sha256: String,
    pub seed: u64,
    pub stages: Vec<String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OutcomeSummary {
    pub outcome: String,
    pub att: AttEstimate,
    pub static_beta: AttEstimate,
    pub robust_p: f64,
    pub robust_ci: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub manifest: Manifest,
    pub summaries: Vec<OutcomeSummary>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// One row of an event-study figure.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlotRow {
    pub event_time: i32,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub partial: bool,
    /// Full-treatment equivalent for partially treated coefficients.
    pub scaled: Option<(f64, f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlotConventions {
    pub level: f64,
    pub scaled: bool,
}

impl Default for PlotConventions {
    fn default() -> Self {
        PlotConventions {
            level: 0.95,
            scaled: true,
        }
    }
}

pub fn emit_plot_series(fit: &EventStudyFit, conv: &PlotConventions) -> Vec<PlotRow> {
    let z = z_critical(conv.level);
    fit.window
        .times()
        .filter_map(|e| {
            let (est, se) = fit.gamma(e)?;
            let partial = (0..=3).contains(&e);
            let scaled = (conv.scaled && partial).then(|| {
                let s = |v: f64| scale_partial(v, e).expect("partial event time");
                (s(est), s(est - z * se), s(est + z * se))
            });
            Some(PlotRow {
                event_time: e,
                estimate: est,
                ci_low: est - z * se,
                ci_high: est + z * se,
                partial,
                scaled,
            })
        })
        .collect()
}

struct Run<'a> {
    cfg: &'a RunConfig,
    out: PathBuf,
    outputs: Vec<PathBuf>,
    inputs: Vec<FileDigest>,
    stages: Vec<String>,
}

impl Run<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn record_input(&mut self, p: &Path) -> Result<()> {
        let full = self.cfg.resolve(p);
        self.inputs.push(FileDigest {
            path: p.display().to_string(),
            sha256: file_sha256(&full)?,
        });
        Ok(())
    }

    fn estimate(&self, design: &StackedDesign, outcome: &str, spec: Spec) -> Result<EventStudyFit> {
        self.finish(fit_wls(design, &FitOptions::new(outcome, spec))?)
    }

    fn finish(&self, fit: EventStudyFit) -> Result<EventStudyFit> {
        match self.cfg.inference {
            Inference::Conley => {
                let (fit, c) = with_conley(fit, &self.cfg.conley)?;
                if c.repaired {
                    log::warn!(
                        "{}: Conley covariance had eigenvalue {:.3e}; clamped to PSD",
                        fit.outcome,
                        c.min_eigenvalue
                    );
                }
                Ok(fit)
            }
            Inference::ClusterTract => Ok(fit),
        }
    }

    fn manifest(&self, status: &str, failed: Option<&StageError>) -> Result<Manifest> {
        let mut outputs = Vec::new();
        let mut seen = BTreeSet::new();
        for p in &self.outputs {
            if p.is_file() && seen.insert(p.clone()) {
                let rel = p.strip_prefix(&self.out).unwrap_or(p);
                outputs.push(FileDigest {
                    path: rel.display().to_string(),
                    sha256: file_sha256(p)?,
                });
            }
        }
        outputs.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(Manifest {
            tool: "placedid".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            schema_version: SCHEMA_VERSION,
            status: status.into(),
            config_sha256: self.cfg.hash(),
            seed: self.cfg.seed,
            stages: self.stages.clone(),
            inputs: self.inputs.clone(),
            outputs,
            failed_stage: failed.map(|e| e.stage.to_string()),
            error: failed.map(|e| e.source.to_string()),
        })
    }

    fn write_manifest(&self, m: &Manifest) -> Result<()> {
        let p = self.out.join(MANIFEST);
        let text = serde_json::to_string_pretty(m)? + "\n";
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|source| StageError { stage: name, source })
}

/// Runs ingest, overlay, index and balance, then the requested stages.
pub fn run_pipeline(cfg: &RunConfig, stages: Stages) -> std::result::Result<RunReport, StageError> {
    stage("validate", cfg.validate())?;
    let out = cfg.output_path();
    stage(
        "validate",
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e)),
    )?;
    let mut run = Run {
        cfg,
        out,
        outputs: Vec::new(),
        inputs: Vec::new(),
        stages: Vec::new(),
    };
    match execute(&mut run, stages) {
        Ok(summaries) => {
            let m = stage("manifest", run.manifest("complete", None))?;
            stage("manifest", run.write_manifest(&m))?;
            Ok(RunReport { manifest: m, summaries })
        }
        Err(e) => {
            log::error!("{e}");
            if let Ok(m) = run.manifest("incomplete", Some(&e)) {
                let _ = run.write_manifest(&m);
            }
            Err(e)
        }
    }
}

fn execute(run: &mut Run, stages: Stages) -> std::result::Result<Vec<OutcomeSummary>, StageError> {
    let cfg = run.cfg;
    let window = stage("validate", cfg.event_window())?;

    run.stages.push("ingest".into());
    let (panel, mut assignments) = stage("ingest", ingest(run, window))?;

    if assignments.is_none() && cfg.zones.is_some() {
        run.stages.push("overlay".into());
        assignments = Some(stage("overlay", overlay(run, &panel))?);
    }

    run.stages.push("index".into());
    let mut outcomes = cfg.outcomes.clone();
    let panel = if cfg.nsi {
        let (p, norm) = stage("index", add_index(&panel, &cfg.index, NSI))?;
        stage(
            "index",
            write_normalization(&run.path("nsi_normalization.csv"), &norm.moments),
        )?;
        outcomes.push(NSI.into());
        p
    } else {
        panel
    };

    let mut required: BTreeSet<String> = outcomes.iter().cloned().collect();
    if let Some(inc) = cfg.income.as_ref().filter(|_| stages.income) {
        required.extend(inc.scheme.outcomes.iter().cloned());
    }
    let present = panel.outcome_names();
    let missing: Vec<&str> = required
        .iter()
        .filter(|o| !present.contains(*o))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        let msg = format!("outcomes missing from the panel: {}", missing.join(", "));
        stage("ingest", Err(Error::Validation(msg)))?;
    }
    if stages.heterogeneity {
        for h in &cfg.heterogeneity {
            let unlabeled = panel
                .labels()
                .iter()
                .find(|(_, l)| l.role != Role::Neither && l.attribute(&h.attribute).is_none());
            if let Some((t, _)) = unlabeled {
                let msg = format!("attribute `{}` missing for tract {t}", h.attribute);
                stage("ingest", Err(Error::Validation(msg)))?;
            }
        }
    }

    let panel = if cfg.balance {
        run.stages.push("balance".into());
        let (p, report) = enforce_balance(&panel, &required);
        stage("balance", report.write_csv(&run.path("balance_dropped.csv")))?;
        if !report.dropped.is_empty() {
            log::info!("balance rule dropped {} tracts", report.dropped.len());
        }
        p
    } else {
        panel
    };

    let design = stage(
        "stack",
        cohort_weights(&panel).and_then(|w| build_stack(&panel, &w, window)),
    )?;

    let mut summaries = Vec::new();
    if stages.estimate {
        run.stages.push("estimate".into());
        summaries = stage("estimate", estimate_stage(run, &design, &outcomes))?;
    }
    if stages.heterogeneity && !cfg.heterogeneity.is_empty() {
        run.stages.push("heterogeneity".into());
        stage("heterogeneity", heterogeneity_stage(run, &panel, &design, &outcomes))?;
    }
    if stages.income && cfg.income.is_some() {
        run.stages.push("income".into());
        stage("income", income_stage(run, &panel, &design))?;
    }
    if stages.spillover && !cfg.rings.is_empty() {
        run.stages.push("spillover".into());
        let a = assignments.as_deref().unwrap_or_default();
        stage("spillover", spillover_stage(run, &panel, a, &outcomes))?;
    }
    if stages.sdid && cfg.sdid.is_some() {
        run.stages.push("sdid".into());
        let a = assignments.as_deref().unwrap_or_default();
        stage("sdid", sdid_stage(run, &panel, a, &outcomes))?;
    }
    Ok(summaries)
}

fn ingest(run: &mut Run, window: EventWindow) -> Result<(Panel, Option<Vec<ZoneAssignment>>)> {
    let cfg = run.cfg;
    if let Some(spec) = &cfg.simulate {
        let sim = generate(&spec.with_seed(cfg.seed))?;
        let dir = run.out.join("inputs");
        let schema = ColumnMap {
            delimiter: cfg.schema.delimiter,
            ..sim.schema()
        };
        for p in sim.write(&dir, &schema)? {
            run.outputs.push(p);
        }
        return Ok((sim.panel.with_window(window), Some(sim.assignments)));
    }
    let panel_path = cfg.panel.as_ref().expect("validated");
    run.record_input(panel_path)?;
    let panel = load_panel(&cfg.resolve(panel_path), &cfg.schema, window)?;
    let assignments = match &cfg.assignments {
        Some(p) => {
            run.record_input(p)?;
            Some(read_assignments(&cfg.resolve(p))?)
        }
        None => None,
    };
    Ok((panel, assignments))
}

fn overlay(run: &mut Run, panel: &Panel) -> Result<Vec<ZoneAssignment>> {
    let cfg = run.cfg;
    let (zp, bp) = (
        cfg.zones.as_ref().expect("checked"),
        cfg.blocks.as_ref().expect("checked"),
    );
    run.record_input(zp)?;
    run.record_input(bp)?;
    let zones = read_zones_geojson(&cfg.resolve(zp))?;
    let blocks = read_blocks_geojson(&cfg.resolve(bp))?;
    let centroids: BTreeMap<TractId, LonLat> = panel
        .tracts()
        .filter_map(|t| Some((t.clone(), panel.tract_info(t)?.1)))
        .collect();
    let (assignments, degenerate) = compute_assignments(&zones, &blocks, Some(&centroids), &OverlayOptions::default())?;
    for b in degenerate {
        log::warn!("skipped degenerate block {b}");
    }
    write_assignments(&run.path("assignments.csv"), &assignments)?;
    Ok(assignments)
}

fn write_normalization(path: &Path, moments: &BTreeMap<String, crate::nsi::Moments>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["outcome", "mean", "sd"])?;
    for (k, m) in moments {
        w.write_record([k.clone(), fmt_f64(m.mean), fmt_f64(m.sd)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn estimate_stage(run: &mut Run, design: &StackedDesign, outcomes: &[String]) -> Result<Vec<OutcomeSummary>> {
    let level = run.cfg.level;
    let conv = PlotConventions {
        level,
        scaled: run.cfg.scaled_plot,
    };
    let mut coef = csv::Writer::from_path(run.path("coefficients.csv"))?;
    coef.write_record(["outcome", "spec", "term", "estimate", "se", "p", "covariance"])?;
    let mut att = csv::Writer::from_path(run.path("att_summary.csv"))?;
    att.write_record([
        "outcome",
        "method",
        "estimate",
        "se",
        "p",
        "ci_low",
        "ci_high",
        "robust_p",
        "robust_ci_low",
        "robust_ci_high",
    ])?;
    let mut plot = csv::Writer::from_path(run.path("plot_series.csv"))?;
    plot.write_record([
        "outcome",
        "event_time",
        "estimate",
        "ci_low",
        "ci_high",
        "partial",
        "scaled_estimate",
        "scaled_ci_low",
        "scaled_ci_high",
    ])?;
    let mut yearly = csv::Writer::from_path(run.path("yearly_effects.csv"))?;
    yearly.write_record(["outcome", "event_time", "tau", "se"])?;

    let mut summaries = Vec::new();
    for outcome in outcomes {
        let dynamic = run.estimate(design, outcome, Spec::Dynamic)?;
        let stat = run.estimate(design, outcome, Spec::Static)?;
        for fit in [&dynamic, &stat] {
            let spec = match fit.spec {
                Spec::Static => "static",
                Spec::Dynamic => "dynamic",
            };
            for r in fit.coefficient_table() {
                coef.write_record([
                    outcome.clone(),
                    spec.into(),
                    r.term,
                    fmt_f64(r.estimate),
                    fmt_f64(r.se),
                    fmt_f64(r.p),
                    fit.covariance_kind.clone(),
                ])?;
            }
        }

        let a = aggregate_att(&dynamic)?;
        let sens = sensitivity(&a, &pre_coefficients(&dynamic), level)?;
        let b = aggregate_att(&stat)?;
        let (gamma, cov) = gamma_covariance(&dynamic)?;
        let effects = unsmooth(&gamma, PreTreatment::ForceZero)?;
        let u = unsmooth_att(&effects, Some(&cov));
        let rows: [(&str, &AttEstimate, Option<f64>, Option<(f64, f64)>); 3] = [
            ("dynamic_mean_4_7", &a, Some(sens.breakdown_p), sens.robust_ci),
            ("static_beta", &b, None, None),
            ("unsmoothed_mean_4_7", &u, None, None),
        ];
        for (method, est, rp, rci) in rows {
            let (lo, hi) = est.ci(level);
            att.write_record([
                outcome.clone(),
                method.into(),
                fmt_f64(est.value),
                fmt_f64(est.std_error),
                fmt_f64(est.p_value),
                fmt_f64(lo),
                fmt_f64(hi),
                opt(rp),
                opt(rci.map(|c| c.0)),
                opt(rci.map(|c| c.1)),
            ])?;
        }

        for r in emit_plot_series(&dynamic, &conv) {
            plot.write_record([
                outcome.clone(),
                r.event_time.to_string(),
                fmt_f64(r.estimate),
                fmt_f64(r.ci_low),
                fmt_f64(r.ci_high),
                r.partial.to_string(),
                opt(r.scaled.map(|s| s.0)),
                opt(r.scaled.map(|s| s.1)),
                opt(r.scaled.map(|s| s.2)),
            ])?;
        }
        let ses = effects.std_errors(&cov);
        for ((e, tau), se) in effects.tau.iter().zip(ses) {
            yearly.write_record([outcome.clone(), e.to_string(), fmt_f64(*tau), fmt_f64(se)])?;
        }

        summaries.push(OutcomeSummary {
            outcome: outcome.clone(),
            att: a,
            static_beta: b,
            robust_p: sens.breakdown_p,
            robust_ci: sens.robust_ci,
        });
    }
    for w in [&mut coef, &mut att, &mut plot, &mut yearly] {
        w.flush().map_err(|e| Error::io(&run.out, e))?;
    }
    Ok(summaries)
}

fn heterogeneity_stage(run: &mut Run, panel: &Panel, design: &StackedDesign, outcomes: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(run.path("heterogeneity.csv"))?;
    w.write_record(["outcome", "attribute", "mode", "group", "estimate", "se", "p"])?;
    let window = panel.window();
    for h in &run.cfg.heterogeneity {
        let attr = h.attribute.as_str();
        let flag = |v: Option<f64>| v.map(|x| x != 0.0);
        for outcome in outcomes {
            let mut rows: Vec<(&str, AttEstimate)> = Vec::new();
            let (mode, fit_mode) = match h.mode {
                HeterogeneityMode::Subset => ("subset", None),
                HeterogeneityMode::Interaction => ("interaction", Some(InteractionMode::FullInteraction)),
                HeterogeneityMode::EventTimeControl => ("event_time_control", Some(InteractionMode::EventTimeControl)),
            };
            match fit_mode {
                None => {
                    for (group, want) in [("1", true), ("0", false)] {
                        let keep = |_: &TractId, l: &crate::panel::GroupLabel| flag(l.attribute(attr)) == Some(want);
                        let d = subset_groups(panel, window, keep, keep)?;
                        rows.push((group, aggregate_att(&run.estimate(&d, outcome, Spec::Dynamic)?)?));
                    }
                }
                Some(m) => {
                    let fit = interact_dummy(
                        design,
                        &FitOptions::new(outcome.as_str(), Spec::Dynamic),
                        attr,
                        |t| flag(t.label.attribute(attr)),
                        m,
                    )?;
                    let fit = run.finish(fit)?;
                    rows.push(("base", aggregate_att(&fit)?));
                    if m == InteractionMode::FullInteraction {
                        rows.push(("contrast", interaction_contrast(&fit, attr)?));
                    }
                }
            }
            for (group, a) in rows {
                w.write_record([
                    outcome.clone(),
                    attr.to_string(),
                    mode.to_string(),
                    group.to_string(),
                    fmt_f64(a.value),
                    fmt_f64(a.std_error),
                    fmt_f64(a.p_value),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&run.out, e))
}

fn income_stage(run: &mut Run, panel: &Panel, design: &StackedDesign) -> Result<()> {
    let inc = run.cfg.income.clone().expect("checked");
    let rows = bucket_atts(panel, design, &inc.scheme, &inc.inflation, |d, o| {
        aggregate_att(&run.estimate(d, o, Spec::Dynamic)?)
    })?;
    let mut w = csv::Writer::from_path(run.path("income_buckets.csv"))?;
    w.write_record([
        "bucket",
        "outcome",
        "baseline_share",
        "att",
        "se",
        "p",
        "correction",
        "corrected",
        "band_low",
        "band_high",
    ])?;
    for r in rows {
        w.write_record([
            r.bucket,
            r.outcome,
            fmt_f64(r.baseline_share),
            fmt_f64(r.raw.value),
            fmt_f64(r.raw.std_error),
            fmt_f64(r.raw.p_value),
            fmt_f64(r.correction),
            fmt_f64(r.corrected),
            fmt_f64(r.band_low),
            fmt_f64(r.band_high),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&run.out, e))
}

const DECAY_RINGS: [RingClass; 3] = [RingClass::Border, RingClass::Outside1Mi, RingClass::Outside2Mi];

fn spillover_stage(run: &mut Run, panel: &Panel, assignments: &[ZoneAssignment], outcomes: &[String]) -> Result<()> {
    let rings = run.cfg.ring_classes()?;
    for outcome in outcomes {
        let results = ring_event_studies(panel, assignments, &rings, run.cfg.overlap_policy, |d| {
            let fit = run.estimate(d, outcome, Spec::Dynamic)?;
            let att = aggregate_att(&fit)?;
            Ok((fit, att))
        })?;
        let points = decay_points(&results, &DECAY_RINGS);
        let decay = if points.len() >= 2 {
            Some(decay_fit(&points, run.cfg.decay_weighting)?)
        } else {
            None
        };
        let path = run.path(&format!("rings_{outcome}.csv"));
        write_ring_table(&path, outcome, &results, decay.as_ref())?;
    }
    Ok(())
}

fn sdid_stage(run: &mut Run, panel: &Panel, assignments: &[ZoneAssignment], outcomes: &[String]) -> Result<()> {
    let mut cfg: SdidConfig = run.cfg.sdid.expect("checked");
    cfg.seed = cfg.seed.or(Some(run.cfg.seed));
    for outcome in outcomes {
        let report = run_sdid(panel, assignments, outcome, &cfg)?;
        write_sdid_series(&run.path(&format!("sdid_{outcome}.csv")), &report)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_outside_range_is_rejected() {
        let cfg = RunConfig {
            window: [-5, 9],
            simulate: Some(DgpSpec::default()),
            ..Default::default()
        };
        let e = cfg.validate().unwrap_err();
        assert!(e.is_validation());
    }

    #[test]
    fn config_needs_input() {
        assert!(RunConfig::default().validate().is_err());
        let cfg = RunConfig::from_toml("seed = 3\nwindow = [-4, 6]\n[simulate]\nseed = 1\n", Path::new(".")).unwrap();
        assert_eq!(cfg.seed, 3);
        cfg.validate().unwrap();
        assert!(RunConfig::from_toml("bogus = 1", Path::new(".")).is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = RunConfig::default();
        let b = RunConfig {
            output_dir: "elsewhere".into(),
            ..Default::default()
        };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig {
            seed: 1,
            ..Default::default()
        };
        assert_ne!(a.hash(), c.hash());
    }
}
