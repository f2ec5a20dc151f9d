use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use placedid::conley::SpatialKernel;
use placedid::geo::{compute_assignments, read_blocks_geojson, read_zones_geojson, write_assignments, OverlayOptions};
use placedid::pipeline::{run_pipeline, RunConfig, StageError, Stages};
use placedid::simgen::{generate, DgpSpec};

/// Stacked event studies for place-based policies.
#[derive(Parser)]
#[command(name = "placedid", version)]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic panel with known effects.
    Simulate {
        /// DGP config (TOML); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign tracts to zones and rings from zone and block GeoJSON.
    Overlay {
        #[arg(long)]
        zones: PathBuf,
        #[arg(long)]
        blocks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        max_distance_miles: f64,
    },
    /// Stacked event studies, sensitivity, dynamics, heterogeneity and income buckets.
    Estimate(RunArgs),
    /// Synthetic DiD by zone with placebo inference.
    Sdid(RunArgs),
    /// Ring event studies and distance decay.
    Spillover(RunArgs),
    /// Every stage the config enables.
    Report(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the root seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    conley_cutoff_miles: Option<f64>,
    /// `bartlett` or `uniform`.
    #[arg(long)]
    conley_kernel: Option<String>,
    #[arg(long)]
    sdid_replications: Option<usize>,
    #[arg(long)]
    sdid_zeta: Option<f64>,
    /// Placebo seed; defaults to the root seed.
    #[arg(long)]
    sdid_seed: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, placedid::Error> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.output_dir = std::env::current_dir()
                .map_err(|e| placedid::Error::Config(e.to_string()))?
                .join(out);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(c) = self.conley_cutoff_miles {
            cfg.conley.cutoff_miles = c;
        }
        if let Some(k) = &self.conley_kernel {
            cfg.conley.kernel = SpatialKernel::parse(k)
                .ok_or_else(|| placedid::Error::Config(format!("unknown Conley kernel `{k}`")))?;
        }
        if self.sdid_replications.is_some() || self.sdid_zeta.is_some() || self.sdid_seed.is_some() {
            let sdid = cfg.sdid.get_or_insert_with(Default::default);
            if let Some(r) = self.sdid_replications {
                sdid.replications = r;
            }
            if self.sdid_zeta.is_some() {
                sdid.zeta = self.sdid_zeta;
            }
            if self.sdid_seed.is_some() {
                sdid.seed = self.sdid_seed;
            }
        }
        Ok(cfg)
    }
}

enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<placedid::Error> for Failure {
    fn from(e: placedid::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

fn pipeline(args: &RunArgs, stages: Stages) -> Result<(), Failure> {
    let cfg = args.load()?;
    let report = run_pipeline(&cfg, stages)?;
    for s in &report.summaries {
        println!(
            "{:<20} att {:>10.4} se {:>8.4} p {:>6.3} robust p {:>6.3}",
            s.outcome, s.att.value, s.att.std_error, s.att.p_value, s.robust_p
        );
    }
    println!(
        "wrote {} files to {}",
        report.manifest.outputs.len() + 1,
        cfg.output_path().display()
    );
    Ok(())
}

fn simulate(spec: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let mut dgp = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(Failure::Validation)?;
            DgpSpec::from_toml(&text)?
        }
        None => DgpSpec::default(),
    };
    if let Some(s) = seed {
        dgp.seed = s;
    }
    let sim = generate(&dgp)?;
    let files = sim.write(out, &sim.schema())?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn overlay(zones: &Path, blocks: &Path, out: &Path, max_distance_miles: f64) -> Result<(), Failure> {
    let zones = read_zones_geojson(zones)?;
    let blocks = read_blocks_geojson(blocks)?;
    let opts = OverlayOptions { max_distance_miles };
    let (rows, degenerate) = compute_assignments(&zones, &blocks, None, &opts)?;
    for b in degenerate {
        log::warn!("skipped degenerate block {b}");
    }
    write_assignments(out, &rows)?;
    println!("{} assignments", rows.len());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")
            .map_err(Failure::Runtime)?;
    }
    let only = |f: fn(&mut Stages)| {
        let mut s = Stages::NONE;
        f(&mut s);
        s
    };
    match &cli.command {
        Command::Simulate { spec, seed, out } => simulate(spec.as_deref(), *seed, out),
        Command::Overlay {
            zones,
            blocks,
            out,
            max_distance_miles,
        } => overlay(zones, blocks, out, *max_distance_miles),
        Command::Estimate(a) => pipeline(
            a,
            only(|s| {
                s.estimate = true;
                s.heterogeneity = true;
                s.income = true;
            }),
        ),
        Command::Sdid(a) => pipeline(a, only(|s| s.sdid = true)),
        Command::Spillover(a) => pipeline(a, only(|s| s.spillover = true)),
        Command::Report(a) => pipeline(a, Stages::ALL),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
