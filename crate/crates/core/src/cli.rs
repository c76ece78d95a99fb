//! The `ept` command line: train, evaluate, plot, compare and presets.
//!
//! A run directory holds:
//!
//! | file                      | contents                                        |
//! |---------------------------|-------------------------------------------------|
//! | `config.json`             | the effective run config                        |
//! | `snapshots/snapshot_*.csv`| particles at the recorded iterations            |
//! | `diagnostics.csv`         | one row per iteration                           |
//! | `checkpoint.json`         | config plus the resumable run record            |
//! | `run.json`                | status and summary                              |
//! | `generator.json`          | latent generator (outer-loop runs only)         |
//!
//! Exit codes: 0 success, 1 i/o or missing inputs, 2 invalid config or
//! arguments, 3 numeric failure (partial outputs are kept).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::baselines::RbfKernel;
use crate::data;
use crate::error::{EptError, Result};
use crate::io;
use crate::metrics::{diagnostics_series, kde_density, mmd_squared, wasserstein2_exact, Bandwidth, MetricReport};
use crate::nets::GeneratorNet;
use crate::plot::{self, Grid, BOX_MARGIN, GRID_SIZE};
use crate::ratio_fit::{FitVariant, Fitter};
use crate::tensor::Tensor;
use crate::transport::{self, Method, RunRecord, TransportConfig};
use crate::nets::ScalarField;

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const RUN_FILE: &str = "run.json";
pub const GENERATOR_FILE: &str = "generator.json";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const PLOT_DIR: &str = "plots";

#[derive(Parser, Debug)]
#[command(name = "ept", version, about = "Euler particle transport experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a transport experiment from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total iterations.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Score a snapshot against a fresh held-out target sample.
    Evaluate {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricName::Mmd2)]
        metric: MetricName,
        /// Snapshot iteration (default: the last one).
        #[arg(long)]
        iter: Option<usize>,
        /// Held-out sample size (default: the particle count).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render a figure and the data behind it.
    Plot {
        run_dir: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        iter: Option<usize>,
        /// Sample used by `kde-heatmap`.
        #[arg(long, value_enum, default_value_t = KdeSource::Particles)]
        source: KdeSource,
    },
    /// Run several methods on shared data and tabulate final metrics.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print ready-to-use configs.
    Presets {
        #[arg(long)]
        name: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricName {
    Mmd2,
    W2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    Scatter,
    KdeHeatmap,
    SurfaceRatio,
    Diagnostics,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KdeSource {
    Particles,
    Target,
}

/// Process exit code for an error.
pub fn exit_code(e: &EptError) -> i32 {
    match e {
        EptError::Config(_) | EptError::InvalidArgument(_) | EptError::UnknownName { .. } | EptError::SizeCap(_) => 2,
        EptError::NonFinite { .. } | EptError::NonFiniteVelocity { .. } | EptError::Diverged { .. } => 3,
        _ => 1,
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            out,
            seed,
            resume,
            until,
        } => {
            let cfg = load_config(&config, seed)?;
            let dir = output_dir(out.as_deref(), &cfg)?;
            let outcome = cmd_train(&cfg, &dir, resume, until)?;
            println!("{}", serde_json::to_string_pretty(&outcome)?);
            match outcome.error {
                Some(e) => Err(e.into_error()),
                None => Ok(()),
            }
        }
        Command::Evaluate {
            run_dir,
            metric,
            iter,
            n,
            seed,
        } => {
            let report = cmd_evaluate(&run_dir, metric, iter, n, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Plot {
            run_dir,
            kind,
            iter,
            source,
        } => {
            let (svg, csv) = cmd_plot(&run_dir, kind, iter, source)?;
            println!("{}\n{}", svg.display(), csv.display());
            Ok(())
        }
        Command::Compare { config, out, seed } => {
            let report = cmd_compare(&config, out.as_deref(), seed)?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::Presets { name } => {
            let text = match name {
                Some(n) => serde_json::to_string_pretty(&preset(&n)?)?,
                None => serde_json::to_string_pretty(&presets())?,
            };
            println!("{text}");
            Ok(())
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> EptError {
    EptError::Config(e.to_string())
}

/// Read, override and validate a run config. All failures are config errors.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<TransportConfig> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let mut cfg: TransportConfig = serde_json::from_str(&text).map_err(config_err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(out: Option<&Path>, cfg: &TransportConfig) -> Result<PathBuf> {
    out.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| EptError::Config("no output directory: pass --out or set output_dir".into()))
}

/// Everything needed to resume a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TransportConfig,
    pub record: RunRecord,
}

/// Failure recorded in `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub kind: String,
    pub message: String,
    pub exit_code: i32,
}

impl RunFailure {
    fn from_error(e: &EptError) -> Self {
        let kind = match exit_code(e) {
            2 => "config",
            3 => "numeric",
            _ => "io",
        };
        Self {
            kind: kind.into(),
            message: e.to_string(),
            exit_code: exit_code(e),
        }
    }

    fn into_error(self) -> EptError {
        match self.exit_code {
            3 => EptError::NonFinite { context: self.message },
            2 => EptError::Config(self.message),
            _ => EptError::InvalidArgument(self.message),
        }
    }
}

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub status: String,
    pub iterations: usize,
    pub planned_iterations: usize,
    pub particles: usize,
    pub dim: usize,
    pub s: f64,
    pub final_fit_loss: Option<f64>,
    pub snapshots: Vec<String>,
    pub outer: Vec<transport::OuterDiagnostics>,
    pub error: Option<RunFailure>,
}

/// Write every output of `record` into `dir`.
pub fn write_run(
    dir: &Path,
    cfg: &TransportConfig,
    record: &RunRecord,
    generator: Option<&GeneratorNet>,
    error: Option<&EptError>,
) -> Result<RunSummary> {
    let snap_dir = dir.join(SNAPSHOT_DIR);
    fs::create_dir_all(&snap_dir)?;
    for s in &record.snapshots {
        io::write_snapshot(&snap_dir.join(io::snapshot_file_name(s.iteration)), s.iteration, &s.points)?;
    }
    io::write_diagnostics(&dir.join(DIAGNOSTICS_FILE), &diagnostics_series(record))?;
    let mut ckpt_record = record.clone();
    ckpt_record.snapshots.clear();
    io::write_json(
        &dir.join(CHECKPOINT_FILE),
        &Checkpoint {
            config: cfg.clone(),
            record: ckpt_record,
        },
    )?;
    if let Some(g) = generator {
        io::write_json(&dir.join(GENERATOR_FILE), g)?;
    }
    let planned = cfg.iterations();
    let status = match error {
        Some(_) => "failed",
        None if record.iterations() < planned => "partial",
        None => "complete",
    };
    let summary = RunSummary {
        method: record.method.clone(),
        status: status.into(),
        iterations: record.iterations(),
        planned_iterations: planned,
        particles: record.ensemble.len(),
        dim: record.ensemble.dim(),
        s: record.s,
        final_fit_loss: record.diagnostics.last().and_then(|d| d.fit_loss),
        snapshots: list_snapshots(dir)?.into_iter().map(|(_, p)| file_name(&p)).collect(),
        outer: record.outer.clone(),
        error: error.map(RunFailure::from_error),
    };
    io::write_json(&dir.join(RUN_FILE), &summary)?;
    Ok(summary)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Train `cfg` into `dir`. Config problems are returned as errors before
/// anything is written; numeric failures are written into `run.json`.
pub fn cmd_train(cfg: &TransportConfig, dir: &Path, resume: bool, until: Option<usize>) -> Result<RunSummary> {
    cfg.validate()?;
    if cfg.is_latent() && (resume || until.is_some()) {
        return Err(EptError::Config("--resume and --until are not available with outer loops".into()));
    }
    let target = cfg.target()?;
    let mut record = if resume {
        let ckpt: Checkpoint = io::read_json(&dir.join(CHECKPOINT_FILE))?;
        if &ckpt.config != cfg {
            return Err(EptError::Config("the checkpoint was written with a different config".into()));
        }
        Some(ckpt.record)
    } else {
        None
    };
    fs::create_dir_all(dir)?;
    io::write_json(&dir.join(CONFIG_FILE), cfg)?;

    if cfg.is_latent() {
        return match transport::run_eptv2(cfg, &target) {
            Ok((rec, generator)) => write_run(dir, cfg, &rec, Some(&generator), None),
            Err(e) if exit_code(&e) == 3 => {
                let summary = RunSummary {
                    method: format!("ept-{}", cfg.divergence),
                    status: "failed".into(),
                    iterations: 0,
                    planned_iterations: cfg.iterations(),
                    particles: cfg.reference.n,
                    dim: cfg.dataset.dim(),
                    s: cfg.transport.s,
                    final_fit_loss: None,
                    snapshots: Vec::new(),
                    outer: Vec::new(),
                    error: Some(RunFailure::from_error(&e)),
                };
                io::write_json(&dir.join(RUN_FILE), &summary)?;
                Ok(summary)
            }
            Err(e) => Err(e),
        };
    }

    let mut record = match record.take() {
        Some(r) => r,
        None => transport::start_eptv1(cfg, &target)?,
    };
    let stop = until.unwrap_or(usize::MAX).min(cfg.iterations());
    let outcome = transport::resume_eptv1(cfg, &target, &mut record, stop);
    match outcome {
        Ok(()) => write_run(dir, cfg, &record, None, None),
        Err(e) if exit_code(&e) == 3 => write_run(dir, cfg, &record, None, Some(&e)),
        Err(e) => Err(e),
    }
}

/// `(iteration, path)` of every snapshot in `dir`, sorted by iteration.
pub fn list_snapshots(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let snap_dir = dir.join(SNAPSHOT_DIR);
    let mut out = Vec::new();
    if !snap_dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(&snap_dir)? {
        let p = entry?.path();
        let name = file_name(&p);
        if let Some(it) = name
            .strip_prefix("snapshot_")
            .and_then(|s| s.strip_suffix(".csv"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            out.push((it, p));
        }
    }
    out.sort();
    Ok(out)
}

fn snapshot_at(dir: &Path, iter: Option<usize>) -> Result<(usize, Tensor)> {
    let snaps = list_snapshots(dir)?;
    let path = match iter {
        Some(i) => snaps.iter().find(|(it, _)| *it == i).map(|(_, p)| p.clone()),
        None => snaps.last().map(|(_, p)| p.clone()),
    };
    let path = path.ok_or_else(|| {
        EptError::InvalidArgument(match iter {
            Some(i) => format!("{}: no snapshot for iteration {i}", dir.display()),
            None => format!("{}: no snapshots", dir.display()),
        })
    })?;
    io::read_snapshot(&path)
}

/// Contents of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iteration: usize,
    pub report: MetricReport,
    /// The same metric for the initial snapshot, when it exists.
    pub initial_value: Option<f64>,
}

/// Held-out target sample for evaluation; independent of the training and
/// in-run metric samples.
pub fn evaluation_target(cfg: &TransportConfig, n: usize, seed: Option<u64>) -> Result<Tensor> {
    let mut spec = cfg.dataset.clone();
    spec.n = n;
    if let Some(s) = seed {
        spec.seed = s;
    }
    data::sample_for(&spec, "evaluate")
}

fn metric_value(metric: MetricName, x: &Tensor, y: &Tensor, kernel: &RbfKernel) -> Result<f64> {
    match metric {
        MetricName::Mmd2 => mmd_squared(x, y, kernel),
        MetricName::W2 => wasserstein2_exact(x, y),
    }
}

/// Evaluate a snapshot of `run_dir` and write `eval_<metric>_<iter>.json`.
/// MMD^2 uses the median-heuristic bandwidth of the initial snapshot and
/// the held-out sample, so values are comparable across iterations.
pub fn cmd_evaluate(run_dir: &Path, metric: MetricName, iter: Option<usize>, n: Option<usize>, seed: Option<u64>) -> Result<EvalReport> {
    let cfg: TransportConfig = io::read_json(&run_dir.join(CONFIG_FILE))?;
    let (it, points) = snapshot_at(run_dir, iter)?;
    let n = n.unwrap_or(points.nrows());
    if metric == MetricName::W2 && n.max(points.nrows()) > crate::metrics::W2_SIZE_CAP {
        return Err(EptError::SizeCap(format!(
            "exact W2 is limited to {} points, got {}",
            crate::metrics::W2_SIZE_CAP,
            n.max(points.nrows())
        )));
    }
    let target = evaluation_target(&cfg, n, seed)?;
    let initial = snapshot_at(run_dir, Some(0)).ok().map(|(_, p)| p);
    let kernel = RbfKernel::median(initial.as_ref().unwrap_or(&points), &target)?;
    let value = metric_value(metric, &points, &target, &kernel)?;
    let initial_value = match &initial {
        Some(p) => Some(metric_value(metric, p, &target, &kernel)?),
        None => None,
    };
    let report = EvalReport {
        iteration: it,
        report: MetricReport {
            metric: match metric {
                MetricName::Mmd2 => "mmd2".into(),
                MetricName::W2 => "w2".into(),
            },
            value,
            n_x: points.nrows(),
            n_y: target.nrows(),
            bandwidth: (metric == MetricName::Mmd2).then(|| kernel.bandwidth()),
        },
        initial_value,
    };
    io::write_json(&run_dir.join(format!("eval_{}_{it:06}.json", report.report.metric)), &report)?;
    Ok(report)
}

fn load_fitter(run_dir: &Path) -> Result<Fitter> {
    let path = run_dir.join(CHECKPOINT_FILE);
    if !path.is_file() {
        return Err(EptError::InvalidArgument(format!("{}: checkpoint not found", path.display())));
    }
    let ckpt: Checkpoint = io::read_json(&path)?;
    if ckpt.record.provider_state.is_null() {
        return Err(EptError::InvalidArgument(format!(
            "method `{}` has no fitted ratio network",
            ckpt.record.method
        )));
    }
    Ok(serde_json::from_value::<Fitter>(ckpt.record.provider_state)?)
}

/// Render `kind` for `run_dir` into `plots/`; returns the SVG and CSV paths.
pub fn cmd_plot(run_dir: &Path, kind: PlotKind, iter: Option<usize>, source: KdeSource) -> Result<(PathBuf, PathBuf)> {
    let plot_dir = run_dir.join(PLOT_DIR);
    let (stem, svg, csv) = match kind {
        PlotKind::Scatter => {
            let (it, points) = snapshot_at(run_dir, iter)?;
            let stem = format!("scatter_{it:06}");
            let csv_path = plot_dir.join(format!("{stem}.csv"));
            fs::create_dir_all(&plot_dir)?;
            io::write_snapshot(&csv_path, it, &points)?;
            let svg = plot::scatter_svg(&points, &format!("particles, iteration {it}"))?;
            fs::write(plot_dir.join(format!("{stem}.svg")), svg)?;
            return Ok((plot_dir.join(format!("{stem}.svg")), csv_path));
        }
        PlotKind::KdeHeatmap => {
            let (sample, stem, title) = match source {
                KdeSource::Particles => {
                    let (it, p) = snapshot_at(run_dir, iter)?;
                    (p, format!("kde_{it:06}"), format!("particle KDE, iteration {it}"))
                }
                KdeSource::Target => {
                    let cfg: TransportConfig = io::read_json(&run_dir.join(CONFIG_FILE))?;
                    (cfg.target()?, "kde_target".to_string(), "target KDE".to_string())
                }
            };
            let bounds = plot::bounding_box(&sample, BOX_MARGIN)?;
            let grid = Grid::evaluate(&bounds, GRID_SIZE, |q| kde_density(&sample, q, &Bandwidth::Silverman))?;
            (stem, plot::grid_svg(&grid, &title)?, grid.to_csv())
        }
        PlotKind::SurfaceRatio => {
            let fitter = load_fitter(run_dir)?;
            let cfg: TransportConfig = io::read_json(&run_dir.join(CONFIG_FILE))?;
            let target = cfg.target()?;
            let bounds = plot::bounding_box(&target, BOX_MARGIN)?;
            let field = fitter.field();
            let grid = Grid::evaluate(&bounds, GRID_SIZE, |q| Ok(field.value_and_grad(q)?.0))?;
            let what = if fitter.objective.variant == FitVariant::DensityDiff {
                "estimated density difference"
            } else {
                "estimated density ratio"
            };
            ("surface_ratio".to_string(), plot::grid_svg(&grid, what)?, grid.to_csv())
        }
        PlotKind::Diagnostics => {
            let table = io::read_table(&run_dir.join(DIAGNOSTICS_FILE))?;
            let iters = table.column("iter").unwrap_or_default();
            let series: Vec<(String, Vec<(f64, f64)>)> = ["fit_loss", "penalty", "mmd2"]
                .iter()
                .filter_map(|name| {
                    let ys = table.column(name)?;
                    ys.iter().any(|v| v.is_finite()).then(|| {
                        (name.to_string(), iters.iter().copied().zip(ys).collect())
                    })
                })
                .collect();
            let svg = plot::line_svg(&series, "diagnostics");
            ("diagnostics".to_string(), svg, table.to_csv())
        }
    };
    fs::create_dir_all(&plot_dir)?;
    let svg_path = plot_dir.join(format!("{stem}.svg"));
    let csv_path = plot_dir.join(format!("{stem}.csv"));
    fs::write(&svg_path, svg)?;
    fs::write(&csv_path, csv)?;
    Ok((svg_path, csv_path))
}

/// Config for `compare`: one base run config and the methods to run on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub base: TransportConfig,
    /// `ept-<divergence>`, `mmd-flow` or `svgd`.
    pub methods: Vec<String>,
    #[serde(default)]
    pub output_dir: Option<String>,
    /// Held-out sample size for the final metrics (default: particle count).
    #[serde(default)]
    pub eval_n: Option<usize>,
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub status: String,
    pub iterations: usize,
    pub initial_mmd2: Option<f64>,
    pub final_mmd2: Option<f64>,
    pub target_hash: String,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(crate::metrics::fmt_float).unwrap_or_default();
        let mut s = String::from("method,status,iterations,initial_mmd2,final_mmd2,target_hash\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.method,
                r.status,
                r.iterations,
                opt(r.initial_mmd2),
                opt(r.final_mmd2),
                r.target_hash
            ));
        }
        s
    }
}

/// SHA-256 of the little-endian bytes of a sample.
pub fn tensor_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// The base config specialised to one compare method.
pub fn method_config(base: &TransportConfig, method: &str) -> Result<TransportConfig> {
    let mut cfg = base.clone();
    cfg.output_dir = None;
    match method {
        "mmd-flow" => cfg.method = Method::MmdFlow,
        "svgd" => cfg.method = Method::Svgd,
        m => {
            let div = m.strip_prefix("ept-").ok_or_else(|| EptError::UnknownName {
                kind: "method",
                name: m.to_string(),
            })?;
            cfg.method = Method::Ept;
            cfg.divergence = div.to_string();
            if div == "l2" {
                cfg.objective.variant = FitVariant::DensityDiff;
            } else if cfg.objective.variant == FitVariant::DensityDiff {
                cfg.objective.variant = FitVariant::Lsdr;
            }
        }
    }
    Ok(cfg)
}

/// Run every listed method into `<out>/<method>/` and write `compare.csv`
/// and `compare.json`. A failing method is recorded and the rest proceed.
pub fn cmd_compare(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<CompareReport> {
    let text = fs::read_to_string(config).map_err(|e| config_err(format!("{}: {e}", config.display())))?;
    let mut cc: CompareConfig = serde_json::from_str(&text).map_err(config_err)?;
    if cc.methods.len() < 2 {
        return Err(EptError::Config("compare needs at least two methods".into()));
    }
    if let Some(s) = seed {
        cc.base.seed = s;
    }
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cc.output_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| EptError::Config("no output directory: pass --out or set output_dir".into()))?;
    cc.base.dataset.validate().map_err(config_err)?;
    let target = cc.base.target()?;
    let hash = tensor_hash(&target);
    let eval_n = cc.eval_n.unwrap_or(cc.base.reference.n);
    let heldout = evaluation_target(&cc.base, eval_n, None)?;
    fs::create_dir_all(&dir)?;

    let mut rows = Vec::new();
    for m in &cc.methods {
        let mut row = CompareRow {
            method: m.clone(),
            status: "failed".into(),
            iterations: 0,
            initial_mmd2: None,
            final_mmd2: None,
            target_hash: hash.clone(),
            error: None,
        };
        let result = (|| -> Result<(RunSummary, f64, f64)> {
            let cfg = method_config(&cc.base, m)?;
            cfg.validate()?;
            let run_dir = dir.join(m);
            let summary = cmd_train(&cfg, &run_dir, false, None)?;
            let initial = cfg.reference()?;
            let kernel = RbfKernel::median(&initial, &heldout)?;
            let m0 = mmd_squared(&initial, &heldout, &kernel)?;
            let (_, last) = snapshot_at(&run_dir, None)?;
            let m1 = mmd_squared(&last, &heldout, &kernel)?;
            Ok((summary, m0, m1))
        })();
        match result {
            Ok((summary, m0, m1)) => {
                row.iterations = summary.iterations;
                row.initial_mmd2 = Some(m0);
                row.final_mmd2 = Some(m1);
                row.status = summary.status;
                row.error = summary.error.map(|e| e.message);
            }
            Err(e) => {
                log::warn!("compare: method `{m}` failed: {e}");
                row.error = Some(e.to_string());
            }
        }
        rows.push(row);
    }
    let report = CompareReport { rows };
    fs::write(dir.join("compare.csv"), report.to_csv())?;
    io::write_json(&dir.join("compare.json"), &report)?;
    Ok(report)
}

pub const PRESET_NAMES: [&str; 3] = ["toy-2d", "outer-loops", "no-outer-loops"];

/// A named config.
pub fn preset(name: &str) -> Result<TransportConfig> {
    let v = match name {
        "toy-2d" => serde_json::json!({
            "dataset": {"name": "8gaussians", "n": 50000, "seed": 0},
            "reference": {"n": 50000},
            "method": "ept",
            "divergence": "chi2",
            "objective": {"variant": "lsdr", "alpha": 0.5, "T": 5, "batch": 1000, "lr": 0.0005},
            "transport": {"s": 0.005, "K": 20000},
            "net": {"widths": [64, 64, 64]},
            "seed": 0,
            "output_dir": "runs/toy-2d",
            "snapshot_every": 1000
        }),
        "outer-loops" => serde_json::json!({
            "dataset": {"name": "moons", "n": 1000, "seed": 0},
            "reference": {"n": 1000},
            "method": "ept",
            "divergence": "chi2",
            "objective": {"variant": "lsdr", "alpha": 0.0, "T": 1, "batch": 100, "lr": 0.0001},
            "transport": {"s": 0.5, "OL": 50, "IL": 20, "latent_dim": 128,
                          "generator": {"widths": [64, 64], "lr": 0.0001, "batch": 100, "epochs": 10}},
            "net": {"widths": [64, 64, 64]},
            "seed": 0,
            "output_dir": "runs/outer-loops",
            "snapshot_every": 100
        }),
        "no-outer-loops" => serde_json::json!({
            "dataset": {"name": "moons", "n": 4000, "seed": 0},
            "reference": {"n": 4000},
            "method": "ept",
            "divergence": "chi2",
            "objective": {"variant": "lsdr", "alpha": 0.0, "T": 5, "batch": 100, "lr": 0.0001},
            "transport": {"s": 0.5, "K": 1000},
            "net": {"widths": [64, 64, 64]},
            "seed": 0,
            "output_dir": "runs/no-outer-loops",
            "snapshot_every": 100
        }),
        other => {
            return Err(EptError::UnknownName {
                kind: "preset",
                name: other.to_string(),
            })
        }
    };
    Ok(serde_json::from_value(v)?)
}

/// Every preset, keyed by name.
pub fn presets() -> serde_json::Map<String, Value> {
    PRESET_NAMES
        .iter()
        .map(|n| (n.to_string(), serde_json::to_value(preset(n).expect("built-in preset")).expect("serializable")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for n in PRESET_NAMES {
            preset(n).unwrap().validate().unwrap();
        }
        assert!(matches!(preset("nope"), Err(EptError::UnknownName { .. })));
    }

    #[test]
    fn method_names_map_to_configs() {
        let base = preset("toy-2d").unwrap();
        assert_eq!(method_config(&base, "svgd").unwrap().method, Method::Svgd);
        let l2 = method_config(&base, "ept-l2").unwrap();
        assert_eq!(l2.objective.variant, FitVariant::DensityDiff);
        l2.validate().unwrap();
        assert_eq!(method_config(&base, "ept-kl").unwrap().divergence, "kl");
        assert!(method_config(&base, "gan").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&EptError::Config("x".into())), 2);
        assert_eq!(exit_code(&EptError::Diverged { step: 1, loss: 1e9 }), 3);
        assert_eq!(exit_code(&EptError::NonFiniteVelocity { index: 0 }), 3);
    }

    #[test]
    fn hash_depends_on_values() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![1.0, 2.5]);
        assert_ne!(tensor_hash(&a), tensor_hash(&b));
        assert_eq!(tensor_hash(&a).len(), 64);
    }
}
