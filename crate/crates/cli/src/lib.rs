//! The `mtgp` command-line tool: fit, predict, benchmark, map and synth.
//!
//! Exit codes: 0 success, 2 configuration, 3 data validation, 4 numerical
//! failure, 5 I/O.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mtgp::data::{load_spectra_csv, resample_spectrum, HyperCube, SpectraTable, TargetScaler};
use mtgp::experiment::ExperimentResult;
use mtgp::{
    fit, predict_map, prepare_cube, r_squared, run_experiment, Error, ExperimentPlan, MapOptions,
    Method, OptimizerSettings, Result, SavedModel,
};
use nalgebra::DMatrix;

pub use config::{RunConfig, SynthConfig};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_IO: i32 = 5;

pub const DEFAULT_METHODS: [&str; 4] = ["gp-se", "mtgp-sc-se", "mtgp-sn-se", "mtgp-comp-se-nn"];
pub const DEFAULT_FIT_METHOD: &str = "mtgp-comp-se-nn";
pub const DEFAULT_TRIALS: usize = 50;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        _ if e.is_numerical() => EXIT_NUMERICAL,
        Error::Config(_) | Error::Parameter(_) => EXIT_CONFIG,
        Error::Io(_) | Error::ModelFile(_) => EXIT_IO,
        _ => EXIT_DATA,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mtgp",
    version,
    about = "Multitask Gaussian process regression for hyperspectral data"
)]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model on all labelled data and save it.
    Fit(FitArgs),
    /// Predict tasks for the spectra in a CSV file.
    Predict(PredictArgs),
    /// Repeated-trial comparison of methods.
    Benchmark(BenchmarkArgs),
    /// Per-pixel prediction maps from a hyperspectral cube.
    Map(MapArgs),
    /// Write a synthetic two-task spectra table.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Default)]
pub struct TaskArgs {
    /// Spectra CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Primary task name.
    #[arg(long)]
    pub primary: Option<String>,
    /// Secondary task names.
    #[arg(long, value_delimiter = ',')]
    pub secondary: Option<Vec<String>>,
}

#[derive(Debug, Args, Default)]
pub struct OptArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct SynthFlags {
    /// Number of samples.
    #[arg(long = "synth-samples")]
    pub samples: Option<usize>,
    /// Number of labelled primary samples.
    #[arg(long = "synth-primary-labels")]
    pub primary_labels: Option<usize>,
    /// Number of bands.
    #[arg(long = "synth-bands")]
    pub bands: Option<usize>,
    /// Off-diagonal of the first task matrix.
    #[arg(long = "synth-coupling")]
    pub coupling: Option<f64>,
    /// Noise variance of every task.
    #[arg(long = "synth-noise")]
    pub noise: Option<f64>,
}

impl SynthFlags {
    fn into_config(self) -> Option<SynthConfig> {
        let c = SynthConfig {
            samples: self.samples,
            primary_labels: self.primary_labels,
            bands: self.bands,
            coupling: self.coupling,
            noise: self.noise,
        };
        (c != SynthConfig::default()).then_some(c)
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub tasks: TaskArgs,
    #[command(flatten)]
    pub opt: OptArgs,
    /// Method id, e.g. gp-se, mtgp-sc-sum, mtgp-sn-nn, mtgp-comp-se-nn.
    #[arg(long)]
    pub method: Option<String>,
    /// Rank of each task matrix (terms, then noise).
    #[arg(long, value_delimiter = ',')]
    pub ranks: Option<Vec<usize>>,
    /// Output model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Fit log (default: model path with `.log` appended).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Tasks to predict (default: all model tasks).
    #[arg(long, value_delimiter = ',')]
    pub tasks: Option<Vec<String>>,
    /// Output CSV (default: standard output).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Add the task noise variance to the reported variance.
    #[arg(long)]
    pub with_noise: bool,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub tasks: TaskArgs,
    #[command(flatten)]
    pub opt: OptArgs,
    /// Comma-separated method ids.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Candidate ranks for every task matrix.
    #[arg(long, value_delimiter = ',')]
    pub ranks: Option<Vec<usize>>,
    /// Concurrent trials.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Refit on the whole training set after rank selection.
    #[arg(long)]
    pub refit: bool,
    /// Report successful trials when some fail.
    #[arg(long)]
    pub allow_partial: bool,
    /// Print the resolved plan and exit.
    #[arg(long)]
    pub dry_run: bool,
    /// Use generated data instead of --data.
    #[arg(long)]
    pub synthetic: bool,
    #[command(flatten)]
    pub synth: SynthFlags,
    /// Directory for summary.txt, summary.json and trials.jsonl.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Raw band-sequential cube.
    #[arg(long)]
    pub cube: Option<PathBuf>,
    /// JSON sidecar (default: cube path with a `.json` extension).
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub tasks: Option<Vec<String>>,
    /// Water band range to remove, `LO:HI` in nm; repeatable.
    #[arg(long = "water-band", value_parser = parse_range)]
    pub water_bands: Option<Vec<(f64, f64)>>,
    /// Do not remove any bands.
    #[arg(long)]
    pub keep_water_bands: bool,
    #[arg(long)]
    pub ndvi_red: Option<f64>,
    #[arg(long)]
    pub ndvi_nir: Option<f64>,
    #[arg(long)]
    pub ndvi_threshold: Option<f64>,
    /// Predict every pixel.
    #[arg(long)]
    pub no_mask: bool,
    /// Rows predicted concurrently.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub synth: SynthFlags,
    /// Output CSV (default: standard output).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or("expected LO:HI")?;
    let lo: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((lo, hi))
}

fn some(b: bool) -> Option<bool> {
    b.then_some(true)
}

impl Command {
    /// Flag values as a configuration overlay.
    fn overrides(&self) -> RunConfig {
        let mut c = RunConfig::default();
        let tasks = |c: &mut RunConfig, t: &TaskArgs| {
            c.data = t.data.clone();
            c.primary = t.primary.clone();
            c.secondary = t.secondary.clone();
        };
        let opt = |c: &mut RunConfig, o: &OptArgs| {
            c.seed = o.seed;
            c.restarts = o.restarts;
            c.max_iterations = o.max_iterations;
        };
        match self {
            Command::Fit(a) => {
                tasks(&mut c, &a.tasks);
                opt(&mut c, &a.opt);
                c.method = a.method.clone();
                c.ranks = a.ranks.clone();
                c.model = a.model.clone();
                c.log = a.log.clone();
            }
            Command::Predict(a) => {
                c.model = a.model.clone();
                c.data = a.data.clone();
                c.tasks = a.tasks.clone();
                c.output = a.output.clone();
                c.with_noise = some(a.with_noise);
            }
            Command::Benchmark(a) => {
                tasks(&mut c, &a.tasks);
                opt(&mut c, &a.opt);
                c.methods = a.methods.clone();
                c.trials = a.trials;
                c.ranks = a.ranks.clone();
                c.jobs = a.jobs;
                c.refit = some(a.refit);
                c.allow_partial = some(a.allow_partial);
                c.output = a.output.clone();
                c.dry_run = some(a.dry_run);
                let s = clone_synth(&a.synth).into_config();
                if a.synthetic || s.is_some() {
                    c.synthetic = Some(s.unwrap_or_default());
                }
            }
            Command::Map(a) => {
                c.model = a.model.clone();
                c.cube = a.cube.clone();
                c.sidecar = a.sidecar.clone();
                c.output = a.output.clone();
                c.tasks = a.tasks.clone();
                c.water_bands = a.water_bands.clone();
                c.keep_water_bands = some(a.keep_water_bands);
                c.ndvi_red = a.ndvi_red;
                c.ndvi_nir = a.ndvi_nir;
                c.ndvi_threshold = a.ndvi_threshold;
                c.no_mask = some(a.no_mask);
                c.jobs = a.jobs;
            }
            Command::Synth(a) => {
                c.seed = a.seed;
                c.output = a.output.clone();
                c.synthetic = Some(clone_synth(&a.synth).into_config().unwrap_or_default());
            }
        }
        c
    }
}

fn clone_synth(s: &SynthFlags) -> SynthFlags {
    SynthFlags {
        samples: s.samples,
        primary_labels: s.primary_labels,
        bands: s.bands,
        coupling: s.coupling,
        noise: s.noise,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return e.exit_code();
        }
    };
    match execute(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: &Cli, out: &mut dyn Write, err: &mut (dyn Write + Send)) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.merge(cli.command.overrides());
    if cli.quiet {
        cfg.quiet = Some(true);
    }
    match &cli.command {
        Command::Fit(_) => cmd_fit(&cfg, out).map(|_| ()),
        Command::Predict(_) => cmd_predict(&cfg, out),
        Command::Benchmark(_) => cmd_benchmark(&cfg, out, err).map(|_| ()),
        Command::Map(_) => cmd_map(&cfg, out).map(|_| ()),
        Command::Synth(_) => cmd_synth(&cfg, out),
    }
}

fn io_write(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())?;
    Ok(())
}

/// Index of every named task, or a configuration error listing valid names.
pub fn resolve_tasks(names: &[String], names_available: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            names_available.iter().position(|a| a == n).ok_or_else(|| {
                Error::Config(format!(
                    "unknown task `{n}`; valid tasks: {}",
                    names_available.join(", ")
                ))
            })
        })
        .collect()
}

/// Primary and secondary task indices; defaults to the first task as primary
/// and all others as secondary.
fn task_selection(cfg: &RunConfig, table: &SpectraTable) -> Result<(usize, Vec<usize>)> {
    let names = table.task_names();
    if names.is_empty() {
        return Err(Error::Validation("the data has no task columns".into()));
    }
    let primary = match &cfg.primary {
        Some(p) => resolve_tasks(std::slice::from_ref(p), names)?[0],
        None => 0,
    };
    let secondary = match &cfg.secondary {
        Some(s) => resolve_tasks(s, names)?,
        None => (0..names.len()).filter(|&t| t != primary).collect(),
    };
    Ok((primary, secondary))
}

fn optimizer(cfg: &RunConfig) -> OptimizerSettings {
    let mut o = OptimizerSettings {
        seed: cfg.seed(),
        ..OptimizerSettings::default()
    };
    if let Some(r) = cfg.restarts {
        o.num_restarts = r;
    }
    if let Some(m) = cfg.max_iterations {
        o.max_iterations = m;
    }
    o
}

fn load_table(cfg: &RunConfig) -> Result<SpectraTable> {
    if let Some(s) = &cfg.synthetic {
        return s.spec(cfg.seed()).generate();
    }
    load_spectra_csv(RunConfig::require(&cfg.data, "data")?)
}

/// Fits a model on every labelled pair of the selected tasks and writes the
/// model file and fit log.
pub fn cmd_fit(cfg: &RunConfig, out: &mut dyn Write) -> Result<SavedModel> {
    let model_path = RunConfig::require(&cfg.model, "model")?;
    let table = load_table(cfg)?;
    let method: Method = cfg
        .method
        .as_deref()
        .unwrap_or(DEFAULT_FIT_METHOD)
        .parse()?;
    let (primary, secondary) = task_selection(cfg, &table)?;
    let mut tasks = vec![primary];
    if !method.is_single_task() {
        tasks.extend(secondary);
    }
    let table = table.select_tasks(&tasks)?;
    let m = table.num_tasks();
    let ranks = match &cfg.ranks {
        Some(r) => r.clone(),
        None if method.is_single_task() => vec![0],
        None => vec![1.min(m); method.num_task_matrices()],
    };
    let opt = optimizer(cfg);
    opt.validate()?;
    let data = table.observations();
    let scaler = TargetScaler::fit(&data);
    let config = method.config(m, &ranks)?;
    let fitted = fit(&config, &scaler.transform(&data), &opt)?;
    let saved = SavedModel {
        model: fitted,
        scaler,
        method: Some(method),
        task_names: table.task_names().to_vec(),
        wavelengths: table.wavelengths().to_vec(),
    };
    saved.save(model_path)?;

    let log_path = cfg.log.clone().unwrap_or_else(|| {
        let mut p = model_path.as_os_str().to_owned();
        p.push(".log");
        PathBuf::from(p)
    });
    let log = fit_log(&saved, &ranks, &opt, data.len());
    fs::write(&log_path, &log)?;
    io_write(
        out,
        &format!(
            "fitted {} on {} observations of {}; NLML {:.6}\nmodel: {}\nlog: {}\n",
            method,
            data.len(),
            saved.task_names.join(", "),
            saved.model.nlml(),
            model_path.display(),
            log_path.display()
        ),
    )?;
    Ok(saved)
}

fn fit_log(saved: &SavedModel, ranks: &[usize], opt: &OptimizerSettings, n: usize) -> String {
    let m = &saved.model;
    let mut s = String::new();
    let method = saved.method.map(|m| m.to_string()).unwrap_or_default();
    let _ = writeln!(s, "method: {method}");
    let _ = writeln!(s, "tasks: {}", saved.task_names.join(", "));
    let _ = writeln!(s, "ranks: {ranks:?}");
    let _ = writeln!(s, "observations: {n}");
    let _ = writeln!(s, "seed: {}", opt.seed);
    let _ = writeln!(s, "restarts:");
    for r in m.restarts() {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(
            s,
            "  #{} seed={} initial={} final={} iterations={} termination={}{}",
            r.restart,
            r.seed,
            f(r.initial_f),
            f(r.final_f),
            r.iterations,
            r.termination.map_or("-".to_string(), |t| format!("{t:?}")),
            r.error
                .as_ref()
                .map_or(String::new(), |e| format!(" error={e}")),
        );
    }
    let _ = writeln!(s, "nlml: {:.10}", m.nlml());
    let _ = writeln!(s, "jitter: {:e}", m.jitter());
    let _ = writeln!(s, "parameters:");
    let cfg = m.config();
    for (name, v) in cfg.param_names().iter().zip(cfg.params()) {
        let _ = writeln!(s, "  {name} = {v}");
    }
    s
}

/// Predictive mean and variance for each sample of a spectra CSV.
pub fn cmd_predict(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let model = SavedModel::load(RunConfig::require(&cfg.model, "model")?)?;
    let table = load_spectra_csv(RunConfig::require(&cfg.data, "data")?)?;
    let tasks = match &cfg.tasks {
        Some(t) => resolve_tasks(t, &model.task_names)?,
        None => (0..model.task_names.len()).collect(),
    };
    let xs = if table.wavelengths() == model.wavelengths.as_slice() {
        table.spectra().clone()
    } else {
        let rows: Vec<Vec<f64>> = table
            .spectra()
            .row_iter()
            .map(|r| {
                let v: Vec<f64> = r.iter().cloned().collect();
                resample_spectrum(table.wavelengths(), &v, &model.wavelengths)
            })
            .collect::<Result<_>>()?;
        DMatrix::from_fn(rows.len(), model.wavelengths.len(), |i, j| rows[i][j])
    };
    let with_noise = RunConfig::flag(cfg.with_noise);
    let mut cols = Vec::new();
    for &t in &tasks {
        let (mean, mut var) = model.predict(&xs, t)?;
        if with_noise {
            let nv = model.noise_variance(t);
            var.iter_mut().for_each(|v| *v += nv);
        }
        cols.push((t, mean, var));
    }

    let mut text = String::from("sample");
    for (t, _, _) in &cols {
        let name = &model.task_names[*t];
        let _ = write!(text, ",{name}_mean,{name}_var");
    }
    text.push('\n');
    for i in 0..xs.nrows() {
        let _ = write!(text, "{i}");
        for (_, mean, var) in &cols {
            let _ = write!(text, ",{},{}", mean[i], var[i]);
        }
        text.push('\n');
    }
    match &cfg.output {
        Some(p) => fs::write(p, &text)?,
        None => io_write(out, &text)?,
    }
    if !RunConfig::flag(cfg.quiet) {
        for (t, mean, _) in &cols {
            if let Some(lt) = table.task_index(&model.task_names[*t]) {
                let idx = table.labelled(lt);
                let y: Vec<f64> = idx.iter().map(|&i| table.label(i, lt).unwrap()).collect();
                let p: Vec<f64> = idx.iter().map(|&i| mean[i]).collect();
                if let Ok(r2) = r_squared(&y, &p) {
                    if cfg.output.is_some() {
                        io_write(
                            out,
                            &format!(
                                "{}: r2 = {r2:.4} on {} labelled samples\n",
                                model.task_names[*t],
                                y.len()
                            ),
                        )?;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Resolves the experiment plan from the configuration.
pub fn benchmark_plan(cfg: &RunConfig, table: &SpectraTable) -> Result<ExperimentPlan> {
    let (primary, secondary) = task_selection(cfg, table)?;
    let methods = match &cfg.methods {
        Some(m) => m
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<Method>>>()?,
        None => DEFAULT_METHODS
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<Method>>>()?,
    };
    let m = 1 + secondary.len();
    let plan = ExperimentPlan {
        methods,
        primary_task: primary,
        secondary_tasks: secondary,
        num_trials: cfg.trials.unwrap_or(DEFAULT_TRIALS),
        candidate_ranks: cfg.ranks.clone().unwrap_or_else(|| (0..=m).collect()),
        optimizer: optimizer(cfg),
        base_seed: cfg.seed(),
        refit: RunConfig::flag(cfg.refit),
        allow_partial: RunConfig::flag(cfg.allow_partial),
    };
    plan.validate(table)?;
    Ok(plan)
}

fn plan_text(plan: &ExperimentPlan, table: &SpectraTable, jobs: usize) -> String {
    let names = table.task_names();
    let mut s = String::new();
    let _ = writeln!(s, "primary: {}", names[plan.primary_task]);
    let sec: Vec<&str> = plan
        .secondary_tasks
        .iter()
        .map(|&t| names[t].as_str())
        .collect();
    let _ = writeln!(s, "secondary: {}", sec.join(", "));
    let _ = writeln!(
        s,
        "samples: {} ({} primary labels)",
        table.num_samples(),
        table.labelled(plan.primary_task).len()
    );
    let _ = writeln!(s, "trials: {}", plan.num_trials);
    let _ = writeln!(s, "seed: {}", plan.base_seed);
    let _ = writeln!(s, "jobs: {jobs}");
    let _ = writeln!(s, "refit: {}", plan.refit);
    let _ = writeln!(s, "allow_partial: {}", plan.allow_partial);
    let o = &plan.optimizer;
    let _ = writeln!(
        s,
        "optimizer: restarts={} max_iterations={} gtol={:e}",
        o.num_restarts, o.max_iterations, o.gradient_tolerance
    );
    let _ = writeln!(s, "methods:");
    for m in &plan.methods {
        let _ = writeln!(
            s,
            "  {} [{}] rank candidates {:?}",
            m,
            m.id(),
            plan.rank_candidates(m)
        );
    }
    s
}

/// Runs the repeated-trial comparison and prints the summary table.
pub fn cmd_benchmark(
    cfg: &RunConfig,
    out: &mut dyn Write,
    err: &mut (dyn Write + Send),
) -> Result<Option<ExperimentResult>> {
    let table = load_table(cfg)?;
    let plan = benchmark_plan(cfg, &table)?;
    let jobs = cfg.jobs();
    if let Some(dir) = &cfg.output {
        fs::create_dir_all(dir)?;
    }
    if RunConfig::flag(cfg.dry_run) {
        io_write(out, &plan_text(&plan, &table, jobs))?;
        return Ok(None);
    }
    let quiet = RunConfig::flag(cfg.quiet);
    let progress = std::sync::Mutex::new(err);
    let result = run_experiment(&table, &plan, jobs, |method, t, r| {
        if quiet {
            return;
        }
        let line = match r {
            Ok(rep) => format!(
                "[{}] trial {} ranks {:?} test r2 {:.4} ({:.1}s)\n",
                method.id(),
                t,
                rep.selected_ranks,
                rep.test_r2,
                rep.wall_time_secs
            ),
            Err(e) => format!("[{}] trial {} failed: {e}\n", method.id(), t),
        };
        if let Ok(mut w) = progress.lock() {
            let _ = w.write_all(line.as_bytes());
        }
    })?;
    let text = result.summary.to_text();
    io_write(out, &text)?;
    if let Some(dir) = &cfg.output {
        write_benchmark(dir, &result, &text)?;
    }
    Ok(Some(result))
}

fn write_benchmark(dir: &Path, result: &ExperimentResult, text: &str) -> Result<()> {
    fs::write(dir.join("summary.txt"), text)?;
    let json = serde_json::to_string_pretty(&result.summary)
        .map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(dir.join("summary.json"), json)?;
    let mut lines = String::new();
    for r in &result.reports {
        lines.push_str(&serde_json::to_string(r).map_err(|e| Error::Validation(e.to_string()))?);
        lines.push('\n');
    }
    fs::write(dir.join("trials.jsonl"), lines)?;
    if !result.failures.is_empty() {
        let mut f = String::new();
        for (m, t, e) in &result.failures {
            let _ = writeln!(f, "{m}\t{t}\t{e}");
        }
        fs::write(dir.join("failures.tsv"), f)?;
    }
    Ok(())
}

/// Writes a prediction map per task (plus the vegetation mask) and returns
/// the maps in task order.
pub fn cmd_map(
    cfg: &RunConfig,
    out: &mut dyn Write,
) -> Result<Vec<(String, mtgp::data::PredictionMap)>> {
    let model = SavedModel::load(RunConfig::require(&cfg.model, "model")?)?;
    let cube_path = RunConfig::require(&cfg.cube, "cube")?;
    let sidecar = cfg
        .sidecar
        .clone()
        .unwrap_or_else(|| cube_path.with_extension("json"));
    let dir = RunConfig::require(&cfg.output, "output")?;
    let cube = HyperCube::read(cube_path, &sidecar)?;
    let tasks = match &cfg.tasks {
        Some(t) => resolve_tasks(t, &model.task_names)?,
        None => (0..model.task_names.len()).collect(),
    };
    let defaults = MapOptions::default();
    let opts = MapOptions {
        water_bands: cfg.water_bands(),
        red_nm: cfg.ndvi_red.unwrap_or(defaults.red_nm),
        nir_nm: cfg.ndvi_nir.unwrap_or(defaults.nir_nm),
        ndvi_threshold: cfg.ndvi_threshold.unwrap_or(defaults.ndvi_threshold),
        apply_mask: !RunConfig::flag(cfg.no_mask),
    };
    let prepared = prepare_cube(&cube, &model.wavelengths, &opts)?;
    fs::create_dir_all(dir)?;
    prepared.mask.to_map().write(dir, "mask")?;
    let mut maps = Vec::new();
    for t in tasks {
        let name = model.task_names[t].clone();
        let map = predict_map(&model, &prepared, t, cfg.jobs())?;
        map.write(dir, &file_stem(&name))?;
        let (lo, hi) = map.range().unwrap_or((f64::NAN, f64::NAN));
        io_write(
            out,
            &format!(
                "{name}: {} pixels predicted, range [{lo:.4}, {hi:.4}]\n",
                prepared.mask.count()
            ),
        )?;
        maps.push((name, map));
    }
    Ok(maps)
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes a synthetic spectra table.
pub fn cmd_synth(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let spec = cfg.synthetic.clone().unwrap_or_default().spec(cfg.seed());
    let table = spec.generate()?;
    let mut buf = Vec::new();
    table.to_writer(&mut buf)?;
    match &cfg.output {
        Some(p) => fs::write(p, buf)?,
        None => out.write_all(&buf)?,
    }
    Ok(())
}
