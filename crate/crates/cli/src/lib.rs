//! The `csitr` command line: simulate data, fit rules, evaluate them and run
//! the Monte Carlo grid.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use csitr::data::Dataset;
use csitr::evaluation::{evaluate, PropensitySource};
use csitr::experiments::{
    aggregate_table, render_tables, run_experiment, write_results, write_summary, ExperimentConfig, Method,
};
use csitr::federation::{build_sites, fit_avg, fit_dce, fit_fce, fit_initial, FitConfig, Hyper};
use csitr::gcd::{GcdOptions, Standardization};
use csitr::nuisance::{
    contrasts, fit_logistic, fit_nuisance, pseudo_labels, LogisticOptions, NuisanceMode, PropensityClip,
};
use csitr::objective::RuleCoefficients;
use csitr::simgen::{gen_dataset, seeded_partition, CovariateLaw, Design, PartitionPolicy, Scenario, ScenarioSpec};
use csitr::smoothing::KernelKind;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] csitr::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use csitr::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::InvalidConfig(_)
                | E::InvalidBandwidth(_)
                | E::BandwidthOrder { .. }
                | E::BadShape(_)
                | E::DimensionMismatch { .. }
                | E::MissingTruth => 2,
                E::Io(_) | E::Csv(_) | E::Json(_) => 3,
                E::NonFinite(_) | E::NonConvergence { .. } | E::ZeroCurvature(_) | E::MissingReply(_) => 4,
                E::DegenerateDesign(_) | E::ConstantColumn(_) | E::EmptySite(_) | E::EmptySample => 5,
                E::EmptyIntersection => 6,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "csitr",
    version,
    about = "Smoothed-hinge treatment rules on pooled and distributed data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a simulated dataset CSV and its spec sidecar
    Simulate(SimulateArgs),
    /// Fit a rule and write the model JSON
    Fit(FitArgs),
    /// Score a model on a test CSV
    Eval(EvalArgs),
    /// Run a Monte Carlo grid and write result tables
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScenarioArg {
    A,
    B,
    C,
    D,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::A => Scenario::A,
            ScenarioArg::B => Scenario::B,
            ScenarioArg::C => Scenario::C,
            ScenarioArg::D => Scenario::D,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DesignArg {
    Rct,
    #[value(alias = "observational")]
    Obs,
}

impl From<DesignArg> for Design {
    fn from(d: DesignArg) -> Self {
        match d {
            DesignArg::Rct => Design::Rct,
            DesignArg::Obs => Design::Observational,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CovariatesArg {
    Uniform,
    Normal,
}

impl From<CovariatesArg> for CovariateLaw {
    fn from(c: CovariatesArg) -> Self {
        match c {
            CovariatesArg::Uniform => CovariateLaw::Uniform,
            CovariatesArg::Normal => CovariateLaw::Normal,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PartitionArg {
    Balanced,
    Spread,
}

impl From<PartitionArg> for PartitionPolicy {
    fn from(p: PartitionArg) -> Self {
        match p {
            PartitionArg::Balanced => PartitionPolicy::Balanced,
            PartitionArg::Spread => PartitionPolicy::Spread,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Dce,
    Fce,
    Avg,
    Initial,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Dce => Method::Dce,
            MethodArg::Fce => Method::Fce,
            MethodArg::Avg => Method::Avg,
            MethodArg::Initial => Method::Initial,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KernelArg {
    Epanechnikov,
    Uniform,
    Gaussian,
}

impl From<KernelArg> for KernelKind {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Epanechnikov => KernelKind::Epanechnikov,
            KernelArg::Uniform => KernelKind::Uniform,
            KernelArg::Gaussian => KernelKind::Gaussian,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NuisanceArg {
    Dnc,
    CentralOnly,
}

impl From<NuisanceArg> for NuisanceMode {
    fn from(n: NuisanceArg) -> Self {
        match n {
            NuisanceArg::Dnc => NuisanceMode::Dnc,
            NuisanceArg::CentralOnly => NuisanceMode::CentralOnly,
        }
    }
}

/// `auto` or an explicit number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutoValue(pub Option<f64>);

fn parse_auto(s: &str) -> std::result::Result<AutoValue, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(AutoValue(None));
    }
    s.parse::<f64>()
        .map(|v| AutoValue(Some(v)))
        .map_err(|_| format!("expected `auto` or a number, got `{s}`"))
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub scenario: ScenarioArg,
    #[arg(long, value_enum, default_value = "obs")]
    pub design: DesignArg,
    /// Total sample size
    #[arg(long = "N", value_name = "N")]
    pub n_total: usize,
    /// Number of sites
    #[arg(long, default_value_t = 1)]
    pub sites: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Covariate dimension (at least 5)
    #[arg(long, default_value_t = 5)]
    pub p: usize,
    #[arg(long, default_value_t = 0.5)]
    pub noise_sd: f64,
    /// Site sizes when the site count does not divide N
    #[arg(long, value_enum, default_value = "balanced")]
    pub partition: PartitionArg,
    /// Covariate law (uniform on [-1, 1] or standard normal)
    #[arg(long, value_enum, default_value = "uniform")]
    pub covariates: CovariatesArg,
    /// Omit the delta_star and prop_true columns
    #[arg(long)]
    pub no_truth: bool,
    /// Also write the site assignment as an `id,site` CSV
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Dataset CSV; generating settings go to `<out>.json`
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Training CSV
    #[arg(long)]
    pub data: PathBuf,
    /// Site count for a seeded random split, or an `id,site` manifest CSV
    #[arg(long, default_value = "1")]
    pub sites: String,
    /// Fine bandwidth h, or auto for N^(-1/3)
    #[arg(long, value_parser = parse_auto, default_value = "auto")]
    pub h: AutoValue,
    /// Central-site bandwidth b, or auto for n^(-1/3)
    #[arg(long, value_parser = parse_auto, default_value = "auto")]
    pub b: AutoValue,
    /// Ridge penalty, or auto for N^(-1/2)
    #[arg(long, value_parser = parse_auto, default_value = "auto")]
    pub lambda: AutoValue,
    /// Communication rounds (dce)
    #[arg(long, default_value_t = 10)]
    pub rounds: usize,
    #[arg(long, value_enum, default_value = "epanechnikov")]
    pub kernel: KernelArg,
    /// How the shared nuisance fit is pooled across sites
    #[arg(long, value_enum, default_value = "dnc")]
    pub nuisance: NuisanceArg,
    /// Seed of the random site split
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "balanced")]
    pub partition: PartitionArg,
    /// Lower propensity clip
    #[arg(long, default_value_t = 0.01)]
    pub clip_lo: f64,
    /// Upper propensity clip
    #[arg(long, default_value_t = 0.99)]
    pub clip_hi: f64,
    /// Coordinate-descent sweep cap per solve
    #[arg(long, default_value_t = 10_000)]
    pub max_sweeps: usize,
    /// JSON file of fit settings; explicit flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model JSON
    #[arg(long)]
    pub out: PathBuf,
    /// Round transcript as JSON lines (dce only)
    #[arg(long)]
    pub transcript: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model JSON written by `fit`
    #[arg(long)]
    pub model: PathBuf,
    /// Test CSV
    #[arg(long)]
    pub test: PathBuf,
    /// Append the result row to this CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Lower clip for an estimated propensity
    #[arg(long, default_value_t = 0.01)]
    pub clip_lo: f64,
    /// Upper clip for an estimated propensity
    #[arg(long, default_value_t = 0.99)]
    pub clip_hi: f64,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment JSON; omitted fields take the full-grid defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for results.csv and summary.csv
    #[arg(long, default_value = "results")]
    pub out_dir: PathBuf,
    /// Replications per cell [default: from config, else 20]
    #[arg(long)]
    pub reps: Option<usize>,
    /// Master seed [default: from config, else 2024]
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Settings a `fit --config` file may carry.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FitFile {
    h: Option<f64>,
    b: Option<f64>,
    lambda: Option<f64>,
    rounds: Option<usize>,
    kernel: Option<KernelKind>,
    nuisance: Option<NuisanceMode>,
    seed: Option<u64>,
    partition: Option<PartitionPolicy>,
    clip_lo: Option<f64>,
    clip_hi: Option<f64>,
    tol: Option<f64>,
    gcd: Option<GcdOptions>,
}

/// Settings recorded in the model file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub h: f64,
    pub b: f64,
    pub lambda: f64,
    pub rounds: usize,
    pub kernel: KernelKind,
    pub nuisance: NuisanceMode,
    pub sites: usize,
    pub n_total: usize,
    pub n_central: usize,
    pub seed: u64,
    pub partition: PartitionPolicy,
    pub clip: PropensityClip,
    pub tol: f64,
    pub gcd: GcdOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub method: Method,
    pub beta: Vec<f64>,
    pub standardization: Option<Standardization>,
    pub config: ResolvedConfig,
    pub diagnostics: serde_json::Value,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    match run(cli.command, sub) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("ITR_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("ITR_THREADS must be a positive integer, got `{raw}`")))?;
    // a pool built earlier in the same process is kept
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(command: Command, matches: &ArgMatches) -> CliResult<()> {
    match command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Fit(a) => cmd_fit(&a, matches),
        Command::Eval(a) => cmd_eval(&a),
        Command::Experiment(a) => cmd_experiment(&a),
    }
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        })
    }
}

fn require_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(CliError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        }),
        _ => Ok(()),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    require_parent(&a.out)?;
    if let Some(m) = &a.manifest {
        require_parent(m)?;
    }
    let spec = ScenarioSpec {
        p: a.p,
        noise_sd: a.noise_sd,
        partition: a.partition.into(),
        covariates: a.covariates.into(),
        ..ScenarioSpec::new(a.scenario.into(), a.design.into(), a.n_total, a.sites, a.seed)
    };
    if let Err(e) = spec.validate() {
        return Err(match e {
            csitr::Error::BadShape(_) if a.sites > 0 && a.n_total % a.sites != 0 => CliError::Usage(format!(
                "{} sites do not divide N = {} evenly (remainder {}); pass --partition spread to give the first sites one extra unit",
                a.sites,
                a.n_total,
                a.n_total % a.sites
            )),
            other => other.into(),
        });
    }
    let generated = gen_dataset(&spec)?;
    let mut w = create(&a.out)?;
    generated.data.write_csv(&mut w, !a.no_truth)?;
    w.flush().map_err(io_at(&a.out))?;

    let sidecar = sidecar_path(&a.out);
    let meta = json!({
        "spec": spec,
        "rows": generated.data.len(),
        "truth_columns": !a.no_truth,
        "site_sizes": generated.sites.iter().map(Vec::len).collect::<Vec<_>>(),
    });
    let mut w = create(&sidecar)?;
    serde_json::to_writer_pretty(&mut w, &meta).map_err(csitr::Error::from)?;
    writeln!(w).and_then(|_| w.flush()).map_err(io_at(&sidecar))?;

    if let Some(path) = &a.manifest {
        let mut site_of = vec![0usize; generated.data.len()];
        for (k, idx) in generated.sites.iter().enumerate() {
            for &i in idx {
                site_of[i] = k + 1;
            }
        }
        let mut w = csv::Writer::from_writer(create(path)?);
        w.write_record(["id", "site"]).map_err(csitr::Error::from)?;
        for (i, s) in site_of.iter().enumerate() {
            w.write_record([(i + 1).to_string(), s.to_string()])
                .map_err(csitr::Error::from)?;
        }
        w.flush().map_err(io_at(path))?;
    }
    println!("wrote {} rows to {}", generated.data.len(), a.out.display());
    Ok(())
}

/// Unit ids of a dataset CSV; row numbers from 1 when there is no `id` column.
fn read_ids(path: &Path, n: usize) -> CliResult<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?);
    let header = r.headers().map_err(csitr::Error::from)?.clone();
    let Some(col) = header.iter().position(|h| h == "id") else {
        return Ok((1..=n).map(|i| i.to_string()).collect());
    };
    let mut ids = Vec::with_capacity(n);
    for rec in r.records() {
        let rec = rec.map_err(csitr::Error::from)?;
        ids.push(rec.get(col).unwrap_or("").to_string());
    }
    Ok(ids)
}

/// Site index lists from an `id,site` manifest; sites are numbered from 1.
pub fn read_manifest(path: &Path, ids: &[String]) -> CliResult<Vec<Vec<usize>>> {
    let row_of: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    if row_of.len() != ids.len() {
        return Err(CliError::Usage("data file has duplicate ids".into()));
    }
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?);
    let header = r.headers().map_err(csitr::Error::from)?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Usage(format!("manifest {} lacks an `{name}` column", path.display())))
    };
    let (id_col, site_col) = (col("id")?, col("site")?);
    let mut site_of: Vec<Option<usize>> = vec![None; ids.len()];
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csitr::Error::from)?;
        let id = rec.get(id_col).unwrap_or("");
        let site: usize = rec
            .get(site_col)
            .and_then(|s| s.parse().ok())
            .filter(|&s| s >= 1)
            .ok_or_else(|| CliError::Usage(format!("manifest row {}: site must be a positive integer", line + 1)))?;
        let &row = row_of
            .get(id)
            .ok_or_else(|| CliError::Usage(format!("manifest id `{id}` is not in the data")))?;
        if site_of[row].replace(site).is_some() {
            return Err(CliError::Usage(format!("manifest assigns id `{id}` twice")));
        }
    }
    if let Some(i) = site_of.iter().position(Option::is_none) {
        return Err(CliError::Usage(format!("manifest does not assign id `{}`", ids[i])));
    }
    let m = site_of.iter().flatten().copied().max().unwrap_or(0);
    let mut sites = vec![Vec::new(); m];
    for (i, s) in site_of.into_iter().enumerate() {
        sites[s.expect("checked above") - 1].push(i);
    }
    if let Some(k) = sites.iter().position(Vec::is_empty) {
        return Err(CliError::Core(csitr::Error::EmptySite(k + 1)));
    }
    Ok(sites)
}

fn explicit(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Flag value when given on the command line, else the file value, else the flag default.
fn pick<T>(m: &ArgMatches, id: &str, flag: T, file: Option<T>) -> T {
    if explicit(m, id) {
        flag
    } else {
        file.unwrap_or(flag)
    }
}

fn pick_auto(m: &ArgMatches, id: &str, flag: AutoValue, file: Option<f64>) -> Option<f64> {
    if explicit(m, id) {
        flag.0
    } else {
        file.or(flag.0)
    }
}

pub fn cmd_fit(a: &FitArgs, m: &ArgMatches) -> CliResult<()> {
    let method: Method = a.method.into();
    if a.transcript.is_some() && method != Method::Dce {
        return Err(CliError::Usage(format!(
            "--transcript only applies to --method dce, not {method}"
        )));
    }
    require_file(&a.data)?;
    let manifest = match a.sites.parse::<usize>() {
        Ok(k) => Err(k),
        Err(_) => {
            let path = PathBuf::from(&a.sites);
            require_file(&path)?;
            Ok(path)
        }
    };
    if let Some(c) = &a.config {
        require_file(c)?;
    }
    require_parent(&a.out)?;
    if let Some(t) = &a.transcript {
        require_parent(t)?;
    }

    let file: FitFile = match &a.config {
        Some(c) => serde_json::from_reader(open(c)?)
            .map_err(|e| CliError::Usage(format!("{}: invalid fit config: {e}", c.display())))?,
        None => FitFile::default(),
    };
    let gcd = file.gcd.unwrap_or_default();
    let fit = FitConfig {
        rounds: pick(m, "rounds", a.rounds, file.rounds),
        kernel: pick(m, "kernel", a.kernel.into(), file.kernel),
        h: pick_auto(m, "h", a.h, file.h),
        b: pick_auto(m, "b", a.b, file.b),
        lambda: pick_auto(m, "lambda", a.lambda, file.lambda),
        tol: file.tol.unwrap_or(FitConfig::default().tol),
        gcd: GcdOptions {
            max_sweeps: pick(m, "max_sweeps", a.max_sweeps, file.gcd.map(|g| g.max_sweeps)),
            ..gcd
        },
    };
    let nuisance: NuisanceMode = pick(m, "nuisance", a.nuisance.into(), file.nuisance);
    let seed = pick(m, "seed", a.seed, file.seed);
    let partition: PartitionPolicy = pick(m, "partition", a.partition.into(), file.partition);
    let clip = PropensityClip::new(
        pick(m, "clip_lo", a.clip_lo, file.clip_lo),
        pick(m, "clip_hi", a.clip_hi, file.clip_hi),
    )?;

    let data = Dataset::read_csv(open(&a.data)?)?;
    let parts = match manifest {
        Err(k) => seeded_partition(data.len(), k, partition, seed).map_err(|e| match e {
            csitr::Error::BadShape(msg) => CliError::Usage(format!("{msg}; or pass --partition spread or a manifest")),
            other => other.into(),
        })?,
        Ok(path) => read_manifest(&path, &read_ids(&a.data, data.len())?)?,
    };
    let hyper = fit.resolve(data.len(), parts[0].len())?;

    let (beta, standardization, diagnostics) = match method {
        Method::Fce => {
            let nuis = fit_nuisance(&data, LogisticOptions::default())?;
            let pooled = pseudo_labels(&contrasts(&data, &nuis, clip), &data.covariates)?;
            let f = fit_fce(&pooled, &fit.loss(hyper.h)?, hyper.lambda, &fit.gcd)?;
            let diag = json!({"sweeps": f.sweeps, "converged": f.converged, "kkt": f.kkt});
            (f.beta, Some(f.standardization), diag)
        }
        Method::Initial => {
            let setup = build_sites(&data, &parts, nuisance, clip, LogisticOptions::default())?;
            let f = fit_initial(&setup.sites[0], &fit.loss(hyper.b)?, hyper.lambda, &fit.gcd)?;
            let diag = json!({"sweeps": f.sweeps, "converged": f.converged, "kkt": f.kkt});
            (f.beta, Some(f.standardization), diag)
        }
        Method::Dce => {
            let setup = build_sites(&data, &parts, nuisance, clip, LogisticOptions::default())?;
            let r = fit_dce(&setup.sites, &fit)?;
            if let Some(t) = &a.transcript {
                let mut w = create(t)?;
                r.write_transcript(&mut w)?;
                w.flush().map_err(io_at(t))?;
            }
            let diag = json!({
                "rounds": r.rounds,
                "bytes": r.bytes,
                "stopped_early": r.stopped_early,
                "grad_norms": r.grad_norms,
                "sweeps": r.sweeps,
            });
            (r.beta, Some(r.standardization), diag)
        }
        Method::Avg => {
            let setup = build_sites(&data, &parts, nuisance, clip, LogisticOptions::default())?;
            let r = fit_avg(&setup.sites, &fit.loss(hyper.b)?, hyper.lambda, clip, &fit.gcd)?;
            let failures: Vec<_> = r.failures.iter().map(|(s, e)| json!({"site": s, "error": e})).collect();
            (r.beta, None, json!({"failures": failures}))
        }
    };

    let Hyper { h, b, lambda } = hyper;
    let model = ModelFile {
        method,
        beta: beta.to_vec(),
        standardization,
        config: ResolvedConfig {
            h,
            b,
            lambda,
            rounds: fit.rounds,
            kernel: fit.kernel,
            nuisance,
            sites: parts.len(),
            n_total: data.len(),
            n_central: parts[0].len(),
            seed,
            partition,
            clip,
            tol: fit.tol,
            gcd: fit.gcd,
        },
        diagnostics,
    };
    let mut w = create(&a.out)?;
    serde_json::to_writer_pretty(&mut w, &model).map_err(csitr::Error::from)?;
    writeln!(w).and_then(|_| w.flush()).map_err(io_at(&a.out))?;
    println!(
        "{method}: wrote {} coefficients to {}",
        model.beta.len(),
        a.out.display()
    );
    Ok(())
}

/// The part of a model file that evaluation reads.
#[derive(Debug, Deserialize)]
struct ModelCoefficients {
    method: String,
    beta: Vec<f64>,
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    require_file(&a.model)?;
    require_file(&a.test)?;
    if let Some(o) = &a.out {
        require_parent(o)?;
    }
    let model: ModelCoefficients = serde_json::from_reader(open(&a.model)?)
        .map_err(|e| CliError::Usage(format!("{}: not a model file: {e}", a.model.display())))?;
    let beta = RuleCoefficients::from_vec(&model.beta)?;
    let test = Dataset::read_csv(open(&a.test)?)?;
    let clip = PropensityClip::new(a.clip_lo, a.clip_hi)?;
    let result = if test.true_propensity.is_some() {
        evaluate(&beta, &test, PropensitySource::TrueDesign, &model.method, None)?
    } else {
        let fit = fit_logistic(&test.covariates, &test.treatments, LogisticOptions::default())?;
        evaluate(
            &beta,
            &test,
            PropensitySource::Estimated(&fit, clip),
            &model.method,
            None,
        )?
    };
    let ccr = result.ccr.map(csitr::data::format_real).unwrap_or_default();
    let row = [
        result.method.clone(),
        ccr,
        csitr::data::format_real(result.value),
        result.n_test.to_string(),
    ];
    const HEADER: [&str; 4] = ["method", "ccr", "value", "n_test"];
    println!("{}", HEADER.join(","));
    println!("{}", row.join(","));
    if let Some(path) = &a.out {
        let fresh = fs::metadata(path).map(|md| md.len() == 0).unwrap_or(true);
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_at(path))?;
        let mut w = csv::Writer::from_writer(f);
        if fresh {
            w.write_record(HEADER).map_err(csitr::Error::from)?;
        }
        w.write_record(&row).map_err(csitr::Error::from)?;
        w.flush().map_err(io_at(path))?;
    }
    Ok(())
}

pub fn cmd_experiment(a: &ExperimentArgs) -> CliResult<()> {
    if let Some(c) = &a.config {
        require_file(c)?;
    }
    let mut config: ExperimentConfig = match &a.config {
        Some(c) => serde_json::from_reader(open(c)?)
            .map_err(|e| CliError::Usage(format!("{}: invalid experiment config: {e}", c.display())))?,
        None => ExperimentConfig::default(),
    };
    if let Some(r) = a.reps {
        config.reps = r;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.validate()?;
    fs::create_dir_all(&a.out_dir).map_err(io_at(&a.out_dir))?;

    let rows = run_experiment(&config)?;
    let summary = aggregate_table(&rows);
    let results_path = a.out_dir.join("results.csv");
    let mut w = create(&results_path)?;
    write_results(&rows, &mut w)?;
    w.flush().map_err(io_at(&results_path))?;
    let summary_path = a.out_dir.join("summary.csv");
    let mut w = create(&summary_path)?;
    write_summary(&summary, &mut w)?;
    w.flush().map_err(io_at(&summary_path))?;

    print!("{}", render_tables(&summary));
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!(
            "{failed} of {} fits failed; see the error column of {}",
            rows.len(),
            results_path.display()
        );
    }
    Ok(())
}
