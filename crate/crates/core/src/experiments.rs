//! Monte Carlo driver: cells of (scenario, design, N, n), replications,
//! methods, and the per-row and summary CSV tables.

use std::cmp::Ordering;
use std::fmt::{self, Write as _};
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{format_real, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{ccr, empirical_value, PropensitySource};
use crate::federation::{build_sites, fit_avg, fit_dce, fit_fce, fit_initial, FitConfig, HEADER_BYTES, REAL_BYTES};
use crate::nuisance::{contrasts, fit_nuisance, pseudo_labels, LogisticOptions, NuisanceMode, PropensityClip};
use crate::numeric::mix64;
use crate::objective::RuleCoefficients;
use crate::simgen::{
    derive_seed, gen_dataset, gen_units_with, CovariateLaw, Design, PartitionPolicy, Scenario, ScenarioSpec,
};

const TAG_TEST: u64 = 0x7465_7374;
const TAG_TUNE: u64 = 0x7475_6e65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dce,
    Fce,
    Avg,
    Initial,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dce, Method::Fce, Method::Avg, Method::Initial];

    pub fn label(self) -> &'static str {
        match self {
            Method::Dce => "DCE",
            Method::Fce => "FCE",
            Method::Avg => "Avg",
            Method::Initial => "Initial",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Dce => "dce",
            Method::Fce => "fce",
            Method::Avg => "avg",
            Method::Initial => "initial",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dce" => Ok(Method::Dce),
            "fce" => Ok(Method::Fce),
            "avg" => Ok(Method::Avg),
            "initial" => Ok(Method::Initial),
            _ => Err(Error::InvalidConfig(format!(
                "unknown method `{s}` (expected dce, fce, avg or initial)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenarios: Vec<Scenario>,
    pub designs: Vec<Design>,
    /// Total sample sizes `N`.
    pub n_total: Vec<usize>,
    /// Per-site sample sizes `n`; every `N` is paired with every `n`.
    pub n_site: Vec<usize>,
    pub reps: usize,
    pub methods: Vec<Method>,
    pub p: usize,
    pub noise_sd: f64,
    pub n_test: usize,
    pub seed: u64,
    pub fit: FitConfig,
    pub nuisance: NuisanceMode,
    pub clip: PropensityClip,
    pub partition: PartitionPolicy,
    pub covariates: CovariateLaw,
    /// When set, λ is chosen per replication from this grid by held-out value.
    pub lambda_grid: Option<Vec<f64>>,
    /// Fill the `seconds` column; off by default so output is reproducible byte for byte.
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenarios: Scenario::ALL.to_vec(),
            designs: vec![Design::Observational],
            n_total: vec![1000, 3000, 5000],
            n_site: vec![200, 500],
            reps: 20,
            methods: Method::ALL.to_vec(),
            p: 5,
            noise_sd: 0.5,
            n_test: 10_000,
            seed: 2024,
            fit: FitConfig::default(),
            nuisance: NuisanceMode::Dnc,
            clip: PropensityClip::default(),
            partition: PartitionPolicy::Balanced,
            covariates: CovariateLaw::Uniform,
            lambda_grid: None,
            record_timing: false,
        }
    }
}

/// One (scenario, design, N, n) combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub scenario: Scenario,
    pub design: Design,
    pub n_total: usize,
    pub n_site: usize,
}

impl Cell {
    pub fn sites(&self) -> usize {
        self.n_total / self.n_site
    }
}

impl ExperimentConfig {
    /// A single small cell used for smoke runs and reproducibility checks.
    pub fn minimal() -> Self {
        Self {
            scenarios: vec![Scenario::A],
            n_total: vec![600],
            n_site: vec![200],
            reps: 2,
            n_test: 2000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidConfig("reps must be at least 1".into()));
        }
        for (name, empty) in [
            ("scenarios", self.scenarios.is_empty()),
            ("designs", self.designs.is_empty()),
            ("N", self.n_total.is_empty()),
            ("n", self.n_site.is_empty()),
            ("methods", self.methods.is_empty()),
        ] {
            if empty {
                return Err(Error::InvalidConfig(format!("no {name} requested")));
            }
        }
        if self.n_test == 0 {
            return Err(Error::InvalidConfig("test size must be positive".into()));
        }
        for &n in &self.n_site {
            if n == 0 {
                return Err(Error::InvalidConfig("per-site size must be positive".into()));
            }
            for &big in &self.n_total {
                if big < n {
                    return Err(Error::InvalidConfig(format!("N = {big} is smaller than n = {n}")));
                }
                if big % n != 0 && self.partition == PartitionPolicy::Balanced {
                    return Err(Error::InvalidConfig(format!(
                        "N = {big} is not a multiple of n = {n}; balanced sites need M = N/n to be whole"
                    )));
                }
            }
        }
        if let Some(grid) = &self.lambda_grid {
            if grid.is_empty() || grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                return Err(Error::InvalidConfig(
                    "lambda grid must be nonempty, finite and nonnegative".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &scenario in &self.scenarios {
            for &design in &self.designs {
                for &n_total in &self.n_total {
                    for &n_site in &self.n_site {
                        out.push(Cell {
                            scenario,
                            design,
                            n_total,
                            n_site,
                        });
                    }
                }
            }
        }
        out
    }

    fn methods_sorted(&self) -> Vec<Method> {
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: Scenario,
    pub design: Design,
    pub n_total: usize,
    pub n_site: usize,
    pub method: Method,
    pub rep: usize,
    pub ccr: Option<f64>,
    pub value: Option<f64>,
    /// Communication rounds: DCE rounds, 1 for the one-shot average, 0 otherwise.
    pub rounds: usize,
    pub seconds: Option<f64>,
    pub bytes: usize,
    pub error: Option<String>,
}

impl ResultRow {
    fn key(&self) -> (Scenario, Design, usize, usize, usize, Method) {
        (
            self.scenario,
            self.design,
            self.n_total,
            self.n_site,
            self.rep,
            self.method,
        )
    }
}

struct Outcome {
    beta: RuleCoefficients,
    rounds: usize,
    bytes: usize,
}

fn timed<T>(record: bool, f: impl FnOnce() -> T) -> (T, Option<f64>) {
    let start = record.then(Instant::now);
    let out = f();
    (out, start.map(|s| s.elapsed().as_secs_f64()))
}

/// Chooses λ from `grid` by fitting the pooled estimator on three quarters of
/// `train` and scoring the IPW value on the rest.
pub fn select_lambda(train: &Dataset, grid: &[f64], config: &ExperimentConfig, seed: u64) -> Result<f64> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let cut = train.len() * 3 / 4;
    let (fit_idx, val_idx) = idx.split_at(cut);
    let fit_part = train.subset(fit_idx);
    let val_part = train.subset(val_idx);
    let nuis = fit_nuisance(&fit_part, LogisticOptions::default())?;
    let sample = pseudo_labels(&contrasts(&fit_part, &nuis, config.clip), &fit_part.covariates)?;
    let h = config.fit.resolve(train.len(), train.len())?.h;
    let sl = config.fit.loss(h)?;
    let mut best: Option<(f64, f64)> = None;
    for &lambda in grid {
        let beta = fit_fce(&sample, &sl, lambda, &config.fit.gcd)?.beta;
        let v = empirical_value(
            &beta,
            &val_part,
            PropensitySource::Estimated(&nuis.propensity, config.clip),
        )?;
        if best.is_none_or(|(bv, _)| v > bv) {
            best = Some((v, lambda));
        }
    }
    Ok(best.expect("grid is nonempty").1)
}

fn run_rep(config: &ExperimentConfig, cell: Cell, rep: usize) -> Vec<ResultRow> {
    let methods = config.methods_sorted();
    let row = |method: Method, res: Result<(Outcome, Option<f64>)>, test: Option<&Dataset>| -> ResultRow {
        let base = ResultRow {
            scenario: cell.scenario,
            design: cell.design,
            n_total: cell.n_total,
            n_site: cell.n_site,
            method,
            rep,
            ccr: None,
            value: None,
            rounds: 0,
            seconds: None,
            bytes: 0,
            error: None,
        };
        let scored = res.and_then(|(o, secs)| {
            let test = test.ok_or(Error::EmptySample)?;
            let c = ccr(&o.beta, test)?;
            let v = empirical_value(&o.beta, test, PropensitySource::TrueDesign)?;
            Ok(ResultRow {
                ccr: Some(c),
                value: Some(v),
                rounds: o.rounds,
                bytes: o.bytes,
                seconds: secs,
                ..base.clone()
            })
        });
        scored.unwrap_or_else(|e| ResultRow {
            error: Some(e.to_string()),
            ..base
        })
    };

    let seed = derive_seed(config.seed, cell.scenario, cell.design, cell.n_total, cell.n_site, rep);
    let prepared = (|| -> Result<_> {
        let spec = ScenarioSpec {
            p: config.p,
            noise_sd: config.noise_sd,
            partition: config.partition,
            covariates: config.covariates,
            ..ScenarioSpec::new(cell.scenario, cell.design, cell.n_total, cell.sites(), seed)
        };
        let train = gen_dataset(&spec)?;
        let test = gen_units_with(
            cell.scenario,
            cell.design,
            config.covariates,
            config.n_test,
            config.p,
            config.noise_sd,
            mix64(seed ^ TAG_TEST),
        )?;
        let setup = build_sites(
            &train.data,
            &train.sites,
            config.nuisance,
            config.clip,
            LogisticOptions::default(),
        )?;
        let mut fit = config.fit.clone();
        if let Some(grid) = &config.lambda_grid {
            fit.lambda = Some(select_lambda(&train.data, grid, config, mix64(seed ^ TAG_TUNE))?);
        }
        Ok((train, test, setup, fit))
    })();
    let (train, test, setup, fit) = match prepared {
        Ok(v) => v,
        Err(e) => {
            let msg = e.to_string();
            return methods
                .iter()
                .map(|&m| row(m, Err(Error::InvalidConfig(msg.clone())), None))
                .collect();
        }
    };

    let p = train.data.dim();
    let hyper = fit.resolve(cell.n_total, setup.sites[0].len());
    let mut rows = Vec::with_capacity(methods.len());
    for &m in &methods {
        let res = match &hyper {
            Err(e) => Err(Error::InvalidConfig(e.to_string())),
            Ok(hyper) => {
                let (out, secs) = timed(config.record_timing, || -> Result<Outcome> {
                    match m {
                        Method::Dce => {
                            let r = fit_dce(&setup.sites, &fit)?;
                            Ok(Outcome {
                                beta: r.beta,
                                rounds: r.rounds,
                                bytes: r.bytes,
                            })
                        }
                        Method::Fce => {
                            let pooled_fit = fit_nuisance(&train.data, LogisticOptions::default())?;
                            let pooled = pseudo_labels(
                                &contrasts(&train.data, &pooled_fit, config.clip),
                                &train.data.covariates,
                            )?;
                            let f = fit_fce(&pooled, &fit.loss(hyper.h)?, hyper.lambda, &fit.gcd)?;
                            Ok(Outcome {
                                beta: f.beta,
                                rounds: 0,
                                bytes: 0,
                            })
                        }
                        Method::Initial => {
                            let f = fit_initial(&setup.sites[0], &fit.loss(hyper.b)?, hyper.lambda, &fit.gcd)?;
                            Ok(Outcome {
                                beta: f.beta,
                                rounds: 0,
                                bytes: 0,
                            })
                        }
                        Method::Avg => {
                            let a = fit_avg(&setup.sites, &fit.loss(hyper.b)?, hyper.lambda, config.clip, &fit.gcd)?;
                            let ok = setup.sites.len() - a.failures.len();
                            Ok(Outcome {
                                beta: a.beta,
                                rounds: 1,
                                bytes: ok * (HEADER_BYTES + REAL_BYTES * (p + 1)),
                            })
                        }
                    }
                });
                out.map(|o| (o, secs))
            }
        };
        rows.push(row(m, res, Some(&test)));
    }
    rows
}

/// Every replication of one cell, in (rep, method) order.
pub fn run_cell(config: &ExperimentConfig, cell: Cell) -> Vec<ResultRow> {
    let mut rows: Vec<ResultRow> = (0..config.reps)
        .into_par_iter()
        .flat_map_iter(|rep| run_rep(config, cell, rep))
        .collect();
    rows.sort_by_key(ResultRow::key);
    rows
}

/// Every cell of the configuration, sorted deterministically.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    config.validate()?;
    let jobs: Vec<(Cell, usize)> = config
        .cells()
        .into_iter()
        .flat_map(|c| (0..config.reps).map(move |r| (c, r)))
        .collect();
    let mut rows: Vec<ResultRow> = jobs
        .into_par_iter()
        .flat_map_iter(|(c, r)| run_rep(config, c, r))
        .collect();
    rows.sort_by_key(ResultRow::key);
    Ok(rows)
}

fn opt_real(x: Option<f64>) -> String {
    x.map(format_real).unwrap_or_default()
}

pub const RESULTS_HEADER: &str = "scenario,design,N,n,method,rep,ccr,value,rounds,seconds,bytes,error";
pub const SUMMARY_HEADER: &str = "scenario,design,N,n,method,ccr_mean,ccr_sd,value_mean,value_sd";

pub fn write_results<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(RESULTS_HEADER.split(','))?;
    for r in rows {
        w.write_record([
            r.scenario.to_string(),
            r.design.to_string(),
            r.n_total.to_string(),
            r.n_site.to_string(),
            r.method.to_string(),
            r.rep.to_string(),
            opt_real(r.ccr),
            opt_real(r.value),
            r.rounds.to_string(),
            opt_real(r.seconds),
            r.bytes.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: Scenario,
    pub design: Design,
    pub n_total: usize,
    pub n_site: usize,
    pub method: Method,
    /// Replications that produced a fit.
    pub count: usize,
    pub failed: usize,
    pub ccr_mean: f64,
    pub ccr_sd: f64,
    pub value_mean: f64,
    pub value_sd: f64,
    /// Fewer than two successful replications, so the sd is reported as 0.
    pub degenerate: bool,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample sd per (cell, method); failed replications are counted but
/// excluded from the statistics.
pub fn aggregate_table(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut sorted: Vec<&ResultRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (a.scenario, a.design, a.n_total, a.n_site, a.method, a.rep)
            .cmp(&(b.scenario, b.design, b.n_total, b.n_site, b.method, b.rep))
            .then_with(|| a.ccr.partial_cmp(&b.ccr).unwrap_or(Ordering::Equal))
    });
    let mut out = Vec::new();
    for group in sorted.chunk_by(|a, b| {
        (a.scenario, a.design, a.n_total, a.n_site, a.method) == (b.scenario, b.design, b.n_total, b.n_site, b.method)
    }) {
        let ok: Vec<&&ResultRow> = group
            .iter()
            .filter(|r| r.error.is_none() && r.ccr.is_some() && r.value.is_some())
            .collect();
        let first = group[0];
        let ccrs: Vec<f64> = ok.iter().filter_map(|r| r.ccr).collect();
        let values: Vec<f64> = ok.iter().filter_map(|r| r.value).collect();
        let (ccr_mean, ccr_sd) = if ccrs.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_sd(&ccrs)
        };
        let (value_mean, value_sd) = if values.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_sd(&values)
        };
        out.push(SummaryRow {
            scenario: first.scenario,
            design: first.design,
            n_total: first.n_total,
            n_site: first.n_site,
            method: first.method,
            count: ok.len(),
            failed: group.len() - ok.len(),
            ccr_mean,
            ccr_sd,
            value_mean,
            value_sd,
            degenerate: ok.len() < 2,
        });
    }
    out
}

pub fn write_summary<W: Write>(summary: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(SUMMARY_HEADER.split(','))?;
    for s in summary {
        w.write_record([
            s.scenario.to_string(),
            s.design.to_string(),
            s.n_total.to_string(),
            s.n_site.to_string(),
            s.method.to_string(),
            format_real(s.ccr_mean),
            format_real(s.ccr_sd),
            format_real(s.value_mean),
            format_real(s.value_sd),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Two text tables shaped like the usual report: CCR then value, one line per
/// cell, one `mean(sd)` column per method.
pub fn render_tables(summary: &[SummaryRow]) -> String {
    let mut methods: Vec<Method> = summary.iter().map(|s| s.method).collect();
    methods.sort();
    methods.dedup();
    let mut cells: Vec<(Scenario, Design, usize, usize)> = summary
        .iter()
        .map(|s| (s.scenario, s.design, s.n_total, s.n_site))
        .collect();
    cells.dedup();
    let mut out = String::new();
    for (title, pick) in [
        (
            "Correct classification rate",
            (|s: &SummaryRow| (s.ccr_mean, s.ccr_sd)) as fn(&SummaryRow) -> (f64, f64),
        ),
        ("Empirical value", |s: &SummaryRow| (s.value_mean, s.value_sd)),
    ] {
        let _ = writeln!(out, "{title}");
        let _ = write!(out, "{:<8}{:<14}{:>6}{:>6}", "scen", "design", "N", "n");
        for m in &methods {
            let _ = write!(out, "{:>16}", m.label());
        }
        out.push('\n');
        for &(sc, de, nt, ns) in &cells {
            let _ = write!(out, "{:<8}{:<14}{:>6}{:>6}", sc.to_string(), de.to_string(), nt, ns);
            for m in &methods {
                let cell = summary
                    .iter()
                    .find(|s| (s.scenario, s.design, s.n_total, s.n_site, s.method) == (sc, de, nt, ns, *m));
                let text = match cell {
                    Some(s) if s.count > 0 => {
                        let (mean, sd) = pick(s);
                        format!("{mean:.3}({sd:.3}){}", if s.degenerate { "*" } else { "" })
                    }
                    Some(_) => "failed".to_string(),
                    None => "-".to_string(),
                };
                let _ = write!(out, "{text:>16}");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}
