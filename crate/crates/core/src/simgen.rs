//! Seeded simulation designs: uniform (optionally normal) covariates, randomized or logistic
//! treatment assignment, the four contrast scenarios, outcomes and site
//! partitions.
//!
//! Randomness comes from ChaCha8 streams. Units are generated in blocks of
//! [`BLOCK`]; block `k` draws from stream `k` of a generator seeded with the
//! purpose-specific seed, so the output does not depend on how blocks are
//! scheduled. Within a unit the draw order is covariates `x1..xp`, the
//! treatment uniform, then one standard normal (rand_distr ziggurat).

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, Dataset};
use crate::error::{Error, Result};
use crate::nuisance::logistic;
use crate::numeric::mix64;

/// Units per RNG stream.
pub const BLOCK: usize = 1024;

const TAG_UNITS: u64 = 0x756e_6974;
const TAG_PARTITION: u64 = 0x7061_7274;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    A,
    B,
    C,
    D,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::A, Scenario::B, Scenario::C, Scenario::D];

    /// Smallest covariate dimension the contrast formula reads.
    pub fn min_dim(self) -> usize {
        match self {
            Scenario::A => 5,
            Scenario::B => 3,
            Scenario::C => 1,
            Scenario::D => 2,
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::A => "a",
            Scenario::B => "b",
            Scenario::C => "c",
            Scenario::D => "d",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Scenario::A),
            "b" => Ok(Scenario::B),
            "c" => Ok(Scenario::C),
            "d" => Ok(Scenario::D),
            _ => Err(Error::InvalidConfig(format!(
                "unknown scenario `{s}` (expected a, b, c or d)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    Rct,
    Observational,
}

impl Design {
    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Design::Rct => "rct",
            Design::Observational => "observational",
        })
    }
}

impl FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rct" => Ok(Design::Rct),
            "observational" | "obs" => Ok(Design::Observational),
            _ => Err(Error::InvalidConfig(format!(
                "unknown design `{s}` (expected rct or observational)"
            ))),
        }
    }
}

/// How units are dealt to sites when `M` does not divide `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionPolicy {
    /// Require equal site sizes.
    #[default]
    Balanced,
    /// The first `N mod M` sites receive one extra unit.
    Spread,
}

/// Marginal law of each covariate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateLaw {
    /// Independent U(−1, 1).
    #[default]
    Uniform,
    /// Independent N(0, 1); not the reference design, kept for sensitivity runs.
    Normal,
}

impl CovariateLaw {
    fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            CovariateLaw::Uniform => rng.random_range(-1.0..1.0),
            CovariateLaw::Normal => rng.sample(StandardNormal),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub design: Design,
    /// Total sample size `N`.
    pub n_total: usize,
    /// Number of sites `M`.
    pub sites: usize,
    pub p: usize,
    pub seed: u64,
    pub noise_sd: f64,
    #[serde(default)]
    pub partition: PartitionPolicy,
    #[serde(default)]
    pub covariates: CovariateLaw,
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario, design: Design, n_total: usize, sites: usize, seed: u64) -> Self {
        Self {
            scenario,
            design,
            n_total,
            sites,
            p: 5,
            seed,
            noise_sd: 0.5,
            partition: PartitionPolicy::Balanced,
            covariates: CovariateLaw::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 5 {
            return Err(Error::InvalidConfig(format!(
                "the outcome model reads x1..x5, so p must be at least 5 (got {})",
                self.p
            )));
        }
        if self.n_total == 0 {
            return Err(Error::InvalidConfig("N must be positive".into()));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise sd must be finite and nonnegative, got {}",
                self.noise_sd
            )));
        }
        site_sizes(self.n_total, self.sites, self.partition).map(|_| ())
    }

    /// Units per site in the balanced case.
    pub fn per_site(&self) -> usize {
        self.n_total / self.sites.max(1)
    }
}

/// A simulated training set with its site partition.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub data: Dataset,
    pub sites: Vec<Vec<usize>>,
}

/// `δ*(x)` for each scenario.
pub fn true_cte(scenario: Scenario, x: &[f64]) -> Result<f64> {
    if x.len() < scenario.min_dim() {
        return Err(Error::DimensionMismatch {
            expected: scenario.min_dim(),
            found: x.len(),
        });
    }
    Ok(match scenario {
        Scenario::A => x[..5].iter().enumerate().map(|(j, v)| (j + 1) as f64 * v).sum(),
        Scenario::B => 0.4 * x[2].abs() * (1.0 - x[0] - x[1]),
        Scenario::C => 1.8 * (0.9 - x[0]),
        Scenario::D => ((1.0 + x[0]).exp() - 3.0 * x[1] - 5.0).atan(),
    })
}

/// `P(A = 1 | x)` under the design.
pub fn propensity(design: Design, x: &[f64]) -> f64 {
    match design {
        Design::Rct => 0.5,
        Design::Observational => logistic(0.1 + 0.25 * x[0] + 0.25 * x[1]),
    }
}

/// Bernoulli treatment draw; returns the draw and its propensity.
pub fn assign_treatment<R: Rng + ?Sized>(design: Design, x: &[f64], rng: &mut R) -> (u8, f64) {
    let pi = propensity(design, x);
    let u: f64 = rng.random();
    (u8::from(u < pi), pi)
}

/// Baseline mean `1 + 2x₁ + 3x₂ + 4x₃ + 5x₄ + 6x₅`.
pub fn baseline_mean(x: &[f64]) -> f64 {
    1.0 + x[..5].iter().enumerate().map(|(j, v)| (j + 2) as f64 * v).sum::<f64>()
}

pub fn gen_outcome<R: Rng + ?Sized>(x: &[f64], a: u8, delta_star: f64, rng: &mut R, noise_sd: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    baseline_mean(x) + f64::from(a) * delta_star + noise_sd * z
}

fn site_sizes(n: usize, m: usize, policy: PartitionPolicy) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        return Err(Error::BadShape(format!("cannot split {n} units over {m} sites")));
    }
    let base = n / m;
    let extra = n % m;
    if extra != 0 && policy == PartitionPolicy::Balanced {
        return Err(Error::BadShape(format!(
            "{m} sites do not divide {n} units evenly; use the spread partition policy for unequal sites"
        )));
    }
    Ok((0..m).map(|k| base + usize::from(k < extra)).collect())
}

/// Random partition of `0..n` into `m` sites; indices within a site are ascending.
pub fn partition_sites<R: Rng + ?Sized>(
    n: usize,
    m: usize,
    policy: PartitionPolicy,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let sizes = site_sizes(n, m, policy)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut out = Vec::with_capacity(m);
    let mut start = 0;
    for size in sizes {
        let mut block = perm[start..start + size].to_vec();
        block.sort_unstable();
        out.push(block);
        start += size;
    }
    Ok(out)
}

/// [`partition_sites`] driven by its own ChaCha8 stream seeded with `seed`.
pub fn seeded_partition(n: usize, m: usize, policy: PartitionPolicy, seed: u64) -> Result<Vec<Vec<usize>>> {
    partition_sites(
        n,
        m,
        policy,
        &mut ChaCha8Rng::seed_from_u64(mix64(seed ^ TAG_PARTITION)),
    )
}

struct Unit {
    x: Vec<f64>,
    a: u8,
    y: f64,
    cte: f64,
    pi: f64,
}

/// `n` units with stored truth, reproducible from `seed`.
pub fn gen_units(scenario: Scenario, design: Design, n: usize, p: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    gen_units_with(scenario, design, CovariateLaw::Uniform, n, p, noise_sd, seed)
}

/// [`gen_units`] with a chosen covariate law.
pub fn gen_units_with(
    scenario: Scenario,
    design: Design,
    law: CovariateLaw,
    n: usize,
    p: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<Dataset> {
    if p < 5 {
        return Err(Error::DimensionMismatch { expected: 5, found: p });
    }
    let blocks = n.div_ceil(BLOCK);
    let units: Vec<Unit> = (0..blocks)
        .into_par_iter()
        .flat_map_iter(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let len = BLOCK.min(n - k * BLOCK);
            (0..len)
                .map(|_| {
                    let x: Vec<f64> = (0..p).map(|_| law.draw(&mut rng)).collect();
                    let (a, pi) = assign_treatment(design, &x, &mut rng);
                    let cte = true_cte(scenario, &x).expect("p >= 5 covers every scenario");
                    let y = gen_outcome(&x, a, cte, &mut rng, noise_sd);
                    Unit { x, a, y, cte, pi }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let mut xs = Vec::with_capacity(n * p);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut cte = Vec::with_capacity(n);
    let mut pi = Vec::with_capacity(n);
    for u in units {
        xs.extend(u.x);
        a.push(u.a);
        y.push(u.y);
        cte.push(u.cte);
        pi.push(u.pi);
    }
    let mut ds = Dataset::new(Covariates::new(xs, p)?, a, y)?;
    ds.true_cte = Some(cte);
    ds.true_propensity = Some(pi);
    Ok(ds)
}

/// Training data and site partition for `spec`.
pub fn gen_dataset(spec: &ScenarioSpec) -> Result<GeneratedDataset> {
    spec.validate()?;
    let data = gen_units_with(
        spec.scenario,
        spec.design,
        spec.covariates,
        spec.n_total,
        spec.p,
        spec.noise_sd,
        mix64(spec.seed ^ TAG_UNITS),
    )?;
    let sites = seeded_partition(spec.n_total, spec.sites, spec.partition, spec.seed)?;
    Ok(GeneratedDataset { data, sites })
}

/// Seed for one replication of one cell; distinct inputs give unrelated seeds.
pub fn derive_seed(
    master: u64,
    scenario: Scenario,
    design: Design,
    n_total: usize,
    per_site: usize,
    rep: usize,
) -> u64 {
    let mut h = mix64(master);
    for part in [
        scenario.index(),
        design.index(),
        n_total as u64,
        per_site as u64,
        rep as u64,
    ] {
        h = mix64(h ^ part);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::{fit_logistic, LogisticOptions};

    #[test]
    fn contrast_examples() {
        let ones = [1.0; 5];
        assert_eq!(true_cte(Scenario::A, &ones).unwrap(), 15.0);
        assert_eq!(true_cte(Scenario::B, &[0.3, -0.2, 0.0, 0.5, 0.5]).unwrap(), 0.0);
        assert!(true_cte(Scenario::C, &[0.9, 0.0, 0.0, 0.0, 0.0]).unwrap().abs() < 1e-15);
        let d = true_cte(Scenario::D, &[-1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((d - (-4.0f64).atan()).abs() < 1e-15);
        assert!((d + 1.3258).abs() < 1e-4);
        assert!(matches!(
            true_cte(Scenario::A, &[1.0; 4]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn propensity_examples() {
        assert_eq!(propensity(Design::Rct, &[0.3, 0.9]), 0.5);
        assert!((propensity(Design::Observational, &[0.0, 0.0]) - 0.5250).abs() < 1e-4);
        assert!((propensity(Design::Observational, &[-1.0, -1.0]) - 0.4013).abs() < 1e-4);
    }

    #[test]
    fn outcome_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zero = [0.0; 5];
        assert_eq!(gen_outcome(&zero, 0, 0.0, &mut rng, 0.0), 1.0);
        let cte = true_cte(Scenario::C, &zero).unwrap();
        assert!((gen_outcome(&zero, 1, cte, &mut rng, 0.0) - 2.62).abs() < 1e-12);
    }

    #[test]
    fn noise_is_centred() {
        let ds = gen_units(Scenario::A, Design::Rct, 100_000, 5, 0.5, 9).unwrap();
        let cte = ds.true_cte.as_ref().unwrap();
        let resid: f64 = (0..ds.len())
            .map(|i| ds.outcomes[i] - baseline_mean(ds.covariates.row(i)) - f64::from(ds.treatments[i]) * cte[i])
            .sum::<f64>()
            / ds.len() as f64;
        assert!(resid.abs() < 0.01, "{resid}");
    }

    #[test]
    fn partition_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let parts = partition_sites(4, 2, PartitionPolicy::Balanced, &mut rng).unwrap();
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2]);
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(
            partition_sites(7, 1, PartitionPolicy::Balanced, &mut rng).unwrap(),
            vec![(0..7).collect::<Vec<_>>()]
        );
        let spread = partition_sites(10, 3, PartitionPolicy::Spread, &mut rng).unwrap();
        assert_eq!(spread.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 3, 3]);
        assert!(matches!(
            partition_sites(10, 3, PartitionPolicy::Balanced, &mut rng),
            Err(Error::BadShape(_))
        ));
        assert!(matches!(
            partition_sites(2, 3, PartitionPolicy::Spread, &mut rng),
            Err(Error::BadShape(_))
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = ScenarioSpec::new(Scenario::B, Design::Observational, 3000, 6, 42);
        let a = gen_dataset(&spec).unwrap();
        let b = gen_dataset(&spec).unwrap();
        assert_eq!(a, b);
        let other = gen_dataset(&ScenarioSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.data.outcomes, other.data.outcomes);
    }

    #[test]
    fn sign_frequencies() {
        let a = gen_units(Scenario::A, Design::Rct, 100_000, 5, 0.5, 3).unwrap();
        let frac =
            |ds: &Dataset| ds.true_cte.as_ref().unwrap().iter().filter(|&&c| c > 0.0).count() as f64 / ds.len() as f64;
        assert!((frac(&a) - 0.5).abs() < 0.02);
        let c = gen_units(Scenario::C, Design::Rct, 100_000, 5, 0.5, 4).unwrap();
        assert!((frac(&c) - 0.95).abs() < 0.01);
    }

    #[test]
    fn covariates_look_uniform() {
        let ds = gen_units(Scenario::A, Design::Observational, 100_000, 5, 0.5, 5).unwrap();
        assert!(ds.covariates.as_slice().iter().all(|x| (-1.0..1.0).contains(x)));
        for j in 0..5 {
            let mut col: Vec<f64> = ds.covariates.column(j).collect();
            col.sort_by(f64::total_cmp);
            let n = col.len() as f64;
            let ks = col
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let cdf = (x + 1.0) / 2.0;
                    (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
                })
                .fold(0.0, f64::max);
            assert!(ks <= 0.01, "column {j}: {ks}");
        }
    }

    #[test]
    fn stored_propensity_matches_design_and_is_recoverable() {
        let ds = gen_units(Scenario::D, Design::Observational, 100_000, 5, 0.5, 6).unwrap();
        let pi = ds.true_propensity.as_ref().unwrap();
        for (x, &p) in ds.covariates.rows().zip(pi) {
            assert_eq!(p, propensity(Design::Observational, x));
        }
        let x12 = Covariates::new(ds.covariates.rows().flat_map(|r| [r[0], r[1]]).collect(), 2).unwrap();
        let fit = fit_logistic(&x12, &ds.treatments, LogisticOptions::default()).unwrap();
        for (g, t) in fit.gamma.iter().zip([0.1, 0.25, 0.25]) {
            assert!((g - t).abs() < 0.05, "{:?}", fit.gamma);
        }
    }

    #[test]
    fn extra_dimensions_pad_with_noise_covariates() {
        let ds = gen_units(Scenario::A, Design::Rct, 500, 10, 0.5, 7).unwrap();
        assert_eq!(ds.dim(), 10);
        let cte = ds.true_cte.as_ref().unwrap();
        for (x, &c) in ds.covariates.rows().zip(cte) {
            assert_eq!(c, true_cte(Scenario::A, &x[..5]).unwrap());
        }
        assert!(gen_units(Scenario::A, Design::Rct, 10, 4, 0.5, 7).is_err());
    }

    #[test]
    fn derived_seeds_differ_across_cells() {
        let s = |rep| derive_seed(1, Scenario::A, Design::Rct, 1000, 200, rep);
        assert_ne!(s(0), s(1));
        assert_ne!(s(0), derive_seed(1, Scenario::B, Design::Rct, 1000, 200, 0));
        assert_eq!(s(3), s(3));
    }

    #[test]
    fn names_parse() {
        assert_eq!("C".parse::<Scenario>().unwrap(), Scenario::C);
        assert_eq!("observational".parse::<Design>().unwrap(), Design::Observational);
        assert!("e".parse::<Scenario>().is_err());
        assert_eq!(Scenario::D.to_string(), "d");
    }
}
