//! Generalized coordinate descent for the shifted central-site surrogate.
//!
//! Each coordinate step minimizes the quadratic majorizer built from the
//! global curvature bound `sup K / b`, so every update is a closed form and the
//! surrogate never increases.

use serde::{Deserialize, Serialize};

use crate::data::Covariates;
use crate::error::{Error, Result};
use crate::nuisance::WeightedSample;
use crate::numeric::{dot, CompensatedSum};
use crate::objective::{RuleCoefficients, SurrogateShift};
use crate::smoothing::SmoothedLoss;

const MIN_VARIANCE: f64 = 1e-12;
const MIN_CURVATURE: f64 = 1e-14;
const MONOTONE_SLACK: f64 = 1e-12;

/// Per-covariate centering and scaling computed on one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardization {
    /// Means and population standard deviations of each column.
    pub fn fit(covariates: &Covariates) -> Result<Self> {
        let n = covariates.nrows();
        if n == 0 {
            return Err(Error::EmptySample);
        }
        let p = covariates.ncols();
        let mut means = Vec::with_capacity(p);
        let mut scales = Vec::with_capacity(p);
        for j in 0..p {
            let mean = covariates.column(j).collect::<CompensatedSum>().value() / n as f64;
            let var = covariates
                .column(j)
                .map(|x| (x - mean) * (x - mean))
                .collect::<CompensatedSum>()
                .value()
                / n as f64;
            if !(var >= MIN_VARIANCE) {
                return Err(Error::ConstantColumn(j + 1));
            }
            means.push(mean);
            scales.push(var.sqrt());
        }
        Ok(Self { means, scales })
    }

    pub fn identity(p: usize) -> Self {
        Self {
            means: vec![0.0; p],
            scales: vec![1.0; p],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found == self.dim() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.dim(),
                found,
            })
        }
    }

    pub fn apply(&self, covariates: &Covariates) -> Result<Covariates> {
        self.check_dim(covariates.ncols())?;
        let p = self.dim();
        let values = covariates
            .as_slice()
            .iter()
            .enumerate()
            .map(|(k, x)| {
                let j = k % p;
                (x - self.means[j]) / self.scales[j]
            })
            .collect();
        Covariates::new(values, p)
    }

    /// Standardized coefficients to coefficients acting on raw covariates.
    pub fn to_raw(&self, gamma: &RuleCoefficients) -> Result<RuleCoefficients> {
        self.check_dim(gamma.dim())?;
        let beta1: Vec<f64> = gamma.beta1.iter().zip(&self.scales).map(|(g, s)| g / s).collect();
        let beta0 = gamma.beta0 - dot(&beta1, &self.means);
        Ok(RuleCoefficients { beta0, beta1 })
    }

    pub fn from_raw(&self, beta: &RuleCoefficients) -> Result<RuleCoefficients> {
        self.check_dim(beta.dim())?;
        let beta0 = beta.beta0 + dot(&beta.beta1, &self.means);
        let beta1 = beta.beta1.iter().zip(&self.scales).map(|(b, s)| b * s).collect();
        Ok(RuleCoefficients { beta0, beta1 })
    }

    /// Chain rule: a gradient with respect to raw coefficients, re-expressed
    /// with respect to standardized coefficients.
    pub fn gradient_from_raw(&self, g: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(g.len().saturating_sub(1))?;
        let mut out = Vec::with_capacity(g.len());
        out.push(g[0]);
        for j in 0..self.dim() {
            out.push((g[j + 1] - g[0] * self.means[j]) / self.scales[j]);
        }
        Ok(out)
    }

    /// Per-slope ridge weights in standardized coordinates for a penalty
    /// `λ‖β₁‖²` on raw-scale slopes.
    pub fn raw_ridge(&self, lambda: f64) -> Vec<f64> {
        self.scales.iter().map(|s| lambda / (s * s)).collect()
    }
}

/// Standardizes `covariates` by their own moments.
pub fn standardize(covariates: &Covariates) -> Result<(Covariates, Standardization)> {
    let st = Standardization::fit(covariates)?;
    Ok((st.apply(covariates)?, st))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcdOptions {
    pub max_sweeps: usize,
    /// Stop once no coordinate moves by more than this in a sweep.
    pub tol: f64,
    /// Recompute margins from scratch every this many sweeps.
    pub refresh_every: usize,
}

impl Default for GcdOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 10_000,
            tol: 1e-8,
            refresh_every: 10,
        }
    }
}

/// The problem solved by one call of [`solve_surrogate`]:
/// `Q̂_b(β) − ⟨shift, β − anchor⟩ + Σⱼ ridgeⱼ βⱼ²`.
#[derive(Debug, Clone)]
pub struct Surrogate<'a> {
    pub sample: &'a WeightedSample,
    pub loss: &'a SmoothedLoss,
    pub shift: &'a SurrogateShift,
    pub anchor: &'a RuleCoefficients,
    /// One weight per slope; the intercept is never penalised.
    pub ridge: Vec<f64>,
}

impl<'a> Surrogate<'a> {
    pub fn new(
        sample: &'a WeightedSample,
        loss: &'a SmoothedLoss,
        shift: &'a SurrogateShift,
        anchor: &'a RuleCoefficients,
        lambda: f64,
    ) -> Result<Self> {
        Self::with_ridge(sample, loss, shift, anchor, vec![lambda; sample.dim()])
    }

    pub fn with_ridge(
        sample: &'a WeightedSample,
        loss: &'a SmoothedLoss,
        shift: &'a SurrogateShift,
        anchor: &'a RuleCoefficients,
        ridge: Vec<f64>,
    ) -> Result<Self> {
        let p = sample.dim();
        if sample.is_empty() {
            return Err(Error::EmptySample);
        }
        for found in [anchor.dim() + 1, shift.shift.len(), ridge.len() + 1] {
            if found != p + 1 {
                return Err(Error::DimensionMismatch { expected: p + 1, found });
            }
        }
        if ridge.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidConfig(
                "ridge weights must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            sample,
            loss,
            shift,
            anchor,
            ridge,
        })
    }

    fn ridge_at(&self, j: usize) -> f64 {
        if j == 0 {
            0.0
        } else {
            self.ridge[j - 1]
        }
    }

    /// Surrogate value at `beta`.
    pub fn objective(&self, beta: &RuleCoefficients) -> Result<f64> {
        let state = GcdState::new(self.sample, beta, self.loss)?;
        Ok(self.objective_at(&state))
    }

    fn objective_at(&self, state: &GcdState) -> f64 {
        let n = self.sample.len() as f64;
        let mut acc = CompensatedSum::new();
        for (&w, &v) in self.sample.weights().iter().zip(&state.margins) {
            if w != 0.0 {
                acc.add(w * self.loss.loss(v));
            }
        }
        let anchor = self.anchor.to_vec();
        let mut value = acc.value() / n;
        for (j, &b) in state.beta.iter().enumerate() {
            value += self.ridge_at(j) * b * b - self.shift.shift[j] * (b - anchor[j]);
        }
        value
    }
}

/// Coefficients together with the per-unit margins `vᵢ = Ẑᵢ f(xᵢ)` and the
/// coordinate-wise curvature bounds `C_j = c_b Σ wᵢ X²ᵢⱼ / n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcdState {
    beta: Vec<f64>,
    margins: Vec<f64>,
    lipschitz: Vec<f64>,
}

#[inline]
fn entry(x: &[f64], j: usize) -> f64 {
    if j == 0 {
        1.0
    } else {
        x[j - 1]
    }
}

impl GcdState {
    pub fn new(sample: &WeightedSample, beta: &RuleCoefficients, loss: &SmoothedLoss) -> Result<Self> {
        if beta.dim() != sample.dim() {
            return Err(Error::DimensionMismatch {
                expected: sample.dim(),
                found: beta.dim(),
            });
        }
        let p = sample.dim();
        let n = sample.len() as f64;
        let cb = loss.lipschitz_constant();
        let mut lipschitz = vec![CompensatedSum::new(); p + 1];
        for (x, &w) in sample.covariates().rows().zip(sample.weights()) {
            for (j, acc) in lipschitz.iter_mut().enumerate() {
                let xj = entry(x, j);
                acc.add(w * xj * xj);
            }
        }
        let mut state = Self {
            beta: beta.to_vec(),
            margins: vec![0.0; sample.len()],
            lipschitz: lipschitz.iter().map(|a| cb * a.value() / n).collect(),
        };
        state.refresh_margins(sample);
        Ok(state)
    }

    pub fn beta(&self) -> RuleCoefficients {
        RuleCoefficients {
            beta0: self.beta[0],
            beta1: self.beta[1..].to_vec(),
        }
    }

    pub fn margins(&self) -> &[f64] {
        &self.margins
    }

    pub fn lipschitz(&self) -> &[f64] {
        &self.lipschitz
    }

    pub fn refresh_margins(&mut self, sample: &WeightedSample) {
        let b0 = self.beta[0];
        let b1 = &self.beta[1..];
        for ((v, x), &z) in self
            .margins
            .iter_mut()
            .zip(sample.covariates().rows())
            .zip(sample.labels())
        {
            *v = z * (b0 + dot(b1, x));
        }
    }

    /// Largest gap between the stored margins and margins recomputed from `beta`.
    pub fn margin_drift(&self, sample: &WeightedSample) -> f64 {
        let mut fresh = self.clone();
        fresh.refresh_margins(sample);
        fresh
            .margins
            .iter()
            .zip(&self.margins)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Moves coordinate `j` to `value`, updating margins incrementally.
    pub fn set_coordinate(&mut self, sample: &WeightedSample, j: usize, value: f64) {
        let delta = value - self.beta[j];
        if delta == 0.0 {
            return;
        }
        self.beta[j] = value;
        for ((v, x), &z) in self
            .margins
            .iter_mut()
            .zip(sample.covariates().rows())
            .zip(sample.labels())
        {
            *v += z * entry(x, j) * delta;
        }
    }
}

/// Minimizer over coordinate `j` of the quadratic majorizer at the current state:
/// `(C_j βⱼ − gⱼ + shiftⱼ) / (2λⱼ + C_j)` with `gⱼ = n⁻¹ Σ wᵢ φ_b'(vᵢ) Ẑᵢ Xᵢⱼ`.
pub fn coordinate_update(state: &GcdState, j: usize, problem: &Surrogate<'_>) -> Result<f64> {
    let p = problem.sample.dim();
    if j > p {
        return Err(Error::DimensionMismatch {
            expected: p + 1,
            found: j + 1,
        });
    }
    let curvature = state.lipschitz[j];
    let denom = 2.0 * problem.ridge_at(j) + curvature;
    if !(denom >= MIN_CURVATURE) {
        return Err(Error::ZeroCurvature(j));
    }
    let sample = problem.sample;
    let mut acc = CompensatedSum::new();
    for (((x, &w), &z), &v) in sample
        .covariates()
        .rows()
        .zip(sample.weights())
        .zip(sample.labels())
        .zip(&state.margins)
    {
        if w != 0.0 {
            acc.add(w * problem.loss.loss_deriv(v) * z * entry(x, j));
        }
    }
    let g = acc.value() / sample.len() as f64;
    Ok((curvature * state.beta[j] - g + problem.shift.shift[j]) / denom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcdReport {
    pub beta: RuleCoefficients,
    pub sweeps: usize,
    pub converged: bool,
    /// Surrogate value at the start and after every sweep.
    pub objective_trace: Vec<f64>,
    /// Coordinate updates skipped for lack of curvature.
    pub skipped: usize,
    /// Largest increase of the surrogate between consecutive sweeps, if any.
    pub max_increase: f64,
}

impl GcdReport {
    pub fn is_monotone(&self) -> bool {
        self.max_increase <= 0.0
    }
}

/// Cyclic coordinate descent over `0, 1, …, p` started at the anchor.
pub fn solve_surrogate(problem: &Surrogate<'_>, opts: &GcdOptions) -> Result<GcdReport> {
    let sample = problem.sample;
    let p = sample.dim();
    let mut state = GcdState::new(sample, problem.anchor, problem.loss)?;
    let mut prev = problem.objective_at(&state);
    if !prev.is_finite() {
        return Err(Error::NonFinite("surrogate objective"));
    }
    let mut trace = vec![prev];
    let mut skipped = 0;
    let mut max_increase = 0.0f64;
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut max_change = 0.0f64;
        for j in 0..=p {
            match coordinate_update(&state, j, problem) {
                Ok(value) => {
                    if !value.is_finite() {
                        return Err(Error::NonFinite("coordinate update"));
                    }
                    max_change = max_change.max((value - state.beta[j]).abs());
                    state.set_coordinate(sample, j, value);
                }
                Err(Error::ZeroCurvature(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if opts.refresh_every > 0 && sweeps % opts.refresh_every == 0 {
            state.refresh_margins(sample);
        }
        let value = problem.objective_at(&state);
        if !value.is_finite() {
            return Err(Error::NonFinite("surrogate objective"));
        }
        let slack = MONOTONE_SLACK * prev.abs().max(1.0);
        if value > prev + slack {
            max_increase = max_increase.max(value - prev);
        }
        trace.push(value);
        prev = value;
        if max_change < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(GcdReport {
        beta: state.beta(),
        sweeps,
        converged,
        objective_trace: trace,
        skipped,
        max_increase,
    })
}

/// Result of [`fit_penalized`]: raw-scale coefficients and the solver trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenalizedFit {
    pub beta: RuleCoefficients,
    pub standardization: Standardization,
    pub report: GcdReport,
}

/// Minimizes `Q̂(β) + λ‖β₁‖²` on one sample, penalising raw-scale slopes.
/// The solver works on the sample standardized by its own moments.
pub fn fit_penalized(
    sample: &WeightedSample,
    loss: &SmoothedLoss,
    lambda: f64,
    start: Option<&RuleCoefficients>,
    opts: &GcdOptions,
) -> Result<PenalizedFit> {
    let (cov, st) = standardize(sample.covariates())?;
    let std_sample = sample.with_covariates(cov)?;
    let p = sample.dim();
    let anchor = match start {
        Some(b) => st.from_raw(b)?,
        None => RuleCoefficients::zeros(p),
    };
    let shift = SurrogateShift::zero(p);
    let problem = Surrogate::with_ridge(&std_sample, loss, &shift, &anchor, st.raw_ridge(lambda))?;
    let report = solve_surrogate(&problem, opts)?;
    let beta = st.to_raw(&report.beta)?;
    Ok(PenalizedFit {
        beta,
        standardization: st,
        report,
    })
}
