//! Working models for the propensity score and the arm-specific outcome
//! regressions, the augmented IPW contrast built from them, and the
//! pseudo-labelled weighted sample that feeds every risk function.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, Dataset};
use crate::error::{Error, Result};
use crate::numeric::{dot, max_abs};

/// Condition-number ceiling for the IRLS normal equations.
pub const MAX_CONDITION: f64 = 1e12;
/// Coefficient magnitude at which a logistic fit is declared separated.
pub const SEPARATION_BOUND: f64 = 30.0;

/// Logistic propensity model `π(x) = 1 / (1 + exp(−γᵀ(1, x)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityFit {
    pub gamma: Vec<f64>,
    /// Set when the iterates ran off towards infinity and were truncated.
    #[serde(default)]
    pub separated: bool,
    #[serde(default)]
    pub iterations: usize,
}

impl PropensityFit {
    pub fn from_gamma(gamma: Vec<f64>) -> Self {
        Self {
            gamma,
            separated: false,
            iterations: 0,
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let eta = self.gamma[0] + dot(&self.gamma[1..], x);
        logistic(eta)
    }
}

/// Linear outcome models `Q(x, a) = η_aᵀ(1, x)` for each arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeFit {
    pub eta0: Vec<f64>,
    pub eta1: Vec<f64>,
}

impl OutcomeFit {
    /// The degenerate working model `Q ≡ 0`.
    pub fn zero(p: usize) -> Self {
        Self {
            eta0: vec![0.0; p + 1],
            eta1: vec![0.0; p + 1],
        }
    }

    pub fn predict(&self, x: &[f64], arm: u8) -> f64 {
        let eta = if arm == 1 { &self.eta1 } else { &self.eta0 };
        eta[0] + dot(&eta[1..], x)
    }
}

/// Both working models together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFit {
    pub propensity: PropensityFit,
    pub outcome: OutcomeFit,
}

/// How the pooled nuisance fit is obtained in a multi-site setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NuisanceMode {
    /// Average of site-local fits.
    #[default]
    Dnc,
    /// Fits from the central site alone.
    CentralOnly,
}

/// Propensity clipping interval `[lo, hi]`, `0 < lo < hi < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropensityClip {
    pub lo: f64,
    pub hi: f64,
}

impl Default for PropensityClip {
    fn default() -> Self {
        Self { lo: 0.01, hi: 0.99 }
    }
}

impl PropensityClip {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if 0.0 < lo && lo < hi && hi < 1.0 {
            Ok(Self { lo, hi })
        } else {
            Err(Error::InvalidConfig(format!(
                "propensity clip must satisfy 0 < lo < hi < 1, got [{lo}, {hi}]"
            )))
        }
    }

    pub fn apply(&self, pi: f64) -> f64 {
        pi.clamp(self.lo, self.hi)
    }
}

/// Per-unit weights `|δ̂|` and pseudo-labels `Ẑ ∈ {−1, +1}` with covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    weights: Vec<f64>,
    labels: Vec<f64>,
    covariates: Covariates,
}

impl WeightedSample {
    pub fn new(weights: Vec<f64>, labels: Vec<f64>, covariates: Covariates) -> Result<Self> {
        let n = covariates.nrows();
        for len in [weights.len(), labels.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: len,
                });
            }
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig("weights must be finite and nonnegative".into()));
        }
        if labels.iter().any(|z| *z != 1.0 && *z != -1.0) {
            return Err(Error::InvalidConfig("labels must be +1 or -1".into()));
        }
        Ok(Self {
            weights,
            labels,
            covariates,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn covariates(&self) -> &Covariates {
        &self.covariates
    }

    pub fn subset(&self, indices: &[usize]) -> WeightedSample {
        WeightedSample {
            weights: indices.iter().map(|&i| self.weights[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            covariates: self.covariates.select(indices),
        }
    }

    /// Same weights and labels over transformed covariates of equal shape.
    pub fn with_covariates(&self, covariates: Covariates) -> Result<WeightedSample> {
        if covariates.nrows() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: covariates.nrows(),
            });
        }
        Ok(WeightedSample {
            weights: self.weights.clone(),
            labels: self.labels.clone(),
            covariates,
        })
    }

    /// Same units with every weight multiplied by `c`.
    pub fn scaled(&self, c: f64) -> WeightedSample {
        WeightedSample {
            weights: self.weights.iter().map(|w| w * c).collect(),
            labels: self.labels.clone(),
            covariates: self.covariates.clone(),
        }
    }
}

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn design_with_intercept(covariates: &Covariates, subset: Option<&[usize]>) -> DMatrix<f64> {
    let p = covariates.ncols();
    let rows: Vec<usize> = match subset {
        Some(s) => s.to_vec(),
        None => (0..covariates.nrows()).collect(),
    };
    DMatrix::from_fn(rows.len(), p + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            covariates.row(rows[i])[j - 1]
        }
    })
}

/// Options for the IRLS logistic fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticOptions {
    pub max_iter: usize,
    /// Convergence threshold on the max-norm of the average log-likelihood gradient.
    pub tol: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

fn log_likelihood(design: &DMatrix<f64>, y: &DVector<f64>, gamma: &DVector<f64>) -> f64 {
    let eta = design * gamma;
    eta.iter()
        .zip(y.iter())
        .map(|(&e, &a)| {
            // log(1 + exp(e)) computed stably
            let softplus = if e > 0.0 {
                e + (-e).exp().ln_1p()
            } else {
                e.exp().ln_1p()
            };
            a * e - softplus
        })
        .sum()
}

/// Maximum-likelihood logistic regression of `treatments` on `(1, x)` by
/// Newton–IRLS with step halving.
pub fn fit_logistic(covariates: &Covariates, treatments: &[u8], opts: LogisticOptions) -> Result<PropensityFit> {
    let n = covariates.nrows();
    let p = covariates.ncols();
    if treatments.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: treatments.len(),
        });
    }
    if n < p + 2 {
        return Err(Error::DegenerateDesign(format!(
            "{n} units cannot identify {} logistic coefficients",
            p + 1
        )));
    }
    if treatments.iter().all(|&a| a == treatments[0]) {
        return Err(Error::DegenerateDesign("all units share one treatment arm".into()));
    }
    let design = design_with_intercept(covariates, None);
    let y = DVector::from_iterator(n, treatments.iter().map(|&a| a as f64));
    let mut gamma = DVector::zeros(p + 1);
    let mut ll = log_likelihood(&design, &y, &gamma);
    let nf = n as f64;

    for iter in 0..=opts.max_iter {
        let eta = &design * &gamma;
        let mu = eta.map(logistic);
        let grad = design.transpose() * (&y - &mu);
        let grad_norm = grad.amax() / nf;
        let w = mu.map(|m| m * (1.0 - m));
        let mut info = DMatrix::zeros(p + 1, p + 1);
        for (i, row) in design.row_iter().enumerate() {
            let wi = w[i];
            for a in 0..=p {
                let ra = row[a] * wi;
                for b in a..=p {
                    info[(a, b)] += ra * row[b];
                }
            }
        }
        for a in 0..=p {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }
        let eig = SymmetricEigen::new(info.clone()).eigenvalues;
        let (lo, hi) = eig
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
        if !(lo > 0.0) || hi / lo > MAX_CONDITION {
            return Err(Error::DegenerateDesign(format!(
                "logistic information matrix condition number {:e} exceeds {MAX_CONDITION:e}",
                hi / lo.max(f64::MIN_POSITIVE)
            )));
        }
        if grad_norm <= opts.tol {
            return Ok(PropensityFit {
                gamma: gamma.iter().copied().collect(),
                separated: false,
                iterations: iter,
            });
        }
        if iter == opts.max_iter {
            return Err(Error::NonConvergence {
                iterations: opts.max_iter,
                grad_norm,
            });
        }
        let chol = info
            .cholesky()
            .ok_or_else(|| Error::DegenerateDesign("logistic information matrix is not positive definite".into()))?;
        let step = chol.solve(&grad);

        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &gamma + &step * scale;
            let cand_ll = log_likelihood(&design, &y, &cand);
            if cand_ll.is_finite() && cand_ll >= ll {
                gamma = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence {
                iterations: iter + 1,
                grad_norm,
            });
        }
        if gamma.amax() > SEPARATION_BOUND {
            let truncated = gamma
                .iter()
                .map(|g| g.clamp(-SEPARATION_BOUND, SEPARATION_BOUND))
                .collect();
            return Ok(PropensityFit {
                gamma: truncated,
                separated: true,
                iterations: iter + 1,
            });
        }
    }
    unreachable!("loop returns on its last iteration")
}

/// Intercept-only logistic fit: `γ = (logit(mean A), 0, …, 0)`.
pub fn fit_logistic_intercept_only(treatments: &[u8], p: usize) -> Result<PropensityFit> {
    let n = treatments.len();
    let treated = treatments.iter().filter(|&&a| a == 1).count();
    if treated == 0 || treated == n {
        return Err(Error::DegenerateDesign("all units share one treatment arm".into()));
    }
    let rate = treated as f64 / n as f64;
    let mut gamma = vec![0.0; p + 1];
    gamma[0] = (rate / (1.0 - rate)).ln();
    Ok(PropensityFit::from_gamma(gamma))
}

/// Least squares of `outcomes` on `(1, x)` over `subset`, via SVD.
pub fn fit_ols(covariates: &Covariates, outcomes: &[f64], subset: &[usize]) -> Result<Vec<f64>> {
    let p = covariates.ncols();
    if subset.len() < p + 2 {
        return Err(Error::DegenerateDesign(format!(
            "{} units cannot identify {} regression coefficients",
            subset.len(),
            p + 1
        )));
    }
    let design = design_with_intercept(covariates, Some(subset));
    let y = DVector::from_iterator(subset.len(), subset.iter().map(|&i| outcomes[i]));
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin / smax < 1e-10 {
        return Err(Error::DegenerateDesign(format!(
            "regression design is rank deficient (singular value ratio {:e})",
            smin / smax
        )));
    }
    let sol = svd
        .solve(&y, smax * 1e-12)
        .map_err(|e| Error::DegenerateDesign(e.to_string()))?;
    Ok(sol.iter().copied().collect())
}

/// Outcome models fit separately on the treated and control units.
pub fn fit_outcome(ds: &Dataset) -> Result<OutcomeFit> {
    let (treated, control): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| ds.treatments[i] == 1);
    Ok(OutcomeFit {
        eta0: fit_ols(&ds.covariates, &ds.outcomes, &control)?,
        eta1: fit_ols(&ds.covariates, &ds.outcomes, &treated)?,
    })
}

pub fn fit_nuisance(ds: &Dataset, opts: LogisticOptions) -> Result<NuisanceFit> {
    Ok(NuisanceFit {
        propensity: fit_logistic(&ds.covariates, &ds.treatments, opts)?,
        outcome: fit_outcome(ds)?,
    })
}

/// Augmented inverse-probability-weighted contrast for one unit.
pub fn aipwe_contrast(
    y: f64,
    a: u8,
    x: &[f64],
    propensity: &PropensityFit,
    outcome: &OutcomeFit,
    clip: PropensityClip,
) -> f64 {
    let pi = clip.apply(propensity.predict(x));
    contrast_with(y, a, pi, outcome.predict(x, 1), outcome.predict(x, 0))
}

/// The AIPW contrast from an already-evaluated propensity and outcome predictions.
pub fn contrast_with(y: f64, a: u8, pi: f64, q1: f64, q0: f64) -> f64 {
    let treated = if a == 1 { (y - q1) / pi } else { 0.0 };
    let control = if a == 0 { (y - q0) / (1.0 - pi) } else { 0.0 };
    (treated + q1) - (control + q0)
}

pub fn contrasts(ds: &Dataset, fit: &NuisanceFit, clip: PropensityClip) -> Vec<f64> {
    (0..ds.len())
        .map(|i| {
            aipwe_contrast(
                ds.outcomes[i],
                ds.treatments[i],
                ds.covariates.row(i),
                &fit.propensity,
                &fit.outcome,
                clip,
            )
        })
        .collect()
}

/// `|δ̂|` weights and `2·I(δ̂ > 0) − 1` labels.
pub fn pseudo_labels(contrasts: &[f64], covariates: &Covariates) -> Result<WeightedSample> {
    let weights = contrasts.iter().map(|d| d.abs()).collect();
    let labels = contrasts.iter().map(|&d| if d > 0.0 { 1.0 } else { -1.0 }).collect();
    WeightedSample::new(weights, labels, covariates.clone())
}

/// Fits that can be pooled by coordinatewise averaging.
pub trait DncAverage: Sized {
    fn dnc_average(fits: &[Self]) -> Result<Self>;
}

fn mean_of<'a, I: Iterator<Item = &'a [f64]>>(vectors: I) -> Result<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    let mut count = 0usize;
    for v in vectors {
        match acc.as_mut() {
            None => acc = Some(v.to_vec()),
            Some(a) => {
                if a.len() != v.len() {
                    return Err(Error::DimensionMismatch {
                        expected: a.len(),
                        found: v.len(),
                    });
                }
                a.iter_mut().zip(v).for_each(|(x, y)| *x += y);
            }
        }
        count += 1;
    }
    let mut acc = acc.ok_or(Error::EmptySample)?;
    acc.iter_mut().for_each(|x| *x /= count as f64);
    Ok(acc)
}

impl DncAverage for PropensityFit {
    fn dnc_average(fits: &[Self]) -> Result<Self> {
        let gamma = mean_of(fits.iter().map(|f| f.gamma.as_slice()))?;
        Ok(PropensityFit {
            gamma,
            separated: fits.iter().any(|f| f.separated),
            iterations: 0,
        })
    }
}

impl DncAverage for OutcomeFit {
    fn dnc_average(fits: &[Self]) -> Result<Self> {
        Ok(OutcomeFit {
            eta0: mean_of(fits.iter().map(|f| f.eta0.as_slice()))?,
            eta1: mean_of(fits.iter().map(|f| f.eta1.as_slice()))?,
        })
    }
}

impl DncAverage for NuisanceFit {
    fn dnc_average(fits: &[Self]) -> Result<Self> {
        let props: Vec<PropensityFit> = fits.iter().map(|f| f.propensity.clone()).collect();
        let outs: Vec<OutcomeFit> = fits.iter().map(|f| f.outcome.clone()).collect();
        Ok(NuisanceFit {
            propensity: PropensityFit::dnc_average(&props)?,
            outcome: OutcomeFit::dnc_average(&outs)?,
        })
    }
}

pub fn dnc_average<T: DncAverage>(fits: &[T]) -> Result<T> {
    T::dnc_average(fits)
}

/// Max-norm of the average logistic score at `gamma`; used to audit fits.
pub fn logistic_score_norm(covariates: &Covariates, treatments: &[u8], gamma: &[f64]) -> f64 {
    let p = covariates.ncols();
    let mut score = vec![0.0; p + 1];
    for (x, &a) in covariates.rows().zip(treatments) {
        let r = a as f64 - logistic(gamma[0] + dot(&gamma[1..], x));
        score[0] += r;
        for j in 0..p {
            score[j + 1] += r * x[j];
        }
    }
    max_abs(&score) / covariates.nrows() as f64
}
