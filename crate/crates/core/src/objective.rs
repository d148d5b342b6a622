//! Weighted smoothed-hinge risk of a linear rule, its gradient, the ridge
//! penalty, and the gradient-shifted surrogate solved on the central site.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nuisance::WeightedSample;
use crate::numeric::{dot, CompensatedSum};
use crate::smoothing::SmoothedLoss;

/// Linear decision function `f(x) = β₀ + β₁ᵀx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleCoefficients {
    pub beta0: f64,
    pub beta1: Vec<f64>,
}

impl RuleCoefficients {
    pub fn zeros(p: usize) -> Self {
        Self {
            beta0: 0.0,
            beta1: vec![0.0; p],
        }
    }

    /// From `(β₀, β₁…)`.
    pub fn from_vec(v: &[f64]) -> Result<Self> {
        let (first, rest) = v
            .split_first()
            .ok_or(Error::DimensionMismatch { expected: 1, found: 0 })?;
        let rule = Self {
            beta0: *first,
            beta1: rest.to_vec(),
        };
        if !rule.is_finite() {
            return Err(Error::NonFinite("rule coefficients"));
        }
        Ok(rule)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.beta1.len() + 1);
        v.push(self.beta0);
        v.extend_from_slice(&self.beta1);
        v
    }

    pub fn dim(&self) -> usize {
        self.beta1.len()
    }

    pub fn is_finite(&self) -> bool {
        self.beta0.is_finite() && self.beta1.iter().all(|b| b.is_finite())
    }

    #[inline]
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.beta0 + dot(&self.beta1, x)
    }

    /// Treatment recommended by the rule: `I(f(x) > 0)`.
    pub fn recommend(&self, x: &[f64]) -> u8 {
        u8::from(self.decision(x) > 0.0)
    }

    pub fn slope_norm_sq(&self) -> f64 {
        self.beta1.iter().map(|b| b * b).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            beta0: self.beta0 * c,
            beta1: self.beta1.iter().map(|b| b * c).collect(),
        }
    }
}

fn check(ws: &WeightedSample, beta: &RuleCoefficients) -> Result<()> {
    if ws.is_empty() {
        return Err(Error::EmptySample);
    }
    if ws.dim() != beta.dim() {
        return Err(Error::DimensionMismatch {
            expected: ws.dim(),
            found: beta.dim(),
        });
    }
    Ok(())
}

/// `N⁻¹ Σ wᵢ φ_h(Ẑᵢ f(xᵢ))`.
pub fn risk(ws: &WeightedSample, beta: &RuleCoefficients, sl: &SmoothedLoss) -> Result<f64> {
    check(ws, beta)?;
    let mut acc = CompensatedSum::new();
    for ((x, &w), &z) in ws.covariates().rows().zip(ws.weights()).zip(ws.labels()) {
        if w != 0.0 {
            acc.add(w * sl.loss(z * beta.decision(x)));
        }
    }
    Ok(acc.value() / ws.len() as f64)
}

/// `N⁻¹ Σ wᵢ φ_h'(Ẑᵢ f(xᵢ)) Ẑᵢ (1, xᵢ)`.
pub fn risk_gradient(ws: &WeightedSample, beta: &RuleCoefficients, sl: &SmoothedLoss) -> Result<Vec<f64>> {
    check(ws, beta)?;
    let p = ws.dim();
    let mut acc = vec![CompensatedSum::new(); p + 1];
    for ((x, &w), &z) in ws.covariates().rows().zip(ws.weights()).zip(ws.labels()) {
        if w == 0.0 {
            continue;
        }
        let coef = w * sl.loss_deriv(z * beta.decision(x)) * z;
        if coef == 0.0 {
            continue;
        }
        acc[0].add(coef);
        for (a, xj) in acc[1..].iter_mut().zip(x) {
            a.add(coef * xj);
        }
    }
    let n = ws.len() as f64;
    Ok(acc.iter().map(|a| a.value() / n).collect())
}

/// Risk plus `λ‖β₁‖²`; the intercept is not penalised.
pub fn penalized_objective(
    ws: &WeightedSample,
    beta: &RuleCoefficients,
    sl: &SmoothedLoss,
    lambda: f64,
) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(risk(ws, beta, sl)? + lambda * beta.slope_norm_sq())
}

pub fn penalized_gradient(
    ws: &WeightedSample,
    beta: &RuleCoefficients,
    sl: &SmoothedLoss,
    lambda: f64,
) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    let mut g = risk_gradient(ws, beta, sl)?;
    for (gj, bj) in g[1..].iter_mut().zip(&beta.beta1) {
        *gj += 2.0 * lambda * bj;
    }
    Ok(g)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "ridge penalty must be finite and nonnegative, got {lambda}"
        )))
    }
}

/// `∇Q̂_{1,b}(β̃) − ∇Q̂_h(β̃)`: the correction that aligns the central-site
/// gradient with the global one at the anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateShift {
    pub shift: Vec<f64>,
}

impl SurrogateShift {
    pub fn zero(p: usize) -> Self {
        Self {
            shift: vec![0.0; p + 1],
        }
    }

    pub fn new(central_gradient: &[f64], global_gradient: &[f64]) -> Result<Self> {
        if central_gradient.len() != global_gradient.len() {
            return Err(Error::DimensionMismatch {
                expected: central_gradient.len(),
                found: global_gradient.len(),
            });
        }
        let shift: Vec<f64> = central_gradient
            .iter()
            .zip(global_gradient)
            .map(|(a, b)| a - b)
            .collect();
        if shift.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("surrogate shift"));
        }
        Ok(Self { shift })
    }

    pub fn is_zero(&self) -> bool {
        self.shift.iter().all(|&s| s == 0.0)
    }
}

fn check_surrogate(beta: &RuleCoefficients, shift: &SurrogateShift, anchor: &RuleCoefficients) -> Result<()> {
    let k = beta.dim() + 1;
    for found in [shift.shift.len(), anchor.dim() + 1] {
        if found != k {
            return Err(Error::DimensionMismatch { expected: k, found });
        }
    }
    Ok(())
}

/// `Q̂_{1,b}(β) − ⟨shift, β − anchor⟩ + λ‖β₁‖²`.
pub fn surrogate_objective(
    central: &WeightedSample,
    beta: &RuleCoefficients,
    sl_b: &SmoothedLoss,
    shift: &SurrogateShift,
    anchor: &RuleCoefficients,
    lambda: f64,
) -> Result<f64> {
    check_surrogate(beta, shift, anchor)?;
    let diff: Vec<f64> = beta.to_vec().iter().zip(anchor.to_vec()).map(|(b, a)| b - a).collect();
    Ok(penalized_objective(central, beta, sl_b, lambda)? - dot(&shift.shift, &diff))
}

pub fn surrogate_gradient(
    central: &WeightedSample,
    beta: &RuleCoefficients,
    sl_b: &SmoothedLoss,
    shift: &SurrogateShift,
    anchor: &RuleCoefficients,
    lambda: f64,
) -> Result<Vec<f64>> {
    check_surrogate(beta, shift, anchor)?;
    let mut g = penalized_gradient(central, beta, sl_b, lambda)?;
    g.iter_mut().zip(&shift.shift).for_each(|(gj, s)| *gj -= s);
    Ok(g)
}
