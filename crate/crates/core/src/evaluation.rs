//! Test-set criteria for a fitted rule: agreement with the optimal rule and
//! the inverse-probability-weighted value estimate.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nuisance::{PropensityClip, PropensityFit};
use crate::numeric::CompensatedSum;
use crate::objective::RuleCoefficients;

/// Where `π(x)` comes from in the value estimator.
#[derive(Debug, Clone, Copy)]
pub enum PropensitySource<'a> {
    /// The stored generating propensity of simulated data.
    TrueDesign,
    /// A fitted logistic model, clipped.
    Estimated(&'a PropensityFit, PropensityClip),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Absent when the test data carries no true contrast.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ccr: Option<f64>,
    pub value: f64,
    pub n_test: usize,
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
}

/// Share of test units where `I(f(x) > 0)` equals `I(δ*(x) > 0)`.
pub fn ccr(beta: &RuleCoefficients, test: &Dataset) -> Result<f64> {
    let truth = test.true_cte.as_ref().ok_or(Error::MissingTruth)?;
    check(beta, test)?;
    let agree = test
        .covariates
        .rows()
        .zip(truth)
        .filter(|(x, &d)| (beta.decision(x) > 0.0) == (d > 0.0))
        .count();
    Ok(agree as f64 / test.len() as f64)
}

fn check(beta: &RuleCoefficients, test: &Dataset) -> Result<()> {
    if test.is_empty() {
        return Err(Error::EmptySample);
    }
    if beta.dim() != test.dim() {
        return Err(Error::DimensionMismatch {
            expected: test.dim(),
            found: beta.dim(),
        });
    }
    Ok(())
}

/// Self-normalised IPW value `Σ Y·I{A=d}/π_A / Σ I{A=d}/π_A` with `d(x) = I(f(x) > 0)`.
pub fn empirical_value(beta: &RuleCoefficients, test: &Dataset, source: PropensitySource<'_>) -> Result<f64> {
    check(beta, test)?;
    let stored = match source {
        PropensitySource::TrueDesign => Some(test.true_propensity.as_ref().ok_or(Error::MissingTruth)?),
        PropensitySource::Estimated(..) => None,
    };
    let mut num = CompensatedSum::new();
    let mut den = CompensatedSum::new();
    for (i, x) in test.covariates.rows().enumerate() {
        let a = test.treatments[i];
        if beta.recommend(x) != a {
            continue;
        }
        let pi = match (stored, source) {
            (Some(p), _) => p[i],
            (None, PropensitySource::Estimated(fit, clip)) => clip.apply(fit.predict(x)),
            (None, PropensitySource::TrueDesign) => unreachable!(),
        };
        let pa = if a == 1 { pi } else { 1.0 - pi };
        num.add(test.outcomes[i] / pa);
        den.add(1.0 / pa);
    }
    let den = den.value();
    if den == 0.0 {
        return Err(Error::EmptyIntersection);
    }
    let value = num.value() / den;
    if !value.is_finite() {
        return Err(Error::NonFinite("empirical value"));
    }
    Ok(value)
}

/// Both criteria; CCR is skipped when the test data has no truth column.
pub fn evaluate(
    beta: &RuleCoefficients,
    test: &Dataset,
    source: PropensitySource<'_>,
    method: &str,
    scenario: Option<&str>,
) -> Result<EvalResult> {
    let ccr = match test.true_cte {
        Some(_) => Some(ccr(beta, test)?),
        None => None,
    };
    Ok(EvalResult {
        ccr,
        value: empirical_value(beta, test, source)?,
        n_test: test.len(),
        method: method.to_string(),
        scenario: scenario.map(str::to_string),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Covariates;
    use crate::simgen::{gen_units, Design, Scenario};

    fn bayes_c() -> RuleCoefficients {
        RuleCoefficients::from_vec(&[1.62, -1.8, 0.0, 0.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn ccr_examples() {
        let test = gen_units(Scenario::C, Design::Rct, 10_000, 5, 0.5, 1).unwrap();
        assert_eq!(ccr(&bayes_c(), &test).unwrap(), 1.0);
        assert_eq!(ccr(&bayes_c().scaled(-1.0), &test).unwrap(), 0.0);
        let zero = ccr(&RuleCoefficients::zeros(5), &test).unwrap();
        assert!((zero - 0.05).abs() < 0.01, "{zero}");
        assert_eq!(ccr(&bayes_c().scaled(7.5), &test).unwrap(), 1.0);
    }

    #[test]
    fn ccr_needs_truth() {
        let mut test = gen_units(Scenario::C, Design::Rct, 10, 5, 0.5, 1).unwrap();
        test.true_cte = None;
        assert!(matches!(ccr(&bayes_c(), &test), Err(Error::MissingTruth)));
    }

    fn rct(x: Vec<f64>, a: Vec<u8>, y: Vec<f64>) -> Dataset {
        let n = a.len();
        let mut ds = Dataset::new(Covariates::new(x, 1).unwrap(), a, y).unwrap();
        ds.true_propensity = Some(vec![0.5; n]);
        ds
    }

    #[test]
    fn value_examples() {
        // d(x) = I(x > 0) and A = I(x > 0) for every unit
        let ds = rct(vec![-1.0, -0.5, 0.5, 1.0], vec![0, 0, 1, 1], vec![1.0, 2.0, 3.0, 6.0]);
        let rule = RuleCoefficients::from_vec(&[0.0, 1.0]).unwrap();
        assert_eq!(empirical_value(&rule, &ds, PropensitySource::TrueDesign).unwrap(), 3.0);
        let never = rct(vec![-1.0, 1.0], vec![1, 0], vec![1.0, 2.0]);
        assert!(matches!(
            empirical_value(&rule, &never, PropensitySource::TrueDesign),
            Err(Error::EmptyIntersection)
        ));
        // tie f = 0 recommends control
        let tie = rct(vec![0.0], vec![0], vec![4.0]);
        assert_eq!(
            empirical_value(&RuleCoefficients::zeros(1), &tie, PropensitySource::TrueDesign).unwrap(),
            4.0
        );
    }

    #[test]
    fn estimated_propensity_source() {
        let test = gen_units(Scenario::B, Design::Observational, 5000, 5, 0.5, 2).unwrap();
        let exact = PropensityFit::from_gamma(vec![0.1, 0.25, 0.25, 0.0, 0.0, 0.0]);
        let rule = RuleCoefficients::from_vec(&[0.2, -1.0, 0.5, 0.0, 0.3, 0.0]).unwrap();
        let a = empirical_value(&rule, &test, PropensitySource::TrueDesign).unwrap();
        let b = empirical_value(
            &rule,
            &test,
            PropensitySource::Estimated(&exact, PropensityClip::default()),
        )
        .unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn value_is_scale_invariant_and_bounded() {
        let test = gen_units(Scenario::D, Design::Observational, 4000, 5, 0.5, 3).unwrap();
        let rule = RuleCoefficients::from_vec(&[0.1, 1.0, -2.0, 0.0, 0.0, 0.5]).unwrap();
        let v = empirical_value(&rule, &test, PropensitySource::TrueDesign).unwrap();
        assert_eq!(
            v,
            empirical_value(&rule.scaled(3.0), &test, PropensitySource::TrueDesign).unwrap()
        );
        let agree: Vec<f64> = (0..test.len())
            .filter(|&i| rule.recommend(test.covariates.row(i)) == test.treatments[i])
            .map(|i| test.outcomes[i])
            .collect();
        let lo = agree.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = agree.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo <= v && v <= hi);
    }

    #[test]
    fn bayes_rule_value_matches_oracle_value() {
        // V(d*) = E[baseline] + E[max(δ*, 0)] and the baseline has mean 1.
        let test = gen_units(Scenario::A, Design::Observational, 10_000, 5, 0.5, 4).unwrap();
        let bayes = RuleCoefficients::from_vec(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let v = empirical_value(&bayes, &test, PropensitySource::TrueDesign).unwrap();
        let oracle = 1.0 + test.true_cte.as_ref().unwrap().iter().map(|d| d.max(0.0)).sum::<f64>() / test.len() as f64;
        assert!((v - oracle).abs() < 0.1, "{v} vs {oracle}");
        let zero = empirical_value(&RuleCoefficients::zeros(5), &test, PropensitySource::TrueDesign).unwrap();
        assert!(v > zero + 1.0);
    }

    #[test]
    fn evaluate_without_truth_skips_ccr() {
        let mut test = gen_units(Scenario::C, Design::Rct, 1000, 5, 0.5, 5).unwrap();
        let with = evaluate(&bayes_c(), &test, PropensitySource::TrueDesign, "dce", Some("c")).unwrap();
        assert_eq!(with.ccr, Some(1.0));
        test.true_cte = None;
        let without = evaluate(&bayes_c(), &test, PropensitySource::TrueDesign, "dce", None).unwrap();
        assert_eq!(without.ccr, None);
        assert_eq!(without.value, with.value);
        assert_eq!(without.n_test, 1000);
    }
}
