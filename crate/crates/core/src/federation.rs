//! Multi-site fitting: the pooled estimator, the central-site-only start,
//! the gradient-exchange protocol and the one-shot averaging baseline.
//!
//! Every cross-site payload is a coefficient vector or a gradient vector of
//! length `p + 1` in raw covariate coordinates. The central site (site 1)
//! standardizes its own covariates and converts aggregated gradients into
//! those coordinates before solving the shifted surrogate.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{format_real17, Dataset};
use crate::error::{Error, Result};
use crate::gcd::{fit_penalized, solve_surrogate, GcdOptions, Standardization, Surrogate};
use crate::nuisance::{
    contrasts, dnc_average, fit_nuisance, pseudo_labels, LogisticOptions, NuisanceFit, NuisanceMode, PropensityClip,
    WeightedSample,
};
use crate::numeric::{distance2, max_abs, norm2};
use crate::objective::{penalized_gradient, risk_gradient, RuleCoefficients, SurrogateShift};
use crate::smoothing::{KernelKind, SmoothedLoss};

/// Fixed per-message overhead in the byte accounting: round (4), kind (1),
/// site id (4), unit count (4), payload length (3).
pub const HEADER_BYTES: usize = 16;
/// Bytes per real in a payload.
pub const REAL_BYTES: usize = 8;

/// One site's share of the data.
#[derive(Debug, Clone)]
pub struct SiteView {
    /// 1-based; site 1 is the central site.
    pub site_id: usize,
    /// Row indices into the pooled dataset.
    pub indices: Vec<usize>,
    /// Local rows.
    pub data: Dataset,
    /// Weights and labels from the shared nuisance fit.
    pub sample: WeightedSample,
    /// This site's own nuisance fit.
    pub local_fit: NuisanceFit,
}

impl SiteView {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Weights and labels computed from this site's own nuisance fit.
    pub fn local_sample(&self, clip: PropensityClip) -> Result<WeightedSample> {
        pseudo_labels(&contrasts(&self.data, &self.local_fit, clip), &self.data.covariates)
    }
}

/// Sites plus the shared nuisance fit their weights were built from.
#[derive(Debug, Clone)]
pub struct SiteSetup {
    pub sites: Vec<SiteView>,
    pub shared_fit: NuisanceFit,
}

/// Fits local nuisances on every site, pools them according to `mode`, and
/// builds each site's weighted sample from the pooled fit.
pub fn build_sites(
    data: &Dataset,
    partition: &[Vec<usize>],
    mode: NuisanceMode,
    clip: PropensityClip,
    opts: LogisticOptions,
) -> Result<SiteSetup> {
    if partition.is_empty() {
        return Err(Error::EmptySample);
    }
    let locals: Vec<(Dataset, NuisanceFit)> = partition
        .par_iter()
        .enumerate()
        .map(|(k, idx)| {
            if idx.is_empty() {
                return Err(Error::EmptySite(k + 1));
            }
            let local = data.subset(idx);
            let fit = fit_nuisance(&local, opts)?;
            Ok((local, fit))
        })
        .collect::<Result<_>>()?;
    let shared_fit = match mode {
        NuisanceMode::Dnc => dnc_average(&locals.iter().map(|(_, f)| f.clone()).collect::<Vec<_>>())?,
        NuisanceMode::CentralOnly => locals[0].1.clone(),
    };
    let sites = locals
        .into_iter()
        .zip(partition)
        .enumerate()
        .map(|(k, ((local, local_fit), idx))| {
            let sample = pseudo_labels(&contrasts(&local, &shared_fit, clip), &local.covariates)?;
            Ok(SiteView {
                site_id: k + 1,
                indices: idx.clone(),
                data: local,
                sample,
                local_fit,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SiteSetup { sites, shared_fit })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    BroadcastBeta,
    GradientReply,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMessage {
    pub kind: MessageKind,
    pub round: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub site_id: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unit_count: Option<usize>,
    pub payload: Vec<f64>,
}

impl RoundMessage {
    pub fn broadcast(round: usize, beta: &RuleCoefficients) -> Self {
        Self {
            kind: MessageKind::BroadcastBeta,
            round,
            site_id: None,
            unit_count: None,
            payload: beta.to_vec(),
        }
    }

    pub fn reply(round: usize, site_id: usize, unit_count: usize, gradient: Vec<f64>) -> Result<Self> {
        if unit_count == 0 {
            return Err(Error::EmptySite(site_id));
        }
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient reply"));
        }
        Ok(Self {
            kind: MessageKind::GradientReply,
            round,
            site_id: Some(site_id),
            unit_count: Some(unit_count),
            payload: gradient,
        })
    }

    pub fn bytes(&self) -> usize {
        HEADER_BYTES + REAL_BYTES * self.payload.len()
    }

    /// One transcript line, reals at 17 significant digits.
    pub fn to_json_line(&self) -> String {
        let reals = self
            .payload
            .iter()
            .map(|&x| format_real17(x))
            .collect::<Vec<_>>()
            .join(",");
        match self.kind {
            MessageKind::BroadcastBeta => format!(r#"{{"round":{},"kind":"broadcast","beta":[{reals}]}}"#, self.round),
            MessageKind::GradientReply => format!(
                r#"{{"round":{},"kind":"grad","site":{},"n":{},"g":[{reals}]}}"#,
                self.round,
                self.site_id.unwrap_or(0),
                self.unit_count.unwrap_or(0)
            ),
        }
    }
}

/// Site gradient of the smoothed risk at the broadcast coefficients.
pub fn local_gradient(
    site: &SiteView,
    round: usize,
    beta: &RuleCoefficients,
    sl_h: &SmoothedLoss,
) -> Result<RoundMessage> {
    if site.sample.is_empty() {
        return Err(Error::EmptySite(site.site_id));
    }
    if !beta.is_finite() {
        return Err(Error::NonFinite("broadcast coefficients"));
    }
    RoundMessage::reply(
        round,
        site.site_id,
        site.sample.len(),
        risk_gradient(&site.sample, beta, sl_h)?,
    )
}

/// Global gradient from one reply per expected site: a plain mean when all
/// sites hold the same number of units, otherwise the unit-count-weighted mean.
pub fn aggregate(replies: &[RoundMessage], expected: &[usize]) -> Result<Vec<f64>> {
    let missing: Vec<usize> = expected
        .iter()
        .copied()
        .filter(|id| {
            !replies
                .iter()
                .any(|r| r.kind == MessageKind::GradientReply && r.site_id == Some(*id))
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingReply(missing));
    }
    let used: Vec<&RoundMessage> = expected
        .iter()
        .map(|id| replies.iter().find(|r| r.site_id == Some(*id)).expect("checked above"))
        .collect();
    let k = used
        .first()
        .map(|r| r.payload.len())
        .ok_or(Error::MissingReply(Vec::new()))?;
    if let Some(bad) = used.iter().find(|r| r.payload.len() != k) {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: bad.payload.len(),
        });
    }
    let counts: Vec<f64> = used.iter().map(|r| r.unit_count.unwrap_or(1) as f64).collect();
    let balanced = counts.iter().all(|&c| c == counts[0]);
    let total: f64 = counts.iter().sum();
    let mut out = vec![0.0; k];
    for (r, &c) in used.iter().zip(&counts) {
        let w = if balanced { 1.0 / used.len() as f64 } else { c / total };
        out.iter_mut().zip(&r.payload).for_each(|(o, g)| *o += w * g);
    }
    Ok(out)
}

/// Transport between the coordinator and the sites. Implementations return
/// whatever replies arrived; the coordinator checks completeness.
pub trait SiteChannel: Sync {
    fn site_ids(&self) -> Vec<usize>;
    fn exchange(&self, broadcast: &RoundMessage, sl_h: &SmoothedLoss) -> Vec<Result<RoundMessage>>;
}

/// All sites in this process; replies are computed in parallel and returned
/// in site order.
#[derive(Debug, Clone, Copy)]
pub struct InProcess<'a> {
    pub sites: &'a [SiteView],
}

impl SiteChannel for InProcess<'_> {
    fn site_ids(&self) -> Vec<usize> {
        self.sites.iter().map(|s| s.site_id).collect()
    }

    fn exchange(&self, broadcast: &RoundMessage, sl_h: &SmoothedLoss) -> Vec<Result<RoundMessage>> {
        let beta = RuleCoefficients::from_vec(&broadcast.payload);
        self.sites
            .par_iter()
            .map(|s| match &beta {
                Ok(b) => local_gradient(s, broadcast.round, b, sl_h),
                Err(_) => Err(Error::NonFinite("broadcast coefficients")),
            })
            .collect()
    }
}

/// User-facing hyperparameters; unset values take their sample-size defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub rounds: usize,
    pub kernel: KernelKind,
    pub h: Option<f64>,
    pub b: Option<f64>,
    pub lambda: Option<f64>,
    /// Early stop when consecutive round iterates differ by less than this.
    pub tol: f64,
    pub gcd: GcdOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            kernel: KernelKind::Epanechnikov,
            h: None,
            b: None,
            lambda: None,
            tol: 1e-8,
            gcd: GcdOptions::default(),
        }
    }
}

/// Resolved bandwidths and penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub h: f64,
    pub b: f64,
    pub lambda: f64,
}

impl FitConfig {
    /// `h = N^{-1/3}`, `b = n^{-1/3}` with `n` the central-site size, `λ = N^{-1/2}`.
    pub fn resolve(&self, n_total: usize, n_central: usize) -> Result<Hyper> {
        if n_total == 0 || n_central == 0 {
            return Err(Error::EmptySample);
        }
        let h = self.h.unwrap_or((n_total as f64).powf(-1.0 / 3.0));
        let b = self.b.unwrap_or((n_central as f64).powf(-1.0 / 3.0));
        let lambda = self.lambda.unwrap_or(1.0 / (n_total as f64).sqrt());
        for bw in [h, b] {
            if !(bw.is_finite() && bw > 0.0) {
                return Err(Error::InvalidBandwidth(bw));
            }
        }
        if b < h {
            return Err(Error::BandwidthOrder { h, b });
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be finite and nonnegative, got {lambda}"
            )));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("at least one round is required".into()));
        }
        Ok(Hyper { h, b, lambda })
    }

    pub fn loss(&self, bandwidth: f64) -> Result<SmoothedLoss> {
        SmoothedLoss::new(self.kernel, bandwidth)
    }
}

/// A single-sample penalized fit with its optimality diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleFit {
    pub beta: RuleCoefficients,
    pub standardization: Standardization,
    pub sweeps: usize,
    pub converged: bool,
    /// Max-norm of the penalized gradient at the solution.
    pub kkt: f64,
}

/// Pooled-data estimator: minimizes the penalized smoothed risk on `pooled`.
pub fn fit_fce(pooled: &WeightedSample, sl_h: &SmoothedLoss, lambda: f64, opts: &GcdOptions) -> Result<SingleFit> {
    let fit = fit_penalized(pooled, sl_h, lambda, None, opts)?;
    let kkt = max_abs(&penalized_gradient(pooled, &fit.beta, sl_h, lambda)?);
    Ok(SingleFit {
        beta: fit.beta,
        standardization: fit.standardization,
        sweeps: fit.report.sweeps,
        converged: fit.report.converged,
        kkt,
    })
}

/// The central site's own fit at bandwidth `b`.
pub fn fit_initial(central: &SiteView, sl_b: &SmoothedLoss, lambda: f64, opts: &GcdOptions) -> Result<SingleFit> {
    fit_fce(&central.sample, sl_b, lambda, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub beta: RuleCoefficients,
    pub hyper: Hyper,
    /// Raw-scale iterates, starting with the central-site initializer.
    pub trajectory: Vec<RuleCoefficients>,
    /// Euclidean norm of the global penalized gradient at each broadcast iterate.
    pub grad_norms: Vec<f64>,
    /// Coordinate-descent sweeps used by the initializer and by each round.
    pub sweeps: Vec<usize>,
    pub transcript: Vec<RoundMessage>,
    pub rounds: usize,
    pub bytes: usize,
    /// True when the round-to-round change fell below the early-stop tolerance.
    pub stopped_early: bool,
    pub standardization: Standardization,
}

impl FitReport {
    pub fn write_transcript<W: Write>(&self, mut out: W) -> Result<()> {
        for m in &self.transcript {
            writeln!(out, "{}", m.to_json_line())?;
        }
        Ok(())
    }
}

/// Expected transcript size for `rounds` rounds over `sites` sites.
pub fn expected_bytes(rounds: usize, sites: usize, p: usize) -> usize {
    rounds * (sites + 1) * (HEADER_BYTES + REAL_BYTES * (p + 1))
}

/// The distributed estimator over in-process sites.
pub fn fit_dce(sites: &[SiteView], config: &FitConfig) -> Result<FitReport> {
    let central = sites.first().ok_or(Error::EmptySample)?;
    let n_total = sites.iter().map(SiteView::len).sum();
    fit_dce_with(central, &InProcess { sites }, n_total, config)
}

/// The distributed estimator: the coordinator lives on `central` and talks
/// to every site, itself included, through `channel`.
pub fn fit_dce_with(
    central: &SiteView,
    channel: &dyn SiteChannel,
    n_total: usize,
    config: &FitConfig,
) -> Result<FitReport> {
    let hyper = config.resolve(n_total, central.len())?;
    let sl_h = config.loss(hyper.h)?;
    let sl_b = config.loss(hyper.b)?;
    let p = central.sample.dim();
    let expected = channel.site_ids();

    let init = fit_initial(central, &sl_b, hyper.lambda, &config.gcd)?;
    let st = init.standardization.clone();
    let central_std = central.sample.with_covariates(st.apply(central.sample.covariates())?)?;
    let ridge = st.raw_ridge(hyper.lambda);

    let mut beta = init.beta.clone();
    let mut trajectory = vec![beta.clone()];
    let mut grad_norms = Vec::new();
    let mut sweeps = vec![init.sweeps];
    let mut transcript = Vec::new();
    let mut stopped_early = false;
    let mut rounds = 0;

    for t in 1..=config.rounds {
        let broadcast = RoundMessage::broadcast(t, &beta);
        transcript.push(broadcast.clone());
        let mut replies = Vec::with_capacity(expected.len());
        for r in channel.exchange(&broadcast, &sl_h) {
            match r {
                Ok(m) => replies.push(m),
                Err(Error::EmptySite(_)) | Err(Error::NonFinite(_)) => {}
                Err(e) => return Err(e),
            }
        }
        let global_raw = aggregate(&replies, &expected)?;
        transcript.extend(replies);
        rounds = t;

        let mut penalized = global_raw.clone();
        penalized[1..]
            .iter_mut()
            .zip(&beta.beta1)
            .for_each(|(g, b)| *g += 2.0 * hyper.lambda * b);
        grad_norms.push(norm2(&penalized));

        let anchor = st.from_raw(&beta)?;
        let global = st.gradient_from_raw(&global_raw)?;
        let local = risk_gradient(&central_std, &anchor, &sl_b)?;
        let shift = SurrogateShift::new(&local, &global)?;
        let problem = Surrogate::with_ridge(&central_std, &sl_b, &shift, &anchor, ridge.clone())?;
        let report = solve_surrogate(&problem, &config.gcd)?;
        sweeps.push(report.sweeps);
        let next = st.to_raw(&report.beta)?;
        if !next.is_finite() {
            return Err(Error::NonFinite("round iterate"));
        }
        let step = distance2(&next.to_vec(), &beta.to_vec());
        beta = next;
        trajectory.push(beta.clone());
        if step < config.tol {
            stopped_early = t < config.rounds;
            break;
        }
    }
    debug_assert_eq!(p + 1, beta.to_vec().len());
    let bytes = transcript.iter().map(RoundMessage::bytes).sum();
    Ok(FitReport {
        beta,
        hyper,
        trajectory,
        grad_norms,
        sweeps,
        transcript,
        rounds,
        bytes,
        stopped_early,
        standardization: st,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvgFit {
    pub beta: RuleCoefficients,
    /// Sites whose local fit failed, with the reason.
    pub failures: Vec<(usize, String)>,
}

/// One-shot averaging: each site fits on its own data with its own nuisance
/// fits; the raw-scale coefficients are averaged over sites that succeeded.
pub fn fit_avg(
    sites: &[SiteView],
    sl: &SmoothedLoss,
    lambda: f64,
    clip: PropensityClip,
    opts: &GcdOptions,
) -> Result<AvgFit> {
    let fits: Vec<Result<RuleCoefficients>> = sites
        .par_iter()
        .map(|s| {
            let p = s.data.dim();
            if s.len() < p + 2 {
                return Err(Error::InvalidConfig(format!(
                    "site {} has {} units, fewer than p + 2",
                    s.site_id,
                    s.len()
                )));
            }
            let local = s.local_sample(clip)?;
            Ok(fit_fce(&local, sl, lambda, opts)?.beta)
        })
        .collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (s, f) in sites.iter().zip(fits) {
        match f {
            Ok(b) => ok.push(b.to_vec()),
            Err(e) => failures.push((s.site_id, e.to_string())),
        }
    }
    if ok.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "every site failed its local fit: {failures:?}"
        )));
    }
    let k = ok[0].len();
    let mean: Vec<f64> = (0..k)
        .map(|j| ok.iter().map(|v| v[j]).sum::<f64>() / ok.len() as f64)
        .collect();
    Ok(AvgFit {
        beta: RuleCoefficients::from_vec(&mean)?,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{gen_dataset, Design, PartitionPolicy, Scenario, ScenarioSpec};

    fn setup(scenario: Scenario, n_total: usize, m: usize, seed: u64) -> (Dataset, SiteSetup) {
        let g = gen_dataset(&ScenarioSpec::new(scenario, Design::Observational, n_total, m, seed)).unwrap();
        let s = build_sites(
            &g.data,
            &g.sites,
            NuisanceMode::Dnc,
            PropensityClip::default(),
            LogisticOptions::default(),
        )
        .unwrap();
        (g.data, s)
    }

    fn pooled_sample(setup: &SiteSetup) -> WeightedSample {
        // Rebuild the pooled sample in site order; row order does not affect any risk.
        let p = setup.sites[0].sample.dim();
        let mut w = Vec::new();
        let mut z = Vec::new();
        let mut x = Vec::new();
        for s in &setup.sites {
            w.extend_from_slice(s.sample.weights());
            z.extend_from_slice(s.sample.labels());
            x.extend_from_slice(s.sample.covariates().as_slice());
        }
        WeightedSample::new(w, z, crate::data::Covariates::new(x, p).unwrap()).unwrap()
    }

    #[test]
    fn zero_weight_site_sends_zero_gradient() {
        let (_, mut s) = setup(Scenario::A, 400, 2, 1);
        s.sites[1].sample = s.sites[1].sample.scaled(0.0);
        let sl = SmoothedLoss::epanechnikov(0.3).unwrap();
        let m = local_gradient(
            &s.sites[1],
            1,
            &RuleCoefficients::from_vec(&[0.1, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
            &sl,
        )
        .unwrap();
        assert!(m.payload.iter().all(|&g| g == 0.0));
        assert_eq!(m.unit_count, Some(200));
    }

    #[test]
    fn balanced_mean_of_replies_is_pooled_gradient() {
        let (_, s) = setup(Scenario::B, 800, 4, 2);
        let pooled = pooled_sample(&s);
        let sl = SmoothedLoss::epanechnikov(0.2).unwrap();
        let beta = RuleCoefficients::from_vec(&[0.3, -1.0, 0.5, 0.2, 0.0, 0.1]).unwrap();
        let replies: Vec<RoundMessage> = s
            .sites
            .iter()
            .map(|site| local_gradient(site, 1, &beta, &sl).unwrap())
            .collect();
        let agg = aggregate(&replies, &[1, 2, 3, 4]).unwrap();
        let direct = risk_gradient(&pooled, &beta, &sl).unwrap();
        for (a, b) in agg.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12, "{agg:?} vs {direct:?}");
        }
        let single = local_gradient(
            &SiteView {
                site_id: 1,
                ..s.sites[0].clone()
            },
            1,
            &beta,
            &sl,
        )
        .unwrap();
        assert_eq!(single.payload, risk_gradient(&s.sites[0].sample, &beta, &sl).unwrap());
    }

    #[test]
    fn unbalanced_aggregate_weights_by_unit_count() {
        let g = gen_dataset(&ScenarioSpec {
            partition: PartitionPolicy::Spread,
            ..ScenarioSpec::new(Scenario::C, Design::Observational, 1000, 3, 3)
        })
        .unwrap();
        let s = build_sites(
            &g.data,
            &g.sites,
            NuisanceMode::Dnc,
            PropensityClip::default(),
            LogisticOptions::default(),
        )
        .unwrap();
        let pooled = pooled_sample(&s);
        let sl = SmoothedLoss::epanechnikov(0.2).unwrap();
        let beta = RuleCoefficients::from_vec(&[0.5, -1.0, 0.0, 0.2, 0.0, 0.1]).unwrap();
        let replies: Vec<RoundMessage> = s
            .sites
            .iter()
            .map(|site| local_gradient(site, 1, &beta, &sl).unwrap())
            .collect();
        let agg = aggregate(&replies, &[1, 2, 3]).unwrap();
        let direct = risk_gradient(&pooled, &beta, &sl).unwrap();
        for (a, b) in agg.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_examples() {
        let r = |site, n, g: Vec<f64>| RoundMessage::reply(1, site, n, g).unwrap();
        let g = vec![1.0, -2.0, 0.5];
        assert_eq!(
            aggregate(&[r(1, 10, g.clone()), r(2, 10, g.clone())], &[1, 2]).unwrap(),
            g
        );
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        assert_eq!(
            aggregate(&[r(1, 10, g.clone()), r(2, 10, neg)], &[1, 2]).unwrap(),
            vec![0.0; 3]
        );
        let out = aggregate(&[r(1, 100, vec![4.0]), r(2, 300, vec![8.0])], &[1, 2]).unwrap();
        assert_eq!(out, vec![7.0]);
        match aggregate(&[r(2, 10, g.clone())], &[1, 2, 3]) {
            Err(Error::MissingReply(ids)) => assert_eq!(ids, vec![1, 3]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            aggregate(&[r(1, 10, g.clone()), r(2, 10, vec![1.0])], &[1, 2]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn resolve_defaults_and_order() {
        let h = FitConfig::default().resolve(1000, 125).unwrap();
        assert!((h.h - 0.1).abs() < 1e-12 && (h.b - 0.2).abs() < 1e-12);
        assert!((h.lambda - 1000f64.sqrt().recip()).abs() < 1e-15);
        let bad = FitConfig {
            h: Some(0.5),
            b: Some(0.2),
            ..FitConfig::default()
        };
        assert!(matches!(bad.resolve(1000, 125), Err(Error::BandwidthOrder { .. })));
        let zero = FitConfig {
            rounds: 0,
            ..FitConfig::default()
        };
        assert!(zero.resolve(10, 10).is_err());
    }

    #[test]
    fn fce_beats_zero_rule_on_separable_data() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![(i as f64 - 19.5) / 10.0, ((i * 7) % 11) as f64 / 5.0 - 1.0])
            .collect();
        let labels: Vec<f64> = rows.iter().map(|r| if r[0] > 0.0 { 1.0 } else { -1.0 }).collect();
        let ws = WeightedSample::new(
            vec![1.0; 40],
            labels.clone(),
            crate::data::Covariates::from_rows(&rows).unwrap(),
        )
        .unwrap();
        let sl = SmoothedLoss::epanechnikov(0.3).unwrap();
        let fit = fit_fce(&ws, &sl, 0.01, &GcdOptions::default()).unwrap();
        assert!(fit.kkt <= 1e-5, "{}", fit.kkt);
        let err = |b: &RuleCoefficients| {
            rows.iter()
                .zip(&labels)
                .filter(|(x, &z)| (b.decision(x) > 0.0) != (z > 0.0))
                .count()
        };
        assert!(err(&fit.beta) <= err(&RuleCoefficients::zeros(2)));
        assert!(fit.beta.beta1[0].abs() > 3.0 * fit.beta.beta1[1].abs());
    }

    #[test]
    fn fce_recovers_linear_direction() {
        let (_, s) = setup(Scenario::A, 5000, 1, 4);
        let pooled = &s.sites[0].sample;
        let hyper = FitConfig::default().resolve(5000, 5000).unwrap();
        let fit = fit_fce(
            pooled,
            &SmoothedLoss::epanechnikov(hyper.h).unwrap(),
            hyper.lambda,
            &GcdOptions::default(),
        )
        .unwrap();
        assert!(fit.kkt <= 1e-5, "kkt {}", fit.kkt);
        let truth = [1.0, 2.0, 3.0, 4.0, 5.0];
        let cos = crate::numeric::dot(&fit.beta.beta1, &truth) / (norm2(&fit.beta.beta1) * norm2(&truth));
        assert!(cos >= 0.98, "{cos}");
    }

    #[test]
    fn single_site_dce_reproduces_fce() {
        let (_, s) = setup(Scenario::C, 600, 1, 5);
        let cfg = FitConfig {
            b: Some(600f64.powf(-1.0 / 3.0)),
            ..FitConfig::default()
        };
        let report = fit_dce(&s.sites, &cfg).unwrap();
        let fce = fit_fce(
            &s.sites[0].sample,
            &SmoothedLoss::epanechnikov(report.hyper.h).unwrap(),
            report.hyper.lambda,
            &cfg.gcd,
        )
        .unwrap();
        assert!(distance2(&report.trajectory[1].to_vec(), &fce.beta.to_vec()) <= 1e-6);
    }

    #[test]
    fn dce_converges_to_fce() {
        let (_, s) = setup(Scenario::A, 3000, 6, 6);
        let cfg = FitConfig::default();
        let report = fit_dce(&s.sites, &cfg).unwrap();
        let pooled = pooled_sample(&s);
        let fce = fit_fce(
            &pooled,
            &SmoothedLoss::epanechnikov(report.hyper.h).unwrap(),
            report.hyper.lambda,
            &cfg.gcd,
        )
        .unwrap();
        let err = distance2(&report.beta.to_vec(), &fce.beta.to_vec());
        assert!(
            err <= 1e-3 * (1.0 + norm2(&fce.beta.to_vec())),
            "err {err}, traj {:?}",
            report.trajectory
        );
        assert_eq!(report.trajectory.len(), report.rounds + 1);
    }

    #[test]
    fn transcript_accounting() {
        let (_, s) = setup(Scenario::D, 1200, 4, 7);
        let cfg = FitConfig {
            rounds: 3,
            tol: 0.0,
            ..FitConfig::default()
        };
        let report = fit_dce(&s.sites, &cfg).unwrap();
        assert_eq!(report.rounds, 3);
        let broadcasts = report
            .transcript
            .iter()
            .filter(|m| m.kind == MessageKind::BroadcastBeta)
            .count();
        let grads = report
            .transcript
            .iter()
            .filter(|m| m.kind == MessageKind::GradientReply)
            .count();
        assert_eq!((broadcasts, grads), (3, 12));
        assert!(report.transcript.iter().all(|m| m.payload.len() == 6));
        assert_eq!(report.bytes, expected_bytes(3, 4, 5));
        let mut buf = Vec::new();
        report.write_transcript(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 15);
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let obj = v.as_object().unwrap();
            let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
            match obj["kind"].as_str().unwrap() {
                "broadcast" => assert_eq!(keys.len(), 3),
                "grad" => assert_eq!(keys.len(), 5),
                other => panic!("{other}"),
            }
        }
    }

    #[test]
    fn reports_are_deterministic() {
        let (_, s) = setup(Scenario::B, 900, 3, 8);
        let a = fit_dce(&s.sites, &FitConfig::default()).unwrap();
        let b = fit_dce(&s.sites, &FitConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    struct Dropping<'a> {
        inner: InProcess<'a>,
        drop: usize,
    }

    impl SiteChannel for Dropping<'_> {
        fn site_ids(&self) -> Vec<usize> {
            self.inner.site_ids()
        }

        fn exchange(&self, broadcast: &RoundMessage, sl_h: &SmoothedLoss) -> Vec<Result<RoundMessage>> {
            let mut out = self.inner.exchange(broadcast, sl_h);
            let _ = out.remove(self.drop - 1);
            out
        }
    }

    #[test]
    fn missing_reply_aborts() {
        let (_, s) = setup(Scenario::A, 600, 3, 9);
        let channel = Dropping {
            inner: InProcess { sites: &s.sites },
            drop: 2,
        };
        match fit_dce_with(&s.sites[0], &channel, 600, &FitConfig::default()) {
            Err(Error::MissingReply(ids)) => assert_eq!(ids, vec![2]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn avg_examples() {
        let (_, s) = setup(Scenario::C, 400, 1, 10);
        let sl = SmoothedLoss::epanechnikov(0.25).unwrap();
        let clip = PropensityClip::default();
        let opts = GcdOptions::default();
        let avg = fit_avg(&s.sites, &sl, 0.05, clip, &opts).unwrap();
        let local = fit_fce(&s.sites[0].local_sample(clip).unwrap(), &sl, 0.05, &opts).unwrap();
        assert_eq!(avg.beta, local.beta);
        let twins = vec![
            s.sites[0].clone(),
            SiteView {
                site_id: 2,
                ..s.sites[0].clone()
            },
        ];
        let twin_avg = fit_avg(&twins, &sl, 0.05, clip, &opts).unwrap();
        for (a, b) in twin_avg.beta.to_vec().iter().zip(local.beta.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
