//! Convolution-smoothed hinge loss.
//!
//! For a symmetric kernel density `K` with CDF `F` and partial first moment
//! `G(s) = ∫_{-∞}^s v K(v) dv`, the hinge `max(1 - t, 0)` convolved with
//! `K_h(u) = K(u/h)/h` has the closed form
//!
//! ```text
//! φ_h(t)   = h · (s F(s) − G(s)),   s = (1 − t)/h
//! φ_h'(t)  = −F(s)
//! φ_h''(t) = K(s)/h
//! ```
//!
//! which for the three supported kernels reduces to the polynomials and
//! normal-integral expressions below.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{normal_cdf, normal_pdf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    #[default]
    Epanechnikov,
    Uniform,
    Gaussian,
}

impl KernelKind {
    pub const ALL: [KernelKind; 3] = [KernelKind::Epanechnikov, KernelKind::Uniform, KernelKind::Gaussian];

    pub fn density(self, u: f64) -> f64 {
        match self {
            KernelKind::Epanechnikov if u.abs() <= 1.0 => 0.75 * (1.0 - u * u),
            KernelKind::Uniform if u.abs() <= 1.0 => 0.5,
            KernelKind::Gaussian => normal_pdf(u),
            _ => 0.0,
        }
    }

    pub fn cdf(self, s: f64) -> f64 {
        match self {
            KernelKind::Epanechnikov | KernelKind::Uniform if s <= -1.0 => 0.0,
            KernelKind::Epanechnikov | KernelKind::Uniform if s >= 1.0 => 1.0,
            KernelKind::Epanechnikov => (1.0 + s) * (1.0 + s) * (2.0 - s) / 4.0,
            KernelKind::Uniform => 0.5 * (1.0 + s),
            KernelKind::Gaussian => normal_cdf(s),
        }
    }

    /// `sup_u K(u)`.
    pub fn sup(self) -> f64 {
        match self {
            KernelKind::Epanechnikov => 0.75,
            KernelKind::Uniform => 0.5,
            KernelKind::Gaussian => normal_pdf(0.0),
        }
    }

    pub fn has_compact_support(self) -> bool {
        !matches!(self, KernelKind::Gaussian)
    }
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            KernelKind::Epanechnikov => "epanechnikov",
            KernelKind::Uniform => "uniform",
            KernelKind::Gaussian => "gaussian",
        };
        f.write_str(name)
    }
}

/// Strictly positive smoothing bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
pub struct Bandwidth(f64);

impl Bandwidth {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Bandwidth(value))
        } else {
            Err(Error::InvalidBandwidth(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// A kernel paired with a bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmoothedLoss {
    pub kernel: KernelKind,
    pub h: Bandwidth,
}

impl SmoothedLoss {
    pub fn new(kernel: KernelKind, h: f64) -> Result<Self> {
        Ok(Self {
            kernel,
            h: Bandwidth::new(h)?,
        })
    }

    pub fn epanechnikov(h: f64) -> Result<Self> {
        Self::new(KernelKind::Epanechnikov, h)
    }

    pub fn bandwidth(&self) -> f64 {
        self.h.value()
    }

    /// `φ_h(t)`.
    pub fn loss(&self, t: f64) -> f64 {
        let h = self.h.value();
        if self.kernel.has_compact_support() {
            if t <= 1.0 - h {
                return 1.0 - t;
            }
            if t >= 1.0 + h {
                return 0.0;
            }
        }
        let s = (1.0 - t) / h;
        match self.kernel {
            KernelKind::Epanechnikov => {
                let a = 1.0 + s;
                h * a * a * a * (3.0 - s) / 16.0
            }
            KernelKind::Uniform => {
                let a = 1.0 + s;
                h * a * a / 4.0
            }
            KernelKind::Gaussian => {
                if s > 40.0 {
                    1.0 - t
                } else {
                    h * (s * normal_cdf(s) + normal_pdf(s))
                }
            }
        }
    }

    /// `φ_h'(t) = −F((1 − t)/h)`, always in `[−1, 0]`.
    pub fn loss_deriv(&self, t: f64) -> f64 {
        -self.kernel.cdf((1.0 - t) / self.h.value())
    }

    /// `φ_h''(t) = K((1 − t)/h)/h`.
    pub fn loss_second_deriv(&self, t: f64) -> f64 {
        let h = self.h.value();
        self.kernel.density((1.0 - t) / h) / h
    }

    /// Lipschitz constant of `φ_h'`, `sup K / h`.
    pub fn lipschitz_constant(&self) -> f64 {
        self.kernel.sup() / self.h.value()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use csitr_oracles::{central_diff, hinge, quad_kernel_cdf, quad_smoothed_hinge, OracleKernel};
    use proptest::prelude::*;

    fn oracle_kernel(k: KernelKind) -> OracleKernel {
        match k {
            KernelKind::Epanechnikov => OracleKernel::Epanechnikov,
            KernelKind::Uniform => OracleKernel::Uniform,
            KernelKind::Gaussian => OracleKernel::Gaussian,
        }
    }

    fn epa(h: f64) -> SmoothedLoss {
        SmoothedLoss::epanechnikov(h).unwrap()
    }

    #[test]
    fn bandwidth_rejects_nonpositive() {
        assert!(Bandwidth::new(0.0).is_err());
        assert!(Bandwidth::new(-1.0).is_err());
        assert!(Bandwidth::new(f64::NAN).is_err());
        assert!(SmoothedLoss::new(KernelKind::Gaussian, 0.0).is_err());
    }

    #[test]
    fn kernels_are_symmetric_unit_mass_densities() {
        for k in KernelKind::ALL {
            let window = if k.has_compact_support() { 1.0 } else { 12.0 };
            let mass = csitr_oracles::adaptive_simpson(&|u| k.density(u), -window, window, 1e-13);
            assert!((mass - 1.0).abs() < 1e-8, "{k}: {mass}");
            for u in [0.1, 0.5, 0.99, 2.0] {
                assert_eq!(k.density(u), k.density(-u));
                assert!(k.density(u) >= 0.0);
            }
        }
        assert_eq!(KernelKind::Epanechnikov.density(1.5), 0.0);
        assert_eq!(KernelKind::Uniform.density(-1.01), 0.0);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(epa(0.5).loss(1.5), 0.0);
        assert_eq!(epa(0.5).loss(0.5), 0.5);
        // Quadrature oracle frozen value: h * 3/16.
        let q = quad_smoothed_hinge(OracleKernel::Epanechnikov, 0.5, 1.0);
        assert!((q - 0.09375).abs() < 1e-10);
        assert!((epa(0.5).loss(1.0) - 0.09375).abs() < 1e-15);
        let uni = SmoothedLoss::new(KernelKind::Uniform, 0.4).unwrap();
        assert!((quad_smoothed_hinge(OracleKernel::Uniform, 0.4, 1.0) - 0.1).abs() < 1e-10);
        assert!((uni.loss(1.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn loss_deriv_examples() {
        for k in KernelKind::ALL {
            for h in [0.1, 0.5, 2.0] {
                let sl = SmoothedLoss::new(k, h).unwrap();
                assert_eq!(sl.loss_deriv(1.0), -0.5);
            }
        }
        for t in [0.5, 0.3, -2.0] {
            assert_eq!(epa(0.5).loss_deriv(t), -1.0);
        }
        assert!((quad_kernel_cdf(OracleKernel::Epanechnikov, 0.5) - 0.84375).abs() < 1e-10);
        assert!((epa(0.5).loss_deriv(0.75) + 0.84375).abs() < 1e-15);
    }

    #[test]
    fn loss_second_deriv_examples() {
        assert!((epa(0.5).loss_second_deriv(1.0) - 1.5).abs() < 1e-15);
        assert_eq!(epa(0.5).loss_second_deriv(2.0), 0.0);
        let g = SmoothedLoss::new(KernelKind::Gaussian, 1.0).unwrap();
        assert!((g.loss_second_deriv(1.0) - 0.398_942_280_4).abs() < 1e-10);
    }

    #[test]
    fn lipschitz_examples() {
        assert_eq!(epa(0.25).lipschitz_constant(), 3.0);
        assert_eq!(
            SmoothedLoss::new(KernelKind::Uniform, 0.5)
                .unwrap()
                .lipschitz_constant(),
            1.0
        );
        assert_eq!(epa(1.0).lipschitz_constant(), 0.75);
        for b in [0.05, 0.3, 1.7] {
            assert!((epa(b).lipschitz_constant() - 3.0 / (4.0 * b)).abs() < 1e-15);
        }
    }

    #[test]
    fn branches_meet_at_window_edges() {
        for k in [KernelKind::Epanechnikov, KernelKind::Uniform] {
            let sl = SmoothedLoss::new(k, 0.3).unwrap();
            for edge in [0.7, 1.3] {
                let eps = 1e-9;
                assert!((sl.loss(edge - eps) - sl.loss(edge + eps)).abs() < 1e-8);
                assert!((sl.loss_deriv(edge - eps) - sl.loss_deriv(edge + eps)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn shrinking_bandwidth_recovers_hinge() {
        for k in KernelKind::ALL {
            for h in [1e-1, 1e-3, 1e-5] {
                let sl = SmoothedLoss::new(k, h).unwrap();
                for t in [-2.0, 0.0, 0.9, 1.0, 1.05, 3.0] {
                    assert!((sl.loss(t) - hinge(t)).abs() <= 0.5 * h, "{k} h={h} t={t}");
                }
            }
        }
    }

    fn kernel_strategy() -> impl Strategy<Value = KernelKind> {
        prop_oneof![
            Just(KernelKind::Epanechnikov),
            Just(KernelKind::Uniform),
            Just(KernelKind::Gaussian)
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn closed_form_matches_quadrature(k in kernel_strategy(), h in 0.01f64..2.0, t in -3.0f64..3.0) {
            let sl = SmoothedLoss::new(k, h).unwrap();
            let q = quad_smoothed_hinge(oracle_kernel(k), h, t);
            prop_assert!((sl.loss(t) - q).abs() < 1e-8, "loss {} vs quad {}", sl.loss(t), q);
            let cdf = quad_kernel_cdf(oracle_kernel(k), (1.0 - t) / h);
            prop_assert!((sl.loss_deriv(t) + cdf).abs() < 1e-8);
        }

        #[test]
        fn smoothing_bias_at_most_half_bandwidth(k in kernel_strategy(), h in 0.001f64..2.0, t in -5.0f64..5.0) {
            let sl = SmoothedLoss::new(k, h).unwrap();
            let bias = sl.loss(t) - hinge(t);
            prop_assert!(bias >= -1e-12 && bias <= 0.5 * h + 1e-12);
        }

        #[test]
        fn convex_with_monotone_derivative(k in kernel_strategy(), h in 0.01f64..2.0, t in -3.0f64..3.0, dt in 0.0f64..1.0) {
            let sl = SmoothedLoss::new(k, h).unwrap();
            prop_assert!(sl.loss_second_deriv(t) >= 0.0);
            prop_assert!(sl.loss_deriv(t + dt) >= sl.loss_deriv(t));
            let d = sl.loss_deriv(t);
            prop_assert!((-1.0..=0.0).contains(&d));
        }

        #[test]
        fn derivative_matches_finite_difference(k in kernel_strategy(), h in 0.01f64..2.0, t in -3.0f64..3.0) {
            let sl = SmoothedLoss::new(k, h).unwrap();
            let fd = central_diff(|x| sl.loss(x), t, 1e-6 * h.max(1e-2));
            prop_assert!((fd - sl.loss_deriv(t)).abs() < 1e-6);
        }

        #[test]
        fn second_derivative_matches_finite_difference(k in kernel_strategy(), h in 0.05f64..2.0, t in -3.0f64..3.0) {
            let sl = SmoothedLoss::new(k, h).unwrap();
            let step = 1e-6 * h;
            let s = (1.0 - t) / h;
            // The uniform density jumps and the Epanechnikov density kinks at |s| = 1.
            prop_assume!(!k.has_compact_support() || (s.abs() - 1.0).abs() > 1e-4);
            let fd = central_diff(|x| sl.loss_deriv(x), t, step);
            prop_assert!((fd - sl.loss_second_deriv(t)).abs() < 1e-6 * sl.lipschitz_constant().max(1.0));
        }

        #[test]
        fn derivative_is_lipschitz_and_majorizes(k in kernel_strategy(), h in 0.01f64..2.0, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let sl = SmoothedLoss::new(k, h).unwrap();
            let c = sl.lipschitz_constant();
            prop_assert!((sl.loss_deriv(a) - sl.loss_deriv(b)).abs() <= c * (a - b).abs() + 1e-12);
            let upper = sl.loss(b) + sl.loss_deriv(b) * (a - b) + 0.5 * c * (a - b) * (a - b);
            prop_assert!(sl.loss(a) <= upper + 1e-12);
        }
    }
}
