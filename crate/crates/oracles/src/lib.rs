//! Reference computations for the csitr test suites.
//!
//! Nothing in here shares code with the production crate. Each routine solves
//! its problem by the most direct method available (quadrature of a defining
//! integral, plain gradient descent, exhaustive enumeration) so that agreement
//! with the closed forms and solvers in `csitr` is evidence rather than a
//! restatement of the same arithmetic.

use std::f64::consts::PI;

/// Kernels re-stated from their densities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKernel {
    Epanechnikov,
    Uniform,
    Gaussian,
}

impl OracleKernel {
    pub const ALL: [OracleKernel; 3] = [
        OracleKernel::Epanechnikov,
        OracleKernel::Uniform,
        OracleKernel::Gaussian,
    ];

    pub fn density(self, u: f64) -> f64 {
        match self {
            OracleKernel::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
            OracleKernel::Uniform => {
                if u.abs() <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
            OracleKernel::Gaussian => (-0.5 * u * u).exp() / (2.0 * PI).sqrt(),
        }
    }

    /// Integration window outside of which the density is zero (or below 1e-30).
    fn window(self) -> (f64, f64) {
        match self {
            OracleKernel::Epanechnikov | OracleKernel::Uniform => (-1.0, 1.0),
            OracleKernel::Gaussian => (-12.0, 12.0),
        }
    }
}

/// Adaptive Simpson quadrature of `f` on `[a, b]` to absolute error `eps`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, eps: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, eps, 50)
}

/// [`adaptive_simpson`] over panels no wider than 1/4, so a narrow bump
/// cannot hide between the first few sample points.
pub fn panelled_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, eps: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let panels = ((b - a) / 0.25).ceil().max(1.0) as usize;
    let width = (b - a) / panels as f64;
    (0..panels)
        .map(|k| {
            let lo = a + k as f64 * width;
            let hi = if k + 1 == panels { b } else { lo + width };
            adaptive_simpson(f, lo, hi, eps / panels as f64)
        })
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    eps: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * eps {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * eps, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * eps, depth - 1)
}

/// The smoothed hinge `∫ max(1-u, 0) K_h(u - t) du`, by quadrature.
///
/// With `u = t + h v` the integrand is `h (s - v) K(v)` on `v < s`,
/// `s = (1 - t) / h`; the hinge kink sits at the upper limit.
pub fn quad_smoothed_hinge(kernel: OracleKernel, h: f64, t: f64) -> f64 {
    assert!(h > 0.0);
    let s = (1.0 - t) / h;
    let (lo, hi) = kernel.window();
    let upper = s.min(hi);
    if upper <= lo {
        return 0.0;
    }
    let f = |v: f64| (s - v) * kernel.density(v);
    // The integrand scales with |s|; keep the absolute error on the final value.
    let eps = 1e-11 / h;
    let mut total = 0.0;
    // Split at zero so the Gaussian bulk is resolved from both sides.
    if lo < 0.0 && upper > 0.0 {
        total += panelled_simpson(&f, lo, 0.0, eps);
        total += panelled_simpson(&f, 0.0, upper, eps);
    } else {
        total += panelled_simpson(&f, lo, upper, eps);
    }
    // Gaussian mass beyond ±12 is below 1e-31 and is dropped.
    h * total
}

/// Kernel CDF by quadrature.
pub fn quad_kernel_cdf(kernel: OracleKernel, s: f64) -> f64 {
    let (lo, hi) = kernel.window();
    let upper = s.min(hi);
    if upper <= lo {
        return 0.0;
    }
    let f = |v: f64| kernel.density(v);
    if lo < 0.0 && upper > 0.0 {
        panelled_simpson(&f, lo, 0.0, 1e-13) + panelled_simpson(&f, 0.0, upper, 1e-13)
    } else {
        panelled_simpson(&f, lo, upper, 1e-13)
    }
}

pub fn hinge(t: f64) -> f64 {
    (1.0 - t).max(0.0)
}

/// Central finite difference.
pub fn central_diff<F: Fn(f64) -> f64>(f: F, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Central finite-difference gradient of a multivariate function.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            let orig = probe[j];
            probe[j] = orig + step;
            let up = f(&probe);
            probe[j] = orig - step;
            let down = f(&probe);
            probe[j] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    MaxIter { iterations: usize, grad_inf: f64 },
}

/// Gradient descent with Armijo backtracking until `‖∇‖_∞ <= tol`.
///
/// The trial step starts from the Barzilai-Borwein estimate of the previous
/// iteration and is halved until sufficient decrease holds.
pub fn reference_minimize<F, G>(
    objective: F,
    gradient: G,
    start: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>, OracleError>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let mut x = start.to_vec();
    let mut fx = objective(&x);
    let mut g = gradient(&x);
    let mut step = 1.0;
    for _ in 0..max_iter {
        let ginf = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if ginf <= tol {
            return Ok(x);
        }
        let gg: f64 = g.iter().map(|v| v * v).sum();
        let mut trial_step = step;
        let (x_new, f_new) = loop {
            let cand: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - trial_step * gi).collect();
            let fc = objective(&cand);
            if fc <= fx - 1e-4 * trial_step * gg || trial_step < 1e-20 {
                break (cand, fc);
            }
            trial_step *= 0.5;
        };
        let g_new = gradient(&x_new);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        step = if sy > 0.0 {
            (ss / sy).clamp(1e-10, 1e10)
        } else {
            trial_step * 2.0
        };
        x = x_new;
        fx = f_new;
        g = g_new;
    }
    let grad_inf = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if grad_inf <= tol {
        Ok(x)
    } else {
        Err(OracleError::MaxIter {
            iterations: max_iter,
            grad_inf,
        })
    }
}

/// Dense Gaussian elimination with partial pivoting; `None` when singular.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}

/// Least squares through the normal equations.
pub fn normal_equations_ols(design: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let k = design.first()?.len();
    let mut xtx = vec![vec![0.0; k]; k];
    let mut xty = vec![0.0; k];
    for (row, yi) in design.iter().zip(y) {
        for a in 0..k {
            xty[a] += row[a] * yi;
            for b in 0..k {
                xtx[a][b] += row[a] * row[b];
            }
        }
    }
    gauss_solve(xtx, xty)
}

/// A tiny weighted classification problem: at most 12 units, 1 or 2 covariates.
#[derive(Debug, Clone)]
pub struct TinyInstance {
    pub x: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// +1 or -1
    pub labels: Vec<i8>,
}

impl TinyInstance {
    pub fn new(x: Vec<Vec<f64>>, weights: Vec<f64>, labels: Vec<i8>) -> Self {
        assert!(x.len() <= 12 && !x.is_empty());
        assert!(x.len() == weights.len() && x.len() == labels.len());
        let p = x[0].len();
        assert!((1..=2).contains(&p));
        assert!(x.iter().all(|r| r.len() == p));
        assert!(labels.iter().all(|&z| z == 1 || z == -1));
        Self { x, weights, labels }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x[0].len()
    }

    /// Mean weighted misclassification of the rule `I(b0 + b1'x > 0)`.
    pub fn zero_one_risk(&self, rule: &[f64]) -> f64 {
        let total: f64 = self
            .x
            .iter()
            .zip(&self.weights)
            .zip(&self.labels)
            .map(|((xi, w), z)| {
                let f = rule[0] + xi.iter().zip(&rule[1..]).map(|(a, b)| a * b).sum::<f64>();
                if (f > 0.0) != (*z > 0) {
                    *w
                } else {
                    0.0
                }
            })
            .sum();
        total / self.len() as f64
    }
}

/// Exhaustive minimisation of the weighted 0-1 risk over linear rules.
///
/// Every direction at which two projections tie is a critical angle; the
/// ordering of projections is constant between consecutive critical angles,
/// so the midpoints (plus a uniform angular grid) cover every linear
/// dichotomy. For each direction every inter-point threshold is tried.
pub fn brute_force_01(instance: &TinyInstance) -> (f64, Vec<f64>) {
    let p = instance.dim();
    let directions: Vec<Vec<f64>> = if p == 1 {
        vec![vec![1.0], vec![-1.0]]
    } else {
        let mut angles: Vec<f64> = (0..3600).map(|k| 2.0 * PI * k as f64 / 3600.0).collect();
        let mut critical = Vec::new();
        for i in 0..instance.len() {
            for j in i + 1..instance.len() {
                let dx = instance.x[i][0] - instance.x[j][0];
                let dy = instance.x[i][1] - instance.x[j][1];
                if dx == 0.0 && dy == 0.0 {
                    continue;
                }
                // u(θ)·(dx,dy) = 0  ⇔  θ = atan2(dy,dx) ± π/2
                let base = dy.atan2(dx) + 0.5 * PI;
                critical.push(base.rem_euclid(2.0 * PI));
                critical.push((base + PI).rem_euclid(2.0 * PI));
            }
        }
        critical.sort_by(f64::total_cmp);
        for w in critical.windows(2) {
            angles.push(0.5 * (w[0] + w[1]));
        }
        if let (Some(first), Some(last)) = (critical.first(), critical.last()) {
            angles.push(0.5 * (first + last + 2.0 * PI));
        }
        angles.iter().map(|a| vec![a.cos(), a.sin()]).collect()
    };

    let mut best = (f64::INFINITY, vec![0.0; p + 1]);
    let mut consider = |rule: Vec<f64>| {
        let r = instance.zero_one_risk(&rule);
        if r < best.0 {
            best = (r, rule);
        }
    };
    // Constant rules.
    let mut always = vec![0.0; p + 1];
    always[0] = 1.0;
    consider(always);
    consider(vec![0.0; p + 1]);
    for dir in &directions {
        let mut proj: Vec<f64> = instance
            .x
            .iter()
            .map(|xi| xi.iter().zip(dir).map(|(a, b)| a * b).sum())
            .collect();
        proj.sort_by(f64::total_cmp);
        let mut cuts = vec![proj[0] - 1.0, proj[proj.len() - 1] + 1.0];
        for w in proj.windows(2) {
            cuts.push(0.5 * (w[0] + w[1]));
        }
        for c in cuts {
            let mut rule = Vec::with_capacity(p + 1);
            rule.push(-c);
            rule.extend_from_slice(dir);
            consider(rule);
        }
    }
    best
}

/// Population-style pseudo value `Σ|δ| I[I(δ>0) = I(f>0)] / n` on an enumerated sample.
pub fn pseudo_value(f_values: &[f64], delta: &[f64]) -> f64 {
    let total: f64 = f_values
        .iter()
        .zip(delta)
        .map(|(f, d)| if (*d > 0.0) == (*f > 0.0) { d.abs() } else { 0.0 })
        .sum();
    total / delta.len() as f64
}

/// Weighted hinge risk `Σ|δ| max(1 - Z f, 0) / n`.
pub fn hinge_risk(f_values: &[f64], delta: &[f64]) -> f64 {
    let total: f64 = f_values
        .iter()
        .zip(delta)
        .map(|(f, d)| {
            let z = if *d > 0.0 { 1.0 } else { -1.0 };
            d.abs() * hinge(z * f)
        })
        .sum();
    total / delta.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_integrate_to_one() {
        for k in OracleKernel::ALL {
            let (lo, hi) = k.window();
            let mass = adaptive_simpson(&|u| k.density(u), lo, hi, 1e-14);
            assert!((mass - 1.0).abs() < 1e-10, "{k:?}: {mass}");
        }
    }

    #[test]
    fn smoothed_hinge_outside_window_is_exact() {
        for k in [OracleKernel::Epanechnikov, OracleKernel::Uniform] {
            assert_eq!(quad_smoothed_hinge(k, 0.5, 1.6), 0.0);
            assert!((quad_smoothed_hinge(k, 0.5, 0.2) - 0.8).abs() < 1e-10);
        }
    }

    #[test]
    fn gaussian_far_tail_is_resolved() {
        // For s -> -inf, s Φ(s) + ϕ(s) = ϕ(s)/s² (1 - 3/s² + 15/s⁴ - 105/s⁶ + 945/s⁸ - ...),
        // an alternating asymptotic series; the first omitted term bounds the error by 1e-3.
        let (h, t) = (0.316, 2.6077);
        let s: f64 = (1.0 - t) / h;
        let phi = (-0.5 * s * s).exp() / (2.0 * PI).sqrt();
        let series =
            h * phi / (s * s) * (1.0 - 3.0 / (s * s) + 15.0 / s.powi(4) - 105.0 / s.powi(6) + 945.0 / s.powi(8));
        let q = quad_smoothed_hinge(OracleKernel::Gaussian, h, t);
        assert!(((q - series) / series).abs() < 1e-3, "{q} vs {series}");
    }

    #[test]
    fn smoothed_hinge_approaches_hinge() {
        for k in OracleKernel::ALL {
            for t in [-0.5, 0.7, 1.0, 1.3] {
                let v = quad_smoothed_hinge(k, 1e-4, t);
                assert!((v - hinge(t)).abs() < 1e-4, "{k:?} {t}");
            }
        }
    }

    #[test]
    fn minimizer_finds_quadratic_bowl() {
        let target = [1.0, -2.0, 0.5];
        let f = |x: &[f64]| {
            x.iter()
                .zip(&target)
                .enumerate()
                .map(|(i, (a, b))| (i as f64 + 1.0) * (a - b).powi(2))
                .sum::<f64>()
        };
        let g = |x: &[f64]| {
            x.iter()
                .zip(&target)
                .enumerate()
                .map(|(i, (a, b))| 2.0 * (i as f64 + 1.0) * (a - b))
                .collect::<Vec<_>>()
        };
        let x = reference_minimize(f, g, &[0.0; 3], 1e-10, 10_000).unwrap();
        for (a, b) in x.iter().zip(&target) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gauss_solve_small_system() {
        let x = gauss_solve(vec![vec![2.0, 1.0], vec![1.0, 3.0]], vec![3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-14 && (x[1] - 1.4).abs() < 1e-14);
        assert!(gauss_solve(vec![vec![1.0, 2.0], vec![2.0, 4.0]], vec![1.0, 2.0]).is_none());
    }

    #[test]
    fn brute_force_separable_is_zero() {
        let inst = TinyInstance::new(
            vec![vec![-2.0, 0.1], vec![-1.0, -0.3], vec![1.0, 0.2], vec![2.5, 0.0]],
            vec![1.0, 2.0, 1.5, 0.5],
            vec![-1, -1, 1, 1],
        );
        let (risk, rule) = brute_force_01(&inst);
        assert_eq!(risk, 0.0);
        assert_eq!(inst.zero_one_risk(&rule), 0.0);
    }

    #[test]
    fn brute_force_twin_conflict_costs_smaller_weight() {
        let inst = TinyInstance::new(vec![vec![0.3], vec![0.3]], vec![2.0, 0.7], vec![1, -1]);
        let (risk, _) = brute_force_01(&inst);
        assert!((risk - 0.7 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn value_loss_bounded_by_excess_hinge_risk() {
        // Enumerated rules on a fixed tiny sample with known contrasts.
        let xs = [-0.9, -0.4, -0.1, 0.2, 0.5, 0.8, 1.0, -0.7];
        let delta = [-1.2, -0.4, 0.3, -0.2, 0.9, 1.4, 0.1, -0.8];
        // Over all measurable f the hinge minimiser sets f(x_i) = Z_i.
        let f_star: Vec<f64> = delta.iter().map(|d| if *d > 0.0 { 1.0 } else { -1.0 }).collect();
        let v_star = pseudo_value(&f_star, &delta);
        let q_star = hinge_risk(&f_star, &delta);
        for b0 in (-20..=20).map(|k| k as f64 * 0.25) {
            for b1 in (-20..=20).map(|k| k as f64 * 0.25) {
                let f: Vec<f64> = xs.iter().map(|x| b0 + b1 * x).collect();
                let lhs = v_star - pseudo_value(&f, &delta);
                let rhs = hinge_risk(&f, &delta) - q_star;
                assert!(lhs <= rhs + 1e-12, "b=({b0},{b1}): {lhs} > {rhs}");
            }
        }
    }
}
