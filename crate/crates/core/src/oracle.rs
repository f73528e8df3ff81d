//! Closed-form moments of the truncated spectral model and of its first-order expansion.
//!
//! For each mode the increment `Δ_i x_k` splits into an initial-value term `A`, the
//! contribution `B` of the noise before `t_{i-1}` and the fresh noise `C` on
//! `[t_{i-1}, t_i]`. The kernels below are the covariances of these pieces for constant
//! `σ`; summing them over `k ≤ K` with weights `e_k(y)²` gives the exact increment
//! covariance of the `K`-mode field at a point `y`.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::OperatorParams;
use crate::simulate::{decay_integral, InitialCondition};

/// Inputs shared by the finite-`K` kernels.
#[derive(Debug, Clone, Copy)]
pub struct KernelParams {
    pub params: OperatorParams,
    pub sigma: f64,
    pub delta_n: f64,
    pub cutoff: usize,
}

impl KernelParams {
    pub fn new(params: OperatorParams, sigma: f64, delta_n: f64, cutoff: usize) -> Result<Self> {
        if !(delta_n > 0.0) {
            return Err(Error::InvalidParameter(format!("delta_n must be positive, got {delta_n}")));
        }
        if cutoff == 0 {
            return Err(Error::InvalidParameter("cutoff K must be at least 1".into()));
        }
        Ok(Self { params, sigma, delta_n, cutoff })
    }

    fn lambda(&self, k: usize) -> f64 {
        self.params.eigenvalue(k)
    }
}

/// `e^{-λΔ} - 1` without cancellation.
#[inline]
fn decay_minus_one(lambda: f64, delta: f64) -> f64 {
    (-lambda * delta).exp_m1()
}

/// `cov(B_{i,k}, B_{j,k})` with zero initial value.
pub fn kernel_b(kp: &KernelParams, i: usize, j: usize, k: usize) -> f64 {
    let lambda = kp.lambda(k);
    let d = kp.delta_n;
    let lag = i.abs_diff(j) as f64;
    let past = (i.min(j) - 1) as f64;
    // (e^{-λ|i-j|Δ} - e^{-λ(i+j-2)Δ}) / (2λ) = e^{-λ|i-j|Δ} (1 - e^{-2λ(i∧j-1)Δ}) / (2λ)
    let head = (-lambda * lag * d).exp() * decay_integral(2.0 * lambda, past * d);
    head * decay_minus_one(lambda, d).powi(2) * kp.sigma * kp.sigma
}

/// `cov(C_{i,k}, C_{j,k})`.
pub fn kernel_c(kp: &KernelParams, i: usize, j: usize, k: usize) -> f64 {
    if i != j {
        return 0.0;
    }
    kp.sigma * kp.sigma * decay_integral(2.0 * kp.lambda(k), kp.delta_n)
}

/// `cov(C_{i,k}, B_{j,k})`, non-zero only for `i < j`.
pub fn kernel_bc(kp: &KernelParams, i: usize, j: usize, k: usize) -> f64 {
    if i >= j {
        return 0.0;
    }
    let lambda = kp.lambda(k);
    let d = kp.delta_n;
    // (e^{λΔ} - e^{-λΔ}) / (2λ) = e^{λΔ} (1 - e^{-2λΔ}) / (2λ); the e^{λΔ} joins the lag factor
    let spread = decay_integral(2.0 * lambda, d);
    (-lambda * (j - i - 1) as f64 * d).exp() * spread * decay_minus_one(lambda, d) * kp.sigma * kp.sigma
}

/// `cov(B̃_{i,k}, B̃_{j,k})` under the stationary initial law, where `B̃ = A + B`.
pub fn kernel_b_stationary(kp: &KernelParams, i: usize, j: usize, k: usize) -> Result<f64> {
    let lambda = kp.lambda(k);
    if lambda <= 0.0 {
        return Err(Error::NonDissipative { k, lambda });
    }
    let d = kp.delta_n;
    let lag = i.abs_diff(j) as f64;
    Ok(kp.sigma * kp.sigma / (2.0 * lambda) * decay_minus_one(lambda, d).powi(2) * (-lambda * lag * d).exp())
}

/// Exact `cov(Δ_iX(y), Δ_jX(y))` for the `K`-mode field.
pub fn increment_cov_exact(kp: &KernelParams, i: usize, j: usize, y: f64, init: InitialCondition) -> Result<f64> {
    if i == 0 || j == 0 {
        return Err(Error::InvalidParameter("increment indices start at 1".into()));
    }
    if !(y > 0.0 && y < 1.0) {
        return Err(Error::Domain(format!("spatial point {y} outside (0, 1)")));
    }
    if init == InitialCondition::Stationary {
        let l1 = kp.lambda(1);
        if l1 <= 0.0 {
            return Err(Error::NonDissipative { k: 1, lambda: l1 });
        }
    }
    let mut total = 0.0;
    for k in 1..=kp.cutoff {
        let b = match init {
            InitialCondition::Zero => kernel_b(kp, i, j, k),
            InitialCondition::Stationary => kernel_b_stationary(kp, i, j, k)?,
        };
        let cell = b + kernel_bc(kp, i, j, k) + kernel_bc(kp, j, i, k) + kernel_c(kp, i, j, k);
        let e = kp.params.eigenfunction_unchecked(k, y);
        total += cell * e * e;
    }
    Ok(total)
}

/// The `count × count` matrix of [`increment_cov_exact`] for `i, j = 1..=count`.
pub fn increment_cov_matrix(kp: &KernelParams, count: usize, y: f64, init: InitialCondition) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![vec![0.0; count]; count];
    for i in 1..=count {
        for j in i..=count {
            let v = increment_cov_exact(kp, i, j, y, init)?;
            out[i - 1][j - 1] = v;
            out[j - 1][i - 1] = v;
        }
    }
    Ok(out)
}

/// `E[(Δ_iX)²(y)]` for the `K`-mode field started at zero.
pub fn expected_sq_increment_exact(kp: &KernelParams, i: usize, y: f64) -> Result<f64> {
    if i == 0 {
        return Err(Error::InvalidParameter("increment indices start at 1".into()));
    }
    let d = kp.delta_n;
    let t_prev = (i - 1) as f64 * d;
    let mut total = 0.0;
    for k in 1..=kp.cutoff {
        let lambda = kp.lambda(k);
        let one_minus = -decay_minus_one(lambda, d);
        let factor = decay_integral(lambda, d) * (1.0 - 0.5 * one_minus * (-2.0 * lambda * t_prev).exp());
        let e = kp.params.eigenfunction_unchecked(k, y);
        total += factor * e * e;
    }
    Ok(kp.sigma * kp.sigma * total)
}

/// Leading term `√Δ e^{-yϰ} σ²/√(πθ2)` of `E[(Δ_iX)²(y)]`.
pub fn first_order_sq_increment(params: &OperatorParams, sigma2: f64, y: f64, delta_n: f64) -> f64 {
    delta_n.sqrt() * (-y * params.curvature()).exp() * sigma2 / (params.theta2() * PI).sqrt()
}

/// `2√h - √(h-1) - √(h+1)` in a cancellation-free form.
fn second_difference_sqrt(h: usize) -> f64 {
    if h == 0 {
        return 0.0;
    }
    let (a, b, c) = ((h - 1) as f64, h as f64, (h + 1) as f64);
    let (sa, sb, sc) = (a.sqrt(), b.sqrt(), c.sqrt());
    // (√b-√a) - (√c-√b) = 1/(√b+√a) - 1/(√c+√b) = (√c-√a)/((√b+√a)(√c+√b)),  √c-√a = 2/(√c+√a)
    2.0 / ((sc + sa) * (sb + sa) * (sc + sb))
}

/// Leading term of `cov(Δ_iX(y), Δ_jX(y))` at `|j - i| = lag ≥ 1`.
pub fn first_order_cov(params: &OperatorParams, sigma2: f64, y: f64, delta_n: f64, lag: usize) -> f64 {
    assert!(lag >= 1, "lag must be at least 1");
    -0.5 * first_order_sq_increment(params, sigma2, y, delta_n) * second_difference_sqrt(lag)
}

/// First-order autocorrelation of the increment series at lag `h ≥ 1`.
pub fn theoretical_autocorrelation(lag: usize) -> f64 {
    assert!(lag >= 1, "lag must be at least 1");
    -0.5 * second_difference_sqrt(lag)
}

/// `I(r) = 2√(r+1) - √(r+2) - √r`, computed without cancellation.
pub fn gamma_series_term(r: usize) -> f64 {
    let (a, b, c) = (r as f64, (r + 1) as f64, (r + 2) as f64);
    let (sa, sb, sc) = (a.sqrt(), b.sqrt(), c.sqrt());
    2.0 / ((sc + sa) * (sb + sa) * (sc + sb))
}

/// The variance constant `Γ = (S + 2)/π` with `S = Σ_{r≥0} I(r)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaConstant {
    pub gamma: f64,
    pub pi_gamma: f64,
    pub series_sum: f64,
    /// Bound on the omitted tail of `S`.
    pub tail_bound: f64,
    pub terms: usize,
}

/// Sums `I(r)²` for `r = 0..=R`, where `R` is the first index whose tail bound `1/(32R²)` is below `tol`.
///
/// `I(r)² ≤ r⁻³/16` for `r ≥ 1`, so `Σ_{r>R} I(r)² ≤ ∫_R^∞ x⁻³/16 dx = 1/(32R²)`.
pub fn gamma_constant(tol: f64) -> Result<GammaConstant> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance must be positive, got {tol}")));
    }
    let last = ((1.0 / (32.0 * tol)).sqrt().ceil() as usize).max(1);
    // Summing small terms first keeps the rounding error well below the tail bound.
    let series_sum: f64 = (0..=last).rev().map(|r| gamma_series_term(r).powi(2)).sum();
    let tail_bound = 1.0 / (32.0 * (last as f64).powi(2));
    let gamma = (series_sum + 2.0) / PI;
    Ok(GammaConstant { gamma, pi_gamma: series_sum + 2.0, series_sum, tail_bound, terms: last + 1 })
}

/// `πΓ` at a tolerance far below anything the estimators can resolve.
pub fn pi_gamma() -> f64 {
    use std::sync::OnceLock;
    static VALUE: OnceLock<f64> = OnceLock::new();
    *VALUE.get_or_init(|| gamma_constant(1e-12).expect("positive tolerance").pi_gamma)
}
