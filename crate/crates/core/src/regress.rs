//! Least-squares fit of `Z_j = RV_n(y_j)` to the profile `f_{s,ϰ}(y) = (s/√π) e^{-ϰy}`.
//!
//! The fit recovers the normalized integrated volatility `IV₀ = ∫σ²/√θ2` and the curvature
//! `ϰ = θ1/θ2` without knowing `θ`. Minimization is a plain Levenberg–Marquardt with
//! Marquardt's diagonal scaling and an analytic Jacobian.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::Increments;
use crate::oracle::pi_gamma;
use crate::simulate::FieldSample;

pub type Mat2 = [[f64; 2]; 2];

const SQRT_PI: f64 = 1.772_453_850_905_516;

/// Spatial profile of realized volatilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionData {
    pub z: Vec<f64>,
    pub y: Vec<f64>,
}

impl RegressionData {
    pub fn new(z: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if z.len() != y.len() {
            return Err(Error::InvalidParameter(format!("{} responses for {} points", z.len(), y.len())));
        }
        if y.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("spatial points must be strictly increasing".into()));
        }
        Ok(Self { z, y })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// `z_j = RV_n(y_j)` for every grid point.
pub fn build_regression_data(field: &FieldSample) -> Result<RegressionData> {
    let m = field.grid().m();
    if m < 2 {
        return Err(Error::NotIdentifiable);
    }
    let inc = Increments::new(field)?;
    let z = (0..m).map(|j| inc.realized_volatility(j)).collect::<Result<Vec<_>>>()?;
    RegressionData::new(z, field.grid().y().to_vec())
}

/// `(iv0/√π) e^{-κy}`.
#[inline]
pub fn model_f(iv0: f64, kappa: f64, y: f64) -> f64 {
    iv0 / SQRT_PI * (-kappa * y).exp()
}

/// `(∂f/∂iv0, ∂f/∂κ)`.
#[inline]
pub fn model_gradient(iv0: f64, kappa: f64, y: f64) -> [f64; 2] {
    let e = (-kappa * y).exp() / SQRT_PI;
    [e, -y * iv0 * e]
}

/// How the `U`, `V` matrices average over space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixMode {
    /// `∫_{y_1}^{y_m} h(y) dy`.
    Integral,
    /// `(1/m) Σ_j h(y_j)`.
    Discrete,
}

impl MatrixMode {
    /// Discrete averaging for fewer than 50 points, the integral limit otherwise.
    pub fn default_for(m: usize) -> Self {
        if m < 50 {
            Self::Discrete
        } else {
            Self::Integral
        }
    }
}

/// Plug-in inputs for the asymptotic covariance of the fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariancePlugin {
    pub theta2: f64,
    /// Estimate of `∫σ⁴`, typically the quarticity statistic.
    pub quart_integral: f64,
    /// Number of time steps behind each `z_j`.
    pub n: usize,
    pub mode: Option<MatrixMode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Starting point `(iv0, κ)`; log-linear regression when absent.
    pub initial: Option<(f64, f64)>,
    pub max_iter: usize,
    pub covariance: Option<CovariancePlugin>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { initial: None, max_iter: 100, covariance: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionFit {
    pub iv0_hat: f64,
    pub kappa_hat: f64,
    pub converged: bool,
    pub iterations: usize,
    pub rss: f64,
    /// Asymptotic covariance of `(iv0_hat, kappa_hat)`, already divided by `mn`.
    pub asym_cov: Option<Mat2>,
    pub stderr: Option<(f64, f64)>,
    /// Accepted residual sums of squares, starting with the initial point.
    #[serde(skip)]
    pub rss_trace: Vec<f64>,
}

fn rss_at(data: &RegressionData, iv0: f64, kappa: f64) -> f64 {
    data.z.iter().zip(&data.y).map(|(&z, &y)| (z - model_f(iv0, kappa, y)).powi(2)).sum()
}

/// Ordinary regression of `log z` on `y` over the positive responses.
fn log_linear_start(data: &RegressionData) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = data.y.iter().zip(&data.z).filter(|(_, &z)| z > 0.0).map(|(&y, &z)| (y, z.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let my = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - my) * (p.1 - ml)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = ml - slope * my;
    Some((SQRT_PI * intercept.exp(), -slope))
}

/// Levenberg–Marquardt minimization of `Σ_j (z_j - f(y_j))²`.
pub fn fit_least_squares(data: &RegressionData, opts: &FitOptions) -> Result<RegressionFit> {
    if data.len() < 2 {
        return Err(Error::NotIdentifiable);
    }
    if data.z.iter().all(|&z| z <= 0.0) {
        return Err(Error::InvalidParameter("all responses are non-positive".into()));
    }
    let (mut s, mut k) = opts.initial.or_else(|| log_linear_start(data)).unwrap_or((1.0, 1.0));
    let floor = 1e-12 * data.z.iter().cloned().fold(0.0, f64::max) * SQRT_PI;
    s = s.max(floor);

    let mut rss = rss_at(data, s, k);
    let mut trace = vec![rss];
    let mut damping = 1e-3;
    let mut converged = rss == 0.0;
    let mut iterations = 0;

    while !converged && iterations < opts.max_iter {
        iterations += 1;
        // normal equations JᵀJ δ = Jᵀr
        let mut jtj = [[0.0; 2]; 2];
        let mut g = [0.0; 2];
        for (&z, &y) in data.z.iter().zip(&data.y) {
            let r = z - model_f(s, k, y);
            let d = model_gradient(s, k, y);
            for a in 0..2 {
                g[a] += d[a] * r;
                for b in 0..2 {
                    jtj[a][b] += d[a] * d[b];
                }
            }
        }
        let z_norm = data.z.iter().map(|z| z * z).sum::<f64>().sqrt();
        if (0..2).all(|a| g[a].abs() <= 1e-15 * (jtj[a][a].sqrt() * z_norm)) {
            converged = true;
            break;
        }
        loop {
            let a00 = jtj[0][0] * (1.0 + damping);
            let a11 = jtj[1][1] * (1.0 + damping);
            let a01 = jtj[0][1];
            let det = a00 * a11 - a01 * a01;
            let step = [(a11 * g[0] - a01 * g[1]) / det, (a00 * g[1] - a01 * g[0]) / det];
            let s_new = (s + step[0]).max(floor);
            let k_new = k + step[1];
            let rss_new = rss_at(data, s_new, k_new);
            if rss_new.is_finite() && det.is_finite() && det > 0.0 && rss_new < rss {
                let tiny = (s_new - s).abs() <= 1e-10 * s.abs() && (k_new - k).abs() <= 1e-10 * k.abs().max(1.0);
                s = s_new;
                k = k_new;
                rss = rss_new;
                trace.push(rss);
                damping = (damping / 10.0).max(1e-12);
                converged = tiny || rss == 0.0;
                break;
            }
            if rss_new.is_finite() && ((rss_new - rss) / rss).abs() < 1e-14 {
                // no representable decrease left
                converged = true;
                break;
            }
            damping *= 10.0;
            if damping > 1e16 {
                // gradient steps of every size fail: stationary up to rounding
                converged = true;
                break;
            }
        }
    }

    let (asym_cov, stderr) = match &opts.covariance {
        Some(plugin) => {
            let mode = plugin.mode.unwrap_or(MatrixMode::default_for(data.len()));
            let cov = asymptotic_cov((s, k), plugin.theta2, plugin.quart_integral, &data.y, mode)?;
            let scale = 1.0 / (data.len() * plugin.n) as f64;
            let cov = cov.map(|row| row.map(|v| v * scale));
            (Some(cov), Some((cov[0][0].sqrt(), cov[1][1].sqrt())))
        }
        None => (None, None),
    };
    Ok(RegressionFit { iv0_hat: s, kappa_hat: k, converged, iterations, rss, asym_cov, stderr, rss_trace: trace })
}

/// `∫_a^b y^p e^{-cy} dy` for `p = 0, 1, 2`.
fn exp_moments(c: f64, a: f64, b: f64) -> [f64; 3] {
    if c.abs() * b.abs().max(a.abs()) <= 1.0 {
        // Taylor series in c; terms fall like 1/r!
        let mut out = [0.0; 3];
        let mut coef = 1.0;
        for r in 0..40 {
            if r > 0 {
                coef *= -c / r as f64;
            }
            for (p, slot) in out.iter_mut().enumerate() {
                let e = (p + r + 1) as i32;
                *slot += coef * (b.powi(e) - a.powi(e)) / e as f64;
            }
            if coef.abs() < 1e-22 {
                break;
            }
        }
        return out;
    }
    let (ea, eb) = ((-c * a).exp(), (-c * b).exp());
    let inv = 1.0 / c;
    [
        (ea - eb) * inv,
        ((a + inv) * ea - (b + inv) * eb) * inv,
        ((a * a + 2.0 * a * inv + 2.0 * inv * inv) * ea - (b * b + 2.0 * b * inv + 2.0 * inv * inv) * eb) * inv,
    ]
}

fn moments(rate: f64, y_points: &[f64], mode: MatrixMode) -> Result<[f64; 3]> {
    if y_points.is_empty() {
        return Err(Error::InvalidParameter("need at least one spatial point".into()));
    }
    Ok(match mode {
        MatrixMode::Integral => exp_moments(rate, y_points[0], y_points[y_points.len() - 1]),
        MatrixMode::Discrete => {
            let m = y_points.len() as f64;
            let mut out = [0.0; 3];
            for &y in y_points {
                let e = (-rate * y).exp();
                out[0] += e;
                out[1] += y * e;
                out[2] += y * y * e;
            }
            out.map(|v| v / m)
        }
    })
}

fn moment_matrix(iv0: f64, mom: [f64; 3]) -> Mat2 {
    [[mom[0], -iv0 * mom[1]], [-iv0 * mom[1], iv0 * iv0 * mom[2]]]
}

/// `U(η)`, built from the weight `e^{-4ϰy}`.
pub fn matrix_u(eta: (f64, f64), y_points: &[f64], mode: MatrixMode) -> Result<Mat2> {
    Ok(moment_matrix(eta.0, moments(4.0 * eta.1, y_points, mode)?))
}

/// `V(η)`, built from the weight `e^{-2ϰy}`.
pub fn matrix_v(eta: (f64, f64), y_points: &[f64], mode: MatrixMode) -> Result<Mat2> {
    Ok(moment_matrix(eta.0, moments(2.0 * eta.1, y_points, mode)?))
}

fn inverse(m: &Mat2) -> Result<Mat2> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let scale = (m[0][0] * m[1][1]).abs().max(f64::MIN_POSITIVE);
    if !det.is_finite() || det.abs() <= 1e-14 * scale {
        return Err(Error::Singular(format!("2×2 matrix {m:?} has determinant {det}")));
    }
    Ok([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
}

fn mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

/// `(Γπ/θ2) ∫σ⁴ · V⁻¹ U V⁻¹`, the limit covariance of `√(mn)(η̂ - η)` (not divided by `mn`).
pub fn asymptotic_cov(eta: (f64, f64), theta2: f64, quart_integral: f64, y_points: &[f64], mode: MatrixMode) -> Result<Mat2> {
    if !(theta2 > 0.0) {
        return Err(Error::InvalidParameter(format!("theta2 must be positive, got {theta2}")));
    }
    if y_points.len() < 2 {
        return Err(Error::NotIdentifiable);
    }
    let u = matrix_u(eta, y_points, mode)?;
    let v_inv = inverse(&matrix_v(eta, y_points, mode)?)?;
    let sandwich = mul(&mul(&v_inv, &u), &v_inv);
    let c = pi_gamma() / theta2 * quart_integral;
    let off = 0.5 * (sandwich[0][1] + sandwich[1][0]);
    Ok([[c * sandwich[0][0], c * off], [c * off, c * sandwich[1][1]]])
}

/// Convenience: fit directly from a field.
pub fn fit_field(field: &FieldSample, opts: &FitOptions) -> Result<RegressionFit> {
    fit_least_squares(&build_regression_data(field)?, opts)
}
