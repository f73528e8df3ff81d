//! Moment estimators computed from squared and fourth-power time increments.
//!
//! Squared increments of the field scale like `√Δ_n`, so the realized volatility is
//! normalized by `n√Δ_n = √n`. For a time-varying volatility the same statistics target
//! `∫σ²` and `∫σ⁴`.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::OperatorParams;
use crate::normal::two_sided_z;
use crate::oracle::pi_gamma;
use crate::simulate::{increments, FieldSample};

/// A point estimate with its feasible normal confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimateWithCI {
    pub point: f64,
    pub stderr: f64,
    pub level: f64,
    pub lo: f64,
    pub hi: f64,
    /// Number of field observations `m · n` behind the estimate.
    pub n_obs: usize,
}

impl EstimateWithCI {
    pub fn covers(&self, value: f64) -> bool {
        self.lo <= value && value <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

fn check_index(field: &FieldSample, j: usize) -> Result<()> {
    if j >= field.grid().m() {
        return Err(Error::InvalidParameter(format!(
            "spatial index {j} out of range for {} points",
            field.grid().m()
        )));
    }
    Ok(())
}

/// Logs a warning when `m > √n`, where the `√(mn)` rate is no longer expected.
pub fn warn_if_dense(n: usize, m: usize) {
    if (m as f64) > (n as f64).sqrt() {
        log::warn!("m={m} exceeds √n={:.1}; the √(mn) rate is not expected to hold", (n as f64).sqrt());
    }
}

fn power_sum(col: ArrayView1<'_, f64>, power: i32) -> f64 {
    col.iter().map(|d| d.powi(power)).sum()
}

/// Precomputed increment matrix, for evaluating several estimators on one field.
#[derive(Debug, Clone)]
pub struct Increments<'a> {
    field: &'a FieldSample,
    diffs: Array2<f64>,
}

impl<'a> Increments<'a> {
    pub fn new(field: &'a FieldSample) -> Result<Self> {
        Ok(Self { field, diffs: increments(field) })
    }

    pub fn field(&self) -> &FieldSample {
        self.field
    }

    pub fn diffs(&self) -> &Array2<f64> {
        &self.diffs
    }

    fn n(&self) -> usize {
        self.field.grid().n()
    }

    pub fn sum_squares(&self, j: usize) -> Result<f64> {
        check_index(self.field, j)?;
        Ok(power_sum(self.diffs.column(j), 2))
    }

    /// `RV_n(y_j) = Σ_i (Δ_iX)²(y_j) / (n√Δ_n)`.
    pub fn realized_volatility(&self, j: usize) -> Result<f64> {
        Ok(self.sum_squares(j)? / (self.n() as f64).sqrt())
    }

    /// Single-point volatility estimate `√(πθ2) e^{y_j θ1/θ2} RV_n(y_j)`.
    pub fn sigma2_single(&self, j: usize, params: &OperatorParams) -> Result<f64> {
        let y = self.field.grid().y()[j];
        Ok((PI * params.theta2()).sqrt() * (y * params.curvature()).exp() * self.realized_volatility(j)?)
    }

    /// Spatial average of [`Self::sigma2_single`].
    pub fn sigma2_multi(&self, params: &OperatorParams) -> Result<f64> {
        let m = self.field.grid().m();
        let mut total = 0.0;
        for j in 0..m {
            total += self.sigma2_single(j, params)?;
        }
        Ok(total / m as f64)
    }

    /// `(πθ2/(3m)) Σ_j e^{2y_jϰ} Σ_i (Δ_iX)⁴(y_j)`, consistent for `∫σ⁴`.
    pub fn quarticity(&self, params: &OperatorParams) -> Result<f64> {
        let grid = self.field.grid();
        let kappa = params.curvature();
        let total: f64 = grid
            .y()
            .iter()
            .enumerate()
            .map(|(j, &y)| (2.0 * y * kappa).exp() * power_sum(self.diffs.column(j), 4))
            .sum();
        Ok(params.theta2() * PI / (3.0 * grid.m() as f64) * total)
    }

    /// Log-ratio curvature estimate from two spatial points.
    pub fn curvature_logratio(&self, j1: usize, j2: usize) -> Result<f64> {
        check_index(self.field, j1)?;
        check_index(self.field, j2)?;
        if j1 == j2 {
            return Err(Error::InvalidParameter("curvature needs two distinct spatial points".into()));
        }
        let (s1, s2) = (self.sum_squares(j1)?, self.sum_squares(j2)?);
        if !(s1 > 0.0 && s2 > 0.0) {
            return Err(Error::DegenerateIncrements(format!(
                "squared-increment sums must be positive, got {s1} and {s2}"
            )));
        }
        let y = self.field.grid().y();
        Ok((s1.ln() - s2.ln()) / (y[j2] - y[j1]))
    }

    /// [`Self::curvature_logratio`] on the outermost pair of grid points.
    pub fn curvature_logratio_default(&self) -> Result<f64> {
        let m = self.field.grid().m();
        if m < 2 {
            return Err(Error::NotIdentifiable);
        }
        self.curvature_logratio(0, m - 1)
    }

    /// Sample autocorrelations of `(Δ_iX(y_j))_i` at lags `1..=max_lag`.
    pub fn autocorrelation(&self, j: usize, max_lag: usize) -> Result<Vec<f64>> {
        check_index(self.field, j)?;
        if max_lag >= self.n() {
            return Err(Error::InvalidParameter(format!("max_lag {max_lag} must be below n={}", self.n())));
        }
        let col = self.diffs.column(j);
        let len = col.len();
        let mean = col.sum() / len as f64;
        let centered: Vec<f64> = col.iter().map(|d| d - mean).collect();
        let denom: f64 = centered.iter().map(|c| c * c).sum();
        Ok((1..=max_lag)
            .map(|h| {
                let num: f64 = centered[..len - h].iter().zip(&centered[h..]).map(|(a, b)| a * b).sum();
                if denom > 0.0 {
                    num / denom
                } else {
                    0.0
                }
            })
            .collect())
    }
}

pub fn realized_volatility(field: &FieldSample, j: usize) -> Result<f64> {
    Increments::new(field)?.realized_volatility(j)
}

pub fn sigma2_single(field: &FieldSample, j: usize, params: &OperatorParams) -> Result<f64> {
    check_index(field, j)?;
    Increments::new(field)?.sigma2_single(j, params)
}

pub fn sigma2_multi(field: &FieldSample, params: &OperatorParams) -> Result<f64> {
    warn_if_dense(field.grid().n(), field.grid().m());
    Increments::new(field)?.sigma2_multi(params)
}

pub fn quarticity(field: &FieldSample, params: &OperatorParams) -> Result<f64> {
    Increments::new(field)?.quarticity(params)
}

pub fn curvature_logratio(field: &FieldSample, j1: usize, j2: usize) -> Result<f64> {
    Increments::new(field)?.curvature_logratio(j1, j2)
}

pub fn empirical_autocorrelation(field: &FieldSample, j: usize, max_lag: usize) -> Result<Vec<f64>> {
    Increments::new(field)?.autocorrelation(j, max_lag)
}

/// Feasible interval `σ̂² ∓ z·√(πΓ σ̃⁴/(mn))`.
pub fn feasible_ci(sigma2_hat: f64, quart_hat: f64, n: usize, m: usize, level: f64) -> Result<EstimateWithCI> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("confidence level must lie in (0, 1), got {level}")));
    }
    if !(quart_hat >= 0.0) {
        return Err(Error::InvalidParameter(format!("quarticity estimate must be non-negative, got {quart_hat}")));
    }
    if n == 0 || m == 0 {
        return Err(Error::InvalidParameter("need n ≥ 1 and m ≥ 1".into()));
    }
    let n_obs = n * m;
    let stderr = (pi_gamma() * quart_hat / n_obs as f64).sqrt();
    let half = two_sided_z(level) * stderr;
    Ok(EstimateWithCI { point: sigma2_hat, stderr, level, lo: sigma2_hat - half, hi: sigma2_hat + half, n_obs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{synthesize_field, SamplingGrid, SimulationConfig};
    use crate::VolatilitySpec;
    use approx::assert_relative_eq;
    use ndarray::Array2;

    fn field(values: Array2<f64>, y: Vec<f64>) -> FieldSample {
        let n = values.nrows() - 1;
        FieldSample::from_values(values, SamplingGrid::new(n, y).unwrap()).unwrap()
    }

    fn simulated(seed: u64) -> FieldSample {
        let grid = SamplingGrid::equispaced(200, 4).unwrap();
        let cfg = SimulationConfig { cutoff: 2000, seed, ..Default::default() };
        synthesize_field(&OperatorParams::reference(), &VolatilitySpec::default(), &grid, &cfg).unwrap()
    }

    #[test]
    fn zero_field_gives_zero() {
        let f = field(Array2::zeros((11, 2)), vec![0.3, 0.6]);
        let p = OperatorParams::reference();
        assert_eq!(realized_volatility(&f, 0).unwrap(), 0.0);
        assert_eq!(sigma2_single(&f, 1, &p).unwrap(), 0.0);
        assert_eq!(quarticity(&f, &p).unwrap(), 0.0);
        assert!(matches!(curvature_logratio(&f, 0, 1), Err(Error::DegenerateIncrements(_))));
    }

    #[test]
    fn realized_volatility_normalization() {
        // increments ±1 over n = 4 steps: Σ = 4, n√Δ = 2
        let mut v = Array2::zeros((5, 1));
        for i in 1..5 {
            v[[i, 0]] = if i % 2 == 0 { 0.0 } else { 1.0 };
        }
        let f = field(v, vec![0.5]);
        assert_relative_eq!(realized_volatility(&f, 0).unwrap(), 2.0);
        assert!(realized_volatility(&f, 1).is_err());
    }

    #[test]
    fn sigma2_single_without_drift() {
        let f = simulated(1);
        let p = OperatorParams::new(0.0, 0.0, 0.3).unwrap();
        let rv = realized_volatility(&f, 2).unwrap();
        assert_relative_eq!(sigma2_single(&f, 2, &p).unwrap(), (PI * 0.3).sqrt() * rv, max_relative = 1e-15);
    }

    #[test]
    fn multi_is_mean_of_singles() {
        let f = simulated(2);
        let p = OperatorParams::reference();
        let singles: f64 = (0..4).map(|j| sigma2_single(&f, j, &p).unwrap()).sum::<f64>() / 4.0;
        assert_relative_eq!(sigma2_multi(&f, &p).unwrap(), singles, max_relative = 1e-15);

        let one = field(f.values().slice(ndarray::s![.., 1..2]).to_owned(), vec![f.grid().y()[1]]);
        assert_eq!(sigma2_multi(&one, &p).unwrap(), sigma2_single(&one, 0, &p).unwrap());
    }

    #[test]
    fn multi_is_permutation_invariant() {
        let f = simulated(3);
        let p = OperatorParams::reference();
        // grids are sorted, so compare against the singles summed in a different order
        let order = [2usize, 0, 3, 1];
        let shuffled: f64 = order.iter().map(|&j| sigma2_single(&f, j, &p).unwrap()).sum::<f64>() / 4.0;
        assert_relative_eq!(sigma2_multi(&f, &p).unwrap(), shuffled, max_relative = 1e-14);
    }

    #[test]
    fn homogeneity() {
        let f = simulated(4);
        let g = f.scaled(3.0);
        let p = OperatorParams::reference();
        assert_relative_eq!(realized_volatility(&g, 1).unwrap(), 9.0 * realized_volatility(&f, 1).unwrap(), max_relative = 1e-12);
        assert_relative_eq!(quarticity(&g, &p).unwrap(), 81.0 * quarticity(&f, &p).unwrap(), max_relative = 1e-12);
        let k1 = curvature_logratio(&f, 0, 3).unwrap();
        let k2 = curvature_logratio(&g, 0, 3).unwrap();
        assert!((k1 - k2).abs() < 1e-12);
    }

    #[test]
    fn curvature_examples() {
        let mut v = Array2::zeros((3, 2));
        v[[1, 0]] = 1.0;
        v[[1, 1]] = 1.0;
        let f = field(v, vec![0.2, 0.7]);
        assert_eq!(curvature_logratio(&f, 0, 1).unwrap(), 0.0);
        assert!(curvature_logratio(&f, 1, 1).is_err());

        // sums of squares S_j = c e^{-5 y_j}
        let ys = [0.1_f64, 0.9];
        let mut v = Array2::<f64>::zeros((2, 2));
        for (j, y) in ys.iter().enumerate() {
            v[[1, j]] = (0.7 * (-5.0 * y).exp()).sqrt();
        }
        let f = field(v, ys.to_vec());
        assert_relative_eq!(curvature_logratio(&f, 0, 1).unwrap(), 5.0, max_relative = 1e-12);
        assert_eq!(curvature_logratio(&f, 0, 1).unwrap(), curvature_logratio(&f, 1, 0).unwrap());
        let inc = Increments::new(&f).unwrap();
        assert_eq!(inc.curvature_logratio_default().unwrap(), curvature_logratio(&f, 0, 1).unwrap());
    }

    #[test]
    fn feasible_ci_examples() {
        let degenerate = feasible_ci(0.07, 0.0, 100, 3, 0.9).unwrap();
        assert_eq!((degenerate.lo, degenerate.hi), (0.07, 0.07));

        let ci = feasible_ci(0.0625, 0.00390625, 1000, 9, 0.95).unwrap();
        assert_relative_eq!(ci.stderr, 0.0010115409227163547, max_relative = 1e-9);
        assert!((ci.lo - 0.060517416222122276).abs() < 1e-9);
        assert!((ci.hi - 0.06448258377787772).abs() < 1e-9);
        assert!(ci.lo <= ci.point && ci.point <= ci.hi);
        assert_eq!(ci.n_obs, 9000);

        assert!(feasible_ci(0.1, 0.1, 10, 1, 1.0).is_err());
        assert!(feasible_ci(0.1, 0.1, 10, 1, 0.0).is_err());
        assert!(feasible_ci(0.1, -1.0, 10, 1, 0.5).is_err());
    }

    #[test]
    fn ci_width_scales_with_root_mn() {
        let a = feasible_ci(0.05, 0.003, 500, 5, 0.95).unwrap();
        let b = feasible_ci(0.05, 0.003, 2000, 5, 0.95).unwrap();
        assert_relative_eq!(a.width(), 2.0 * b.width(), max_relative = 1e-12);
    }

    #[test]
    fn autocorrelation_checks() {
        let f = simulated(5);
        let acf = empirical_autocorrelation(&f, 0, 5).unwrap();
        assert_eq!(acf.len(), 5);
        assert!(acf.iter().all(|r| r.abs() <= 1.0));
        assert!(empirical_autocorrelation(&f, 0, 200).is_err());
    }
}
