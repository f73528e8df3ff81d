//! Reproducible Monte Carlo experiments.
//!
//! Replication `r` simulates with seed `derive_seed(cfg.seed, r)`, so every record is a
//! function of its index alone. Replications run on a rayon pool and are folded in index
//! order, which makes reports identical for any worker count.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{feasible_ci, warn_if_dense, Increments};
use crate::model::{OperatorParams, VolatilitySpec};
use crate::normal::{ks_p_value, ks_statistic_normal, normal_quantile};
use crate::oracle::{first_order_sq_increment, pi_gamma};
use crate::regress::{asymptotic_cov, fit_least_squares, FitOptions, MatrixMode, RegressionData};
use crate::simulate::{derive_seed, InitialCondition, SamplingGrid, Synthesizer, DEFAULT_CUTOFF};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "SPDEVOL_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialLayout {
    /// `y_j = j/(m+1)`.
    Equispaced,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Sigma2Multi,
    Quarticity,
    CurvatureLogratio,
    FitLeastSquares,
}

/// Denominator of the standardized volatility errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Per-replication quarticity plug-in.
    #[default]
    Feasible,
    /// The true `∫σ⁴`.
    Infeasible,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub params: OperatorParams,
    pub vol: VolatilitySpec,
    pub n: usize,
    pub m: usize,
    #[serde(rename = "K")]
    pub cutoff: usize,
    pub refinement: usize,
    pub replications: usize,
    pub seed: u64,
    pub spatial_layout: SpatialLayout,
    pub estimators: Vec<EstimatorKind>,
    pub initial: InitialCondition,
    pub level: f64,
    pub denominator: Denominator,
    /// Lags of the increment autocorrelation recorded per replication (0 disables).
    pub autocorrelation_lags: usize,
    /// Simulate the modes above `K` as well; see [`Synthesizer::with_tail_correction`].
    pub tail_correction: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            params: OperatorParams::reference(),
            vol: VolatilitySpec::default(),
            n: 1000,
            m: 9,
            cutoff: DEFAULT_CUTOFF,
            refinement: 1,
            replications: 3000,
            seed: 0,
            spatial_layout: SpatialLayout::Equispaced,
            estimators: vec![
                EstimatorKind::Sigma2Multi,
                EstimatorKind::Quarticity,
                EstimatorKind::CurvatureLogratio,
                EstimatorKind::FitLeastSquares,
            ],
            initial: InitialCondition::Zero,
            level: 0.95,
            denominator: Denominator::Feasible,
            autocorrelation_lags: 0,
            tail_correction: false,
        }
    }
}

impl ExperimentConfig {
    pub fn grid(&self) -> Result<SamplingGrid> {
        match &self.spatial_layout {
            SpatialLayout::Equispaced => SamplingGrid::equispaced(self.n, self.m),
            SpatialLayout::Explicit(y) => SamplingGrid::new(self.n, y.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidParameter("replications must be at least 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidParameter(format!("level must lie in (0, 1), got {}", self.level)));
        }
        if self.autocorrelation_lags >= self.n {
            return Err(Error::InvalidParameter("autocorrelation_lags must be below n".into()));
        }
        self.grid()?;
        Ok(())
    }

    /// Drops the estimators that need two spatial points when the grid has one.
    fn effective(&self) -> Result<ExperimentConfig> {
        let mut cfg = self.clone();
        if cfg.grid()?.m() < 2 {
            let before = cfg.estimators.len();
            cfg.estimators.retain(|e| !matches!(e, EstimatorKind::CurvatureLogratio | EstimatorKind::FitLeastSquares));
            if cfg.estimators.len() < before {
                log::warn!("one spatial point: skipping curvature_logratio and fit_least_squares");
            }
        }
        Ok(cfg)
    }

    fn wants(&self, kind: EstimatorKind) -> bool {
        self.estimators.contains(&kind)
    }

    fn truth(&self, m: usize, y: &[f64]) -> Result<Truth> {
        let iv = self.vol.integrated_variance();
        let iq = self.vol.integrated_quarticity();
        let kappa = self.params.curvature();
        let iv0 = self.params.normalized_volatility(iv);
        let fit_cov = if m >= 2 && iv0 > 0.0 && self.wants(EstimatorKind::FitLeastSquares) {
            Some(asymptotic_cov((iv0, kappa), self.params.theta2(), iq, y, MatrixMode::default_for(m))?)
        } else {
            None
        };
        Ok(Truth { integrated_variance: iv, integrated_quarticity: iq, iv0, kappa, fit_cov })
    }
}

/// True values implied by the configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Truth {
    pub integrated_variance: f64,
    pub integrated_quarticity: f64,
    pub iv0: f64,
    pub kappa: f64,
    /// `(Γπ/θ2)∫σ⁴ V⁻¹UV⁻¹` at the true parameters (not divided by `mn`).
    pub fit_cov: Option<[[f64; 2]; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub index: usize,
    pub seed: u64,
    /// `RV_n(y_j)` at every grid point.
    pub rv: Vec<f64>,
    pub sigma2: Option<f64>,
    pub quarticity: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub curvature_logratio: Option<f64>,
    pub iv0_hat: Option<f64>,
    pub kappa_hat: Option<f64>,
    pub fit_converged: Option<bool>,
    /// Autocorrelations per grid point, lags `1..=autocorrelation_lags`.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub acf: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatSummary {
    pub mean: f64,
    /// Monte Carlo standard error of the mean.
    pub mean_stderr: f64,
    pub theory_mean: Option<f64>,
    pub mc_variance: f64,
    pub mn_scaled_variance: f64,
    pub theory_variance: Option<f64>,
    pub ratio: Option<f64>,
    /// Delta-method standard error of `ratio`.
    pub ratio_stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QqTable {
    /// `(sorted standardized error, N(0, 1) quantile at (i - 0.5)/R)`.
    pub rows: Vec<(f64, f64)>,
    pub ks_stat: f64,
    pub ks_p_value: f64,
    pub denominator: Denominator,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileRow {
    pub y: f64,
    pub mean_rv: f64,
    pub rv_stderr: f64,
    pub theory: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub n: usize,
    pub m: usize,
    pub y: Vec<f64>,
    pub replications: usize,
    pub truth: Truth,
    pub records: Vec<ReplicationRecord>,
    pub summary: BTreeMap<String, StatSummary>,
    pub profile: Vec<ProfileRow>,
    pub qq: Option<QqTable>,
    pub ks_stat: Option<f64>,
    pub coverage: Option<f64>,
    /// Autocorrelations averaged over replications and grid points.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub mean_acf: Vec<f64>,
}

fn mean_var(xs: &[f64]) -> (f64, f64, f64) {
    let r = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / r;
    if xs.len() < 2 {
        return (mean, 0.0, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r - 1.0);
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / r;
    // variance of the sample variance, (μ4 - σ⁴)/R
    let var_of_var = ((m4 - var * var) / r).max(0.0);
    (mean, var, var_of_var)
}

fn summarize(xs: &[f64], mn: f64, theory_mean: Option<f64>, theory_variance: Option<f64>) -> StatSummary {
    let (mean, var, var_of_var) = mean_var(xs);
    let mn_scaled = mn * var;
    let ratio = theory_variance.filter(|t| *t > 0.0).map(|t| mn_scaled / t);
    let ratio_stderr = theory_variance.filter(|t| *t > 0.0).map(|t| mn * var_of_var.sqrt() / t);
    StatSummary {
        mean,
        mean_stderr: (var / xs.len() as f64).sqrt(),
        theory_mean,
        mc_variance: var,
        mn_scaled_variance: mn_scaled,
        theory_variance,
        ratio,
        ratio_stderr,
    }
}

fn summarize_cov(xs: &[f64], ys: &[f64], mn: f64, theory: Option<f64>) -> StatSummary {
    let r = xs.len() as f64;
    let (mx, _, _) = mean_var(xs);
    let (my, _, _) = mean_var(ys);
    let prods: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    let cov = if xs.len() < 2 { 0.0 } else { prods.iter().sum::<f64>() / (r - 1.0) };
    let (pm, pv, _) = mean_var(&prods);
    let mn_scaled = mn * cov;
    let ratio = theory.filter(|t| *t != 0.0).map(|t| mn_scaled / t);
    let ratio_stderr = theory.filter(|t| *t != 0.0).map(|t| mn * (pv / r).sqrt() / t.abs());
    StatSummary {
        mean: pm,
        mean_stderr: (pv / r).sqrt(),
        theory_mean: None,
        mc_variance: cov,
        mn_scaled_variance: mn_scaled,
        theory_variance: theory,
        ratio,
        ratio_stderr,
    }
}

fn worker_count() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&t| t > 0)
}

/// Runs the experiment on a pool sized by `SPDEVOL_THREADS` (rayon's default otherwise).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with_threads(cfg, worker_count().unwrap_or_else(rayon::current_num_threads))
}

pub fn run_experiment_with_threads(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    let cfg = &cfg.effective()?;
    let grid = cfg.grid()?;
    if cfg.wants(EstimatorKind::Sigma2Multi) {
        warn_if_dense(grid.n(), grid.m());
    }
    let mut synth = Synthesizer::new(cfg.params, cfg.vol.clone(), grid.clone(), cfg.cutoff, cfg.refinement)?;
    if cfg.tail_correction {
        synth = synth.with_tail_correction()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot build worker pool: {e}")))?;
    let records: Vec<ReplicationRecord> =
        pool.install(|| (0..cfg.replications).into_par_iter().map(|r| replicate(cfg, &synth, r)).collect::<Result<_>>())?;
    aggregate(cfg, &grid, records)
}

fn replicate(cfg: &ExperimentConfig, synth: &Synthesizer, index: usize) -> Result<ReplicationRecord> {
    let seed = derive_seed(cfg.seed, index as u64);
    let field = synth.synthesize(seed, cfg.initial)?;
    let inc = Increments::new(&field)?;
    let grid = field.grid();
    let (n, m) = (grid.n(), grid.m());
    let rv = (0..m).map(|j| inc.realized_volatility(j)).collect::<Result<Vec<_>>>()?;

    let mut rec = ReplicationRecord {
        index,
        seed,
        rv: rv.clone(),
        sigma2: None,
        quarticity: None,
        ci: None,
        curvature_logratio: None,
        iv0_hat: None,
        kappa_hat: None,
        fit_converged: None,
        acf: Vec::new(),
    };
    let needs_quarticity = cfg.wants(EstimatorKind::Quarticity) || cfg.wants(EstimatorKind::Sigma2Multi);
    if needs_quarticity {
        rec.quarticity = Some(inc.quarticity(&cfg.params)?);
    }
    if cfg.wants(EstimatorKind::Sigma2Multi) {
        let s2 = inc.sigma2_multi(&cfg.params)?;
        let ci = feasible_ci(s2, rec.quarticity.unwrap_or(0.0), n, m, cfg.level)?;
        rec.sigma2 = Some(s2);
        rec.ci = Some((ci.lo, ci.hi));
    }
    if cfg.wants(EstimatorKind::CurvatureLogratio) {
        rec.curvature_logratio = Some(inc.curvature_logratio_default()?);
    }
    if cfg.wants(EstimatorKind::FitLeastSquares) {
        let data = RegressionData::new(rv, grid.y().to_vec())?;
        let fit = fit_least_squares(&data, &FitOptions::default())?;
        rec.iv0_hat = Some(fit.iv0_hat);
        rec.kappa_hat = Some(fit.kappa_hat);
        rec.fit_converged = Some(fit.converged);
    }
    if cfg.autocorrelation_lags > 0 {
        rec.acf = (0..m).map(|j| inc.autocorrelation(j, cfg.autocorrelation_lags)).collect::<Result<_>>()?;
    }
    Ok(rec)
}

fn column<T, F: Fn(&ReplicationRecord) -> Option<T>>(records: &[ReplicationRecord], f: F) -> Option<Vec<T>> {
    records.iter().map(f).collect()
}

fn aggregate(cfg: &ExperimentConfig, grid: &SamplingGrid, records: Vec<ReplicationRecord>) -> Result<ExperimentReport> {
    let (n, m) = (grid.n(), grid.m());
    let mn = (n * m) as f64;
    let truth = cfg.truth(m, grid.y())?;
    let mut summary = BTreeMap::new();

    if let Some(xs) = column(&records, |r| r.sigma2) {
        let theory = pi_gamma() * truth.integrated_quarticity;
        summary.insert("sigma2_multi".to_string(), summarize(&xs, mn, Some(truth.integrated_variance), Some(theory)));
    }
    if let Some(xs) = column(&records, |r| r.quarticity) {
        summary.insert("quarticity".to_string(), summarize(&xs, mn, Some(truth.integrated_quarticity), None));
    }
    if let Some(xs) = column(&records, |r| r.curvature_logratio) {
        summary.insert("curvature_logratio".to_string(), summarize(&xs, n as f64, Some(truth.kappa), None));
    }
    if let (Some(iv), Some(kp)) = (column(&records, |r| r.iv0_hat), column(&records, |r| r.kappa_hat)) {
        let cov = truth.fit_cov;
        summary.insert("iv0_hat".to_string(), summarize(&iv, mn, Some(truth.iv0), cov.map(|c| c[0][0])));
        summary.insert("kappa_hat".to_string(), summarize(&kp, mn, Some(truth.kappa), cov.map(|c| c[1][1])));
        summary.insert("cov_iv0_kappa".to_string(), summarize_cov(&iv, &kp, mn, cov.map(|c| c[0][1])));
    }

    let profile = (0..m)
        .map(|j| {
            let xs: Vec<f64> = records.iter().map(|r| r.rv[j]).collect();
            let (mean, var, _) = mean_var(&xs);
            ProfileRow {
                y: grid.y()[j],
                mean_rv: mean,
                rv_stderr: (var / xs.len() as f64).sqrt(),
                theory: first_order_sq_increment(&cfg.params, truth.integrated_variance, grid.y()[j], grid.delta_n())
                    / grid.delta_n().sqrt(),
            }
        })
        .collect();

    let coverage = column(&records, |r| r.ci).map(|cis| {
        let hits = cis.iter().filter(|(lo, hi)| *lo <= truth.integrated_variance && truth.integrated_variance <= *hi).count();
        hits as f64 / cis.len() as f64
    });

    let mean_acf = if cfg.autocorrelation_lags > 0 {
        let count = (records.len() * m) as f64;
        (0..cfg.autocorrelation_lags)
            .map(|h| records.iter().flat_map(|r| r.acf.iter().map(move |a| a[h])).sum::<f64>() / count)
            .collect()
    } else {
        Vec::new()
    };

    let mut report = ExperimentReport {
        n,
        m,
        y: grid.y().to_vec(),
        replications: records.len(),
        truth,
        records,
        summary,
        profile,
        qq: None,
        ks_stat: None,
        coverage,
        mean_acf,
    };
    if report.replications >= 30 && report.records.iter().all(|r| r.sigma2.is_some()) {
        let qq = qq_standardized_errors(&report, cfg.denominator)?;
        report.ks_stat = Some(qq.ks_stat);
        report.qq = Some(qq);
    }
    Ok(report)
}

/// `√(mn)(σ̂² - ∫σ²)/√(πΓ·q)` per replication, with `q` the quarticity estimate (feasible)
/// or the true `∫σ⁴` (infeasible).
pub fn standardized_errors(report: &ExperimentReport, against: Denominator) -> Result<Vec<f64>> {
    let mn = (report.n * report.m) as f64;
    report
        .records
        .iter()
        .map(|r| {
            let s2 = r.sigma2.ok_or_else(|| Error::InvalidParameter("report has no volatility estimates".into()))?;
            let q = match against {
                Denominator::Feasible => r.quarticity.unwrap_or(0.0),
                Denominator::Infeasible => report.truth.integrated_quarticity,
            };
            if !(q > 0.0) {
                return Err(Error::DegenerateIncrements(format!("replication {} has zero quarticity", r.index)));
            }
            Ok(mn.sqrt() * (s2 - report.truth.integrated_variance) / (pi_gamma() * q).sqrt())
        })
        .collect()
}

/// Sorted standardized errors against normal quantiles, with a Kolmogorov–Smirnov test.
pub fn qq_standardized_errors(report: &ExperimentReport, against: Denominator) -> Result<QqTable> {
    if report.records.len() < 30 {
        return Err(Error::InvalidParameter(format!(
            "Q–Q table needs at least 30 replications, got {}",
            report.records.len()
        )));
    }
    let mut errs = standardized_errors(report, against)?;
    errs.sort_by(f64::total_cmp);
    Ok(qq_table(errs, against))
}

fn qq_table(sorted: Vec<f64>, denominator: Denominator) -> QqTable {
    let r = sorted.len();
    let ks_stat = ks_statistic_normal(&sorted);
    let rows = sorted.into_iter().enumerate().map(|(i, e)| (e, normal_quantile((i as f64 + 0.5) / r as f64))).collect();
    QqTable { rows, ks_stat, ks_p_value: ks_p_value(ks_stat, r), denominator }
}

/// Monte Carlo mean of `RV_n(y_j)` next to the first-order curve `e^{-yϰ}∫σ²/√(πθ2)`.
pub fn spatial_profile(cfg: &ExperimentConfig) -> Result<Vec<ProfileRow>> {
    let cfg = ExperimentConfig { estimators: Vec::new(), autocorrelation_lags: 0, ..cfg.clone() };
    Ok(run_experiment(&cfg)?.profile)
}

impl ExperimentReport {
    pub fn write_qq_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "standardized_error,normal_quantile")?;
        if let Some(qq) = &self.qq {
            for (e, q) in &qq.rows {
                writeln!(w, "{e},{q}")?;
            }
        }
        Ok(())
    }

    pub fn write_profile_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "y,mean_rv,rv_stderr,theory")?;
        for p in &self.profile {
            writeln!(w, "{},{},{},{}", p.y, p.mean_rv, p.rv_stderr, p.theory)?;
        }
        Ok(())
    }

    pub fn write_ratios_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "statistic,m,mean,theory_mean,mc_variance,mn_scaled_variance,theory_variance,ratio")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (name, s) in &self.summary {
            writeln!(
                w,
                "{name},{},{},{},{},{},{},{}",
                self.m,
                s.mean,
                opt(s.theory_mean),
                s.mc_variance,
                s.mn_scaled_variance,
                opt(s.theory_variance),
                opt(s.ratio)
            )?;
        }
        Ok(())
    }
}
