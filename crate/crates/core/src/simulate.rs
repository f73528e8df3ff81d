//! Exact simulation of the coordinate Ornstein–Uhlenbeck processes and spectral synthesis
//! of the field on a discrete observation grid.
//!
//! Every mode `k` draws its normals from its own ChaCha8 stream keyed by `(seed, k)`, so a
//! field is a pure function of its inputs no matter how the modes are scheduled. Modes are
//! processed in fixed blocks; each block's contribution is a small matrix product
//! `paths(block)ᵀ · basis(block)` and contributions are added in block order.

use std::io::{Read, Write};
use std::ops::Range;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{OperatorParams, VolatilitySpec};

/// Number of modes handled by one synthesis block.
pub const MODE_BLOCK: usize = 128;

/// Default spectral cutoff.
pub const DEFAULT_CUTOFF: usize = 10_000;

/// Observation grid: `t_i = i/n` for `i = 0..=n`, and interior points `y_1 < … < y_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingGrid {
    n: usize,
    y: Vec<f64>,
}

impl SamplingGrid {
    pub fn new(n: usize, y: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("need at least one time step".into()));
        }
        if y.is_empty() {
            return Err(Error::InvalidParameter("need at least one spatial point".into()));
        }
        if y.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::InvalidParameter(format!(
                "spatial points must lie strictly inside (0, 1): {y:?}"
            )));
        }
        if y.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(format!(
                "spatial points must be strictly increasing: {y:?}"
            )));
        }
        Ok(Self { n, y })
    }

    /// `y_j = j/(m+1)`, `j = 1..=m`.
    pub fn equispaced(n: usize, m: usize) -> Result<Self> {
        let y = (1..=m).map(|j| j as f64 / (m + 1) as f64).collect();
        Self::new(n, y)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn delta_n(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.n as f64
    }

    /// `min_j min(y_j, 1 - y_j)`.
    pub fn delta_margin(&self) -> f64 {
        self.y.iter().map(|&v| v.min(1.0 - v)).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialCondition {
    #[default]
    Zero,
    Stationary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub cutoff: usize,
    pub seed: u64,
    pub initial: InitialCondition,
    pub refinement: usize,
    /// Add the modes above `K` as a Gaussian term that is independent across time steps.
    pub tail_correction: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { cutoff: DEFAULT_CUTOFF, seed: 0, initial: InitialCondition::Zero, refinement: 1, tail_correction: false }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cutoff == 0 {
            return Err(Error::InvalidParameter("cutoff K must be at least 1".into()));
        }
        if self.refinement == 0 {
            return Err(Error::InvalidParameter("refinement must be at least 1".into()));
        }
        Ok(())
    }
}

/// Where a simulated field came from.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub params: OperatorParams,
    pub vol: VolatilitySpec,
    pub config: SimulationConfig,
}

/// Observed field `X_{t_i}(y_j)`, stored as an `(n+1) × m` matrix.
#[derive(Debug, Clone)]
pub struct FieldSample {
    values: Array2<f64>,
    grid: SamplingGrid,
    provenance: Option<Provenance>,
}

impl FieldSample {
    /// Wraps observed values. Shape must be `(n+1) × m` and all entries finite.
    pub fn from_values(values: Array2<f64>, grid: SamplingGrid) -> Result<Self> {
        if values.dim() != (grid.n() + 1, grid.m()) {
            return Err(Error::InvalidParameter(format!(
                "field shape {:?} does not match grid ({} × {})",
                values.dim(),
                grid.n() + 1,
                grid.m()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("field contains non-finite values".into()));
        }
        Ok(Self { values, grid, provenance: None })
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn grid(&self) -> &SamplingGrid {
        &self.grid
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    /// The same field with every value multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self { values: &self.values * c, grid: self.grid.clone(), provenance: None }
    }

    /// Writes `t,y_1,…,y_m` followed by one row per observation time.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = Vec::with_capacity(self.grid.m() + 1);
        header.push("t".to_string());
        header.extend(self.grid.y().iter().map(|y| format!("{y:.6}")));
        w.write_record(&header).map_err(csv_error)?;
        let mut record = Vec::with_capacity(self.grid.m() + 1);
        for (i, row) in self.values.axis_iter(Axis(0)).enumerate() {
            record.clear();
            record.push(self.grid.time(i).to_string());
            record.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&record).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = r.headers().map_err(csv_error)?.clone();
        if header.get(0).map(str::trim) != Some("t") {
            return Err(Error::Format("first column must be `t`".into()));
        }
        let y = header
            .iter()
            .skip(1)
            .map(|h| h.trim().parse::<f64>().map_err(|_| Error::Format(format!("bad spatial label `{h}`"))))
            .collect::<Result<Vec<_>>>()?;
        let m = y.len();
        let mut times = Vec::new();
        let mut data = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_error)?;
            if rec.len() != m + 1 {
                return Err(Error::Format(format!("row {} has {} columns, expected {}", line + 1, rec.len(), m + 1)));
            }
            let mut fields = rec.iter().map(|s| {
                s.trim().parse::<f64>().map_err(|_| Error::Format(format!("row {}: bad number `{s}`", line + 1)))
            });
            times.push(fields.next().unwrap()?);
            for v in fields {
                data.push(v?);
            }
        }
        if times.len() < 2 {
            return Err(Error::Format("need at least two observation times".into()));
        }
        let n = times.len() - 1;
        for (i, &t) in times.iter().enumerate() {
            if (t - i as f64 / n as f64).abs() > 1e-9 {
                return Err(Error::Format(format!("row {i}: time {t} is not on the grid i/{n}")));
            }
        }
        let grid = SamplingGrid::new(n, y)?;
        let values = Array2::from_shape_vec((n + 1, m), data).map_err(|e| Error::Format(e.to_string()))?;
        Self::from_values(values, grid)
    }
}

fn csv_error(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(e.to_string())
    }
}

/// Time increments `X_{t_i}(y_j) - X_{t_{i-1}}(y_j)`, an `n × m` matrix.
pub fn increments(field: &FieldSample) -> Array2<f64> {
    let v = field.values();
    &v.slice(s![1.., ..]) - &v.slice(s![..-1, ..])
}

/// Scrambles `(seed, index)` into a fresh 64-bit seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent random stream of mode `k` for a given seed.
pub fn mode_stream(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

/// `(1 - e^{-c t}) / c`, continuous at `c = 0`.
#[inline]
pub(crate) fn decay_integral(c: f64, t: f64) -> f64 {
    let ct = c * t;
    if ct.abs() < 1e-8 {
        t * (1.0 - 0.5 * ct)
    } else {
        -(-ct).exp_m1() / c
    }
}

/// Per-step transition of `dx = -λx dt + σ_t dW` over a step `τ`.
#[derive(Debug, Clone, Copy)]
struct Transition {
    decay: f64,
    unit_std: f64,
}

impl Transition {
    fn new(lambda: f64, tau: f64) -> Self {
        Self { decay: (-lambda * tau).exp(), unit_std: decay_integral(2.0 * lambda, tau).sqrt() }
    }
}

/// Runs the exact recursion and writes `x(i/n)` for `i = 0..=n` into `out`.
/// `sigma_steps` holds `σ` at the left end of each of the `n · refinement` sub-steps.
fn fill_path<R: Rng>(tr: Transition, sigma_steps: &[f64], refinement: usize, x0: f64, rng: &mut R, out: &mut [f64]) {
    let mut x = x0;
    out[0] = x;
    for (slot, sigmas) in out[1..].iter_mut().zip(sigma_steps.chunks_exact(refinement)) {
        for &sigma in sigmas {
            let z: f64 = rng.sample(StandardNormal);
            x = x * tr.decay + sigma * tr.unit_std * z;
        }
        *slot = x;
    }
}

fn sigma_steps(vol: &VolatilitySpec, n: usize, refinement: usize) -> Vec<f64> {
    let steps = n * refinement;
    (0..steps).map(|s| vol.sigma_at(s as f64 / steps as f64)).collect()
}

/// Exact OU path sampled at `i/n`, `i = 0..=n`, drawing exactly `n · refinement` normals.
///
/// The volatility is frozen at the left end of each sub-step of length `1/(n · refinement)`.
pub fn ou_exact_path<R: Rng>(
    lambda: f64,
    vol: &VolatilitySpec,
    n: usize,
    refinement: usize,
    x0: f64,
    rng: &mut R,
) -> Vec<f64> {
    assert!(n >= 1 && refinement >= 1);
    let tr = Transition::new(lambda, 1.0 / (n * refinement) as f64);
    let sig = sigma_steps(vol, n, refinement);
    let mut out = vec![0.0; n + 1];
    fill_path(tr, &sig, refinement, x0, rng, &mut out);
    out
}

/// Precomputed eigen-data for repeated synthesis on a fixed grid.
///
/// Building this once per experiment avoids recomputing the `K × m` basis table.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    params: OperatorParams,
    vol: VolatilitySpec,
    grid: SamplingGrid,
    cutoff: usize,
    refinement: usize,
    /// `e_k(y_j)`, shape `K × m`.
    basis: Array2<f64>,
    lambdas: Vec<f64>,
    transitions: Vec<Transition>,
    sigma_steps: Vec<f64>,
    /// Cholesky factor of the spatial covariance of `Σ_{k>K} x_k e_k(y_j)` per unit `σ²`.
    tail: Option<Array2<f64>>,
}

/// Smallest `λ_{K+1}Δ` for which modes above `K` count as independent across steps.
const TAIL_MIN_DECAY: f64 = 50.0;

/// Modes `K+1..=8K` enter the tail covariance term by term.
const TAIL_DIRECT: usize = 8;

impl Synthesizer {
    pub fn new(
        params: OperatorParams,
        vol: VolatilitySpec,
        grid: SamplingGrid,
        cutoff: usize,
        refinement: usize,
    ) -> Result<Self> {
        SimulationConfig { cutoff, refinement, ..Default::default() }.validate()?;
        if cutoff < 10 * grid.n() {
            log::warn!(
                "cutoff K={cutoff} is below 10·n={}; expect a negative bias from spectral truncation",
                10 * grid.n()
            );
        }
        let tau = 1.0 / (grid.n() * refinement) as f64;
        let lambdas: Vec<f64> = (1..=cutoff).map(|k| params.eigenvalue(k)).collect();
        if lambdas[0] <= 0.0 {
            log::warn!("lambda_1 = {} <= 0: mode 1 is not mean reverting", lambdas[0]);
        }
        let transitions = lambdas.iter().map(|&l| Transition::new(l, tau)).collect();
        let basis = Array2::from_shape_fn((cutoff, grid.m()), |(k, j)| {
            params.eigenfunction_unchecked(k + 1, grid.y()[j])
        });
        let sigma_steps = sigma_steps(&vol, grid.n(), refinement);
        Ok(Self { params, vol, grid, cutoff, refinement, basis, lambdas, transitions, sigma_steps, tail: None })
    }

    /// Enables the tail correction.
    ///
    /// For `k > K` the rates satisfy `λ_kΔ ≥ 50`, so `x_k(t_i)` are independent `N(0, σ²/(2λ_k))`
    /// across steps to within `e^{-50}`. Their sum enters each row as `σ(t_i) L z_i` with
    /// `L Lᵀ = Σ_{k>K} e_k(y_j) e_k(y_l) / (2λ_k)`: the terms up to `8K` are summed directly and
    /// the rest, whose spatial cross terms are negligible, through `Σ_{k>8K} 1/(2λ_k)` times
    /// the average `e^{-yϰ}` of `e_k(y)²`.
    pub fn with_tail_correction(mut self) -> Result<Self> {
        let first = self.params.eigenvalue(self.cutoff + 1);
        let decay = first * self.grid.delta_n();
        if decay < TAIL_MIN_DECAY {
            return Err(Error::InvalidParameter(format!(
                "tail correction needs λ_(K+1)·Δ ≥ {TAIL_MIN_DECAY}, got {decay:.3}; raise K"
            )));
        }
        let m = self.grid.m();
        let y = self.grid.y();
        let mut cov = Array2::<f64>::zeros((m, m));
        let mut e = vec![0.0; m];
        for k in (self.cutoff + 1..=TAIL_DIRECT * self.cutoff).rev() {
            let w = 0.5 / self.params.eigenvalue(k);
            for (ej, &yj) in e.iter_mut().zip(y) {
                *ej = self.params.eigenfunction_unchecked(k, yj);
            }
            for a in 0..m {
                for b in 0..=a {
                    cov[[a, b]] += w * e[a] * e[b];
                }
            }
        }
        // Σ_{k>8K} 1/(a k² + c) by the midpoint rule, expanded in c/(a X²)
        let a = std::f64::consts::PI.powi(2) * self.params.theta2();
        let c = self.params.eigenvalue(1) - a;
        let x = (TAIL_DIRECT * self.cutoff) as f64 + 0.5;
        let rest = 0.5 * (1.0 / (a * x) - c / (3.0 * a * a * x.powi(3)));
        for (j, &yj) in y.iter().enumerate() {
            cov[[j, j]] += rest * (-yj * self.params.curvature()).exp();
        }
        self.tail = Some(cholesky_lower(&cov)?);
        Ok(self)
    }

    pub fn tail_correction(&self) -> bool {
        self.tail.is_some()
    }

    fn add_tail(&self, seed: u64, initial: InitialCondition, values: &mut Array2<f64>) {
        let Some(l) = &self.tail else { return };
        // stream 0 is free: modes are numbered from 1
        let mut rng = mode_stream(seed, 0);
        let m = self.grid.m();
        let mut z = vec![0.0; m];
        for (i, mut row) in values.axis_iter_mut(Axis(0)).enumerate() {
            let sigma = match (i, initial) {
                (0, InitialCondition::Zero) => continue,
                (0, InitialCondition::Stationary) => self.sigma_steps[0],
                _ => self.sigma_steps[i * self.refinement - 1],
            };
            for zj in z.iter_mut() {
                *zj = rng.sample(StandardNormal);
            }
            for a in 0..m {
                let draw: f64 = (0..=a).map(|b| l[[a, b]] * z[b]).sum();
                row[a] += sigma * draw;
            }
        }
    }

    pub fn grid(&self) -> &SamplingGrid {
        &self.grid
    }

    pub fn params(&self) -> &OperatorParams {
        &self.params
    }

    pub fn vol(&self) -> &VolatilitySpec {
        &self.vol
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    fn check_initial(&self, initial: InitialCondition) -> Result<()> {
        if initial == InitialCondition::Stationary && self.lambdas[0] <= 0.0 {
            return Err(Error::NonDissipative { k: 1, lambda: self.lambdas[0] });
        }
        Ok(())
    }

    fn blocks(&self, modes: Range<usize>) -> impl Iterator<Item = Range<usize>> + '_ {
        // Block boundaries are fixed in absolute mode index so that partial syntheses line up.
        let first = (modes.start - 1) / MODE_BLOCK;
        let last = (modes.end - 2) / MODE_BLOCK;
        (first..=last).map(move |b| {
            let lo = (b * MODE_BLOCK + 1).max(modes.start);
            let hi = ((b + 1) * MODE_BLOCK + 1).min(modes.end);
            lo..hi
        })
    }

    /// Sum over the modes in `block` (1-based indices) of `x_k(t_i) e_k(y_j)`.
    fn block_contribution(&self, seed: u64, initial: InitialCondition, block: Range<usize>) -> Array2<f64> {
        let n = self.grid.n();
        let sigma0 = self.sigma_steps[0];
        let mut paths = Array2::<f64>::zeros((block.len(), n + 1));
        for (row, k) in paths.axis_iter_mut(Axis(0)).zip(block.clone()) {
            let mut rng = mode_stream(seed, k);
            let x0 = match initial {
                InitialCondition::Zero => 0.0,
                InitialCondition::Stationary => {
                    let z: f64 = rng.sample(StandardNormal);
                    sigma0 / (2.0 * self.lambdas[k - 1]).sqrt() * z
                }
            };
            let out = row.into_slice().expect("rows of a standard-layout array are contiguous");
            fill_path(self.transitions[k - 1], &self.sigma_steps, self.refinement, x0, &mut rng, out);
        }
        let basis = self.basis.slice(s![block.start - 1..block.end - 1, ..]);
        paths.t().dot(&basis)
    }

    fn modes_checked(&self, modes: &Range<usize>) -> Result<()> {
        if modes.start < 1 || modes.end > self.cutoff + 1 || modes.start >= modes.end {
            return Err(Error::InvalidParameter(format!(
                "mode range {modes:?} not inside 1..={}",
                self.cutoff
            )));
        }
        Ok(())
    }

    /// Partial synthesis over a contiguous range of 1-based mode indices.
    pub fn synthesize_modes(&self, seed: u64, initial: InitialCondition, modes: Range<usize>) -> Result<Array2<f64>> {
        self.modes_checked(&modes)?;
        self.check_initial(initial)?;
        let mut total = Array2::<f64>::zeros((self.grid.n() + 1, self.grid.m()));
        for block in self.blocks(modes) {
            total += &self.block_contribution(seed, initial, block);
        }
        Ok(total)
    }

    /// Same result as [`Self::synthesize_modes`], with blocks computed on the rayon pool.
    pub fn synthesize_modes_par(
        &self,
        seed: u64,
        initial: InitialCondition,
        modes: Range<usize>,
    ) -> Result<Array2<f64>> {
        self.modes_checked(&modes)?;
        self.check_initial(initial)?;
        let blocks: Vec<_> = self.blocks(modes).collect();
        let parts: Vec<Array2<f64>> =
            blocks.into_par_iter().map(|b| self.block_contribution(seed, initial, b)).collect();
        let mut total = Array2::<f64>::zeros((self.grid.n() + 1, self.grid.m()));
        for p in &parts {
            total += p;
        }
        Ok(total)
    }

    /// Full field over modes `1..=K`, plus the tail term when enabled.
    pub fn synthesize(&self, seed: u64, initial: InitialCondition) -> Result<FieldSample> {
        let values = self.synthesize_modes(seed, initial, 1..self.cutoff + 1)?;
        self.wrap(values, seed, initial)
    }

    pub fn synthesize_par(&self, seed: u64, initial: InitialCondition) -> Result<FieldSample> {
        let values = self.synthesize_modes_par(seed, initial, 1..self.cutoff + 1)?;
        self.wrap(values, seed, initial)
    }

    fn wrap(&self, mut values: Array2<f64>, seed: u64, initial: InitialCondition) -> Result<FieldSample> {
        self.add_tail(seed, initial, &mut values);
        let config = SimulationConfig {
            cutoff: self.cutoff,
            seed,
            initial,
            refinement: self.refinement,
            tail_correction: self.tail_correction(),
        };
        Ok(FieldSample::from_values(values, self.grid.clone())?.with_provenance(Provenance {
            params: self.params,
            vol: self.vol.clone(),
            config,
        }))
    }
}

/// Simulates `X_{t_i}(y_j) = Σ_{k≤K} x_k(t_i) e_k(y_j)` with exact OU coordinates.
pub fn synthesize_field(
    params: &OperatorParams,
    vol: &VolatilitySpec,
    grid: &SamplingGrid,
    config: &SimulationConfig,
) -> Result<FieldSample> {
    config.validate()?;
    let mut synth = Synthesizer::new(*params, vol.clone(), grid.clone(), config.cutoff, config.refinement)?;
    if config.tail_correction {
        synth = synth.with_tail_correction()?;
    }
    synth.synthesize(config.seed, config.initial)
}

/// Lower Cholesky factor of a symmetric positive definite matrix given by its lower triangle.
fn cholesky_lower(a: &Array2<f64>) -> Result<Array2<f64>> {
    let m = a.nrows();
    let mut l = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        for j in 0..=i {
            let s = a[[i, j]] - (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::Singular(format!("tail covariance is not positive definite at row {i}")));
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}
