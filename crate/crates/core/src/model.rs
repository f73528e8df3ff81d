//! Operator parametrization, Dirichlet eigensystem and the weighted `H_θ` geometry.
//!
//! The differential operator is `A = θ0 + θ1 ∂_y + θ2 ∂_yy` on `[0, 1]` with zero
//! boundary values. Its eigenfunctions are
//!
//! ```text
//! e_k(y) = √2 sin(πky) exp(-θ1 y / (2θ2)),   λ_k = -θ0 + θ1²/(4θ2) + π²k²θ2
//! ```
//!
//! and they are orthonormal for `⟨f, g⟩_θ = ∫ e^{yθ1/θ2} f g dy`.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients `θ = (θ0, θ1, θ2)` of the operator. `θ2 > 0` is enforced on construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct OperatorParams {
    theta0: f64,
    theta1: f64,
    theta2: f64,
}

#[derive(Deserialize)]
struct RawParams {
    theta0: f64,
    theta1: f64,
    theta2: f64,
}

impl TryFrom<RawParams> for OperatorParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        OperatorParams::new(raw.theta0, raw.theta1, raw.theta2)
    }
}

impl OperatorParams {
    pub fn new(theta0: f64, theta1: f64, theta2: f64) -> Result<Self> {
        if !(theta0.is_finite() && theta1.is_finite() && theta2.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "operator coefficients must be finite, got ({theta0}, {theta1}, {theta2})"
            )));
        }
        if theta2 <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "theta2 must be strictly positive, got {theta2}"
            )));
        }
        let kappa = theta1 / theta2;
        if !kappa.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "curvature theta1/theta2 is not finite for ({theta1}, {theta2})"
            )));
        }
        Ok(Self { theta0, theta1, theta2 })
    }

    /// The configuration used throughout the simulation study: `θ = (0, 1, 0.2)`.
    pub fn reference() -> Self {
        Self { theta0: 0.0, theta1: 1.0, theta2: 0.2 }
    }

    pub fn theta0(&self) -> f64 {
        self.theta0
    }

    pub fn theta1(&self) -> f64 {
        self.theta1
    }

    pub fn theta2(&self) -> f64 {
        self.theta2
    }

    /// Curvature `ϰ = θ1/θ2`, the spatial decay rate of the increment variance.
    pub fn curvature(&self) -> f64 {
        self.theta1 / self.theta2
    }

    /// Normalized volatility `σ²/√θ2` for a given `σ²` (or `∫σ²`).
    pub fn normalized_volatility(&self, sigma2: f64) -> f64 {
        sigma2 / self.theta2.sqrt()
    }

    /// Eigenvalue `λ_k`. Increasing in `k`; may be non-positive for small `k` if `θ0` is large.
    pub fn eigenvalue(&self, k: usize) -> f64 {
        debug_assert!(k >= 1, "mode index starts at 1");
        let kf = k as f64;
        -self.theta0 + self.theta1 * self.theta1 / (4.0 * self.theta2) + PI * PI * kf * kf * self.theta2
    }

    /// Eigenmode record for index `k`.
    pub fn mode(&self, k: usize) -> EigenMode {
        EigenMode { k, lambda: self.eigenvalue(k) }
    }

    /// Eigenfunction `e_k(y)` on `[0, 1]`.
    pub fn eigenfunction(&self, k: usize, y: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&y) {
            return Err(Error::Domain(format!("spatial point {y} outside [0, 1]")));
        }
        Ok(self.eigenfunction_unchecked(k, y))
    }

    #[inline]
    pub(crate) fn eigenfunction_unchecked(&self, k: usize, y: f64) -> f64 {
        SQRT_2 * (PI * k as f64 * y).sin() * (-0.5 * self.curvature() * y).exp()
    }

    /// Standard deviation `√(σ²/(2λ_k))` of the stationary law of the k-th coordinate.
    pub fn stationary_coeff_std(&self, sigma: f64, k: usize) -> Result<f64> {
        let lambda = self.eigenvalue(k);
        if lambda <= 0.0 {
            return Err(Error::NonDissipative { k, lambda });
        }
        Ok((sigma * sigma / (2.0 * lambda)).sqrt())
    }

    /// `⟨f, g⟩_θ` by composite Simpson with `quad_nodes` subintervals (rounded up to even).
    pub fn inner_product<F, G>(&self, f: F, g: G, quad_nodes: usize) -> f64
    where
        F: Fn(f64) -> f64,
        G: Fn(f64) -> f64,
    {
        let kappa = self.curvature();
        simpson(|y| (y * kappa).exp() * f(y) * g(y), 0.0, 1.0, quad_nodes)
    }
}

impl Default for OperatorParams {
    fn default() -> Self {
        Self::reference()
    }
}

/// Free-function form of [`OperatorParams::inner_product`].
pub fn inner_product_theta<F, G>(params: &OperatorParams, f: F, g: G, quad_nodes: usize) -> f64
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    params.inner_product(f, g, quad_nodes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenMode {
    pub k: usize,
    pub lambda: f64,
}

/// Composite Simpson rule on `[a, b]` with `intervals` subintervals (bumped to the next even number).
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals.max(2).next_multiple_of(2);
    let h = (b - a) / n as f64;
    let mut odd = 0.0;
    let mut even = 0.0;
    for i in 1..n {
        let v = f(a + i as f64 * h);
        if i % 2 == 1 {
            odd += v;
        } else {
            even += v;
        }
    }
    h / 3.0 * (f(a) + f(b) + 4.0 * odd + 2.0 * even)
}

/// Resolution at which time-varying volatilities are checked and integrated.
const VOL_GRID: usize = 4096;

/// Deterministic volatility path `t ↦ σ_t` on `[0, 1]`.
#[derive(Clone)]
pub enum VolatilitySpec {
    Constant { sigma: f64 },
    /// `σ_t = 1 - 0.2 sin(3πt/4)`: a smooth intraday-like pattern.
    SineIntraday,
    Custom(CustomVolatility),
}

/// A user supplied `σ(t)` with its declared Hölder index.
#[derive(Clone)]
pub struct CustomVolatility {
    name: String,
    holder_index: f64,
    func: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl VolatilitySpec {
    pub fn constant(sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "constant volatility must be finite and non-negative, got {sigma}"
            )));
        }
        Ok(Self::Constant { sigma })
    }

    /// Wraps `func` after checking `α ∈ (1/2, 1]` and positivity on a fine grid.
    pub fn custom<F>(name: impl Into<String>, holder_index: f64, func: F) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        if !(holder_index > 0.5 && holder_index <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "Hölder index must lie in (1/2, 1], got {holder_index}"
            )));
        }
        for i in 0..=VOL_GRID {
            let t = i as f64 / VOL_GRID as f64;
            let s = func(t);
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "volatility must be strictly positive on [0, 1], got σ({t}) = {s}"
                )));
            }
        }
        Ok(Self::Custom(CustomVolatility {
            name: name.into(),
            holder_index,
            func: Arc::new(func),
        }))
    }

    #[inline]
    pub fn sigma_at(&self, t: f64) -> f64 {
        match self {
            Self::Constant { sigma } => *sigma,
            Self::SineIntraday => 1.0 - 0.2 * (0.75 * PI * t).sin(),
            Self::Custom(c) => (c.func)(t),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Self::Constant { .. })
    }

    pub fn holder_index(&self) -> f64 {
        match self {
            Self::Constant { .. } | Self::SineIntraday => 1.0,
            Self::Custom(c) => c.holder_index,
        }
    }

    /// `∫₀¹ σ_t² dt`.
    pub fn integrated_variance(&self) -> f64 {
        match self {
            Self::Constant { sigma } => sigma * sigma,
            _ => simpson(|t| self.sigma_at(t).powi(2), 0.0, 1.0, VOL_GRID),
        }
    }

    /// `∫₀¹ σ_t⁴ dt`.
    pub fn integrated_quarticity(&self) -> f64 {
        match self {
            Self::Constant { sigma } => sigma.powi(4),
            _ => simpson(|t| self.sigma_at(t).powi(4), 0.0, 1.0, VOL_GRID),
        }
    }
}

impl Default for VolatilitySpec {
    fn default() -> Self {
        Self::Constant { sigma: 0.25 }
    }
}

impl fmt::Debug for VolatilitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant { sigma } => f.debug_struct("Constant").field("sigma", sigma).finish(),
            Self::SineIntraday => f.write_str("SineIntraday"),
            Self::Custom(c) => f
                .debug_struct("Custom")
                .field("name", &c.name)
                .field("holder_index", &c.holder_index)
                .finish(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum VolatilityRepr {
    Constant { sigma: f64 },
    SineIntraday,
}

impl Serialize for VolatilitySpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Constant { sigma } => VolatilityRepr::Constant { sigma: *sigma }.serialize(serializer),
            Self::SineIntraday => VolatilityRepr::SineIntraday.serialize(serializer),
            Self::Custom(c) => Err(serde::ser::Error::custom(format!(
                "custom volatility `{}` has no serialized form",
                c.name
            ))),
        }
    }
}

impl<'de> Deserialize<'de> for VolatilitySpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        match VolatilityRepr::deserialize(deserializer)? {
            VolatilityRepr::Constant { sigma } => {
                VolatilitySpec::constant(sigma).map_err(serde::de::Error::custom)
            }
            VolatilityRepr::SineIntraday => Ok(VolatilitySpec::SineIntraday),
        }
    }
}
