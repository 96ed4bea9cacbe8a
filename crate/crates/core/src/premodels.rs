//! Drift and volatility of the unregulated market: geometric Brownian
//! motion and the log-pole market whose largest company is pushed away
//! from a drift singularity.

use nalgebra::DMatrix;

use crate::error::{config, domain, Error, Result};
use crate::model::{ellipticity_constant, market_weights, CapitalizationVector, CovarianceMatrix};

/// Gap kept between a log-pole state and the singularity before the drift is refused.
pub const POLE_GUARD: f64 = 1e-12;

/// Coefficients `b(x)` and `sigma(x)` of `dX_i = X_i (b_i dt + sum_v sigma_iv dW_v)`.
///
/// Volatility and covariance are returned by reference: the shipped models
/// have constant `sigma` and precompute `a = sigma sigma'` once.
pub trait CoefficientEvaluator: Send + Sync {
    fn company_count(&self) -> usize;

    /// Dimension of the driving Brownian motion.
    fn noise_dim(&self) -> usize {
        self.company_count()
    }

    fn drift(&self, x: &CapitalizationVector) -> Result<Vec<f64>>;

    fn volatility(&self, x: &CapitalizationVector) -> &DMatrix<f64>;

    fn covariance(&self, x: &CapitalizationVector) -> &CovarianceMatrix;

    /// Membership in the state domain of the premodel.
    fn in_domain(&self, x: &CapitalizationVector) -> bool;

    /// Largest market weight the drift accepts, if the model has a cap.
    fn largest_weight_cap(&self) -> Option<f64> {
        None
    }
}

fn check_volatility(sigma: &DMatrix<f64>, n: usize) -> Result<CovarianceMatrix> {
    if sigma.nrows() != n || sigma.ncols() != n {
        return Err(config(format!(
            "volatility must be {n}x{n}, got {}x{}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(config("volatility has non-finite entries"));
    }
    let a = CovarianceMatrix::from_volatility(sigma);
    ellipticity_constant(&a).map_err(|_| Error::Model("volatility matrix does not have full rank".into()))?;
    Ok(a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbmParams {
    pub drift: Vec<f64>,
    pub volatility: DMatrix<f64>,
}

/// Constant-coefficient premodel.
#[derive(Debug, Clone)]
pub struct GbmModel {
    params: GbmParams,
    covariance: CovarianceMatrix,
}

impl GbmModel {
    pub fn new(params: GbmParams) -> Result<Self> {
        let n = params.drift.len();
        if n < 2 {
            return Err(config("GBM needs at least 2 companies"));
        }
        if params.drift.iter().any(|v| !v.is_finite()) {
            return Err(config("GBM drift has non-finite entries"));
        }
        let covariance = check_volatility(&params.volatility, n)?;
        Ok(Self { params, covariance })
    }

    pub fn params(&self) -> &GbmParams {
        &self.params
    }
}

impl CoefficientEvaluator for GbmModel {
    fn company_count(&self) -> usize {
        self.params.drift.len()
    }

    fn drift(&self, _x: &CapitalizationVector) -> Result<Vec<f64>> {
        Ok(self.params.drift.clone())
    }

    fn volatility(&self, _x: &CapitalizationVector) -> &DMatrix<f64> {
        &self.params.volatility
    }

    fn covariance(&self, _x: &CapitalizationVector) -> &CovarianceMatrix {
        &self.covariance
    }

    fn in_domain(&self, x: &CapitalizationVector) -> bool {
        x.len() == self.company_count()
    }
}

/// The GBM coefficients are the same at every state.
pub fn gbm_coefficients(params: &GbmParams, _x: &CapitalizationVector) -> (Vec<f64>, DMatrix<f64>) {
    (params.drift.clone(), params.volatility.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogPoleParams {
    /// Pole sits at largest weight `1 - delta`.
    pub delta: f64,
    /// Drift added to every company that is not the largest.
    pub g: Vec<f64>,
    /// Strength of the pole.
    pub c: f64,
    pub volatility: DMatrix<f64>,
}

impl LogPoleParams {
    fn validate(&self) -> Result<()> {
        let n = self.g.len();
        if n < 3 {
            return Err(config(format!("log-pole market needs n >= 3, got {n}")));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(config(format!("log-pole delta must lie in (0, 1/2), got {}", self.delta)));
        }
        if self.g.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(config("log-pole g must be finite and non-negative"));
        }
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(config(format!("log-pole c must be positive, got {}", self.c)));
        }
        Ok(())
    }

    pub fn pole(&self) -> f64 {
        1.0 - self.delta
    }
}

/// Index `i` with `x` in `Q_i`: the smallest index attaining the maximum.
pub fn largest_index(x: &CapitalizationVector) -> usize {
    let v = x.as_slice();
    let mut best = 0;
    for (i, &xi) in v.iter().enumerate().skip(1) {
        if xi > v[best] {
            best = i;
        }
    }
    best
}

fn logpole_drift_with(
    params: &LogPoleParams,
    half_diag: &[f64],
    x: &CapitalizationVector,
) -> Result<Vec<f64>> {
    let n = params.g.len();
    if x.len() != n {
        return Err(domain(format!("state has {} companies, model has {n}", x.len())));
    }
    let mu = market_weights(x);
    let top = largest_index(x);
    let mu_top = mu.as_slice()[top];
    if mu_top >= params.pole() - POLE_GUARD {
        return Err(domain(format!(
            "largest weight {mu_top} reached the log-pole at {}",
            params.pole()
        )));
    }
    let mut b: Vec<f64> = half_diag.iter().zip(&params.g).map(|(h, g)| h + g).collect();
    b[top] = half_diag[top] - (params.c / params.delta) / (params.pole() / mu_top).ln();
    Ok(b)
}

fn half_diagonal(sigma: &DMatrix<f64>) -> Vec<f64> {
    (0..sigma.nrows())
        .map(|i| 0.5 * sigma.row(i).iter().map(|s| s * s).sum::<f64>())
        .collect()
}

/// Log-pole drift: `a_ii/2 + g_i` off the top, `a_ii/2 - (c/delta)/ln((1-delta)/mu_i)` on it.
pub fn logpole_drift(params: &LogPoleParams, x: &CapitalizationVector) -> Result<Vec<f64>> {
    logpole_drift_with(params, &half_diagonal(&params.volatility), x)
}

#[derive(Debug, Clone)]
pub struct LogPoleModel {
    params: LogPoleParams,
    covariance: CovarianceMatrix,
    half_diag: Vec<f64>,
}

impl LogPoleModel {
    pub fn new(params: LogPoleParams) -> Result<Self> {
        params.validate()?;
        let covariance = check_volatility(&params.volatility, params.g.len())?;
        let half_diag = covariance.diagonal().iter().map(|a| 0.5 * a).collect();
        Ok(Self {
            params,
            covariance,
            half_diag,
        })
    }

    pub fn params(&self) -> &LogPoleParams {
        &self.params
    }
}

impl CoefficientEvaluator for LogPoleModel {
    fn company_count(&self) -> usize {
        self.params.g.len()
    }

    fn drift(&self, x: &CapitalizationVector) -> Result<Vec<f64>> {
        logpole_drift_with(&self.params, &self.half_diag, x)
    }

    fn volatility(&self, _x: &CapitalizationVector) -> &DMatrix<f64> {
        &self.params.volatility
    }

    fn covariance(&self, _x: &CapitalizationVector) -> &CovarianceMatrix {
        &self.covariance
    }

    fn in_domain(&self, x: &CapitalizationVector) -> bool {
        x.len() == self.company_count() && market_weights(x).largest() < self.params.pole()
    }

    fn largest_weight_cap(&self) -> Option<f64> {
        Some(self.params.pole())
    }
}

/// Either shipped premodel, for configuration-driven callers.
#[derive(Debug, Clone)]
pub enum Premodel {
    Gbm(GbmModel),
    LogPole(LogPoleModel),
}

impl Premodel {
    fn inner(&self) -> &dyn CoefficientEvaluator {
        match self {
            Premodel::Gbm(m) => m,
            Premodel::LogPole(m) => m,
        }
    }
}

impl CoefficientEvaluator for Premodel {
    fn company_count(&self) -> usize {
        self.inner().company_count()
    }

    fn noise_dim(&self) -> usize {
        self.inner().noise_dim()
    }

    fn drift(&self, x: &CapitalizationVector) -> Result<Vec<f64>> {
        self.inner().drift(x)
    }

    fn volatility(&self, x: &CapitalizationVector) -> &DMatrix<f64> {
        match self {
            Premodel::Gbm(m) => m.volatility(x),
            Premodel::LogPole(m) => m.volatility(x),
        }
    }

    fn covariance(&self, x: &CapitalizationVector) -> &CovarianceMatrix {
        match self {
            Premodel::Gbm(m) => m.covariance(x),
            Premodel::LogPole(m) => m.covariance(x),
        }
    }

    fn in_domain(&self, x: &CapitalizationVector) -> bool {
        self.inner().in_domain(x)
    }

    fn largest_weight_cap(&self) -> Option<f64> {
        self.inner().largest_weight_cap()
    }
}
