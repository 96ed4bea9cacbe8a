//! Portfolio rules and the processes built on a simulated path: wealth,
//! share holdings, growth rates, the market price of risk and the
//! density process of the candidate martingale measure.
//!
//! Wealth of a portfolio is rebalanced at the start of every integration
//! step and gains only the net capitalization increments, so regulation
//! never moves it. For a buy-and-hold position such as the market
//! portfolio in the premodel the recursion telescopes exactly to the
//! total-capitalization ratio. [`wealth_exponential`] evaluates the
//! stochastic-exponential form on the same increments and converges to
//! the same limit as the step shrinks.

use nalgebra::{DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, Result};
use crate::model::{market_weights, CapitalizationVector, CovarianceMatrix, WeightVector};
use crate::premodels::CoefficientEvaluator;
use crate::simulation::RegulatedPath;

const PORTFOLIO_SUM_TOLERANCE: f64 = 1e-12;
const RISK_RESIDUAL_TOLERANCE: f64 = 1e-10;

/// Map from market weights to portfolio weights.
///
/// The diversity- and entropy-weighted rules are the standard functionally
/// generated portfolios of stochastic portfolio theory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRule", into = "RawRule")]
pub enum PortfolioRule {
    Market,
    Equal,
    /// `pi_i ∝ mu_i^p`
    Diversity { p: f64 },
    /// `pi_i ∝ -mu_i ln mu_i`
    Entropy,
    Constant { weights: Vec<f64> },
}

/// Flat JSON form `{"rule": ..., "p": ..., "weights": ...}`; fields a rule does not take are rejected.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    rule: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
}

impl TryFrom<RawRule> for PortfolioRule {
    type Error = String;

    fn try_from(raw: RawRule) -> std::result::Result<Self, String> {
        let rule = match (raw.rule.as_str(), raw.p, raw.weights) {
            ("market", None, None) => PortfolioRule::Market,
            ("equal", None, None) => PortfolioRule::Equal,
            ("entropy", None, None) => PortfolioRule::Entropy,
            ("diversity", Some(p), None) => PortfolioRule::Diversity { p },
            ("constant", None, Some(weights)) => PortfolioRule::Constant { weights },
            ("market" | "equal" | "entropy" | "diversity" | "constant", ..) => {
                return Err(format!("wrong parameters for portfolio rule `{}`", raw.rule))
            }
            (other, ..) => return Err(format!("unknown portfolio rule `{other}`")),
        };
        Ok(rule)
    }
}

impl From<PortfolioRule> for RawRule {
    fn from(rule: PortfolioRule) -> Self {
        let (name, p, weights) = match rule {
            PortfolioRule::Market => ("market", None, None),
            PortfolioRule::Equal => ("equal", None, None),
            PortfolioRule::Entropy => ("entropy", None, None),
            PortfolioRule::Diversity { p } => ("diversity", Some(p), None),
            PortfolioRule::Constant { weights } => ("constant", None, Some(weights)),
        };
        RawRule {
            rule: name.into(),
            p,
            weights,
        }
    }
}

impl PortfolioRule {
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            PortfolioRule::Diversity { p } if !(p.is_finite() && (0.0..=1.0).contains(p)) => {
                Err(config(format!("diversity exponent must lie in [0, 1], got {p}")))
            }
            PortfolioRule::Constant { weights } => {
                if weights.len() != n {
                    return Err(config(format!(
                        "constant portfolio has {} weights, market has {n}",
                        weights.len()
                    )));
                }
                if weights.iter().any(|w| !w.is_finite()) {
                    return Err(config("constant portfolio has non-finite weights"));
                }
                let sum: f64 = weights.iter().sum();
                if (sum - 1.0).abs() > PORTFOLIO_SUM_TOLERANCE {
                    return Err(config(format!("constant portfolio sums to {sum}, expected 1")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            PortfolioRule::Market => "market".into(),
            PortfolioRule::Equal => "equal".into(),
            PortfolioRule::Diversity { p } => format!("diversity({p})"),
            PortfolioRule::Entropy => "entropy".into(),
            PortfolioRule::Constant { weights } => format!(
                "constant({})",
                weights.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
            ),
        }
    }

    pub fn is_long_only(&self) -> bool {
        match self {
            PortfolioRule::Constant { weights } => weights.iter().all(|w| *w >= 0.0),
            _ => true,
        }
    }

    /// Uniform bound on the size of any output component.
    pub fn bound(&self) -> f64 {
        match self {
            PortfolioRule::Constant { weights } => weights.iter().fold(0.0, |m, w| m.max(w.abs())),
            _ => 1.0,
        }
    }
}

fn normalize(values: Vec<f64>) -> Result<Vec<f64>> {
    let sum: f64 = values.iter().sum();
    if !(sum.is_finite() && sum > 0.0) {
        return Err(domain(format!("portfolio normalizer is {sum}")));
    }
    Ok(values.into_iter().map(|v| v / sum).collect())
}

pub fn portfolio_weights(rule: &PortfolioRule, mu: &WeightVector) -> Result<Vec<f64>> {
    let m = mu.as_slice();
    match rule {
        PortfolioRule::Market => Ok(m.to_vec()),
        PortfolioRule::Equal => Ok(vec![1.0 / m.len() as f64; m.len()]),
        PortfolioRule::Diversity { p } => {
            if *p == 1.0 {
                Ok(m.to_vec())
            } else {
                normalize(m.iter().map(|w| w.powf(*p)).collect())
            }
        }
        PortfolioRule::Entropy => {
            if m.iter().any(|w| *w >= 1.0) {
                return Err(domain("entropy portfolio is undefined at a unit weight"));
            }
            normalize(m.iter().map(|w| -w * w.ln()).collect())
        }
        PortfolioRule::Constant { weights } => {
            if weights.len() != m.len() {
                return Err(domain("constant portfolio length does not match the market"));
            }
            Ok(weights.clone())
        }
    }
}

/// `pi'b - pi'a pi / 2`
pub fn growth_rate(pi: &[f64], b: &[f64], a: &CovarianceMatrix) -> f64 {
    let drift: f64 = pi.iter().zip(b).map(|(p, b)| p * b).sum();
    drift - 0.5 * a.bilinear(pi, pi)
}

/// `(sum mu_i a_ii - mu'a mu) / 2`
pub fn excess_growth_rate(mu: &WeightVector, a: &CovarianceMatrix) -> f64 {
    let m = mu.as_slice();
    let diag: f64 = m.iter().enumerate().map(|(i, w)| w * a.matrix()[(i, i)]).sum();
    0.5 * (diag - a.bilinear(m, m))
}

/// Number of shares `pi_i V / x_i` held by a portfolio with wealth `V`.
pub fn shares_from_portfolio(pi: &[f64], wealth: f64, x: &CapitalizationVector) -> Vec<f64> {
    pi.iter()
        .zip(x.as_slice())
        .map(|(p, xi)| p * wealth / xi)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WealthPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub initial: f64,
    pub label: String,
}

impl WealthPath {
    pub fn terminal(&self) -> f64 {
        *self.values.last().expect("wealth path is never empty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl DensityPath {
    pub fn terminal(&self) -> f64 {
        *self.values.last().expect("density path is never empty")
    }
}

fn check_initial(w: f64) -> Result<()> {
    if w.is_finite() && w > 0.0 {
        Ok(())
    } else {
        Err(domain(format!("initial wealth must be positive, got {w}")))
    }
}

/// Self-financing wealth of a portfolio rebalanced at each step start.
pub fn wealth_from_portfolio(path: &RegulatedPath, rule: &PortfolioRule, w: f64) -> Result<WealthPath> {
    check_initial(w)?;
    let mut values = Vec::with_capacity(path.times().len());
    values.push(w);
    let mut v = w;
    for (k, inc) in path.net_increments().iter().enumerate() {
        let y = &path.states()[k];
        let pi = portfolio_weights(rule, &market_weights(y))?;
        let ret: f64 = pi
            .iter()
            .zip(inc)
            .zip(y.as_slice())
            .map(|((p, d), yi)| p * d / yi)
            .sum();
        v *= 1.0 + ret;
        if !(v > 0.0) {
            return Err(domain(format!(
                "wealth of {} became non-positive at t={}",
                rule.name(),
                path.times()[k + 1]
            )));
        }
        values.push(v);
    }
    Ok(WealthPath {
        times: path.times().to_vec(),
        values,
        initial: w,
        label: rule.name(),
    })
}

/// `V_{k+1} = V_k exp(gamma_pi h + pi' sigma dW)` along the path's own increments.
pub fn wealth_exponential(
    path: &RegulatedPath,
    rule: &PortfolioRule,
    w: f64,
    eval: &dyn CoefficientEvaluator,
) -> Result<WealthPath> {
    check_initial(w)?;
    let mut values = vec![w];
    let mut log_v = w.ln();
    for (k, dw) in path.brownian_increments().iter().enumerate() {
        let y = &path.states()[k];
        let pi = portfolio_weights(rule, &market_weights(y))?;
        let b = eval.drift(y)?;
        let sigma = eval.volatility(y);
        let gamma = growth_rate(&pi, &b, eval.covariance(y));
        let mut shock = 0.0;
        for (i, p) in pi.iter().enumerate() {
            for (nu, d) in dw.iter().enumerate() {
                shock += p * sigma[(i, nu)] * d;
            }
        }
        log_v += gamma * path.step_sizes()[k] + shock;
        values.push(log_v.exp());
    }
    Ok(WealthPath {
        times: path.times().to_vec(),
        values,
        initial: w,
        label: rule.name(),
    })
}

fn wealth_from_increments<'a>(
    path: &RegulatedPath,
    shares: &[Vec<f64>],
    w: f64,
    increments: impl Iterator<Item = Vec<f64>> + 'a,
) -> Result<WealthPath> {
    if shares.len() != path.step_count() {
        return Err(domain(format!(
            "{} share vectors for {} steps",
            shares.len(),
            path.step_count()
        )));
    }
    let mut values = vec![w];
    let mut v = w;
    for (h, inc) in shares.iter().zip(increments) {
        v += h.iter().zip(&inc).map(|(h, d)| h * d).sum::<f64>();
        values.push(v);
    }
    Ok(WealthPath {
        times: path.times().to_vec(),
        values,
        initial: w,
        label: "shares".into(),
    })
}

/// `V = w + (H . Yhat)` with `shares[k]` held over step `k`.
pub fn wealth_from_shares(path: &RegulatedPath, shares: &[Vec<f64>], w: f64) -> Result<WealthPath> {
    wealth_from_increments(path, shares, w, path.net_increments().iter().cloned())
}

/// Same gains computed from `Y` and the event log: the increment over a step
/// ending in a regulation stops at the pre-regulation value.
pub fn wealth_from_shares_excluding_jumps(
    path: &RegulatedPath,
    shares: &[Vec<f64>],
    w: f64,
) -> Result<WealthPath> {
    let increments = (0..path.step_count()).map(|k| {
        path.left_limit(k + 1)
            .as_slice()
            .iter()
            .zip(path.states()[k].as_slice())
            .map(|(next, prev)| next - prev)
            .collect::<Vec<f64>>()
    });
    wealth_from_increments(path, shares, w, increments)
}

/// Shares a rule holds along the path, rebalancing with the wealth it generates.
pub fn portfolio_shares(path: &RegulatedPath, rule: &PortfolioRule, w: f64) -> Result<Vec<Vec<f64>>> {
    let mut shares = Vec::with_capacity(path.step_count());
    let mut v = w;
    for (k, inc) in path.net_increments().iter().enumerate() {
        let y = &path.states()[k];
        let pi = portfolio_weights(rule, &market_weights(y))?;
        let h = shares_from_portfolio(&pi, v, y);
        v += h.iter().zip(inc).map(|(h, d)| h * d).sum::<f64>();
        shares.push(h);
    }
    Ok(shares)
}

/// Solves `sigma theta = b` at state `x`.
pub fn market_price_of_risk(eval: &dyn CoefficientEvaluator, x: &CapitalizationVector) -> Result<Vec<f64>> {
    let b = eval.drift(x)?;
    let sigma = eval.volatility(x);
    solve_market_price_of_risk(sigma, &b)
}

pub(crate) fn solve_market_price_of_risk(sigma: &DMatrix<f64>, b: &[f64]) -> Result<Vec<f64>> {
    RiskSolver::default().solve(sigma, b)
}

/// Solves `sigma theta = b`, reusing the factorization while the model
/// keeps handing out the same volatility matrix.
#[derive(Default)]
struct RiskSolver {
    cached: Option<(*const DMatrix<f64>, LU<f64, Dyn, Dyn>)>,
}

impl RiskSolver {
    fn solve(&mut self, sigma: &DMatrix<f64>, b: &[f64]) -> Result<Vec<f64>> {
        if !sigma.is_square() || sigma.nrows() != b.len() {
            return Err(Error::Model(
                "market price of risk needs a square volatility matching the drift".into(),
            ));
        }
        let key = sigma as *const DMatrix<f64>;
        if self.cached.as_ref().is_none_or(|(k, _)| *k != key) {
            self.cached = Some((key, sigma.clone().lu()));
        }
        let (_, lu) = self.cached.as_ref().expect("factorization cached above");
        let rhs = DVector::from_column_slice(b);
        let theta = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Model("volatility matrix is singular".into()))?;
        let residual = (sigma * &theta - &rhs).amax();
        let scale = rhs.amax().max(1.0);
        if !(residual <= RISK_RESIDUAL_TOLERANCE * scale) {
            return Err(Error::Model(format!(
                "market price of risk residual {residual} exceeds tolerance"
            )));
        }
        Ok(theta.iter().copied().collect())
    }
}

/// `Z_{k+1} = Z_k exp(-theta_k' dW_k - |theta_k|^2 h / 2)` on the increments that drove the path.
pub fn density_process(path: &RegulatedPath, eval: &dyn CoefficientEvaluator) -> Result<DensityPath> {
    let mut solver = RiskSolver::default();
    let mut values = vec![1.0];
    let mut log_z = 0.0;
    for (k, dw) in path.brownian_increments().iter().enumerate() {
        let y = &path.states()[k];
        let theta = solver.solve(eval.volatility(y), &eval.drift(y)?)?;
        let dot: f64 = theta.iter().zip(dw).map(|(t, d)| t * d).sum();
        let norm2: f64 = theta.iter().map(|t| t * t).sum();
        log_z += -dot - 0.5 * norm2 * path.step_sizes()[k];
        values.push(log_z.exp());
    }
    Ok(DensityPath {
        times: path.times().to_vec(),
        values,
    })
}

/// Running trapezoidal integral of the excess growth rate over the stored states.
pub fn cumulative_excess_growth(path: &RegulatedPath, eval: &dyn CoefficientEvaluator) -> Vec<f64> {
    let rates: Vec<f64> = path
        .states()
        .iter()
        .map(|y| excess_growth_rate(&market_weights(y), eval.covariance(y)))
        .collect();
    let mut acc = 0.0;
    let mut out = vec![0.0];
    for (k, h) in path.step_sizes().iter().enumerate() {
        acc += 0.5 * h * (rates[k] + rates[k + 1]);
        out.push(acc);
    }
    out
}
