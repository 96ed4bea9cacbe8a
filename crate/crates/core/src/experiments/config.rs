use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::model::CapitalizationVector;
use crate::portfolios::PortfolioRule;
use crate::premodels::{GbmModel, GbmParams, LogPoleModel, LogPoleParams, Premodel};
use crate::regulation::RegulatorySet;
use crate::simulation::SimConfig;

/// Default setups shared by the CLI presets and the acceptance suite.
pub const DEFAULT_DRIFT: f64 = 0.05;
pub const DEFAULT_VOLATILITY: f64 = 0.2;
pub const DEFAULT_LOGPOLE_G: f64 = 0.1;
pub const DEFAULT_LOGPOLE_C: f64 = 0.3;
pub const DEFAULT_LOGPOLE_DELTA: f64 = 0.3;
pub const DEFAULT_DELTA_PRIME: f64 = 0.4;
pub const DEFAULT_INITIAL_CAPS: [f64; 3] = [50.0, 30.0, 20.0];
pub const DEFAULT_DT: f64 = 1.0 / 252.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    Gbm {
        drift: Vec<f64>,
        /// Rows of `sigma`.
        volatility: Vec<Vec<f64>>,
    },
    Logpole {
        delta: f64,
        g: Vec<f64>,
        c: f64,
        volatility: Vec<Vec<f64>>,
    },
}

impl ModelConfig {
    fn volatility_rows(&self) -> &[Vec<f64>] {
        match self {
            ModelConfig::Gbm { volatility, .. } | ModelConfig::Logpole { volatility, .. } => volatility,
        }
    }

    fn volatility_matrix(&self) -> Result<DMatrix<f64>> {
        let rows = self.volatility_rows();
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(config("volatility must be a non-empty square matrix"));
        }
        Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn company_count(&self) -> usize {
        match self {
            ModelConfig::Gbm { drift, .. } => drift.len(),
            ModelConfig::Logpole { g, .. } => g.len(),
        }
    }

    pub fn build(&self) -> Result<Premodel> {
        let volatility = self.volatility_matrix()?;
        match self {
            ModelConfig::Gbm { drift, .. } => Ok(Premodel::Gbm(GbmModel::new(GbmParams {
                drift: drift.clone(),
                volatility,
            })?)),
            ModelConfig::Logpole { delta, g, c, .. } => Ok(Premodel::LogPole(LogPoleModel::new(LogPoleParams {
                delta: *delta,
                g: g.clone(),
                c: *c,
                volatility,
            })?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegulationConfig {
    pub enabled: bool,
    pub delta_prime: f64,
}

fn enabled() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportToggles {
    /// Per-path trace CSVs, written only when the ensemble has at most 64 paths.
    #[serde(default = "enabled")]
    pub traces: bool,
    #[serde(default = "enabled")]
    pub events: bool,
    #[serde(default = "enabled")]
    pub plot: bool,
}

impl Default for ReportToggles {
    fn default() -> Self {
        Self {
            traces: true,
            events: true,
            plot: true,
        }
    }
}

fn market() -> PortfolioRule {
    PortfolioRule::Market
}

fn unit_wealth() -> f64 {
    1.0
}

/// Everything needed to run and report one ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub initial_caps: Vec<f64>,
    pub regulation: RegulationConfig,
    pub portfolios: Vec<PortfolioRule>,
    /// Rule every other portfolio is compared against.
    #[serde(default = "market")]
    pub benchmark: PortfolioRule,
    pub paths: usize,
    pub sim: SimConfig,
    /// Intermediate horizons reported alongside the terminal one.
    #[serde(default)]
    pub checkpoints: Vec<f64>,
    #[serde(default = "unit_wealth")]
    pub initial_wealth: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub report: ReportToggles,
}

fn diagonal(n: usize, s: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { s } else { 0.0 }).collect())
        .collect()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Regulated GBM with three companies.
    pub fn regulated_gbm(paths: usize, seed: u64) -> Self {
        let n = DEFAULT_INITIAL_CAPS.len();
        Self {
            model: ModelConfig::Gbm {
                drift: vec![DEFAULT_DRIFT; n],
                volatility: diagonal(n, DEFAULT_VOLATILITY),
            },
            initial_caps: DEFAULT_INITIAL_CAPS.to_vec(),
            regulation: RegulationConfig {
                enabled: true,
                delta_prime: DEFAULT_DELTA_PRIME,
            },
            portfolios: vec![
                PortfolioRule::Market,
                PortfolioRule::Entropy,
                PortfolioRule::Diversity { p: 0.5 },
            ],
            benchmark: PortfolioRule::Market,
            paths,
            sim: SimConfig::new(1.0, DEFAULT_DT, seed).expect("default grid is valid"),
            checkpoints: Vec::new(),
            initial_wealth: 1.0,
            output_dir: None,
            report: ReportToggles::default(),
        }
    }

    /// Log-pole premodel, regulated when `regulated` is set.
    pub fn logpole(paths: usize, seed: u64, horizon: f64, regulated: bool) -> Self {
        let n = DEFAULT_INITIAL_CAPS.len();
        Self {
            model: ModelConfig::Logpole {
                delta: DEFAULT_LOGPOLE_DELTA,
                g: vec![DEFAULT_LOGPOLE_G; n],
                c: DEFAULT_LOGPOLE_C,
                volatility: diagonal(n, DEFAULT_VOLATILITY),
            },
            regulation: RegulationConfig {
                enabled: regulated,
                delta_prime: DEFAULT_DELTA_PRIME,
            },
            portfolios: vec![PortfolioRule::Market, PortfolioRule::Entropy],
            sim: SimConfig::new(horizon, DEFAULT_DT, seed).expect("default grid is valid"),
            ..Self::regulated_gbm(paths, seed)
        }
    }

    pub fn company_count(&self) -> usize {
        self.initial_caps.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        let n = self.company_count();
        if self.model.company_count() != n {
            return Err(config(format!(
                "model has {} companies, initial_caps has {n}",
                self.model.company_count()
            )));
        }
        self.model.volatility_matrix()?;
        CapitalizationVector::new(self.initial_caps.clone())
            .map_err(|e| config(format!("initial_caps: {e}")))?;
        if self.regulation.enabled {
            RegulatorySet::new(n, self.regulation.delta_prime)?;
            if let ModelConfig::Logpole { delta, .. } = self.model {
                if self.regulation.delta_prime <= delta {
                    return Err(config(format!(
                        "delta' = {} must exceed the log-pole delta = {delta}",
                        self.regulation.delta_prime
                    )));
                }
            }
        }
        if self.paths == 0 {
            return Err(config("paths must be positive"));
        }
        if self.portfolios.is_empty() {
            return Err(config("at least one portfolio rule is required"));
        }
        for rule in self.portfolios.iter().chain(std::iter::once(&self.benchmark)) {
            rule.validate(n)?;
        }
        let mut names: Vec<String> = self.portfolios.iter().map(PortfolioRule::name).collect();
        names.sort();
        names.dedup();
        if names.len() != self.portfolios.len() {
            return Err(config("portfolio rules must be distinct"));
        }
        if !(self.initial_wealth.is_finite() && self.initial_wealth > 0.0) {
            return Err(config("initial_wealth must be positive"));
        }
        for &c in &self.checkpoints {
            if !(c > 0.0 && c <= self.sim.horizon) {
                return Err(config(format!("checkpoint {c} lies outside (0, horizon]")));
            }
            let steps = c / self.sim.dt;
            if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) && c != self.sim.horizon {
                return Err(config(format!("checkpoint {c} is not a grid time")));
            }
        }
        self.model.build()?;
        Ok(())
    }

    pub fn regulatory_set(&self) -> Result<Option<RegulatorySet>> {
        if self.regulation.enabled {
            RegulatorySet::new(self.company_count(), self.regulation.delta_prime).map(Some)
        } else {
            Ok(None)
        }
    }

    /// The `delta` of the diversity statement the ensemble should satisfy:
    /// `delta'` when regulated, the pole gap for an unregulated log-pole
    /// market, none for unregulated GBM.
    pub fn diversity_delta(&self) -> Option<f64> {
        match (&self.model, self.regulation.enabled) {
            (_, true) => Some(self.regulation.delta_prime),
            (ModelConfig::Logpole { delta, .. }, false) => Some(*delta),
            (ModelConfig::Gbm { .. }, false) => None,
        }
    }

    /// Checkpoints and the horizon, sorted and deduplicated.
    pub fn horizons(&self) -> Vec<f64> {
        let mut h = self.checkpoints.clone();
        h.push(self.sim.horizon);
        h.sort_by(f64::total_cmp);
        h.dedup();
        h
    }

    pub fn benchmark_index(&self) -> Option<usize> {
        self.portfolios.iter().position(|r| *r == self.benchmark)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ExperimentConfig::regulated_gbm(10, 1).validate().unwrap();
        ExperimentConfig::logpole(10, 1, 5.0, false).validate().unwrap();
        ExperimentConfig::logpole(10, 1, 1.0, true).validate().unwrap();
    }

    #[test]
    fn json_round_trip() {
        let cfg = ExperimentConfig::logpole(10, 7, 1.0, true);
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut value: serde_json::Value =
            serde_json::from_str(&ExperimentConfig::regulated_gbm(10, 1).to_json().unwrap()).unwrap();
        value["sim"]["stepsize"] = 0.1.into();
        assert!(ExperimentConfig::from_json(&value.to_string()).is_err());

        let mut value: serde_json::Value =
            serde_json::from_str(&ExperimentConfig::regulated_gbm(10, 1).to_json().unwrap()).unwrap();
        value["portfolios"][0]["weights"] = serde_json::json!([1.0, 0.0, 0.0]);
        assert!(ExperimentConfig::from_json(&value.to_string()).is_err());

        let mut value: serde_json::Value =
            serde_json::from_str(&ExperimentConfig::regulated_gbm(10, 1).to_json().unwrap()).unwrap();
        value["model"]["sigma"] = 0.2.into();
        assert!(ExperimentConfig::from_json(&value.to_string()).is_err());
    }

    #[test]
    fn validation_rejects_bad_settings() {
        let mut cfg = ExperimentConfig::regulated_gbm(10, 1);
        cfg.regulation.delta_prime = 0.5;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::logpole(10, 1, 1.0, true);
        cfg.regulation.delta_prime = 0.3;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::regulated_gbm(10, 1);
        cfg.sim.dt = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::regulated_gbm(10, 1);
        cfg.initial_caps = vec![1.0, 2.0];
        cfg.model = ModelConfig::Gbm {
            drift: vec![0.0; 2],
            volatility: diagonal(2, 0.2),
        };
        cfg.portfolios = vec![PortfolioRule::Market];
        assert!(cfg.validate().is_err());
        cfg.regulation.enabled = false;
        cfg.validate().unwrap();

        let mut cfg = ExperimentConfig::regulated_gbm(10, 1);
        cfg.checkpoints = vec![0.5 + 1e-4];
        assert!(cfg.validate().is_err());
        cfg.checkpoints = vec![126.0 / 252.0];
        cfg.validate().unwrap();
    }

    #[test]
    fn diversity_delta_follows_the_model() {
        assert_eq!(ExperimentConfig::regulated_gbm(1, 1).diversity_delta(), Some(0.4));
        assert_eq!(ExperimentConfig::logpole(1, 1, 1.0, false).diversity_delta(), Some(0.3));
        let mut cfg = ExperimentConfig::regulated_gbm(1, 1);
        cfg.regulation.enabled = false;
        assert_eq!(cfg.diversity_delta(), None);
    }
}
