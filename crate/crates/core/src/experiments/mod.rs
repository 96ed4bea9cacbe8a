//! Monte Carlo ensembles, their statistics and the files they produce.
//!
//! Paths are simulated independently in parallel, each on its own keyed
//! random stream, and reduced in ascending path order. Output bytes
//! therefore do not depend on the number of worker threads.

pub mod config;
pub mod output;
pub mod report;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ellipticity_constant, largest_weight_of, market_weights, CapitalizationVector};
use crate::portfolios::{
    cumulative_excess_growth, density_process, excess_growth_rate, portfolio_shares, wealth_from_portfolio,
    wealth_from_shares, wealth_from_shares_excluding_jumps, DensityPath, PortfolioRule, WealthPath,
};
use crate::premodels::{CoefficientEvaluator, Premodel};
use crate::regulation::{RegulationEvent, RegulatorySet};
use crate::simulation::{simulate_premodel, simulate_regulated, BrownianStream, RegulatedPath};

pub use config::ExperimentConfig;
pub use report::{
    diversity_report, emm_report, relative_arbitrage_report, validate_rule, ArbitrageSummary, Diagnostics,
    DiversitySummary, EmmSummary, EnsembleTable, Estimate, ExperimentReport, HorizonRecord, RuleValidation,
    TerminalRecord, OVERSHOOT_TOLERANCE,
};

/// Per-path trace files are only written for ensembles up to this size.
pub const TRACE_PATH_LIMIT: usize = 64;
/// Sample paths drawn in `plot.svg`.
pub const PLOT_PATHS: usize = 8;

/// Full path data kept for trace output.
#[derive(Debug, Clone)]
pub struct PathTrace {
    pub path: RegulatedPath,
    pub wealth: Vec<WealthPath>,
    pub density: DensityPath,
}

#[derive(Debug, Clone)]
pub struct PathSummary {
    pub terminal: TerminalRecord,
    /// One record per reporting horizon, the terminal one included.
    pub horizons: Vec<HorizonRecord>,
    pub max_mu1_stored: f64,
    pub max_overshoot: f64,
    pub guard_refinements: usize,
    pub domain_violations: usize,
    pub excess_margin: Option<f64>,
    pub cumulative_margin: Option<f64>,
    pub no_jump_exact: Option<bool>,
    pub market_ratio_error: Option<f64>,
    pub events: Vec<RegulationEvent>,
    pub trace: Option<PathTrace>,
    /// `(t, largest weight)` for the plot.
    pub mu1_trace: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub config: ExperimentConfig,
    pub epsilon: f64,
    pub paths: Vec<PathSummary>,
}

impl Ensemble {
    pub fn table(&self) -> EnsembleTable {
        EnsembleTable {
            rules: self.config.portfolios.iter().map(PortfolioRule::name).collect(),
            seed: self.config.sim.seed,
            initial_net: self.config.initial_caps.clone(),
            initial_wealth: self.config.initial_wealth,
            terminal: self.paths.iter().map(|p| p.terminal.clone()).collect(),
            horizons: self.paths.iter().flat_map(|p| p.horizons.iter().cloned()).collect(),
        }
    }

    pub fn diagnostics(&self) -> Diagnostics {
        let regulated = self.config.regulation.enabled;
        let margins: Vec<f64> = self.paths.iter().filter_map(|p| p.excess_margin).collect();
        let cumulative: Vec<f64> = self.paths.iter().filter_map(|p| p.cumulative_margin).collect();
        let ratio_errors: Vec<f64> = self.paths.iter().filter_map(|p| p.market_ratio_error).collect();
        Diagnostics {
            max_mu1_after_regulation: self.paths.iter().map(|p| p.max_mu1_stored).fold(f64::NEG_INFINITY, f64::max),
            max_overshoot: self.paths.iter().map(|p| p.max_overshoot).fold(0.0, f64::max),
            guard_refinements: self.paths.iter().map(|p| p.guard_refinements).sum(),
            domain_violations: self.paths.iter().map(|p| p.domain_violations).sum(),
            epsilon: self.epsilon,
            delta_ref: self.config.diversity_delta(),
            min_excess_margin: (!margins.is_empty()).then(|| margins.iter().copied().fold(f64::INFINITY, f64::min)),
            min_cumulative_margin: (!cumulative.is_empty())
                .then(|| cumulative.iter().copied().fold(f64::INFINITY, f64::min)),
            diverse_paths: cumulative.len(),
            no_jump_exact: regulated.then(|| self.paths.iter().all(|p| p.no_jump_exact == Some(true))),
            max_market_ratio_error: (!ratio_errors.is_empty())
                .then(|| ratio_errors.iter().copied().fold(0.0, f64::max)),
        }
    }

    pub fn report(&self) -> ExperimentReport {
        let table = self.table();
        let (emm, diversity, arbitrage) =
            report::estimates(&table, self.config.diversity_delta(), self.config.benchmark_index());
        ExperimentReport {
            emm,
            diversity,
            arbitrage,
            diagnostics: self.diagnostics(),
        }
    }
}

struct Setup<'a> {
    cfg: &'a ExperimentConfig,
    model: &'a Premodel,
    set: Option<&'a RegulatorySet>,
    y0: &'a CapitalizationVector,
    horizons: &'a [f64],
    epsilon: f64,
}

fn grid_index(times: &[f64], t: f64) -> Result<usize> {
    times
        .iter()
        .position(|s| (s - t).abs() <= 1e-9 * t.max(1.0))
        .ok_or_else(|| Error::Invariant(format!("no grid point at t={t}")))
}

/// Trapezoidal time average of `values` on `times`.
fn time_average(times: &[f64], values: &[f64]) -> f64 {
    let span = times[times.len() - 1] - times[0];
    let integral: f64 = (1..times.len())
        .map(|k| 0.5 * (times[k] - times[k - 1]) * (values[k] + values[k - 1]))
        .sum();
    integral / span
}

fn thin(times: &[f64], values: &[f64], max_points: usize) -> Vec<(f64, f64)> {
    let stride = times.len().div_ceil(max_points).max(1);
    let mut out: Vec<(f64, f64)> = (0..times.len()).step_by(stride).map(|k| (times[k], values[k])).collect();
    let last = times.len() - 1;
    if last % stride != 0 {
        out.push((times[last], values[last]));
    }
    out
}

fn simulate_one(s: &Setup<'_>, path_id: u64) -> Result<PathSummary> {
    let cfg = s.cfg;
    let n = s.y0.len();
    let mut stream = BrownianStream::new(cfg.sim.seed, path_id, s.model.noise_dim());
    let path = match s.set {
        Some(set) => simulate_regulated(s.model, set, s.y0, &cfg.sim, &mut stream)?,
        None => simulate_premodel(s.model, s.y0, &cfg.sim, &mut stream)?,
    };
    let w0 = cfg.initial_wealth;
    let wealth = cfg
        .portfolios
        .iter()
        .map(|r| wealth_from_portfolio(&path, r, w0))
        .collect::<Result<Vec<_>>>()?;
    let density = density_process(&path, s.model)?;

    let horizons = s
        .horizons
        .iter()
        .map(|&h| {
            let k = grid_index(path.times(), h)?;
            Ok(HorizonRecord {
                path_id,
                horizon: h,
                wealth: wealth.iter().map(|w| w.values[k]).collect(),
                z: density.values[k],
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let stored_mu1: Vec<f64> = path.states().iter().map(|y| largest_weight_of(y.as_slice())).collect();
    let pre_mu1: Vec<f64> = path.events().iter().map(|e| e.pre_weights.largest()).collect();
    let max_mu1_stored = stored_mu1.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_mu1 = pre_mu1.iter().copied().fold(max_mu1_stored, f64::max);
    let max_overshoot = match s.set {
        Some(set) => path.events().iter().map(|e| e.overshoot_amount(set.threshold())).fold(0.0, f64::max),
        None => 0.0,
    };
    let domain_violations = match s.model.largest_weight_cap() {
        Some(cap) => stored_mu1.iter().chain(&pre_mu1).filter(|m| **m >= cap).count(),
        None => 0,
    };

    let (excess_margin, cumulative_margin) = match cfg.diversity_delta() {
        Some(delta) => {
            let floor = 0.5 * s.epsilon * delta;
            let bound = 1.0 - delta;
            let visited = path
                .states()
                .iter()
                .chain(path.events().iter().map(|e| &e.pre_caps));
            let margin = visited
                .filter_map(|y| {
                    let mu = market_weights(y);
                    (mu.largest() <= bound).then(|| excess_growth_rate(&mu, s.model.covariance(y)) - floor)
                })
                .fold(None, |acc: Option<f64>, m| Some(acc.map_or(m, |a| a.min(m))));
            let cumulative = stored_mu1.iter().all(|m| *m <= bound).then(|| {
                cumulative_excess_growth(&path, s.model)
                    .iter()
                    .zip(path.times())
                    .skip(1)
                    .map(|(g, t)| g - floor * t)
                    .fold(f64::INFINITY, f64::min)
            });
            (margin, cumulative)
        }
        None => (None, None),
    };

    let no_jump_exact = match s.set {
        Some(_) => {
            let mut exact = true;
            for rule in &cfg.portfolios {
                let shares = portfolio_shares(&path, rule, w0)?;
                let via_net = wealth_from_shares(&path, &shares, w0)?;
                let via_states = wealth_from_shares_excluding_jumps(&path, &shares, w0)?;
                exact &= via_net
                    .values
                    .iter()
                    .zip(&via_states.values)
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            }
            Some(exact)
        }
        None => None,
    };

    let market_ratio_error = match (s.set, cfg.portfolios.iter().position(|r| *r == PortfolioRule::Market)) {
        (None, Some(m)) => {
            let ratio = path.states().last().expect("non-empty path").total() / s.y0.total();
            Some((wealth[m].terminal() / w0 - ratio).abs())
        }
        _ => None,
    };

    let terminal = TerminalRecord {
        path_id,
        wealth: wealth.iter().map(WealthPath::terminal).collect(),
        z: density.terminal(),
        max_mu1,
        events: path.event_count(),
        mean_mu1: time_average(path.times(), &stored_mu1),
        net_terminal: path.net_states().last().expect("non-empty path").clone(),
    };
    debug_assert_eq!(terminal.net_terminal.len(), n);

    let mu1_trace = (cfg.report.plot && (path_id as usize) < PLOT_PATHS).then(|| thin(path.times(), &stored_mu1, 600));
    let events = if cfg.report.events {
        path.events().to_vec()
    } else {
        Vec::new()
    };
    let trace = (cfg.report.traces && cfg.paths <= TRACE_PATH_LIMIT).then(|| PathTrace {
        path: path.clone(),
        wealth,
        density,
    });

    Ok(PathSummary {
        terminal,
        horizons,
        max_mu1_stored,
        max_overshoot,
        guard_refinements: path.guard_refinements(),
        domain_violations,
        excess_margin,
        cumulative_margin,
        no_jump_exact,
        market_ratio_error,
        events,
        trace,
        mu1_trace,
    })
}

/// Simulates every path of the ensemble on the current rayon pool.
///
/// The first failing path in path order determines the returned error.
pub fn run_ensemble(cfg: &ExperimentConfig) -> Result<Ensemble> {
    cfg.validate()?;
    let model = cfg.model.build()?;
    let set = cfg.regulatory_set()?;
    let y0 = CapitalizationVector::new(cfg.initial_caps.clone())?;
    let epsilon = ellipticity_constant(model.covariance(&y0))?;
    let horizons = cfg.horizons();
    let setup = Setup {
        cfg,
        model: &model,
        set: set.as_ref(),
        y0: &y0,
        horizons: &horizons,
        epsilon,
    };
    let results: Vec<Result<PathSummary>> = (0..cfg.paths as u64)
        .into_par_iter()
        .map(|id| simulate_one(&setup, id))
        .collect();
    let paths = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Ensemble {
        config: cfg.clone(),
        epsilon,
        paths,
    })
}

/// Runs the ensemble, computes the report and writes all outputs when
/// `cfg.output_dir` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let ensemble = run_ensemble(cfg)?;
    let report = ensemble.report();
    if let Some(dir) = &cfg.output_dir {
        output::write_outputs(&ensemble, &report, dir)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::config::ModelConfig;

    fn small(cfg: &mut ExperimentConfig) {
        cfg.sim.horizon = 0.25;
    }

    #[test]
    fn ensemble_is_reproducible_and_ordered() {
        let mut cfg = ExperimentConfig::regulated_gbm(40, 5);
        small(&mut cfg);
        let a = run_ensemble(&cfg).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| run_ensemble(&cfg).unwrap());
        assert_eq!(a.table(), b.table());
        for (i, p) in a.paths.iter().enumerate() {
            assert_eq!(p.terminal.path_id, i as u64);
        }
    }

    #[test]
    fn regulated_ensemble_passes_path_checks() {
        let mut cfg = ExperimentConfig::regulated_gbm(64, 2);
        cfg.initial_caps = vec![58.0, 22.0, 20.0];
        small(&mut cfg);
        let e = run_ensemble(&cfg).unwrap();
        let d = e.diagnostics();
        assert!(e.paths.iter().map(|p| p.terminal.events).sum::<usize>() > 0);
        assert_eq!(d.no_jump_exact, Some(true));
        assert!(d.max_mu1_after_regulation < 0.6);
        assert!(d.min_excess_margin.unwrap() >= -1e-12);
        assert!(e.paths.iter().all(|p| p.trace.is_some()));
    }

    #[test]
    fn frozen_market_keeps_initial_weight() {
        let mut cfg = ExperimentConfig::regulated_gbm(3, 1);
        cfg.regulation.enabled = false;
        cfg.model = ModelConfig::Gbm {
            drift: vec![0.0; 3],
            volatility: vec![vec![1e-150, 0.0, 0.0], vec![0.0, 1e-150, 0.0], vec![0.0, 0.0, 1e-150]],
        };
        let e = run_ensemble(&cfg).unwrap();
        let d = diversity_report(&e.table(), 0.4, 0.0);
        assert!((d.max_mu1 - 0.5).abs() < 1e-12);
        assert_eq!(d.total_events, 0);
    }

    #[test]
    fn checkpoints_produce_one_record_per_horizon() {
        let mut cfg = ExperimentConfig::logpole(5, 3, 1.0, false);
        cfg.checkpoints = vec![0.5, 0.25];
        let e = run_ensemble(&cfg).unwrap();
        let t = e.table();
        assert_eq!(t.horizon_values(), vec![0.25, 0.5, 1.0]);
        assert_eq!(t.horizons.len(), 15);
        let last: Vec<f64> = t.horizons.iter().filter(|r| r.horizon == 1.0).map(|r| r.z).collect();
        let terminal: Vec<f64> = t.terminal.iter().map(|r| r.z).collect();
        assert_eq!(last, terminal);
    }

    #[test]
    fn time_average_of_constant_is_constant() {
        assert_eq!(time_average(&[0.0, 0.5, 1.0], &[0.3, 0.3, 0.3]), 0.3);
        assert!((time_average(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0]) - 1.0).abs() < 1e-15);
    }
}
