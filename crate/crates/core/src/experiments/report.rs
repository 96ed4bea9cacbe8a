use std::fmt::Write as _;

use crate::model::entropy;
use crate::regulation::RegulatorySet;

/// Monte Carlo mean with its standard error `stdev / sqrt(paths)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub paths: usize,
    pub seed: u64,
}

impl Estimate {
    /// Sums in the given order, so the result does not depend on how the
    /// samples were produced.
    pub fn from_samples(values: &[f64], seed: u64) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                se: f64::NAN,
                paths: 0,
                seed,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, se, paths: n, seed }
    }

    /// `|mean - target|` in standard errors.
    pub fn deviation(&self, target: f64) -> f64 {
        let gap = (self.mean - target).abs();
        if gap == 0.0 {
            0.0
        } else {
            gap / self.se
        }
    }

    pub fn within(&self, target: f64, standard_errors: f64) -> bool {
        (self.mean - target).abs() <= standard_errors * self.se
    }
}

/// The per-path values dumped to `terminal.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalRecord {
    pub path_id: u64,
    /// Terminal wealth, one entry per portfolio rule.
    pub wealth: Vec<f64>,
    pub z: f64,
    /// Largest weight over every visited state, pre-regulation values included.
    pub max_mu1: f64,
    pub events: usize,
    /// Trapezoidal time average of the largest weight.
    pub mean_mu1: f64,
    /// Net capitalization at the horizon.
    pub net_terminal: Vec<f64>,
}

/// Wealth and density at one reporting horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonRecord {
    pub path_id: u64,
    pub horizon: f64,
    pub wealth: Vec<f64>,
    pub z: f64,
}

/// The ensemble as seen by the statistics: everything here round-trips through the CSV outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleTable {
    pub rules: Vec<String>,
    pub seed: u64,
    pub initial_net: Vec<f64>,
    pub initial_wealth: f64,
    pub terminal: Vec<TerminalRecord>,
    pub horizons: Vec<HorizonRecord>,
}

impl EnsembleTable {
    pub fn path_count(&self) -> usize {
        self.terminal.len()
    }

    /// Distinct reporting horizons in ascending order.
    pub fn horizon_values(&self) -> Vec<f64> {
        let mut h: Vec<f64> = self.horizons.iter().map(|r| r.horizon).collect();
        h.sort_by(f64::total_cmp);
        h.dedup();
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmmSummary {
    pub density: Estimate,
    /// `(Yhat_i(0), mean(Z_T Yhat_i(T)))` per company.
    pub net_weighted: Vec<(f64, Estimate)>,
}

impl EmmSummary {
    /// Largest deviation from the martingale targets, in standard errors.
    pub fn worst_deviation(&self) -> f64 {
        self.net_weighted
            .iter()
            .map(|(target, e)| e.deviation(*target))
            .fold(self.density.deviation(1.0), f64::max)
    }
}

pub fn emm_report(table: &EnsembleTable) -> EmmSummary {
    let z: Vec<f64> = table.terminal.iter().map(|r| r.z).collect();
    let net_weighted = table
        .initial_net
        .iter()
        .enumerate()
        .map(|(i, y0)| {
            let samples: Vec<f64> = table.terminal.iter().map(|r| r.z * r.net_terminal[i]).collect();
            (*y0, Estimate::from_samples(&samples, table.seed))
        })
        .collect();
    EmmSummary {
        density: Estimate::from_samples(&z, table.seed),
        net_weighted,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArbitrageHorizon {
    pub horizon: f64,
    /// Fraction of paths on which the rule ends strictly above the benchmark.
    pub outperform_fraction: f64,
    pub log_ratio: Estimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArbitrageSummary {
    pub rule: String,
    pub benchmark: String,
    pub horizons: Vec<ArbitrageHorizon>,
    /// `mean(Z_T (V_rule - V_benchmark))` at the terminal horizon.
    pub weighted_difference: Estimate,
}

pub fn relative_arbitrage_report(table: &EnsembleTable, rule: usize, benchmark: usize) -> ArbitrageSummary {
    let horizons = table
        .horizon_values()
        .into_iter()
        .map(|h| {
            let rows: Vec<&HorizonRecord> = table.horizons.iter().filter(|r| r.horizon == h).collect();
            let wins = rows.iter().filter(|r| r.wealth[rule] > r.wealth[benchmark]).count();
            let logs: Vec<f64> = rows
                .iter()
                .map(|r| (r.wealth[rule] / r.wealth[benchmark]).ln())
                .collect();
            ArbitrageHorizon {
                horizon: h,
                outperform_fraction: wins as f64 / rows.len() as f64,
                log_ratio: Estimate::from_samples(&logs, table.seed),
            }
        })
        .collect();
    let diffs: Vec<f64> = table
        .terminal
        .iter()
        .map(|r| r.z * (r.wealth[rule] - r.wealth[benchmark]))
        .collect();
    ArbitrageSummary {
        rule: table.rules[rule].clone(),
        benchmark: table.rules[benchmark].clone(),
        horizons,
        weighted_difference: Estimate::from_samples(&diffs, table.seed),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversitySummary {
    pub delta: f64,
    pub tolerance: f64,
    pub max_mu1: f64,
    /// Paths whose largest weight never exceeds `1 - delta + tolerance`.
    pub strict_fraction: f64,
    /// Paths whose time-averaged largest weight stays below `1 - delta`.
    pub weak_fraction: f64,
    pub total_events: usize,
    pub events_per_path: Estimate,
}

pub fn diversity_report(table: &EnsembleTable, delta: f64, tolerance: f64) -> DiversitySummary {
    let bound = 1.0 - delta;
    let n = table.path_count() as f64;
    let strict = table.terminal.iter().filter(|r| r.max_mu1 <= bound + tolerance).count();
    let weak = table.terminal.iter().filter(|r| r.mean_mu1 < bound).count();
    let events: Vec<f64> = table.terminal.iter().map(|r| r.events as f64).collect();
    DiversitySummary {
        delta,
        tolerance,
        max_mu1: table.terminal.iter().map(|r| r.max_mu1).fold(f64::NEG_INFINITY, f64::max),
        strict_fraction: strict as f64 / n,
        weak_fraction: weak as f64 / n,
        total_events: table.terminal.iter().map(|r| r.events).sum(),
        events_per_path: Estimate::from_samples(&events, table.seed),
    }
}

/// Path-level checks that need the full path and are not dumped to CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub max_mu1_after_regulation: f64,
    pub max_overshoot: f64,
    pub guard_refinements: usize,
    pub domain_violations: usize,
    pub epsilon: f64,
    pub delta_ref: Option<f64>,
    /// Smallest `gamma* - epsilon delta / 2` over diverse states.
    pub min_excess_margin: Option<f64>,
    /// Smallest `int gamma* - epsilon delta t / 2` over paths that stay diverse.
    pub min_cumulative_margin: Option<f64>,
    pub diverse_paths: usize,
    pub no_jump_exact: Option<bool>,
    pub max_market_ratio_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub emm: EmmSummary,
    pub diversity: Option<DiversitySummary>,
    pub arbitrage: Vec<ArbitrageSummary>,
    pub diagnostics: Diagnostics,
}

/// Overshoot tolerance used for the strict diversity fraction.
pub const OVERSHOOT_TOLERANCE: f64 = 5e-3;

pub(crate) fn estimates(table: &EnsembleTable, delta: Option<f64>, benchmark: Option<usize>) -> (EmmSummary, Option<DiversitySummary>, Vec<ArbitrageSummary>) {
    let emm = emm_report(table);
    let diversity = delta.map(|d| diversity_report(table, d, OVERSHOOT_TOLERANCE));
    let arbitrage = match benchmark {
        Some(b) => (0..table.rules.len())
            .filter(|r| *r != b)
            .map(|r| relative_arbitrage_report(table, r, b))
            .collect(),
        None => Vec::new(),
    };
    (emm, diversity, arbitrage)
}

fn est(e: &Estimate) -> String {
    format!("{:.9e} (se {:.3e}, n {})", e.mean, e.se, e.paths)
}

/// The part of the report that is recomputable from the CSV outputs.
pub fn format_estimates(
    table: &EnsembleTable,
    emm: &EmmSummary,
    diversity: Option<&DiversitySummary>,
    arbitrage: &[ArbitrageSummary],
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "[martingale measure]");
    let _ = writeln!(
        s,
        "mean Z_T = {}  |dev| = {:.3} se",
        est(&emm.density),
        emm.density.deviation(1.0)
    );
    for (i, (target, e)) in emm.net_weighted.iter().enumerate() {
        let _ = writeln!(
            s,
            "mean Z_T Yhat_{}(T) = {}  target {target}  |dev| = {:.3} se",
            i + 1,
            est(e),
            e.deviation(*target)
        );
    }
    let _ = writeln!(s);
    if let Some(d) = diversity {
        let _ = writeln!(s, "[diversity]");
        let _ = writeln!(s, "delta = {}  tolerance = {}", d.delta, d.tolerance);
        let _ = writeln!(s, "max largest weight = {:.9}", d.max_mu1);
        let _ = writeln!(s, "strict fraction = {:.6}", d.strict_fraction);
        let _ = writeln!(s, "weak fraction = {:.6}", d.weak_fraction);
        let _ = writeln!(s, "regulation events = {}  per path = {}", d.total_events, est(&d.events_per_path));
        let _ = writeln!(s);
    }
    for a in arbitrage {
        let _ = writeln!(s, "[relative arbitrage: {} vs {}]", a.rule, a.benchmark);
        for h in &a.horizons {
            let _ = writeln!(
                s,
                "T = {}  outperform fraction = {:.6}  mean log ratio = {}",
                h.horizon,
                h.outperform_fraction,
                est(&h.log_ratio)
            );
        }
        let _ = writeln!(
            s,
            "mean Z_T (V_rule - V_bench) = {}  |dev| = {:.3} se",
            est(&a.weighted_difference),
            a.weighted_difference.deviation(0.0)
        );
        let _ = writeln!(s);
    }
    let _ = writeln!(s, "paths = {}  seed = {}", table.path_count(), table.seed);
    s
}

pub fn format_diagnostics(d: &Diagnostics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "[path diagnostics]");
    let _ = writeln!(s, "max largest weight after regulation = {:.9}", d.max_mu1_after_regulation);
    let _ = writeln!(s, "max overshoot = {:.9}", d.max_overshoot);
    let _ = writeln!(s, "guard refinements = {}", d.guard_refinements);
    let _ = writeln!(s, "domain violations = {}", d.domain_violations);
    let _ = writeln!(s, "ellipticity = {:.9}", d.epsilon);
    if let Some(delta) = d.delta_ref {
        let _ = writeln!(s, "excess growth reference delta = {delta}");
    }
    if let Some(m) = d.min_excess_margin {
        let _ = writeln!(s, "min excess growth margin = {m:.6e}");
    }
    if let Some(m) = d.min_cumulative_margin {
        let _ = writeln!(s, "min cumulative excess growth margin = {m:.6e} over {} paths", d.diverse_paths);
    }
    if let Some(ok) = d.no_jump_exact {
        let _ = writeln!(s, "wealth ignores regulation jumps exactly = {ok}");
    }
    if let Some(e) = d.max_market_ratio_error {
        let _ = writeln!(s, "max market wealth vs total cap ratio error = {e:.3e}");
    }
    s
}

/// Outcome of the randomized boundary check of the split-merge rule.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleValidation {
    pub samples: usize,
    pub interior_failures: usize,
    pub entropy_failures: usize,
    pub conservation_failures: usize,
    pub min_entropy_slack: f64,
    pub max_conservation_error: f64,
}

impl RuleValidation {
    pub fn passed(&self) -> bool {
        self.interior_failures == 0 && self.entropy_failures == 0 && self.conservation_failures == 0
    }
}

/// Applies the rule to `samples` random boundary states with `n` in
/// `3..=10` and records every violated guarantee.
pub fn validate_rule(seed: u64, samples: usize) -> crate::error::Result<RuleValidation> {
    use crate::model::{market_weights, CapitalizationVector};
    use crate::regulation::{entropy_jump_lower_bound, regulate_caps, rule_apply, sampling};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = RuleValidation {
        samples,
        interior_failures: 0,
        entropy_failures: 0,
        conservation_failures: 0,
        min_entropy_slack: f64::INFINITY,
        max_conservation_error: 0.0,
    };
    for _ in 0..samples {
        let n = rng.random_range(3..=10usize);
        let upper = (n - 1) as f64 / (n + 1) as f64;
        let delta_prime = rng.random_range(1e-3 * upper..upper * (1.0 - 1e-3));
        let set = RegulatorySet::new(n, delta_prime)?;
        let mu = sampling::boundary_weights(&mut rng, n, delta_prime);
        let after = rule_apply(&mu, &set)?;
        if !set.contains(&after) {
            out.interior_failures += 1;
        }
        let slack = entropy(&after) - entropy(&mu) - entropy_jump_lower_bound(n, delta_prime)?;
        out.min_entropy_slack = out.min_entropy_slack.min(slack);
        if slack < -1e-12 {
            out.entropy_failures += 1;
        }
        let total = rng.random_range(0.5..2000.0);
        let caps = CapitalizationVector::new(mu.as_slice().iter().map(|w| w * total).collect())?;
        let regulated = regulate_caps(&caps, &set)?;
        let simplex_error = (after.as_slice().iter().sum::<f64>() - 1.0).abs();
        let capital_error = (regulated.total() - caps.total()).abs() / caps.total();
        let expected = rule_apply(&market_weights(&caps), &set)?;
        let weights_error = market_weights(&regulated)
            .as_slice()
            .iter()
            .zip(expected.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let err = simplex_error.max(capital_error).max(weights_error);
        out.max_conservation_error = out.max_conservation_error.max(err);
        if err > 1e-12 {
            out.conservation_failures += 1;
        }
    }
    Ok(out)
}
