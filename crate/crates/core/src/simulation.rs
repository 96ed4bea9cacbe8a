//! Path simulation: the log-Euler step, the premodel path, and the
//! diffusion-regulation cycle that produces a regulated path together
//! with its net capitalization process and event log.

use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, Result};
use crate::model::{largest_weight_of, market_weights, CapitalizationVector};
use crate::premodels::CoefficientEvaluator;
use crate::regulation::{RegulationEvent, RegulatorySet};

/// States this close to a premodel's weight cap are re-simulated on a finer grid.
pub const GUARD_MARGIN: f64 = 1e-6;
pub const GUARD_SUBSTEPS: usize = 4;
pub const GUARD_MAX_DEPTH: usize = 8;
pub const DEFAULT_MAX_EVENTS: usize = 1_000_000;

const REFINEMENT_SALT: u64 = 0x5851_F42D_4C95_7F2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Scheme {
    /// Euler on log-capitalizations; exact in law for constant coefficients.
    #[default]
    #[serde(rename = "log-euler")]
    LogEuler,
}

fn default_max_events() -> usize {
    DEFAULT_MAX_EVENTS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
    #[serde(default)]
    pub scheme: Scheme,
    /// Regulation events per path beyond which the path is declared non-viable.
    #[serde(default = "default_max_events")]
    pub max_events: usize,
}

impl SimConfig {
    pub fn new(horizon: f64, dt: f64, seed: u64) -> Result<Self> {
        let cfg = Self {
            horizon,
            dt,
            seed,
            scheme: Scheme::LogEuler,
            max_events: DEFAULT_MAX_EVENTS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.dt.is_finite() && self.dt > 0.0 && self.dt <= self.horizon) {
            return Err(config(format!(
                "dt must lie in (0, horizon], got {} with horizon {}",
                self.dt, self.horizon
            )));
        }
        if self.max_events == 0 {
            return Err(config("max_events must be positive"));
        }
        Ok(())
    }

    /// Number of grid steps; the last one is partial when `dt` does not divide the horizon.
    pub fn step_count(&self) -> usize {
        let ratio = self.horizon / self.dt;
        let nearest = ratio.round();
        if (ratio - nearest).abs() <= 1e-9 * nearest.max(1.0) {
            nearest as usize
        } else {
            ratio.ceil() as usize
        }
    }

    /// Start and end time of grid step `k`.
    pub fn step_bounds(&self, k: usize) -> (f64, f64) {
        let last = self.step_count() - 1;
        let start = k as f64 * self.dt;
        let end = if k == last {
            self.horizon
        } else {
            (k + 1) as f64 * self.dt
        };
        (start, end)
    }
}

/// Brownian increments for one path.
///
/// The main stream is ChaCha8 keyed by the master seed with the path
/// index as stream id, so every path owns an independent sequence no
/// matter which thread simulates it. Guard refinements draw from a second
/// keyed stream and never shift the main sequence.
#[derive(Debug, Clone)]
pub struct BrownianStream {
    seed: u64,
    path_index: u64,
    dim: usize,
    main: ChaCha8Rng,
    refinement: ChaCha8Rng,
}

impl BrownianStream {
    pub fn new(seed: u64, path_index: u64, dim: usize) -> Self {
        let mut main = ChaCha8Rng::seed_from_u64(seed);
        main.set_stream(path_index);
        let mut refinement = ChaCha8Rng::seed_from_u64(seed ^ REFINEMENT_SALT);
        refinement.set_stream(path_index);
        Self {
            seed,
            path_index,
            dim,
            main,
            refinement,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Next increment `W(t+h) - W(t)`.
    pub fn increment(&mut self, h: f64) -> Vec<f64> {
        let scale = h.sqrt();
        (0..self.dim)
            .map(|_| scale * standard_normal(&mut self.main))
            .collect::<Vec<f64>>()
    }

    /// Splits `dw` over `h` into `parts` sub-increments drawn from the
    /// Brownian bridge, so they sum to `dw`.
    pub fn bridge_split(&mut self, dw: &[f64], h: f64, parts: usize) -> Vec<Vec<f64>> {
        let scale = (h / parts as f64).sqrt();
        let mut out = vec![vec![0.0; dw.len()]; parts];
        for (nu, &total) in dw.iter().enumerate() {
            let z: Vec<f64> = (0..parts)
                .map(|_| scale * standard_normal(&mut self.refinement))
                .collect();
            let mean = z.iter().sum::<f64>() / parts as f64;
            for (j, zj) in z.iter().enumerate() {
                out[j][nu] = total / parts as f64 + (zj - mean);
            }
        }
        out
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// One log-Euler step: `x_i exp((b_i - a_ii/2) dt + (sigma dW)_i)`.
pub fn step_log_euler(
    x: &CapitalizationVector,
    b: &[f64],
    sigma: &DMatrix<f64>,
    dt: f64,
    dw: &[f64],
) -> Result<CapitalizationVector> {
    if !(dt > 0.0) {
        return Err(domain(format!("step size must be positive, got {dt}")));
    }
    if let Some(v) = b.iter().find(|v| !v.is_finite()) {
        return Err(domain(format!("non-finite drift {v}")));
    }
    let n = x.len();
    if b.len() != n || sigma.nrows() != n || sigma.ncols() != dw.len() {
        return Err(domain("dimension mismatch in log-Euler step"));
    }
    let next = x
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, xi)| {
            let row = sigma.row(i);
            let half_a: f64 = 0.5 * row.iter().map(|s| s * s).sum::<f64>();
            let shock: f64 = row.iter().zip(dw).map(|(s, w)| s * w).sum();
            xi * ((b[i] - half_a) * dt + shock).exp()
        })
        .collect();
    CapitalizationVector::new(next)
}

/// A simulated path on its integration grid.
///
/// `states[k]` holds the regulated process after any regulation at
/// `times[k]`; the pre-regulation value lives in the event record.
/// `net_states` is the net capitalization process, built by summing the
/// stored diffusion increments, so it never sees a regulatory jump.
/// A premodel path is the same structure with an empty event log.
#[derive(Debug, Clone)]
pub struct RegulatedPath {
    pub(crate) times: Vec<f64>,
    pub(crate) step_sizes: Vec<f64>,
    pub(crate) states: Vec<CapitalizationVector>,
    pub(crate) net_states: Vec<Vec<f64>>,
    pub(crate) net_increments: Vec<Vec<f64>>,
    pub(crate) brownian: Vec<Vec<f64>>,
    pub(crate) events: Vec<RegulationEvent>,
    /// `event_index[k]` is the position in `events` of an event stored at grid index `k`.
    pub(crate) event_index: Vec<Option<usize>>,
    pub(crate) guard_refinements: usize,
}

impl RegulatedPath {
    fn start(y0: CapitalizationVector) -> Self {
        Self {
            times: vec![0.0],
            step_sizes: Vec::new(),
            net_states: vec![y0.as_slice().to_vec()],
            states: vec![y0],
            net_increments: Vec::new(),
            brownian: Vec::new(),
            events: Vec::new(),
            event_index: vec![None],
            guard_refinements: 0,
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Length of each integration step; `times` differences may differ in the last bit.
    pub fn step_sizes(&self) -> &[f64] {
        &self.step_sizes
    }

    pub fn states(&self) -> &[CapitalizationVector] {
        &self.states
    }

    pub fn net_states(&self) -> &[Vec<f64>] {
        &self.net_states
    }

    /// Diffusion increment over step `k`: left limit at `k+1` minus state at `k`.
    pub fn net_increments(&self) -> &[Vec<f64>] {
        &self.net_increments
    }

    pub fn brownian_increments(&self) -> &[Vec<f64>] {
        &self.brownian
    }

    pub fn events(&self) -> &[RegulationEvent] {
        &self.events
    }

    pub fn event_count(&self) -> usize {
        self.events.len()
    }

    pub fn step_count(&self) -> usize {
        self.step_sizes.len()
    }

    pub fn event_at(&self, k: usize) -> Option<&RegulationEvent> {
        self.event_index[k].map(|i| &self.events[i])
    }

    /// Value just before any regulation at grid index `k`.
    pub fn left_limit(&self, k: usize) -> &CapitalizationVector {
        match self.event_at(k) {
            Some(ev) => &ev.pre_caps,
            None => &self.states[k],
        }
    }

    /// How many times the near-pole guard refined a step.
    pub fn guard_refinements(&self) -> usize {
        self.guard_refinements
    }

    /// CSV: `time, Y_1..Y_n, Yhat_1..Yhat_n, event_flag`.
    pub fn write_trace<W: Write>(&self, out: W) -> Result<()> {
        let n = self.states[0].len();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string()];
        header.extend((1..=n).map(|i| format!("Y_{i}")));
        header.extend((1..=n).map(|i| format!("Yhat_{i}")));
        header.push("event_flag".into());
        w.write_record(&header)?;
        for k in 0..self.times.len() {
            let mut row = vec![self.times[k].to_string()];
            row.extend(self.states[k].as_slice().iter().map(f64::to_string));
            row.extend(self.net_states[k].iter().map(f64::to_string));
            row.push(u8::from(self.event_index[k].is_some()).to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// CSV: `k, time, pre_1..pre_n, post_1..post_n, entropy_jump, overshoot_flag`.
    pub fn write_events<W: Write>(&self, out: W) -> Result<()> {
        let n = self.states[0].len();
        let mut w = csv::Writer::from_writer(out);
        w.write_record(event_header(n, false))?;
        for ev in &self.events {
            w.write_record(event_row(None, ev))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn event_header(n: usize, with_path: bool) -> Vec<String> {
    let mut header = Vec::new();
    if with_path {
        header.push("path_id".to_string());
    }
    header.push("k".into());
    header.push("time".into());
    header.extend((1..=n).map(|i| format!("pre_{i}")));
    header.extend((1..=n).map(|i| format!("post_{i}")));
    header.push("entropy_jump".into());
    header.push("overshoot_flag".into());
    header
}

pub(crate) fn event_row(path_id: Option<u64>, ev: &RegulationEvent) -> Vec<String> {
    let mut row = Vec::new();
    if let Some(id) = path_id {
        row.push(id.to_string());
    }
    row.push(ev.ordinal.to_string());
    row.push(ev.time.to_string());
    row.extend(ev.pre_caps.as_slice().iter().map(f64::to_string));
    row.extend(ev.post_caps.as_slice().iter().map(f64::to_string));
    row.push(ev.entropy_jump.to_string());
    row.push(u8::from(ev.overshoot).to_string());
    row
}

struct Engine<'a> {
    eval: &'a dyn CoefficientEvaluator,
    set: Option<&'a RegulatorySet>,
    cfg: &'a SimConfig,
    stream: &'a mut BrownianStream,
    cap: Option<f64>,
    path: RegulatedPath,
}

impl Engine<'_> {
    fn fault(&self, time: f64, reason: impl Into<String>) -> Error {
        Error::SimulationFault {
            path_index: self.stream.path_index(),
            time,
            reason: reason.into(),
            state: self.current().as_slice().to_vec(),
        }
    }

    fn current(&self) -> &CapitalizationVector {
        self.path.states.last().expect("path has an initial state")
    }

    fn advance(&mut self, start: f64, end: f64, h: f64, dw: &[f64], depth: usize) -> Result<()> {
        let x = self.current().clone();
        let b = self
            .eval
            .drift(&x)
            .map_err(|e| self.fault(start, format!("drift evaluation failed: {e}")))?;
        let proposal = step_log_euler(&x, &b, self.eval.volatility(&x), h, dw)
            .map_err(|e| self.fault(start, format!("step failed: {e}")))?;

        if let Some(cap) = self.cap {
            if largest_weight_of(proposal.as_slice()) >= cap - GUARD_MARGIN {
                if depth == GUARD_MAX_DEPTH {
                    return Err(self.fault(
                        end,
                        format!("step still reaches the weight cap {cap} after {depth} refinements"),
                    ));
                }
                self.path.guard_refinements += 1;
                let parts = self.stream.bridge_split(dw, h, GUARD_SUBSTEPS);
                let sub_h = h / GUARD_SUBSTEPS as f64;
                for (j, part) in parts.iter().enumerate() {
                    let sub_start = start + j as f64 * sub_h;
                    let sub_end = if j + 1 == GUARD_SUBSTEPS {
                        end
                    } else {
                        start + (j + 1) as f64 * sub_h
                    };
                    self.advance(sub_start, sub_end, sub_h, part, depth + 1)?;
                }
                return Ok(());
            }
        }
        self.commit(end, h, dw, x, proposal)
    }

    fn commit(
        &mut self,
        end: f64,
        h: f64,
        dw: &[f64],
        previous: CapitalizationVector,
        proposal: CapitalizationVector,
    ) -> Result<()> {
        let increment: Vec<f64> = proposal
            .as_slice()
            .iter()
            .zip(previous.as_slice())
            .map(|(new, old)| new - old)
            .collect();
        let net: Vec<f64> = self
            .path
            .net_states
            .last()
            .expect("initial net state")
            .iter()
            .zip(&increment)
            .map(|(y, d)| y + d)
            .collect();

        let step = self.path.times.len();
        let (state, event) = match self.set {
            Some(set) if !set.contains_caps(&proposal) => {
                let ordinal = self.path.events.len() + 1;
                if ordinal > self.cfg.max_events {
                    return Err(Error::Viability {
                        path_index: self.stream.path_index(),
                        seed: self.stream.seed(),
                        events: ordinal,
                        time: end,
                    });
                }
                let ev = RegulationEvent::regulate(proposal, set, ordinal, step, end)?;
                (ev.post_caps.clone(), Some(ev))
            }
            _ => (proposal, None),
        };

        self.path.times.push(end);
        self.path.step_sizes.push(h);
        self.path.states.push(state);
        self.path.net_states.push(net);
        self.path.net_increments.push(increment);
        self.path.brownian.push(dw.to_vec());
        self.path.event_index.push(event.as_ref().map(|_| self.path.events.len()));
        if let Some(ev) = event {
            self.path.events.push(ev);
        }
        Ok(())
    }
}

fn run(
    eval: &dyn CoefficientEvaluator,
    set: Option<&RegulatorySet>,
    y0: &CapitalizationVector,
    cfg: &SimConfig,
    stream: &mut BrownianStream,
) -> Result<RegulatedPath> {
    cfg.validate()?;
    if y0.len() != eval.company_count() {
        return Err(domain(format!(
            "initial state has {} companies, model has {}",
            y0.len(),
            eval.company_count()
        )));
    }
    if stream.dim() != eval.noise_dim() {
        return Err(domain("Brownian stream dimension does not match the model"));
    }
    if !eval.in_domain(y0) {
        return Err(domain("initial state lies outside the premodel domain"));
    }
    let mut engine = Engine {
        eval,
        set,
        cfg,
        cap: eval.largest_weight_cap(),
        stream,
        path: RegulatedPath::start(y0.clone()),
    };
    for k in 0..cfg.step_count() {
        let (start, end) = cfg.step_bounds(k);
        let h = end - start;
        let dw = engine.stream.increment(h);
        engine.advance(start, end, h, &dw, 0)?;
    }
    Ok(engine.path)
}

/// Simulates the unregulated premodel on the grid of `cfg`.
pub fn simulate_premodel(
    eval: &dyn CoefficientEvaluator,
    x0: &CapitalizationVector,
    cfg: &SimConfig,
    stream: &mut BrownianStream,
) -> Result<RegulatedPath> {
    run(eval, None, x0, cfg, stream)
}

/// Diffuses with the premodel coefficients and regulates at every grid
/// state whose largest weight reaches `1 - delta'`.
pub fn simulate_regulated(
    eval: &dyn CoefficientEvaluator,
    set: &RegulatorySet,
    y0: &CapitalizationVector,
    cfg: &SimConfig,
    stream: &mut BrownianStream,
) -> Result<RegulatedPath> {
    if set.company_count() != y0.len() {
        return Err(domain("regulatory set and initial state disagree on n"));
    }
    if !set.contains(&market_weights(y0)) {
        return Err(domain(format!(
            "initial largest weight {} is not below the regulation threshold {}",
            market_weights(y0).largest(),
            set.threshold()
        )));
    }
    run(eval, Some(set), y0, cfg, stream)
}

/// The net capitalization process stored on the path.
pub fn net_capitalization(path: &RegulatedPath) -> &[Vec<f64>] {
    path.net_states()
}

/// Net capitalization rebuilt from `Y` minus the accumulated regulatory jumps.
pub fn reconstruct_net_capitalization(path: &RegulatedPath) -> Vec<Vec<f64>> {
    let n = path.states[0].len();
    let mut jumps = vec![0.0; n];
    path.states
        .iter()
        .enumerate()
        .map(|(k, y)| {
            if let Some(ev) = path.event_at(k) {
                for (acc, j) in jumps.iter_mut().zip(ev.jump()) {
                    *acc += j;
                }
            }
            y.as_slice().iter().zip(&jumps).map(|(y, j)| y - j).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::premodels::{GbmModel, GbmParams};

    fn caps(v: &[f64]) -> CapitalizationVector {
        CapitalizationVector::new(v.to_vec()).unwrap()
    }

    fn gbm(b: f64, s: f64) -> GbmModel {
        GbmModel::new(GbmParams {
            drift: vec![b; 3],
            volatility: DMatrix::identity(3, 3) * s,
        })
        .unwrap()
    }

    #[test]
    fn sim_config_grid() {
        let cfg = SimConfig::new(1.0, 1.0 / 252.0, 0).unwrap();
        assert_eq!(cfg.step_count(), 252);
        assert_eq!(cfg.step_bounds(251).1, 1.0);
        let cfg = SimConfig::new(1.0, 0.3, 0).unwrap();
        assert_eq!(cfg.step_count(), 4);
        let (s, e) = cfg.step_bounds(3);
        assert!((s - 0.9).abs() < 1e-15 && e == 1.0);
        assert!(SimConfig::new(1.0, 0.0, 0).is_err());
        assert!(SimConfig::new(1.0, 2.0, 0).is_err());
        assert!(SimConfig::new(-1.0, 0.1, 0).is_err());
    }

    #[test]
    fn log_euler_examples() {
        let x = caps(&[1.0, 2.0, 3.0]);
        let zero = DMatrix::zeros(3, 3);
        assert_eq!(step_log_euler(&x, &[0.0; 3], &zero, 0.1, &[0.5; 3]).unwrap(), x);

        let sigma = DMatrix::identity(3, 3) * 0.2;
        let dt = 0.01;
        let out = step_log_euler(&x, &[0.05; 3], &sigma, dt, &[0.0; 3]).unwrap();
        for (o, xi) in out.as_slice().iter().zip(x.as_slice()) {
            assert!((o - xi * (0.03_f64 * dt).exp()).abs() < 1e-15);
        }

        let wild = step_log_euler(&x, &[-50.0, 3.0, 0.0], &sigma, 0.5, &[-4.0, 4.0, 1.0]).unwrap();
        assert!(wild.as_slice().iter().all(|v| *v > 0.0));
        assert!(step_log_euler(&x, &[f64::NAN, 0.0, 0.0], &sigma, dt, &[0.0; 3]).is_err());
    }

    #[test]
    fn bridge_split_sums_to_increment() {
        let mut stream = BrownianStream::new(3, 9, 3);
        let dw = stream.increment(0.01);
        let parts = stream.bridge_split(&dw, 0.01, 4);
        for nu in 0..3 {
            let sum: f64 = parts.iter().map(|p| p[nu]).sum();
            assert!((sum - dw[nu]).abs() < 1e-15);
        }
    }

    #[test]
    fn streams_are_keyed_by_seed_and_path() {
        let a = BrownianStream::new(1, 0, 3).increment(1.0);
        let b = BrownianStream::new(1, 0, 3).increment(1.0);
        let c = BrownianStream::new(1, 1, 3).increment(1.0);
        let d = BrownianStream::new(2, 0, 3).increment(1.0);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn premodel_replay_is_bit_identical() {
        let model = gbm(0.05, 0.2);
        let cfg = SimConfig::new(1.0, 1.0 / 52.0, 11).unwrap();
        let x0 = caps(&[1.0, 2.0, 3.0]);
        let p1 = simulate_premodel(&model, &x0, &cfg, &mut BrownianStream::new(11, 4, 3)).unwrap();
        let p2 = simulate_premodel(&model, &x0, &cfg, &mut BrownianStream::new(11, 4, 3)).unwrap();
        assert_eq!(p1.states(), p2.states());
        assert_eq!(p1.times().len(), 53);
        assert_eq!(p1.event_count(), 0);
    }

    #[test]
    fn zero_event_path_has_net_equal_to_state() {
        let model = gbm(0.05, 0.2);
        let cfg = SimConfig::new(1.0, 0.01, 5).unwrap();
        let path =
            simulate_premodel(&model, &caps(&[1.0, 1.0, 1.0]), &cfg, &mut BrownianStream::new(5, 0, 3)).unwrap();
        assert_eq!(path.net_states()[0], path.states()[0].as_slice());
        for (y, yhat) in path.states().iter().zip(path.net_states()) {
            for (a, b) in y.as_slice().iter().zip(yhat) {
                assert!((a - b).abs() <= 1e-12 * a.abs());
            }
        }
    }

    #[test]
    fn near_pole_guard_refines_and_keeps_the_cap() {
        use crate::premodels::{LogPoleModel, LogPoleParams};
        let model = LogPoleModel::new(LogPoleParams {
            delta: 0.3,
            g: vec![0.1; 3],
            c: 3e-2,
            volatility: DMatrix::identity(3, 3) * 0.5,
        })
        .unwrap();
        let cfg = SimConfig::new(1.0, 0.02, 13).unwrap();
        let x0 = caps(&[68.0, 17.0, 15.0]);
        let mut refined = 0;
        for i in 0..200 {
            let path = simulate_premodel(&model, &x0, &cfg, &mut BrownianStream::new(13, i, 3)).unwrap();
            refined += path.guard_refinements();
            assert!(path.times().windows(2).all(|w| w[1] > w[0]));
            assert_eq!(*path.times().last().unwrap(), 1.0);
            assert_eq!(path.times().len(), path.states().len());
            for x in path.states() {
                assert!(largest_weight_of(x.as_slice()) < 0.7);
            }
        }
        assert!(refined > 0);
    }

    #[test]
    fn regulated_path_stays_diverse_and_conserves_capital() {
        let model = gbm(0.05, 0.2);
        let set = RegulatorySet::new(3, 0.4).unwrap();
        let cfg = SimConfig::new(2.0, 1.0 / 252.0, 21).unwrap();
        let y0 = caps(&[55.0, 25.0, 20.0]);
        let mut saw_event = false;
        for path_index in 0..50 {
            let mut stream = BrownianStream::new(21, path_index, 3);
            let path = simulate_regulated(&model, &set, &y0, &cfg, &mut stream).unwrap();
            for y in path.states() {
                assert!(market_weights(y).largest() < set.threshold());
            }
            for ev in path.events() {
                saw_event = true;
                let (pre, post) = (ev.pre_caps.total(), ev.post_caps.total());
                assert!((pre - post).abs() <= 1e-12 * pre);
                assert!(ev.post_weights.largest() < set.threshold());
                assert_eq!(path.states()[ev.step], ev.post_caps);
            }
        }
        assert!(saw_event);
    }

    #[test]
    fn regulated_requires_interior_start() {
        let model = gbm(0.0, 0.2);
        let set = RegulatorySet::new(3, 0.4).unwrap();
        let cfg = SimConfig::new(1.0, 0.1, 0).unwrap();
        let y0 = caps(&[6.0, 2.0, 2.0]);
        assert!(simulate_regulated(&model, &set, &y0, &cfg, &mut BrownianStream::new(0, 0, 3)).is_err());
    }

    #[test]
    fn explosion_cap_raises_viability_fault() {
        let model = gbm(0.05, 0.2);
        let set = RegulatorySet::new(3, 0.4).unwrap();
        let mut cfg = SimConfig::new(5.0, 1.0 / 252.0, 2).unwrap();
        cfg.max_events = 1;
        let y0 = caps(&[59.0, 21.0, 20.0]);
        let faults = (0..20)
            .filter(|&i| {
                matches!(
                    simulate_regulated(&model, &set, &y0, &cfg, &mut BrownianStream::new(2, i, 3)),
                    Err(Error::Viability { .. })
                )
            })
            .count();
        assert!(faults > 0);
    }

    #[test]
    fn reconstruction_single_event() {
        let set = RegulatorySet::new(3, 0.3).unwrap();
        let ev = RegulationEvent::regulate(caps(&[7.0, 2.0, 1.0]), &set, 1, 1, 0.5).unwrap();
        let post = ev.post_caps.clone();
        let later = caps(&[3.6, 3.4, 3.1]);
        let path = RegulatedPath {
            times: vec![0.0, 0.5, 1.0],
            step_sizes: vec![0.5, 0.5],
            states: vec![caps(&[6.0, 2.5, 1.5]), post.clone(), later.clone()],
            net_states: vec![
                vec![6.0, 2.5, 1.5],
                vec![7.0, 2.0, 1.0],
                vec![7.0 + 3.6 - post.as_slice()[0], 2.0 + 3.4 - post.as_slice()[1], 1.0 + 3.1 - post.as_slice()[2]],
            ],
            net_increments: vec![vec![1.0, -0.5, -0.5], vec![0.1, -0.1, 0.1]],
            brownian: vec![vec![0.0; 3]; 2],
            events: vec![ev],
            event_index: vec![None, Some(0), None],
            guard_refinements: 0,
        };
        let rebuilt = reconstruct_net_capitalization(&path);
        let expected_shift = [-3.5, 1.5, 2.0];
        for k in 1..3 {
            for i in 0..3 {
                let y = path.states()[k].as_slice()[i];
                assert!((rebuilt[k][i] - (y - expected_shift[i])).abs() < 1e-12);
                assert!((rebuilt[k][i] - net_capitalization(&path)[k][i]).abs() < 1e-10);
            }
            let sum_y: f64 = path.states()[k].total();
            let sum_hat: f64 = rebuilt[k].iter().sum();
            assert!((sum_y - sum_hat).abs() < 1e-12);
        }
    }
}
