//! Files written by an experiment run and read back by `report`.
//!
//! `terminal.csv` columns: `path_id`, `V_<rule>` per portfolio rule, `Z_T`,
//! `max_mu1`, `N_events`, then `mean_mu1` and `Yhat_<i>` (net capitalization
//! at the horizon) so every estimate in the report can be recomputed.
//! `horizons.csv` (only with checkpoints): `path_id`, `horizon`, `V_<rule>`, `Z`.
//! Trace files: `time`, `Y_<i>`, `Yhat_<i>`, `event_flag`, `V_<rule>`, `Z`.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{config, Result};
use crate::simulation::event_header;

use super::config::{ExperimentConfig, ModelConfig};
use super::report::{self, format_diagnostics, format_estimates, EnsembleTable, ExperimentReport, HorizonRecord, TerminalRecord};
use super::{Ensemble, PathTrace};

fn num(v: f64) -> String {
    v.to_string()
}

pub fn terminal_header(rules: &[String], n: usize) -> Vec<String> {
    let mut h = vec!["path_id".to_string()];
    h.extend(rules.iter().map(|r| format!("V_{r}")));
    h.extend(["Z_T", "max_mu1", "N_events", "mean_mu1"].map(String::from));
    h.extend((1..=n).map(|i| format!("Yhat_{i}")));
    h
}

pub fn write_terminal<W: Write>(table: &EnsembleTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(terminal_header(&table.rules, table.initial_net.len()))?;
    for r in &table.terminal {
        let mut row = vec![r.path_id.to_string()];
        row.extend(r.wealth.iter().copied().map(num));
        row.push(num(r.z));
        row.push(num(r.max_mu1));
        row.push(r.events.to_string());
        row.push(num(r.mean_mu1));
        row.extend(r.net_terminal.iter().copied().map(num));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_horizons<W: Write>(table: &EnsembleTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["path_id".to_string(), "horizon".to_string()];
    header.extend(table.rules.iter().map(|r| format!("V_{r}")));
    header.push("Z".into());
    w.write_record(&header)?;
    for r in &table.horizons {
        let mut row = vec![r.path_id.to_string(), num(r.horizon)];
        row.extend(r.wealth.iter().copied().map(num));
        row.push(num(r.z));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace<W: Write>(trace: &PathTrace, rules: &[String], out: W) -> Result<()> {
    let path = &trace.path;
    let n = path.states()[0].len();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["time".to_string()];
    header.extend((1..=n).map(|i| format!("Y_{i}")));
    header.extend((1..=n).map(|i| format!("Yhat_{i}")));
    header.push("event_flag".into());
    header.extend(rules.iter().map(|r| format!("V_{r}")));
    header.push("Z".into());
    w.write_record(&header)?;
    for k in 0..path.times().len() {
        let mut row = vec![num(path.times()[k])];
        row.extend(path.states()[k].as_slice().iter().copied().map(num));
        row.extend(path.net_states()[k].iter().copied().map(num));
        row.push(u8::from(path.event_at(k).is_some()).to_string());
        row.extend(trace.wealth.iter().map(|v| num(v.values[k])));
        row.push(num(trace.density.values[k]));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_events<W: Write>(ensemble: &Ensemble, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(event_header(ensemble.config.company_count(), true))?;
    for p in &ensemble.paths {
        for ev in &p.events {
            w.write_record(crate::simulation::event_row(Some(p.terminal.path_id), ev))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn format_header(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let model = match cfg.model {
        ModelConfig::Gbm { .. } => "gbm".to_string(),
        ModelConfig::Logpole { delta, c, .. } => format!("logpole (delta = {delta}, c = {c})"),
    };
    let _ = writeln!(s, "regulated market experiment");
    let _ = writeln!(s, "model = {model}, n = {}", cfg.company_count());
    if cfg.regulation.enabled {
        let _ = writeln!(s, "regulation = on, delta' = {}", cfg.regulation.delta_prime);
    } else {
        let _ = writeln!(s, "regulation = off");
    }
    let _ = writeln!(
        s,
        "horizon = {}, dt = {}, seed = {}, paths = {}",
        cfg.sim.horizon, cfg.sim.dt, cfg.sim.seed, cfg.paths
    );
    let names: Vec<String> = cfg.portfolios.iter().map(|r| r.name()).collect();
    let _ = writeln!(s, "portfolios = {}, benchmark = {}", names.join(", "), cfg.benchmark.name());
    let _ = writeln!(s);
    s
}

/// Header plus the CSV-recomputable estimates.
pub fn format_table_report(cfg: &ExperimentConfig, table: &EnsembleTable) -> String {
    let (emm, diversity, arbitrage) = report::estimates(table, cfg.diversity_delta(), cfg.benchmark_index());
    format_header(cfg) + &format_estimates(table, &emm, diversity.as_ref(), &arbitrage)
}

pub fn format_report(cfg: &ExperimentConfig, table: &EnsembleTable, report: &ExperimentReport) -> String {
    format_header(cfg)
        + &format_estimates(table, &report.emm, report.diversity.as_ref(), &report.arbitrage)
        + "\n"
        + &format_diagnostics(&report.diagnostics)
}

/// Line chart of the largest weight on the first few paths.
pub fn render_svg(ensemble: &Ensemble) -> String {
    const W: f64 = 800.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    let horizon = ensemble.config.sim.horizon;
    let threshold = ensemble.config.diversity_delta().map(|d| 1.0 - d);
    let traces: Vec<&Vec<(f64, f64)>> = ensemble.paths.iter().filter_map(|p| p.mu1_trace.as_ref()).collect();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, m) in traces.iter().flat_map(|t| t.iter()) {
        lo = lo.min(*m);
        hi = hi.max(*m);
    }
    if let Some(t) = threshold {
        lo = lo.min(t);
        hi = hi.max(t);
    }
    if !(lo < hi) {
        lo = 0.0;
        hi = 1.0;
    }
    let x = |t: f64| PAD + (W - 2.0 * PAD) * t / horizon;
    let y = |m: f64| H - PAD - (H - 2.0 * PAD) * (m - lo) / (hi - lo);

    let palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle">largest market weight</text>"#,
        W / 2.0
    );
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{hi:.3}</text>"#, PAD - 4.0, y(hi) + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{lo:.3}</text>"#, PAD - 4.0, y(lo) + 4.0);
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}" text-anchor="middle">0</text>"#, H - PAD + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{horizon}</text>"#, W - PAD, H - PAD + 16.0);
    if let Some(t) = threshold {
        let _ = writeln!(
            s,
            r#"<line x1="{PAD}" y1="{0:.2}" x2="{1}" y2="{0:.2}" stroke="gray" stroke-dasharray="6 4"/>"#,
            y(t),
            W - PAD
        );
    }
    for (i, trace) in traces.iter().enumerate() {
        let points: Vec<String> = trace.iter().map(|(t, m)| format!("{:.2},{:.2}", x(*t), y(*m))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1" points="{}"/>"#,
            palette[i % palette.len()],
            points.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes every enabled artifact into `dir`.
pub fn write_outputs(ensemble: &Ensemble, report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let table = ensemble.table();
    write_terminal(&table, BufWriter::new(File::create(dir.join("terminal.csv"))?))?;
    if table.horizon_values().len() > 1 {
        write_horizons(&table, BufWriter::new(File::create(dir.join("horizons.csv"))?))?;
    }
    if ensemble.config.report.events {
        write_events(ensemble, BufWriter::new(File::create(dir.join("events.csv"))?))?;
    }
    let rules = &table.rules;
    if ensemble.paths.iter().any(|p| p.trace.is_some()) {
        let traces = dir.join("traces");
        fs::create_dir_all(&traces)?;
        for p in &ensemble.paths {
            if let Some(trace) = &p.trace {
                let file = traces.join(format!("path_{:04}.csv", p.terminal.path_id));
                write_trace(trace, rules, BufWriter::new(File::create(file)?))?;
            }
        }
    }
    if ensemble.config.report.plot {
        fs::write(dir.join("plot.svg"), render_svg(ensemble))?;
    }
    let mut effective = ensemble.config.clone();
    effective.output_dir = None;
    fs::write(dir.join("config.json"), effective.to_json()? + "\n")?;
    fs::write(dir.join("report.txt"), format_report(&ensemble.config, &table, report))?;
    Ok(())
}

fn field<T: std::str::FromStr>(record: &csv::StringRecord, i: usize, what: &str) -> Result<T> {
    record
        .get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| config(format!("bad or missing {what} in column {}", i + 1)))
}

/// Reads `config.json`, `terminal.csv` and, if present, `horizons.csv` from an output directory.
pub fn read_table(dir: &Path) -> Result<(ExperimentConfig, EnsembleTable)> {
    let cfg = ExperimentConfig::load(&dir.join("config.json"))?;
    let rules: Vec<String> = cfg.portfolios.iter().map(|r| r.name()).collect();
    let n = cfg.company_count();
    let r = rules.len();

    let mut reader = csv::Reader::from_path(dir.join("terminal.csv"))?;
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    if header != terminal_header(&rules, n) {
        return Err(config("terminal.csv header does not match config.json"));
    }
    let mut terminal = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        terminal.push(TerminalRecord {
            path_id: field(&rec, 0, "path_id")?,
            wealth: (0..r).map(|j| field(&rec, 1 + j, "wealth")).collect::<Result<_>>()?,
            z: field(&rec, 1 + r, "Z_T")?,
            max_mu1: field(&rec, 2 + r, "max_mu1")?,
            events: field(&rec, 3 + r, "N_events")?,
            mean_mu1: field(&rec, 4 + r, "mean_mu1")?,
            net_terminal: (0..n).map(|i| field(&rec, 5 + r + i, "Yhat")).collect::<Result<_>>()?,
        });
    }

    let horizons_file = dir.join("horizons.csv");
    let horizons = if horizons_file.exists() {
        let mut reader = csv::Reader::from_path(horizons_file)?;
        let mut out = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            out.push(HorizonRecord {
                path_id: field(&rec, 0, "path_id")?,
                horizon: field(&rec, 1, "horizon")?,
                wealth: (0..r).map(|j| field(&rec, 2 + j, "wealth")).collect::<Result<_>>()?,
                z: field(&rec, 2 + r, "Z")?,
            });
        }
        out
    } else {
        terminal
            .iter()
            .map(|t| HorizonRecord {
                path_id: t.path_id,
                horizon: cfg.sim.horizon,
                wealth: t.wealth.clone(),
                z: t.z,
            })
            .collect()
    };

    let table = EnsembleTable {
        rules,
        seed: cfg.sim.seed,
        initial_net: cfg.initial_caps.clone(),
        initial_wealth: cfg.initial_wealth,
        terminal,
        horizons,
    };
    Ok((cfg, table))
}
