use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use regulated_market::experiments::output::{format_report, format_table_report, read_table, write_outputs};
use regulated_market::experiments::{run_ensemble, validate_rule, ExperimentConfig};

#[derive(Parser)]
#[command(name = "regmarket", version, about = "Monte Carlo experiments on regulated equity markets")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, overrides the configuration
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Number of paths (or rule samples for validate-rule)
    #[arg(long, global = true)]
    paths: Option<usize>,

    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads; never changes the output
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an ensemble and write terminal.csv, events.csv, report.txt and traces
    Simulate,
    /// Recompute the report estimates from an output directory
    Report,
    /// Check the split-merge rule on random boundary states
    ValidateRule,
}

fn pool(threads: Option<usize>) -> anyhow::Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            bail!("--threads must be positive");
        }
        builder = builder.num_threads(t);
    }
    Ok(builder.build()?)
}

fn simulate(cli: &Cli) -> anyhow::Result<()> {
    let path = cli.config.as_ref().context("simulate needs --config")?;
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = cli.seed {
        cfg.sim.seed = seed;
    }
    if let Some(paths) = cli.paths {
        cfg.paths = paths;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate()?;
    let dir = cfg.output_dir.clone().context("no output directory: pass --out or set output_dir")?;

    let ensemble = pool(cli.threads)?.install(|| run_ensemble(&cfg))?;
    let report = ensemble.report();
    write_outputs(&ensemble, &report, &dir).with_context(|| format!("writing {}", dir.display()))?;
    print!("{}", format_report(&cfg, &ensemble.table(), &report));
    Ok(())
}

fn report(cli: &Cli) -> anyhow::Result<()> {
    let dir = match (&cli.out, &cli.config) {
        (Some(out), _) => out.clone(),
        (None, Some(cfg)) => ExperimentConfig::load(cfg)?
            .output_dir
            .context("configuration has no output_dir; pass --out")?,
        (None, None) => bail!("report needs --out <dir>"),
    };
    let (cfg, table) = read_table(&dir).with_context(|| format!("reading {}", dir.display()))?;
    print!("{}", format_table_report(&cfg, &table));
    Ok(())
}

fn validate(cli: &Cli) -> anyhow::Result<bool> {
    let samples = cli.paths.unwrap_or(100_000);
    let seed = cli.seed.unwrap_or(0);
    let v = validate_rule(seed, samples)?;
    println!("samples = {}, seed = {seed}", v.samples);
    println!("not strictly interior = {}", v.interior_failures);
    println!("entropy jump below bound = {}", v.entropy_failures);
    println!("conservation errors above 1e-12 = {}", v.conservation_failures);
    println!("min entropy slack = {:.6e}", v.min_entropy_slack);
    println!("max conservation error = {:.3e}", v.max_conservation_error);
    println!("{}", if v.passed() { "PASS" } else { "FAIL" });
    Ok(v.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate => simulate(&cli).map(|_| true),
        Command::Report => report(&cli).map(|_| true),
        Command::ValidateRule => validate(&cli),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
