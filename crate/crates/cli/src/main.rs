use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use afafed_core::bounds::{beta_max_admissible, bound_clipped_beta, bound_constant_beta, bound_scaled};
use afafed_core::harness::config::{resolve_value, set_dotted};
use afafed_core::harness::{run_experiment, run_sweep, write_artifacts, ExperimentConfig};
use afafed_core::BoundInputs;

#[derive(Parser)]
#[command(name = "afafed", version, about = "Asynchronous fair adaptive federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment or parameter file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `sim.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write metrics and a summary.
    Run(Common),
    /// Run with the profiler attached and write parameter estimates too.
    Profile(Common),
    /// Evaluate the convergence bounds for a parameter file.
    Bound(Common),
    /// Run every cell of the `[sweep]` grid.
    Sweep(Common),
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_experiment(c: &Common) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&c.config).with_context(|| format!("reading {}", c.config.display()))?;
    let mut value = resolve_value(&text)?;
    if let Some(seed) = c.seed {
        set_dotted(&mut value, "sim.seed", toml::Value::Integer(seed as i64))?;
    }
    Ok(ExperimentConfig::from_value(value, &base_dir(&c.config))?)
}

fn require_out(c: &Common) -> Result<&Path> {
    match &c.out {
        Some(p) => Ok(p),
        None => bail!("--out is required for this subcommand"),
    }
}

fn run(c: &Common, profile: bool) -> Result<()> {
    let out = require_out(c)?;
    let cfg = load_experiment(c)?;
    let art = run_experiment(&cfg, profile)?;
    write_artifacts(&art, out)?;
    let s = &art.summary;
    println!("termination    {}", s.termination);
    println!("aggregations   {}", s.aggregations);
    println!("final_time     {}", s.final_time);
    println!("fairness_index {}", s.fairness_index);
    if let Some(r) = s.final_risk {
        println!("final_risk     {r}");
    }
    if let Some(e) = &art.estimates {
        println!("feasible       {}", e.feasible());
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn bound(c: &Common) -> Result<()> {
    let text = std::fs::read_to_string(&c.config).with_context(|| format!("reading {}", c.config.display()))?;
    let inp: BoundInputs = toml::from_str(&text).context("parsing bound inputs")?;
    let adm = beta_max_admissible(&inp)?;
    let constant = bound_constant_beta(&inp, inp.beta_max);
    let clipped = bound_clipped_beta(&inp)?;
    let scaled = bound_scaled(&inp)?;
    let mut report = toml::map::Map::new();
    report.insert("beta_max_admissible".into(), adm.into());
    println!("beta_max_admissible  {adm}");
    match &constant {
        Ok(v) => {
            println!("bound_constant_beta  {v}");
            report.insert("bound_constant_beta".into(), (*v).into());
        }
        Err(e) => println!("bound_constant_beta  refused: {e}"),
    }
    println!("bound_clipped_beta   {clipped}");
    println!("bound_scaled         {}", scaled.bound);
    println!("scaled_beta_max_admissible {}", scaled.beta_max_admissible);
    report.insert("bound_clipped_beta".into(), clipped.into());
    report.insert("bound_scaled".into(), scaled.bound.into());
    report.insert("scaled_beta_max_admissible".into(), scaled.beta_max_admissible.into());
    if let Some(out) = &c.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("bounds.toml"), toml::to_string(&toml::Value::Table(report))?)?;
    }
    Ok(())
}

fn sweep(c: &Common) -> Result<()> {
    let out = require_out(c)?;
    if c.seed.is_some() {
        bail!("--seed is not accepted by sweep; list seeds under [sweep]");
    }
    let text = std::fs::read_to_string(&c.config).with_context(|| format!("reading {}", c.config.display()))?;
    let cells = run_sweep(&text, &base_dir(&c.config), out, false)?;
    for cell in &cells {
        println!("{}  aggregations={}  termination={}", cell.name, cell.summary.aggregations, cell.summary.termination);
    }
    println!("wrote {} cells to {}", cells.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Run(c) => run(c, false),
        Command::Profile(c) => run(c, true),
        Command::Bound(c) => bound(c),
        Command::Sweep(c) => sweep(c),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
