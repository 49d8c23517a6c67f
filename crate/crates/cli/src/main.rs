use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use strata_core::sim::{self, fmt_f64, load_scenario, read_summary, sig9, write_outputs, RunMode, Scenario, ScenarioError, Summary};

/// Three-layer P2P energy market simulator.
#[derive(Parser)]
#[command(name = "strata", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file; prints nothing when it is valid.
    Validate { scenario: PathBuf },
    /// Run a scenario and write the output files.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        no_l3: bool,
        #[arg(long)]
        no_powerflow: bool,
        #[arg(long)]
        no_price_game: bool,
        /// Run the utility-only baseline instead of the full market.
        #[arg(long)]
        baseline: bool,
    },
    /// Compare two run directories; savings are B's cost minus A's.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        #[arg(long, default_value = "compare.json")]
        out: PathBuf,
    },
    /// Print the summary of a run directory.
    Report { run: PathBuf },
}

/// Exit status with its diagnostic.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn domain(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn io(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    load_scenario(path).map_err(|e: ScenarioError| {
        let message = match &e {
            ScenarioError::Io { .. } => e.to_string(),
            _ => format!("{}: {e}", path.display()),
        };
        if e.is_io() {
            Failure::io(message)
        } else {
            Failure::domain(message)
        }
    })
}

fn cmd_run(
    path: &Path,
    out: &Path,
    seed: Option<u64>,
    no_l3: bool,
    no_powerflow: bool,
    no_price_game: bool,
    baseline: bool,
) -> Result<(), Failure> {
    let mut scenario = load(path)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    scenario.flags.l3_enabled &= !no_l3;
    scenario.flags.powerflow_enabled &= !no_powerflow;
    scenario.flags.price_game_enabled &= !no_price_game;
    let sim_err = |e: sim::SimError| Failure::domain(format!("simulation failed at {e}"));
    let base = sim::baseline_run(&scenario).map_err(sim_err)?;
    let run = if baseline { base.clone() } else { sim::run_mode(&scenario, RunMode::Full).map_err(sim_err)? };
    let summary = Summary::build(&run, &base);
    write_outputs(out, &run, &summary).map_err(|e| Failure::io(format!("{}: {e}", out.display())))
}

fn summary_of(dir: &Path) -> Result<Summary, Failure> {
    read_summary(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.join("summary.json").display())))
}

fn cmd_compare(a_dir: &Path, b_dir: &Path, out: &Path) -> Result<(), Failure> {
    let (a, b) = (summary_of(a_dir)?, summary_of(b_dir)?);
    let ids = |s: &Summary| s.prosumers.iter().map(|p| p.id.clone()).collect::<BTreeSet<_>>();
    if ids(&a) != ids(&b) {
        return Err(Failure::domain(format!(
            "{} and {} cover different prosumers; only runs of the same scenario can be compared",
            a_dir.display(),
            b_dir.display()
        )));
    }
    println!("{:<12} {:>14} {:>14} {:>14}", "prosumer", "cost_a", "cost_b", "savings");
    let mut rows = Vec::new();
    for pa in &a.prosumers {
        let pb = b.prosumers.iter().find(|p| p.id == pa.id).expect("same prosumer sets");
        let savings = sig9(pb.cost - pa.cost);
        println!("{:<12} {:>14} {:>14} {:>14}", pa.id.as_str(), fmt_f64(pa.cost), fmt_f64(pb.cost), fmt_f64(savings));
        rows.push(json!({ "id": pa.id, "cost_a": pa.cost, "cost_b": pb.cost, "savings": savings }));
    }
    let total = sig9(b.totals.cost - a.totals.cost);
    let penalty = sig9(a.totals.penalties - b.totals.penalties);
    let volume = sig9(a.totals.p2p_volume_kwh - b.totals.p2p_volume_kwh);
    println!("total savings        {}", fmt_f64(total));
    println!("penalty delta        {}", fmt_f64(penalty));
    println!("p2p volume delta kWh {}", fmt_f64(volume));
    let doc = json!({
        "run_a": a_dir.display().to_string(),
        "run_b": b_dir.display().to_string(),
        "prosumers": rows,
        "total_savings": total,
        "penalty_delta": penalty,
        "p2p_volume_delta_kwh": volume,
    });
    let text = serde_json::to_string_pretty(&doc).expect("json values serialize") + "\n";
    std::fs::write(out, text).map_err(|e| Failure::io(format!("{}: {e}", out.display())))
}

fn cmd_report(dir: &Path) -> Result<(), Failure> {
    let s = summary_of(dir)?;
    let mode = match s.mode {
        RunMode::Full => "full",
        RunMode::Baseline => "baseline",
    };
    println!("seed {}  mode {mode}  l3 {}  powerflow {}  price game {}", s.seed, s.flags.l3_enabled, s.flags.powerflow_enabled, s.flags.price_game_enabled);
    println!("{:<12} {:>14} {:>14} {:>14}", "prosumer", "cost", "baseline", "savings");
    for p in &s.prosumers {
        println!("{:<12} {:>14} {:>14} {:>14}", p.id.as_str(), fmt_f64(p.cost), fmt_f64(p.baseline_cost), fmt_f64(p.savings));
    }
    println!("{:<12} {:>14} {:>14}", "vpp", "revenue", "penalties");
    for v in &s.vpps {
        println!("{:<12} {:>14} {:>14}", v.id.as_str(), fmt_f64(v.revenue), fmt_f64(v.penalties));
    }
    let t = &s.totals;
    println!("total savings {}  p2p {} kWh  l3 {} kWh  penalties {}", fmt_f64(t.savings), fmt_f64(t.p2p_volume_kwh), fmt_f64(t.l3_volume_kwh), fmt_f64(t.penalties));
    println!("nash games {}  converged {}  violations {}", s.nash.games, s.nash.converged, s.violations);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Validate { scenario } => load(scenario).map(|_| ()),
        Command::Run { scenario, out, seed, no_l3, no_powerflow, no_price_game, baseline } => {
            cmd_run(scenario, out, *seed, *no_l3, *no_powerflow, *no_price_game, *baseline)
        }
        Command::Compare { run_a, run_b, out } => cmd_compare(run_a, run_b, out),
        Command::Report { run } => cmd_report(run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
