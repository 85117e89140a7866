//! Command-line front end: graph generation, cost queries, training,
//! sweeps, model selection, and the release checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use supernet::error::{Error, Result};
use supernet::experiment::{
    build_graph_from, run_experiment, run_sweep, ExperimentConfig, GraphConfig, SweepConfig,
};
use supernet::graph::{Mask, SuperNetGraph};
use supernet::schedule::{distributed_cost, schedule_to_csv, SchedulePolicy};
use supernet::selection::{front_to_csv, pareto_front, plot_data, read_models, write_models};

/// Budget-constrained architecture search over super network DAGs.
///
/// Exit codes: 0 on success, 1 on a user error (bad flags, unreadable
/// or invalid inputs), 2 on an internal error (a panic, or failing
/// release checks under `verify`).
#[derive(Parser)]
#[command(name = "supernet", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the configured graph and write it in the text format.
    ///
    /// The config needs a [graph] table; any other tables are ignored,
    /// so a full experiment config works unchanged.
    Gen {
        /// TOML file with a [graph] table.
        #[arg(long)]
        config: PathBuf,
        /// Output graph file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Price a graph (or a mask of it) under one cost model; prints a
    /// JSON record with the kind, value, and unit.
    Cost {
        /// Graph file in the text format.
        #[arg(long)]
        graph: PathBuf,
        /// Mask file, or "full" for the whole graph.
        #[arg(long, default_value = "full")]
        mask: String,
        #[arg(long, value_enum, default_value_t = CostKind::Flops)]
        kind: CostKind,
        /// Machine count for the distributed kind.
        #[arg(long, default_value_t = 1)]
        machines: usize,
        /// Exhaustive minimum makespan instead of list scheduling.
        #[arg(long)]
        optimal: bool,
        /// Also write the schedule as (edge, machine, cycle) CSV
        /// (distributed kind only).
        #[arg(long)]
        schedule_csv: Option<PathBuf>,
    },
    /// Train one experiment config into an output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (SUPERNET_OUT overrides).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a (budget, hinge weight, seed) grid and aggregate the
    /// cost-accuracy front.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (SUPERNET_OUT overrides).
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute the front of a JSON-lines model record file.
    Select {
        #[arg(long)]
        records: PathBuf,
        /// Output directory (SUPERNET_OUT overrides).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the release checks and print one verdict line each.
    Verify {
        /// Run a single check by name.
        #[arg(long)]
        only: Option<String>,
        /// List check names and exit.
        #[arg(long)]
        list: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CostKind {
    Flops,
    Params,
    Distributed,
}

/// The single environment override: SUPERNET_OUT replaces any --out
/// directory, so wrappers can redirect artifacts without editing
/// configs.
fn resolve_out(cli_out: &Path) -> PathBuf {
    match std::env::var_os("SUPERNET_OUT") {
        Some(dir) => PathBuf::from(dir),
        None => cli_out.to_path_buf(),
    }
}

fn load_graph(path: &Path) -> Result<SuperNetGraph> {
    SuperNetGraph::from_text(&fs::read_to_string(path)?)
}

/// [graph] table of any config file; extra tables are allowed.
#[derive(serde::Deserialize)]
struct GraphOnly {
    graph: GraphConfig,
}

fn cmd_gen(config: &Path, out: &Path) -> Result<()> {
    let raw = fs::read_to_string(config)?;
    let cfg: GraphOnly =
        toml::from_str(&raw).map_err(|e| Error::Parse(format!("graph config: {e}")))?;
    let g = build_graph_from(&cfg.graph)?;
    fs::write(out, g.to_text())?;
    println!(
        "{}",
        serde_json::json!({
            "graph": out.display().to_string(),
            "layers": g.num_layers(),
            "edges": g.num_edges(),
        })
    );
    Ok(())
}

fn cmd_cost(
    graph: &Path,
    mask_arg: &str,
    kind: CostKind,
    machines: usize,
    optimal: bool,
    schedule_csv: Option<&Path>,
) -> Result<()> {
    let g = load_graph(graph)?;
    let mask = if mask_arg == "full" {
        Mask::full(&g)
    } else {
        g.mask_from_text(&fs::read_to_string(mask_arg)?)?
    };
    let policy =
        if optimal { SchedulePolicy::BruteForceOptimal } else { SchedulePolicy::GreedyList };
    let (kind_name, value, unit) = match kind {
        CostKind::Flops => {
            ("flops".to_string(), supernet::cost::flops_cost(&g, &mask) as f64, "mult-adds")
        }
        CostKind::Params => {
            ("params".to_string(), supernet::cost::params_cost(&g, &mask) as f64, "parameters")
        }
        CostKind::Distributed => {
            let s = distributed_cost(&g, &mask, machines, policy)?;
            if let Some(path) = schedule_csv {
                fs::write(path, schedule_to_csv(&g, &s))?;
            }
            (format!("distributed(n={machines})"), s.makespan as f64, "cycles")
        }
    };
    println!(
        "{}",
        serde_json::json!({
            "graph": graph.display().to_string(),
            "mask": mask_arg,
            "kind": kind_name,
            "value": value,
            "unit": unit,
        })
    );
    Ok(())
}

fn cmd_train(config: &Path, out: &Path) -> Result<()> {
    let raw = fs::read_to_string(config)?;
    let cfg = ExperimentConfig::from_toml(&raw)?;
    let art = run_experiment(&cfg, &raw, out)?;
    println!(
        "{}",
        serde_json::json!({
            "out": art.dir.display().to_string(),
            "epochs": art.log.summary.epochs,
            "final_entropy": art.log.summary.final_entropy,
            "deterministic": art.log.summary.deterministic,
            "val_accuracy": art.log.summary.val_accuracy,
            "val_cost": art.log.summary.val_cost,
            "models": art.models.len(),
            "final_eval": art.final_eval,
        })
    );
    Ok(())
}

fn cmd_sweep(config: &Path, out: &Path) -> Result<()> {
    let raw = fs::read_to_string(config)?;
    let cfg = SweepConfig::from_toml(&raw)?;
    let art = run_sweep(&cfg, &raw, out)?;
    println!(
        "{}",
        serde_json::json!({
            "out": out.display().to_string(),
            "runs": art.run_dirs.len(),
            "records": art.records.len(),
            "front": art.front.len(),
        })
    );
    Ok(())
}

fn cmd_select(records: &Path, out: &Path) -> Result<()> {
    let file = fs::File::open(records)?;
    let mut reader = std::io::BufReader::new(file);
    let models = read_models(&mut reader)?;
    let front = pareto_front(&models)?;
    fs::create_dir_all(out)?;
    let mut buf = Vec::new();
    write_models(&mut buf, &front)?;
    fs::write(out.join("front.jsonl"), buf)?;
    fs::write(out.join("pareto.csv"), front_to_csv(&front))?;
    fs::write(out.join("pareto.dat"), plot_data(&models, &front))?;
    println!(
        "{}",
        serde_json::json!({
            "records": models.len(),
            "front": front.len(),
            "out": out.display().to_string(),
        })
    );
    Ok(())
}

/// Returns false when any check failed.
fn cmd_verify(only: Option<&str>, list: bool) -> Result<bool> {
    if list {
        for n in supernet::verify::check_names() {
            println!("{n}");
        }
        return Ok(true);
    }
    let results = match only {
        Some(name) => {
            let r = supernet::verify::run_check(name).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown check {name:?}; --list prints the registry"
                ))
            })?;
            vec![r]
        }
        None => supernet::verify::run_all(),
    };
    let mut all_passed = true;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        all_passed &= r.passed;
    }
    println!("{} passed, {} failed", results.iter().filter(|r| r.passed).count(), results.iter().filter(|r| !r.passed).count());
    Ok(all_passed)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Gen { config, out } => cmd_gen(&config, &out).map(|()| true),
        Cmd::Cost { graph, mask, kind, machines, optimal, schedule_csv } => {
            cmd_cost(&graph, &mask, kind, machines, optimal, schedule_csv.as_deref()).map(|()| true)
        }
        Cmd::Train { config, out } => cmd_train(&config, &resolve_out(&out)).map(|()| true),
        Cmd::Sweep { config, out } => cmd_sweep(&config, &resolve_out(&out)).map(|()| true),
        Cmd::Select { records, out } => cmd_select(&records, &resolve_out(&out)).map(|()| true),
        Cmd::Verify { only, list } => cmd_verify(only.as_deref(), list),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version land here with a zero status.
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(true)) => ExitCode::SUCCESS,
        // Failing release checks are an implementation problem, not a
        // usage problem.
        Ok(Ok(false)) => ExitCode::from(2),
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(_) => ExitCode::from(2),
    }
}
