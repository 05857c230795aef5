//! Command-line front end: run scenarios, sweep failure counts, plan
//! partitions, and repair ring orders.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use collsim::allreduce_opt::{optimal_partition, PartitionInputs, ThresholdRule};
use collsim::report::{emit_report, emit_sweep, Format};
use collsim::rerank::{global_floor, rerank, LogicalRing};
use collsim::runner::{run, sweep};
use collsim::scenario::parse_scenario;
use collsim::topology::{RailId, ServerId};

#[derive(Parser)]
#[command(
    name = "collsim",
    version,
    about = "Planner and fault simulator for multi-NIC collectives"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Json,
    Csv,
}

impl From<OutputFormat> for Format {
    fn from(f: OutputFormat) -> Format {
        match f {
            OutputFormat::Json => Format::Json,
            OutputFormat::Csv => Format::Csv,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Seed for randomized fault placement.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for reports.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    format: OutputFormat,
    /// Skip SVG chart emission.
    #[arg(long)]
    no_plots: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario once and report against its fault-free baseline.
    Run(RunArgs),
    /// Monte-Carlo sweep over k = 0..=k concurrent NIC failures.
    Sweep(RunArgs),
    /// Evaluate the partition model for one degraded server.
    Plan {
        #[arg(long)]
        servers: usize,
        #[arg(long)]
        gpus: usize,
        /// Lost-bandwidth fraction of the degraded server, in (0, 1).
        #[arg(long)]
        lost_fraction: f64,
        /// Bytes per GPU.
        #[arg(long, default_value_t = 1 << 30)]
        bytes: u64,
        /// Healthy per-server bandwidth, bytes/s.
        #[arg(long, default_value_t = 400e9)]
        bandwidth: f64,
        /// Use the 1/3 deployment rule instead of the exact threshold.
        #[arg(long)]
        practical_rule: bool,
    },
    /// Repair a logical ring against asymmetric rail failures.
    Rerank {
        /// TOML file with `ring = [...]` and `rails = [[...], ...]`.
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(serde::Deserialize)]
struct RerankInput {
    ring: Vec<usize>,
    rails: Vec<Vec<usize>>,
}

fn real_main() -> Result<(), String> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let scenario = parse_scenario(&args.scenario).map_err(|e| e.to_string())?;
            let report = run(&scenario, args.seed).map_err(|e| e.to_string())?;
            let written = emit_report(&report, &args.out, args.format.into(), !args.no_plots)
                .map_err(|e| e.to_string())?;
            for c in &report.collectives {
                println!(
                    "collective {} {}: makespan {:.6}s overhead {:+.3}% [{}] {}",
                    c.index,
                    c.kind,
                    c.makespan,
                    c.overhead * 100.0,
                    c.strategy,
                    c.integrity
                );
            }
            println!(
                "total: {:.6}s vs baseline {:.6}s (overhead {:+.3}%)",
                report.totals.makespan,
                report.totals.baseline_makespan,
                report.totals.overhead * 100.0
            );
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Sweep(args) => {
            let scenario = parse_scenario(&args.scenario).map_err(|e| e.to_string())?;
            let report = sweep(&scenario, args.seed).map_err(|e| e.to_string())?;
            for p in &report.points {
                println!(
                    "k={:>2}: mean overhead {:+.3}% (p50 {:+.3}%, p95 {:+.3}%)",
                    p.k,
                    p.mean_overhead * 100.0,
                    p.p50_overhead * 100.0,
                    p.p95_overhead * 100.0
                );
            }
            let written = emit_sweep(&report, &args.out, args.format.into(), !args.no_plots)
                .map_err(|e| e.to_string())?;
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Plan {
            servers,
            gpus,
            lost_fraction,
            bytes,
            bandwidth,
            practical_rule,
        } => {
            let rule = if practical_rule {
                ThresholdRule::PracticalOneThird
            } else {
                ThresholdRule::Exact
            };
            let inputs = PartitionInputs {
                n: servers,
                g: gpus,
                x: lost_fraction,
                d: bytes as f64,
                b: bandwidth,
            };
            let plan = optimal_partition(&inputs, rule).map_err(|e| e.to_string())?;
            println!(
                "{}",
                serde_json::to_string_pretty(&plan).map_err(|e| e.to_string())?
            );
            Ok(())
        }
        Command::Rerank { input } => {
            let text = std::fs::read_to_string(&input)
                .map_err(|e| format!("cannot read {}: {e}", input.display()))?;
            let parsed: RerankInput = toml::from_str(&text).map_err(|e| e.to_string())?;
            if parsed.ring.len() != parsed.rails.len() {
                return Err("ring and rails must have the same length".into());
            }
            let order: Vec<ServerId> = parsed.ring.iter().map(|&i| ServerId(i)).collect();
            let rail_sets: BTreeMap<_, _> = order
                .iter()
                .zip(&parsed.rails)
                .map(|(&s, rails)| (s, rails.iter().map(|&r| RailId(r)).collect()))
                .collect();
            let ring = LogicalRing::new(order, rail_sets).map_err(|e| e.to_string())?;
            let floor = global_floor(&ring).map_err(|e| e.to_string())?;
            let (fixed, report) = rerank(&ring);
            let out = serde_json::json!({
                "floor": floor,
                "input_order": parsed.ring,
                "repaired_order": fixed.order.iter().map(|s| s.0).collect::<Vec<_>>(),
                "min_intersection_before": report.min_intersection_before,
                "min_intersection_after": report.min_intersection_after,
                "relocations": report.relocations.iter()
                    .map(|(w, u, v)| serde_json::json!({"bridge": w.0, "between": [u.0, v.0]}))
                    .collect::<Vec<_>>(),
                "unrepaired": report.unrepaired.len(),
            });
            println!(
                "{}",
                serde_json::to_string_pretty(&out).map_err(|e| e.to_string())?
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
