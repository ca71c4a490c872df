//! Sweep driver. Lists are comma-separated; every combination is one CSV row.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use qkd_cascade::bench::{
    emit_csv, run_cell, summary, write_csv, ExperimentPlan, ModeChoice, RunRole, TransportKind,
};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RoleArg {
    Reference,
    Correcting,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TransportArg {
    Sim,
    Tcp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Parser)]
#[command(about = "Pipelined Cascade reconciliation benchmark")]
struct Args {
    #[arg(long, value_enum, default_value = "both")]
    role: RoleArg,
    #[arg(long, value_enum, default_value = "sim")]
    transport: TransportArg,
    /// Address the reference party listens on (tcp).
    #[arg(long)]
    listen: Option<String>,
    /// Address the correcting party dials (tcp).
    #[arg(long)]
    connect: Option<String>,
    /// True channel error rate(s).
    #[arg(long, alias = "qber-actual", value_delimiter = ',', default_value = "0.01")]
    qber: Vec<f64>,
    /// Build the schedule for this rate instead of the true one.
    #[arg(long)]
    qber_estimated: Option<f64>,
    /// he, me, mt, ht or orig.
    #[arg(long, value_delimiter = ',', default_value = "he")]
    mode: Vec<ModeChoice>,
    /// One-way link latency (sim).
    #[arg(long, value_delimiter = ',', default_value = "0")]
    latency_ms: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    jitter_ms: f64,
    /// Sessions in flight per worker; 1 is stop-and-wait.
    #[arg(long, value_delimiter = ',', default_value = "4")]
    stages: Vec<usize>,
    /// Defaults to the number of cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Frames per cell.
    #[arg(long, default_value_t = 100)]
    frames: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value = "on")]
    collision_detection: Switch,
    /// Rounds before a frame is abandoned (default 256 * log2 N).
    #[arg(long)]
    round_cap: Option<u32>,
    /// CSV output file; stdout when absent.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let defaults = ExperimentPlan::default();
    let plan = ExperimentPlan {
        qber_list: args.qber,
        qber_estimated: args.qber_estimated,
        mode_list: args.mode,
        latency_list_ms: args.latency_ms,
        jitter_ms: args.jitter_ms,
        stages_list: args.stages,
        workers: args.workers.unwrap_or(defaults.workers),
        frames_per_cell: args.frames,
        seed: args.seed,
        transport: match args.transport {
            TransportArg::Sim => TransportKind::Sim,
            TransportArg::Tcp => TransportKind::Tcp,
        },
        role: match args.role {
            RoleArg::Reference => RunRole::Reference,
            RoleArg::Correcting => RunRole::Correcting,
            RoleArg::Both => RunRole::Both,
        },
        collision_detection: matches!(args.collision_detection, Switch::On),
        listen: args.listen,
        connect: args.connect,
        round_cap: args.round_cap,
        audit: true,
    };
    if let Err(e) = plan.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }

    let mut rows = Vec::new();
    for cell in plan.cells() {
        let r = run_cell(&plan, cell);
        if let Some(e) = &r.error {
            eprintln!("cell qber={} mode={} latency={}ms stages={}: {e}", cell.qber, cell.mode, cell.latency_ms, cell.stages);
        }
        rows.push(r);
    }
    eprint!("{}", summary(&rows));

    let written = match &args.csv {
        Some(path) => emit_csv(&rows, path),
        None => write_csv(&rows, std::io::stdout().lock()),
    };
    if let Err(e) = written {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    let protocol_errors = rows.iter().filter(|r| r.error.is_some() || r.silent_mismatches > 0).count();
    if protocol_errors == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
