use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use fastfab::bench::experiment::{self, ExperimentName, ExperimentSpec, Toggles};
use fastfab::bench::report::{self, summarize, REPORT_NOTE};
use fastfab::bench::topology::{NodeRole, Topology};
use fastfab::statestore::Backend;
use fastfab::transport::Mode;
use fastfab_core::SignatureScheme;

#[derive(Parser)]
#[command(name = "bench", about = "Runs the ledger benchmark experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment: e1 transport, e2 orderer payload, e3 peer presets,
    /// e4 shepherd/validator grid, e5 block sizes, e6 end to end.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    experiment: ExperimentName,
    /// Toggle sets to compare: presets (baseline, P-I, P-II, P-III, O-I,
    /// O-I+O-II, all-on) or lists such as o1+p2.
    #[arg(long, num_args = 1..)]
    toggles: Vec<Toggles>,
    #[arg(long)]
    txs: Option<u64>,
    /// Payload padding in bytes; replaces the E2 sweep.
    #[arg(long)]
    payload: Option<u32>,
    /// Replaces the E5 sweep.
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long, default_value_t = 1)]
    repeats: u32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    topology: Option<PathBuf>,

    /// Single toggle set from individual switches (overrides --toggles).
    #[arg(long)]
    opt_o1: bool,
    #[arg(long)]
    opt_o2: bool,
    #[arg(long)]
    opt_p1: bool,
    #[arg(long)]
    opt_p2: bool,
    #[arg(long)]
    opt_p3: bool,
    /// Forces the state backend of every toggle set.
    #[arg(long)]
    state_backend: Option<Backend>,

    /// With --tx-validators, replaces the E4 grid by one point.
    #[arg(long)]
    shepherds: Option<usize>,
    #[arg(long)]
    tx_validators: Option<usize>,
    #[arg(long)]
    block_timeout_ms: Option<u64>,
    #[arg(long)]
    intake_pool: Option<usize>,
    #[arg(long, default_value = "ed25519")]
    sig_mode: SignatureScheme,
    /// inproc or tcp; E1 runs both unless given.
    #[arg(long)]
    transport: Option<Mode>,
    /// E6 client in-flight window.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    endorsers: Option<usize>,
    #[arg(long)]
    accounts: Option<u32>,
}

fn build_spec(a: &RunArgs) -> Result<ExperimentSpec, String> {
    let mut spec = ExperimentSpec::new(a.experiment);
    if a.opt_o1 || a.opt_o2 || a.opt_p1 || a.opt_p2 || a.opt_p3 {
        spec.toggle_sets = vec![Toggles {
            o1: a.opt_o1,
            o2: a.opt_o2,
            p1: a.opt_p1,
            p2: a.opt_p2,
            p3: a.opt_p3,
        }];
    } else if !a.toggles.is_empty() {
        spec.toggle_sets = a.toggles.clone();
    }
    if let Some(b) = a.state_backend {
        for t in &mut spec.toggle_sets {
            t.p1 = b == Backend::Memory;
        }
    }
    if let Some(n) = a.txs {
        spec.tx_count = n;
    }
    if let Some(p) = a.payload {
        spec.payloads = vec![p];
    }
    if let Some(b) = a.block_size {
        spec.block_sizes = vec![b];
    }
    spec.repeats = a.repeats;
    spec.seed = a.seed;
    spec.scheme = a.sig_mode;
    if let Some(s) = a.shepherds {
        spec.pipeline.block_shepherds = s;
    }
    if let Some(v) = a.tx_validators {
        spec.pipeline.tx_validators = v;
    }
    if a.shepherds.is_some() || a.tx_validators.is_some() {
        spec.grid = vec![(spec.pipeline.block_shepherds, spec.pipeline.tx_validators)];
    }
    if let Some(ms) = a.block_timeout_ms {
        spec.orderer.block_timeout = Duration::from_millis(ms);
    }
    if let Some(n) = a.intake_pool {
        spec.orderer.intake_pool = n;
    }
    if let Some(m) = a.transport {
        spec.transports = vec![m];
    }
    if let Some(w) = a.window {
        spec.window = w;
    }
    if let Some(e) = a.endorsers {
        spec.endorsers = e;
    }
    if let Some(k) = a.accounts {
        spec.genesis.accounts = k;
    }
    if let Some(path) = &a.topology {
        let topo = Topology::load(path).map_err(|e| e.to_string())?;
        for role in [NodeRole::Orderer, NodeRole::Committer] {
            topo.one(role).map_err(|e| e.to_string())?;
        }
        if a.transport.is_none() {
            spec.transports = vec![topo.one(NodeRole::Orderer).map_err(|e| e.to_string())?.mode];
        }
        spec.topology = Some(topo);
    }
    Ok(spec)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let Command::Run(args) = Cli::parse().command;
    let spec = match build_spec(&args).and_then(|s| s.check().map(|_| s).map_err(|e| e.to_string())) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("bench: {e}");
            return ExitCode::from(2);
        }
    };
    let rows = match experiment::run(&spec) {
        Ok(rows) => rows,
        Err(e) => {
            eprintln!("bench: {} aborted: {e}", spec.name);
            return ExitCode::FAILURE;
        }
    };
    if rows.is_empty() {
        eprintln!("bench: no results to report");
        return ExitCode::FAILURE;
    }
    println!("# {REPORT_NOTE}");
    println!(
        "# seed={} sig_mode={} hardware_threads={}",
        spec.seed,
        spec.scheme,
        experiment::hardware_threads()
    );
    for s in summarize(&rows) {
        println!("{s}");
    }
    let written = match &args.csv {
        Some(path) => report::write_csv_file(path, &rows),
        None => report::write_csv(std::io::stdout(), &rows),
    };
    if let Err(e) = written {
        eprintln!("bench: cannot write CSV: {e}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
