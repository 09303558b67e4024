use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lyquor_core::dma::MemorySpace;
use lyquor_core::ids::ServiceId;
use lyquor_core::oracle::Replay;
use lyquor_core::scenario::Scenario;

#[derive(Parser)]
#[command(
    name = "lyquor",
    about = "Run, check and inspect sequenced-service scenarios"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and check its expectations.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the trace, report, state dump and node images.
        #[arg(long, env = "LYQUOR_DATA_DIR", default_value = "lyquor-data")]
        out: PathBuf,
    },
    /// Execute every intent on one full replica and dump the result.
    Oracle { scenario: PathBuf },
    /// Print a root from a saved service image.
    Inspect {
        /// A node directory written by `run`, e.g. OUT/nodes/X.
        dir: PathBuf,
        service: String,
        root: String,
        /// Read the snapshot taken at this log position.
        #[arg(long)]
        at: Option<u64>,
    },
}

/// Exit codes: 0 success, 1 failed expectation or lookup, 2 bad input.
enum Failure {
    Check(String),
    Input(String),
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    let text =
        fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    Scenario::parse(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn run(scenario: &Path, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let scn = load(scenario)?;
    let mut result = scn
        .run(seed.unwrap_or(scn.seed))
        .map_err(|e| Failure::Input(e.to_string()))?;
    fs::create_dir_all(out).map_err(|e| Failure::Input(format!("{}: {e}", out.display())))?;
    let report = result.report_text();
    write(&out.join("trace.jsonl"), &result.sim.trace_jsonl())?;
    write(&out.join("report.txt"), &report)?;
    write(&out.join("state.txt"), &result.state_text())?;
    let ids: Vec<_> = result.sim.node_ids().collect();
    for id in ids {
        let node = result.sim.node_mut(id).expect("listed node");
        let dir = out.join("nodes").join(node.name());
        node.save_to(&dir)
            .map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?;
    }
    print!("{report}");
    if result.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "{} has failing expectations",
            scenario.display()
        )))
    }
}

fn oracle(scenario: &Path) -> Result<(), Failure> {
    let scn = load(scenario)?;
    let mut replay = Replay::of_scenario(&scn).map_err(|e| Failure::Input(e.to_string()))?;
    print!("{}", replay.dump());
    Ok(())
}

fn inspect(dir: &Path, service: &str, root: &str, at: Option<u64>) -> Result<(), Failure> {
    let service = ServiceId::new(service).map_err(Failure::Input)?;
    let dir = dir.join(service.as_str());
    // opening creates an empty image, so check first
    if !dir.is_dir() {
        return Err(Failure::Input(format!(
            "no saved image at {}",
            dir.display()
        )));
    }
    let mut space = MemorySpace::open(service, &dir).map_err(|e| Failure::Input(e.to_string()))?;
    let value = space
        .read_root_named(root, at)
        .map_err(|e| Failure::Check(e.to_string()))?;
    println!("{value}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            scenario,
            seed,
            out,
        } => run(scenario, *seed, out),
        Command::Oracle { scenario } => oracle(scenario),
        Command::Inspect {
            dir,
            service,
            root,
            at,
        } => inspect(dir, service, root, *at),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("lyquor: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("lyquor: {msg}");
            ExitCode::from(2)
        }
    }
}
