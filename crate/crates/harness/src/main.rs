use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use betree_core::Params;
use betree_harness::{generate, replay, workload, CsvSink, EngineKind, GenKind, HarnessError, RunConfig};
use clap::Parser;

/// Replay a workload against the deamortized B^ε-tree, the amortized
/// baseline or the oracle, and report block transfers per op.
///
/// Exit codes: 0 clean, 1 usage, 2 invariant violation, 3 oracle mismatch.
#[derive(Parser, Debug)]
#[command(name = "betree-harness", version)]
struct Cli {
    /// deamo, baseline or oracle.
    #[arg(long, default_value = "deamo")]
    engine: EngineKind,
    /// Block size in records.
    #[arg(long = "B", default_value_t = 256)]
    block: u64,
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,
    /// Capacity bound the tree is first sized for.
    #[arg(long, default_value_t = 1 << 20)]
    n_cap: u64,
    /// Workload file, one `I k` / `D k` / `P k` / `R a b` per line.
    #[arg(long, conflicts_with = "gen", required_unless_present = "gen")]
    workload: Option<PathBuf>,
    /// Generate instead: random, sequential or adversarial.
    #[arg(long, requires = "n")]
    gen: Option<GenKind>,
    /// Number of generated ops.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Full audit every k ops (0: only the census at quiescent points).
    #[arg(long, default_value_t = 0)]
    audit_every: u64,
    /// Per-op metrics as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Cache size in blocks (default derived from the parameters).
    #[arg(long)]
    cache_blocks: Option<u64>,
    /// Mirror pages to this file (deamo only).
    #[arg(long)]
    file_backed: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let params = Params::derive(cli.block, cli.epsilon, cli.n_cap).map_err(|e| HarnessError::Usage(e.to_string()))?;
    let ops = match (&cli.workload, cli.gen) {
        (Some(path), _) => workload::parse(&std::fs::read_to_string(path)?)?,
        (None, Some(kind)) => generate(kind, cli.n.unwrap_or(0), cli.seed)?,
        (None, None) => return Err(HarnessError::Usage("give --workload or --gen".into())),
    };
    let cfg = RunConfig {
        engine: cli.engine,
        params,
        cache_blocks: cli.cache_blocks,
        audit_every: cli.audit_every,
        file_backed: cli.file_backed.clone(),
    };
    let mut csv = match &cli.csv {
        Some(path) => Some(CsvSink::new(BufWriter::new(File::create(path)?))?),
        None => None,
    };
    let outcome = replay(&ops, &cfg, &mut |rec| match csv.as_mut() {
        Some(sink) => sink.push(rec),
        None => Ok(()),
    })?;
    if let Some(sink) = csv {
        sink.finish()?;
    }
    println!("engine {:?}  B {}  epsilon {}  n_cap {}  ops {}", cli.engine, cli.block, cli.epsilon, cli.n_cap, ops.len());
    print!("{}", outcome.summary.table());
    println!("keys {}  digest {:016x}  leaf merges {}  rebuilds {}", outcome.len, outcome.digest, outcome.merges, outcome.rebuilds);
    if let Some(m) = outcome.meter {
        println!(
            "max I/O per update {} ({} during rebuild), budget at start {}",
            m.max_update_ios,
            m.max_update_ios_rebuild,
            params.update_budget()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
