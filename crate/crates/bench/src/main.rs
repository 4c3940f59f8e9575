use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use acqret_bench::report::{emit_report, Format};
use acqret_bench::workload::{run_workload, CellImpl, Stop, WorkloadConfig, DEFAULT_FAST_TRIES};
use clap::Parser;

/// Concurrent loads and stores on an array of shared pointers.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    /// refcount, weak-atomic-counted or lock-baseline
    #[arg(long = "impl", default_value = "refcount")]
    cell_impl: CellImpl,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Size of the pointer array
    #[arg(long, default_value_t = 10)]
    n_refs: usize,
    /// Probability that an operation is a store
    #[arg(long, default_value_t = 0.1)]
    store_prob: f64,
    #[arg(long, default_value_t = 3.0)]
    duration_s: f64,
    /// Operations per thread; replaces the duration
    #[arg(long)]
    ops: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Comma-separated thread counts, e.g. 1,2,4,8
    #[arg(long, value_delimiter = ',')]
    sweep: Vec<usize>,
    /// Fast-path attempts per acquire before the copy fallback
    #[arg(long, default_value_t = DEFAULT_FAST_TRIES)]
    fast_tries: usize,
    /// Print a speedup table after the CSV
    #[arg(long)]
    summary: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let threads = if args.sweep.is_empty() { vec![args.threads] } else { args.sweep.clone() };
    let mut results = Vec::new();
    for t in threads {
        let cfg = WorkloadConfig {
            n_refs: args.n_refs,
            store_prob: args.store_prob,
            threads: t,
            stop: args.ops.map_or(Stop::After(args.duration_s), Stop::Ops),
            cell_impl: args.cell_impl,
            seed: args.seed,
            fast_path_tries: args.fast_tries,
        };
        match run_workload(&cfg) {
            Ok(r) => results.push(r),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
    }
    let format = if args.summary { Format::CsvWithSummary } else { Format::Csv };
    let written = match &args.csv {
        Some(path) => File::create(path).and_then(|f| {
            let mut w = BufWriter::new(f);
            emit_report(&results, format, &mut w)?;
            w.flush()
        }),
        None => emit_report(&results, format, io::stdout().lock()),
    };
    if let Err(e) = written {
        eprintln!("error: writing report: {e}");
        return ExitCode::from(2);
    }
    let violations: u64 = results.iter().map(|r| r.violations).sum();
    if violations > 0 {
        eprintln!("{violations} invariant violations");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
