use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use qdb::bench::{BenchParams, Scenario, run_scenario};

#[derive(Parser)]
#[command(name = "qdb-bench", about = "Queue manager benchmark scenarios")]
struct Args {
    /// enqueue_commit, enqueue_commit_group, serializable_dequeue_contention,
    /// read_past_dequeue_scaling or tri_acid_end_to_end.
    scenario: String,
    #[arg(long, default_value_t = 1000)]
    messages: usize,
    #[arg(long, default_value_t = 64)]
    payload_bytes: usize,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Simulated work per dequeued message, in microseconds.
    #[arg(long, default_value_t = 1000)]
    work_us: u64,
    /// Simulated log sync time in memory mode, in microseconds.
    #[arg(long, default_value_t = 200)]
    sync_us: u64,
    /// Use files under this directory instead of memory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let scenario: Scenario = match args.scenario.parse() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let params = BenchParams {
        messages: args.messages,
        payload_bytes: args.payload_bytes,
        concurrency: args.concurrency,
        seed: args.seed,
        work: Duration::from_micros(args.work_us),
        data_dir: args.data,
        sync_latency: Duration::from_micros(args.sync_us),
    };
    match run_scenario(scenario, &params) {
        Ok(r) if args.json => {
            println!("{}", serde_json::to_string(&r).expect("report serializes"));
            ExitCode::SUCCESS
        }
        Ok(r) => {
            println!("{r}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.code() == qdb::ErrorCode::Usage { 2 } else { 1 })
        }
    }
}
