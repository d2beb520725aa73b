//! Replays a scenario file against a running router.
//!
//! ```text
//! cargo run --example simharness -- run scenarios/node_wide_break.toml --endpoint http://127.0.0.1:8086 --time-scale 60
//! ```

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use lms::simharness::{run_scenario, HttpSink, RunOptions, Scenario};

#[derive(Parser)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stream a scenario's metrics and job signals to a router.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value = "http://127.0.0.1:8086")]
        endpoint: String,
        /// Wall-clock speedup. Omitted: send everything without pausing.
        #[arg(long)]
        time_scale: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Timestamp of offset zero in ns; defaults to now.
        #[arg(long)]
        epoch_ns: Option<i64>,
    },
}

fn main() {
    let Command::Run {
        scenario,
        endpoint,
        time_scale,
        seed,
        epoch_ns,
    } = Cli::parse().command;
    let result = Scenario::load(&scenario)
        .map_err(|e| e.to_string())
        .and_then(|s| {
            let options = RunOptions {
                time_scale,
                seed,
                epoch_ns: epoch_ns.unwrap_or_else(lms::now_ns),
            };
            run_scenario(&s, &HttpSink::new(&endpoint), &options).map_err(|e| e.to_string())
        });
    match result {
        Ok(report) => println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report json")
        ),
        Err(e) => {
            eprintln!("simharness: {e}");
            std::process::exit(1);
        }
    }
}
