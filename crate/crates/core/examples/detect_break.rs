//! Threshold/timeout detection on a simulated job whose FP rate collapses.

use std::path::Path;
use std::sync::Arc;

use lms::analysis::AnalysisConfig;
use lms::router::{RouteConfig, Router};
use lms::simharness::{run_scenario, RouterSink, RunOptions, Scenario};
use lms::tsstore::Store;

fn main() {
    let scenarios = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    for (file, job) in [
        ("break_9min.toml", "j-9min"),
        ("break_11min.toml", "j-11min"),
    ] {
        let store = Arc::new(Store::in_memory());
        let router = Arc::new(Router::with_store(
            RouteConfig::default(),
            Arc::clone(&store),
        ));
        let scenario = Scenario::load(&scenarios.join(file)).unwrap();
        run_scenario(
            &scenario,
            &RouterSink(Arc::clone(&router)),
            &RunOptions::virtual_time(0),
        )
        .unwrap();
        let job = router.tag_store().job(job).unwrap();
        let table = AnalysisConfig::builtin()
            .evaluate(&job, &store, "lms", 0)
            .unwrap();
        let findings: Vec<_> = table
            .rows
            .iter()
            .flat_map(|r| r.cells.iter().flat_map(|c| &c.findings))
            .collect();
        println!("{file}: {} finding(s)", findings.len());
        for f in findings {
            println!(
                "  {} on {}: {:.1} min, mean {:.3} over {} samples",
                f.rule_id,
                f.hostname.as_deref().unwrap_or("?"),
                (f.t_end - f.t_start) as f64 / 60e9,
                f.evidence.mean,
                f.evidence.samples
            );
        }
    }
}
