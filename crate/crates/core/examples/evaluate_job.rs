//! Per-node evaluation table for a job with one idle node.

use std::path::Path;
use std::sync::Arc;

use lms::analysis::AnalysisConfig;
use lms::router::{RouteConfig, Router};
use lms::simharness::{run_scenario, RouterSink, RunOptions, Scenario};
use lms::tsstore::Store;

fn main() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/idle_node.toml");
    let store = Arc::new(Store::in_memory());
    let router = Arc::new(Router::with_store(
        RouteConfig::default(),
        Arc::clone(&store),
    ));
    run_scenario(
        &Scenario::load(&path).unwrap(),
        &RouterSink(Arc::clone(&router)),
        &RunOptions::virtual_time(0),
    )
    .unwrap();

    let job = router.tag_store().job("j-idle").unwrap();
    let table = AnalysisConfig::builtin()
        .evaluate(&job, &store, "lms", 0)
        .unwrap();
    for row in table.text_grid() {
        println!(
            "{}",
            row.iter().map(|c| format!("{c:<24}")).collect::<String>()
        );
    }
    println!("worst: {}", table.worst_status().as_str());
}
