//! Decision-tree classification of three jobs with distinct behaviour.

use std::path::Path;
use std::sync::Arc;

use lms::analysis::{compute_job_stats, AnalysisConfig};
use lms::router::{RouteConfig, Router};
use lms::simharness::{run_scenario, RouterSink, RunOptions, Scenario};
use lms::tsstore::Store;

fn main() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/patterns.toml");
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

    let config = AnalysisConfig::builtin();
    let tree = config.tree.as_ref().expect("builtin tree");
    for id in ["j-healthy", "j-idle", "j-membound"] {
        let job = router.tag_store().job(id).unwrap();
        let stats = compute_job_stats(&job, &store, "lms", &tree.required_metrics(), 0).unwrap();
        let (label, path) = tree.trace(&stats).unwrap();
        println!("{id}: {label}");
        for step in path {
            println!("  {step:?}");
        }
    }
}
