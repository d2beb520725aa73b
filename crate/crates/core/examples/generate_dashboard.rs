//! Writes a job dashboard and prints its summary.

use std::path::Path;
use std::sync::Arc;

use lms::dashgen::{generate, AgentConfig};
use lms::router::{RouteConfig, Router};
use lms::simharness::{run_scenario, RouterSink, RunOptions, Scenario};
use lms::tsstore::Store;

fn main() {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "dashboards".into());
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/node_wide_break.toml");
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

    let job = router.tag_store().job("j-break").unwrap();
    let generated = generate(&AgentConfig::new(&out, router.config()), &store, &job).unwrap();
    println!("wrote {}", generated.path.display());
    println!("{:#?}", generated.dashboard.summary);
    println!(
        "worst cell: {}",
        generated.evaluation.worst_status().as_str()
    );
}
