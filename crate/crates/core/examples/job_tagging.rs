//! Job signals and metric enrichment through an in-process router.

use std::sync::Arc;

use lms::router::{JobSignal, RouteConfig, Router};
use lms::tsstore::Store;

fn main() {
    let store = Arc::new(Store::in_memory());
    let config = RouteConfig {
        per_user_duplication: true,
        ..RouteConfig::default()
    };
    let router = Router::with_store(config, Arc::clone(&store));

    router
        .handle_write("lms", "cpu_load,hostname=n1 value=0.1 1", 1)
        .unwrap();
    router
        .handle_job_signal(JobSignal::start("42", "alice", ["n1", "n2"]), 10)
        .unwrap();
    let outcome = router
        .handle_write(
            "lms",
            "cpu_load,hostname=n1 value=0.9 20\ncpu_load,hostname=n3 value=0.2 20",
            20,
        )
        .unwrap();
    println!(
        "accepted {} rows, {} copied to user dbs",
        outcome.rows, outcome.duplicated
    );
    router.handle_job_signal(JobSignal::end("42"), 30).unwrap();

    for db in store.databases() {
        println!("[{db}]");
        for row in store.rows(&db, &Default::default()).unwrap() {
            println!("  {}", lms::lineproto::serialize(&row).unwrap());
        }
    }
    println!("{:?}", router.health());
}
