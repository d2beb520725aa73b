//! An application reporting its own progress through the client library.

use std::collections::BTreeMap;
use std::sync::Arc;

use lms::router::{http, JobSignal, RouteConfig, Router};
use lms::tsstore::Store;
use lms::usermetric::{Client, ClientConfig};

fn main() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let store = Arc::new(Store::in_memory());
    let router = Arc::new(Router::with_store(
        RouteConfig::default(),
        Arc::clone(&store),
    ));
    router
        .handle_job_signal(JobSignal::start("md-1", "bob", ["node7"]), lms::now_ns())
        .unwrap();
    let server = rt
        .block_on(http::start(router, Some("127.0.0.1:0".parse().unwrap())))
        .unwrap();

    let client =
        Client::new(ClientConfig::new(server.url(), "lms").tag("hostname", "node7")).unwrap();
    let none = BTreeMap::new();
    client.add_event("job_phase", "start", &none, None).unwrap();
    // Unstamped lines take the receipt time, so repeats of one series
    // within a batch would collapse into a single point.
    for step in 0..5 {
        let now = Some(lms::now_ns());
        client
            .add_value("iter_time_100", 3.0 + step as f64 * 0.1, &none, now)
            .unwrap();
        client
            .add_value("temperature", 300.0 - step as f64, &none, now)
            .unwrap();
    }
    client.add_event("job_phase", "end", &none, None).unwrap();
    println!("sent {} lines", client.close().unwrap());

    let by_job = BTreeMap::from([("jobid".to_owned(), "md-1".to_owned())]);
    for row in store.rows("lms", &by_job).unwrap() {
        println!("{}", lms::lineproto::serialize(&row).unwrap());
    }
    server.shutdown();
}
