//! Forward mode against a backend that goes away and comes back.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use lms::router::{BackendConfig, RouteConfig, Router};
use lms::tsstore::{BoxFuture, ForwardError, ForwardTarget};

#[derive(Default)]
struct Flaky {
    down: AtomicBool,
    received: Mutex<Vec<String>>,
}

impl ForwardTarget for Flaky {
    fn forward<'a>(
        &'a self,
        _db: &'a str,
        batch: &'a str,
    ) -> BoxFuture<'a, Result<(), ForwardError>> {
        Box::pin(async move {
            if self.down.load(Ordering::SeqCst) {
                return Err(ForwardError::Unreachable("backend down".into()));
            }
            self.received.lock().unwrap().push(batch.to_owned());
            Ok(())
        })
    }
}

fn main() {
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .unwrap();
    let target = Arc::new(Flaky::default());
    let config = RouteConfig {
        backend: BackendConfig::Forward {
            url: "http://backend:8086".into(),
            buffer_capacity: 3,
            retry_interval_ms: 100,
        },
        ..RouteConfig::default()
    };
    let router = Router::with_forward_target(config, target.clone());

    target.down.store(true, Ordering::SeqCst);
    for i in 1..=5 {
        router
            .handle_write("lms", &format!("cpu_load,hostname=n1 value={i} {i}"), 0)
            .unwrap();
    }
    println!("while down: {:?}", rt.block_on(router.flush_pending()));
    println!("buffer: {:?}", router.retry_buffer().stats());

    target.down.store(false, Ordering::SeqCst);
    println!("after recovery: {:?}", rt.block_on(router.flush_pending()));
    for batch in target.received.lock().unwrap().iter() {
        println!("  delivered {batch}");
    }
}
