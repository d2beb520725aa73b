mod common;

use std::collections::BTreeMap;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::filter;
use lms::lineproto::{parse_batch, FieldValue};
use lms::router::http::{self, RunningRouter};
use lms::router::{JobSignal, RouteConfig};
use lms::tsstore::Store;
use lms::usermetric::{Client, ClientConfig};

struct Harness {
    _rt: tokio::runtime::Runtime,
    server: Option<RunningRouter>,
    store: Arc<Store>,
}

impl Harness {
    fn start() -> Self {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        let (router, store) = common::router(RouteConfig::default());
        router
            .handle_job_signal(JobSignal::start("j-app", "alice", ["node7"]), 0)
            .unwrap();
        let server = rt
            .block_on(http::start(router, Some("127.0.0.1:0".parse().unwrap())))
            .unwrap();
        Harness {
            _rt: rt,
            server: Some(server),
            store,
        }
    }

    fn url(&self) -> String {
        self.server.as_ref().unwrap().url()
    }

    fn router(&self) -> &lms::router::Router {
        &self.server.as_ref().unwrap().router
    }

    fn rows(&self, measurement: &str) -> Vec<lms::lineproto::Metric> {
        if !self.store.has_database("lms") {
            return Vec::new();
        }
        self.store
            .rows("lms", &filter(&[("jobid", "j-app")]))
            .unwrap()
            .into_iter()
            .filter(|m| m.measurement == measurement)
            .collect()
    }

    fn wait_rows(&self, measurement: &str, n: usize) -> Vec<lms::lineproto::Metric> {
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            let rows = self.rows(measurement);
            if rows.len() >= n || Instant::now() > deadline {
                return rows;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }
}

impl Drop for Harness {
    fn drop(&mut self) {
        if let Some(s) = self.server.take() {
            s.shutdown();
        }
    }
}

fn client_config(url: &str) -> ClientConfig {
    let mut config = ClientConfig::new(url, "lms")
        .tag("hostname", "node7")
        .tag("app", "minimd");
    config.flush_interval = Duration::from_secs(3600);
    config
}

#[test]
fn threshold_flush_preserves_order_and_tags() {
    let h = Harness::start();
    let mut sub = h.router().subscribe("metrics.").unwrap();
    let client = Client::new(client_config(&h.url())).unwrap();
    for i in 0..99 {
        client
            .add_value(
                "pressure",
                i as f64,
                &BTreeMap::from([("tid".into(), "0".into())]),
                Some(i),
            )
            .unwrap();
    }
    std::thread::sleep(Duration::from_millis(200));
    assert_eq!(h.rows("pressure").len(), 0, "flushed before the threshold");
    assert_eq!(client.stats().buffered, 99);
    client
        .add_value(
            "pressure",
            99.0,
            &BTreeMap::from([("tid".into(), "0".into())]),
            Some(99),
        )
        .unwrap();
    let rows = h.wait_rows("pressure", 100);
    assert_eq!(rows.len(), 100);
    for r in &rows {
        assert_eq!(r.tags["hostname"], "node7");
        assert_eq!(r.tags["app"], "minimd");
        assert_eq!(r.tags["tid"], "0");
        assert_eq!(r.tags["user"], "alice");
    }
    let sent: Vec<f64> = sub
        .drain()
        .iter()
        .flat_map(|m| parse_batch(&m.payload).metrics)
        .filter(|m| m.measurement == "pressure")
        .map(|m| m.fields["value"].as_f64().unwrap())
        .collect();
    assert_eq!(sent, (0..100).map(|i| i as f64).collect::<Vec<_>>());
    let stats = client.stats();
    assert_eq!(
        (stats.sent_lines, stats.sent_batches, stats.buffered),
        (100, 1, 0)
    );
}

#[test]
fn drop_makes_final_flush_and_threads_share_a_client() {
    let h = Harness::start();
    let client = Arc::new(Client::new(client_config(&h.url())).unwrap());
    std::thread::scope(|s| {
        for t in 0..4 {
            let client = Arc::clone(&client);
            s.spawn(move || {
                for i in 0..30 {
                    let tags = BTreeMap::from([("tid".into(), t.to_string())]);
                    client
                        .add_value("iter_time_100", 3.2, &tags, Some(i))
                        .unwrap();
                }
            });
        }
    });
    client
        .add_event("job_phase", "end", &BTreeMap::new(), Some(1_000))
        .unwrap();
    drop(Arc::into_inner(client).unwrap());
    assert_eq!(h.rows("iter_time_100").len(), 120);
    let events = h.rows("job_phase");
    assert_eq!(events.len(), 1);
    assert_eq!(events[0].fields["text"], FieldValue::String("end".into()));
}

#[test]
fn unreachable_endpoint_keeps_buffer() {
    let client = Client::new(client_config("http://127.0.0.1:1")).unwrap();
    client
        .add_value("energy", 1.0, &BTreeMap::new(), None)
        .unwrap();
    assert!(client.flush().is_err());
    assert_eq!(client.stats().buffered, 1);
    assert_eq!(
        client.buffered()[0],
        "energy,app=minimd,hostname=node7 value=1"
    );
}

fn cli(url: &str) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_usermetric"));
    cmd.env("USERMETRIC_URL", url)
        .env("USERMETRIC_TAGS", "hostname=node7,app=minimd")
        .env_remove("USERMETRIC_DB");
    cmd
}

#[test]
fn cli_sends_values_and_events() {
    let h = Harness::start();
    let status = cli(&h.url())
        .args(["--event", "start", "job_phase"])
        .status()
        .unwrap();
    assert!(status.success());
    let status = cli(&h.url())
        .args(["--value", "300.5", "--tag", "sensor=cpu0", "temperature"])
        .status()
        .unwrap();
    assert!(status.success());
    let status = cli(&h.url())
        .args(["--value", "-2.5", "energy"])
        .status()
        .unwrap();
    assert!(status.success());

    let phase = h.rows("job_phase");
    assert_eq!(phase.len(), 1);
    assert_eq!(phase[0].fields["text"], FieldValue::String("start".into()));
    let temp = h.rows("temperature");
    assert_eq!(temp[0].fields["value"], FieldValue::Float(300.5));
    assert_eq!(temp[0].tags["sensor"], "cpu0");
    assert_eq!(h.rows("energy")[0].fields["value"], FieldValue::Float(-2.5));
}

#[test]
fn cli_usage_and_network_errors() {
    let missing = cli("http://127.0.0.1:1")
        .arg("temperature")
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert!(!missing.stderr.is_empty());
    let both = cli("http://127.0.0.1:1")
        .args(["--value", "1", "--event", "x", "temperature"])
        .output()
        .unwrap();
    assert_eq!(both.status.code(), Some(2));
    let down = cli("http://127.0.0.1:1")
        .args(["--value", "1", "temperature"])
        .output()
        .unwrap();
    assert_eq!(down.status.code(), Some(1));
}
