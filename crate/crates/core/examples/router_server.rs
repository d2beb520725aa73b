//! Job-aware router over HTTP.
//!
//! ```text
//! cargo run --example router_server -- --config config/router.toml --dashboards /tmp/dash
//! ```
//!
//! `ROUTER_LISTEN` and `ROUTER_BACKEND_URL` override the file.

use std::path::PathBuf;
use std::sync::Arc;

use clap::Parser;
use lms::dashgen::{AgentConfig, DashboardAgent};
use lms::router::{http, RouteConfig, Router};

#[derive(Parser)]
struct Args {
    /// Router configuration (TOML). Defaults apply without it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write per-job dashboards here. Needs the embedded backend.
    #[arg(long)]
    dashboards: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    tracing_subscriber::fmt::init();
    let args = Args::parse();
    let config = match &args.config {
        Some(path) => RouteConfig::load(path)?,
        None => {
            let mut config = RouteConfig::default();
            config.apply_env(|k| std::env::var(k).ok())?;
            config
        }
    };
    let router = Arc::new(Router::new(config)?);
    let _agent = match (&args.dashboards, router.store()) {
        (Some(dir), Some(store)) => {
            let agent =
                DashboardAgent::spawn(AgentConfig::new(dir, router.config()), Arc::clone(store));
            router.add_hook(agent.clone());
            Some(agent)
        }
        (Some(_), None) => return Err("--dashboards needs the embedded backend".into()),
        _ => None,
    };
    let running = http::start(Arc::clone(&router), None).await?;
    println!("listening on {}", running.url());
    if let Some(bus) = running.bus_addr {
        println!("bus on tcp://{bus}");
    }
    std::future::pending::<()>().await;
    Ok(())
}
