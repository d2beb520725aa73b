//! Client for any endpoint speaking the router's `POST /write?db=` interface.

use std::future::Future;
use std::pin::Pin;
use std::time::Duration;

pub type BoxFuture<'a, T> = Pin<Box<dyn Future<Output = T> + Send + 'a>>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ForwardError {
    /// Connection failure, timeout or a 5xx answer. Worth retrying.
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    /// The backend refused the batch (4xx). Retrying cannot help.
    #[error("backend rejected batch with status {status}: {body}")]
    RemoteRejected { status: u16, body: String },
}

/// Destination of forwarded batches. Implemented by [`HttpForwarder`]; tests
/// plug in fault-injecting targets.
pub trait ForwardTarget: Send + Sync {
    fn forward<'a>(
        &'a self,
        db: &'a str,
        batch: &'a str,
    ) -> BoxFuture<'a, Result<(), ForwardError>>;
}

pub struct HttpForwarder {
    client: reqwest::Client,
    base_url: String,
}

impl HttpForwarder {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self::with_timeout(base_url, Duration::from_secs(10))
    }

    pub fn with_timeout(base_url: impl Into<String>, timeout: Duration) -> Self {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .expect("http client");
        HttpForwarder {
            client,
            base_url: base_url.into().trim_end_matches('/').to_owned(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub async fn forward(&self, db: &str, batch: &str) -> Result<(), ForwardError> {
        let resp = self
            .client
            .post(format!("{}/write", self.base_url))
            .query(&[("db", db)])
            .body(batch.to_owned())
            .send()
            .await
            .map_err(|e| ForwardError::Unreachable(e.to_string()))?;
        let status = resp.status();
        if status.is_success() {
            Ok(())
        } else if status.is_client_error() {
            let body = resp.text().await.unwrap_or_default();
            Err(ForwardError::RemoteRejected {
                status: status.as_u16(),
                body,
            })
        } else {
            Err(ForwardError::Unreachable(format!("status {status}")))
        }
    }
}

impl ForwardTarget for HttpForwarder {
    fn forward<'a>(
        &'a self,
        db: &'a str,
        batch: &'a str,
    ) -> BoxFuture<'a, Result<(), ForwardError>> {
        Box::pin(HttpForwarder::forward(self, db, batch))
    }
}
