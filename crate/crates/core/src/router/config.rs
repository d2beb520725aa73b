use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const ENV_LISTEN: &str = "ROUTER_LISTEN";
pub const ENV_BACKEND_URL: &str = "ROUTER_BACKEND_URL";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing router config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid router config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Embedded {
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default)]
        sync: bool,
    },
    Forward {
        url: String,
        #[serde(default = "default_buffer_capacity")]
        buffer_capacity: usize,
        #[serde(default = "default_retry_interval_ms")]
        retry_interval_ms: u64,
    },
}

fn default_buffer_capacity() -> usize {
    1024
}

fn default_retry_interval_ms() -> u64 {
    1000
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Embedded {
            dir: None,
            sync: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouteConfig {
    pub listen: SocketAddr,
    pub global_db: String,
    pub per_user_duplication: bool,
    pub user_db_pattern: String,
    pub bus_enabled: bool,
    /// Address of the TCP bus transport; `None` keeps the bus in-process.
    pub bus_listen: Option<SocketAddr>,
    pub bus_queue_capacity: usize,
    /// Keep incoming `jobid`/`user` tags instead of re-enriching. For a router
    /// that receives already-enriched rows from an upstream router.
    pub trust_job_tags: bool,
    pub backend: BackendConfig,
}

impl Default for RouteConfig {
    fn default() -> Self {
        RouteConfig {
            listen: "127.0.0.1:8086".parse().expect("addr"),
            global_db: "lms".into(),
            per_user_duplication: false,
            user_db_pattern: "u_{user}".into(),
            bus_enabled: true,
            bus_listen: None,
            bus_queue_capacity: 4096,
            trust_job_tags: false,
            backend: BackendConfig::default(),
        }
    }
}

impl RouteConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: RouteConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Loads a config file and applies `ROUTER_LISTEN` / `ROUTER_BACKEND_URL`.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let mut config = Self::from_toml(&text)?;
        config.apply_env(|k| std::env::var(k).ok())?;
        Ok(config)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(listen) = var(ENV_LISTEN) {
            self.listen = listen
                .parse()
                .map_err(|e| ConfigError::Invalid(format!("{ENV_LISTEN}={listen}: {e}")))?;
        }
        if let Some(url) = var(ENV_BACKEND_URL) {
            self.backend = match std::mem::take(&mut self.backend) {
                BackendConfig::Forward {
                    buffer_capacity,
                    retry_interval_ms,
                    ..
                } => BackendConfig::Forward {
                    url,
                    buffer_capacity,
                    retry_interval_ms,
                },
                BackendConfig::Embedded { .. } => BackendConfig::Forward {
                    url,
                    buffer_capacity: default_buffer_capacity(),
                    retry_interval_ms: default_retry_interval_ms(),
                },
            };
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.global_db.is_empty() {
            return Err(ConfigError::Invalid("global_db is empty".into()));
        }
        if self.per_user_duplication && self.user_db_pattern.matches("{user}").count() != 1 {
            return Err(ConfigError::Invalid(format!(
                "user_db_pattern {:?} must contain {{user}} exactly once",
                self.user_db_pattern
            )));
        }
        if let BackendConfig::Forward {
            url,
            buffer_capacity,
            ..
        } = &self.backend
        {
            if url.is_empty() {
                return Err(ConfigError::Invalid("forward backend without url".into()));
            }
            if *buffer_capacity == 0 {
                return Err(ConfigError::Invalid(
                    "buffer_capacity must be at least 1".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn user_db(&self, user: &str) -> String {
        self.user_db_pattern.replacen("{user}", user, 1)
    }
}
