//! `usermetric` command: sends one value or event line immediately.

use std::collections::BTreeMap;
use std::ffi::OsString;

use clap::{ArgGroup, Parser};

use super::{
    build_line, parse_tag, parse_tag_list, ClientConfig, ClientError, HttpTransport, Transport,
    DEFAULT_DB, DEFAULT_URL, ENV_DB, ENV_TAGS, ENV_URL, EVENT_FIELD, VALUE_FIELD,
};
use crate::lineproto::FieldValue;

#[derive(Debug, Parser)]
#[command(
    name = "usermetric",
    about = "Send an application metric or event to the monitoring router"
)]
#[command(group(ArgGroup::new("payload").required(true).args(["value", "event"])))]
pub struct Args {
    /// Router base URL.
    #[arg(long, env = ENV_URL, default_value = DEFAULT_URL)]
    pub url: String,
    /// Target database.
    #[arg(long, env = ENV_DB, default_value = DEFAULT_DB)]
    pub db: String,
    /// Extra tag `k=v`; repeatable. Adds to `USERMETRIC_TAGS`.
    #[arg(long = "tag", value_name = "K=V", value_parser = tag_arg)]
    pub tags: Vec<(String, String)>,
    /// Numeric value, sent as field `value`.
    #[arg(long, allow_negative_numbers = true)]
    pub value: Option<f64>,
    /// Event text, sent as field `text`.
    #[arg(long)]
    pub event: Option<String>,
    /// Timestamp in ns since the epoch; the router stamps the line otherwise.
    #[arg(long)]
    pub timestamp: Option<i64>,
    /// Measurement name.
    pub name: String,
}

fn tag_arg(s: &str) -> Result<(String, String), String> {
    parse_tag(s).map_err(|e| e.to_string())
}

impl Args {
    /// The line this invocation sends.
    pub fn line(&self) -> Result<String, ClientError> {
        let mut defaults = ClientConfig::new(&self.url, &self.db).default_tags;
        if let Ok(env_tags) = std::env::var(ENV_TAGS) {
            defaults.extend(parse_tag_list(&env_tags)?);
        }
        let tags: BTreeMap<String, String> = self.tags.iter().cloned().collect();
        let (field, value) = match (&self.value, &self.event) {
            (Some(v), _) => (VALUE_FIELD, FieldValue::Float(*v)),
            (None, Some(text)) => (EVENT_FIELD, FieldValue::String(text.clone())),
            (None, None) => unreachable!("clap requires --value or --event"),
        };
        build_line(&defaults, &self.name, field, value, &tags, self.timestamp)
    }
}

/// Sends the line for `args` through `transport` and returns it.
pub fn send(args: &Args, transport: &dyn Transport) -> Result<String, ClientError> {
    let line = args.line()?;
    transport.send(&args.db, &format!("{line}\n"))?;
    Ok(line)
}

/// Process entry point; returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(args) => args,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = HttpTransport::new(&args.url, std::time::Duration::from_secs(10))
        .and_then(|transport| send(&args, &transport));
    match result {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("usermetric: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Args, clap::Error> {
        Args::try_parse_from(std::iter::once("usermetric").chain(args.iter().copied()))
    }

    #[test]
    fn event_and_value() {
        let a = parse(&["--event", "miniMD start", "job_phase"]).unwrap();
        assert!(a.line().unwrap().starts_with("job_phase,"));
        assert!(a.line().unwrap().ends_with(r#" text="miniMD start""#));
        let a = parse(&["--value", "300.5", "--tag", "sensor=cpu0", "temperature"]).unwrap();
        let line = a.line().unwrap();
        assert!(line.contains(",sensor=cpu0"), "{line}");
        assert!(line.ends_with(" value=300.5"));
    }

    #[test]
    fn payload_required_and_exclusive() {
        assert!(parse(&["temperature"]).is_err());
        assert!(parse(&["--value", "1", "--event", "x", "t"]).is_err());
        assert_eq!(run(["usermetric", "temperature"]), 2);
    }

    #[test]
    fn bad_tag() {
        assert!(parse(&["--value", "1", "--tag", "novalue", "t"]).is_err());
    }

    #[test]
    fn unreachable_endpoint_is_nonzero() {
        let code = run([
            "usermetric",
            "--url",
            "http://127.0.0.1:9",
            "--value",
            "1",
            "t",
        ]);
        assert_eq!(code, 1);
    }
}
