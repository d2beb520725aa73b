use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Canonical job-level resource metrics. Each is stored as a measurement of
/// the same name with a numeric `value` field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaMetric {
    CpuLoad,
    Ipc,
    FlopsDp,
    MemAllocated,
    MemBw,
    NetIo,
    FileIo,
}

impl SchemaMetric {
    pub const ALL: [SchemaMetric; 7] = [
        SchemaMetric::CpuLoad,
        SchemaMetric::Ipc,
        SchemaMetric::FlopsDp,
        SchemaMetric::MemAllocated,
        SchemaMetric::MemBw,
        SchemaMetric::NetIo,
        SchemaMetric::FileIo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemaMetric::CpuLoad => "cpu_load",
            SchemaMetric::Ipc => "ipc",
            SchemaMetric::FlopsDp => "flops_dp",
            SchemaMetric::MemAllocated => "mem_allocated",
            SchemaMetric::MemBw => "mem_bw",
            SchemaMetric::NetIo => "net_io",
            SchemaMetric::FileIo => "file_io",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            SchemaMetric::CpuLoad => "cores",
            SchemaMetric::Ipc => "instr/cycle",
            SchemaMetric::FlopsDp => "MFlop/s",
            SchemaMetric::MemAllocated => "bytes",
            SchemaMetric::MemBw | SchemaMetric::NetIo | SchemaMetric::FileIo => "MByte/s",
        }
    }

    pub fn is_schema_name(name: &str) -> bool {
        name.parse::<SchemaMetric>().is_ok()
    }
}

impl fmt::Display for SchemaMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown metric {0:?}")]
pub struct UnknownMetric(pub String);

impl FromStr for SchemaMetric {
    type Err = UnknownMetric;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SchemaMetric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| UnknownMetric(s.to_owned()))
    }
}
