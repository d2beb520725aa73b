//! Segment files: a sequence of records, each a little-endian `u32` byte
//! length followed by one canonical line-protocol line. The manifest is a
//! plain-text list of database names, one per line.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use super::StoreError;
use crate::lineproto::{self, Metric};

pub const MANIFEST: &str = "MANIFEST";

pub fn segment_path(dir: &Path, db: &str) -> PathBuf {
    dir.join(format!("{db}.seg"))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<String>, StoreError> {
    let path = dir.join(MANIFEST);
    let file = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut names = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        let name = line.trim();
        if !name.is_empty() && !names.iter().any(|n| n == name) {
            names.push(name.to_owned());
        }
    }
    Ok(names)
}

pub fn append_manifest(dir: &Path, db: &str) -> Result<(), StoreError> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join(MANIFEST))?;
    writeln!(f, "{db}")?;
    f.sync_data()?;
    Ok(())
}

/// Reads every complete record. A torn record at the tail (crash during
/// append) is cut off so later appends start on a record boundary.
pub fn replay(path: &Path) -> Result<Vec<Metric>, StoreError> {
    let mut bytes = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut bytes)?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    }
    let corrupt = |reason: String| StoreError::Corrupt {
        path: path.to_owned(),
        reason,
    };
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let Some(header) = bytes.get(pos..pos + 4) else {
            break;
        };
        let len = u32::from_le_bytes(header.try_into().expect("4 bytes")) as usize;
        let Some(record) = bytes.get(pos + 4..pos + 4 + len) else {
            break;
        };
        let line =
            std::str::from_utf8(record).map_err(|e| corrupt(format!("record at {pos}: {e}")))?;
        let metric =
            lineproto::parse_line(line).map_err(|e| corrupt(format!("record at {pos}: {e}")))?;
        if metric.timestamp.is_none() {
            return Err(corrupt(format!("record at {pos} is unstamped")));
        }
        out.push(metric);
        pos += 4 + len;
    }
    if pos < bytes.len() {
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(pos as u64)?;
    }
    Ok(out)
}

pub struct SegmentWriter {
    file: File,
    sync: bool,
    buf: Vec<u8>,
}

impl SegmentWriter {
    pub fn open(path: &Path, sync: bool) -> Result<Self, StoreError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(SegmentWriter {
            file,
            sync,
            buf: Vec::new(),
        })
    }

    pub fn append(&mut self, metrics: &[Metric]) -> Result<(), StoreError> {
        self.buf.clear();
        for m in metrics {
            let line = m.to_string();
            let len = u32::try_from(line.len())
                .map_err(|_| StoreError::InvalidPoint("record longer than 4 GiB".into()))?;
            self.buf.extend_from_slice(&len.to_le_bytes());
            self.buf.extend_from_slice(line.as_bytes());
        }
        self.file.write_all(&self.buf)?;
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }
}
