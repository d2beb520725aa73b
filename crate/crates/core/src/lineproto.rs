//! Line protocol parser and canonical serializer.
//!
//! ```text
//! <measurement>[,<tag_key>=<tag_value>...] <field_key>=<field_value>[,...] [<timestamp>]
//! ```
//!
//! Escaping:
//! - measurement: `,` and space
//! - tag keys, tag values, field keys: `,`, `=` and space
//! - string field values: double-quoted, `"` and `\` backslash-escaped
//!
//! A backslash followed by a character that needs no escaping is kept
//! literally. `\\` collapses to a single backslash, which lets the serializer
//! represent values that end in a backslash. Integers carry a trailing `i`,
//! booleans accept `t`/`T`/`true`/`True`/`f`/`F`/`false`/`False`, and the
//! timestamp is a signed 64-bit nanosecond count.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LineError {
    #[error("malformed line at byte {pos}: {reason}")]
    MalformedLine { pos: usize, reason: &'static str },
    #[error("invalid metric: {0}")]
    InvalidMetric(String),
}

impl LineError {
    fn malformed(pos: usize, reason: &'static str) -> Self {
        LineError::MalformedLine { pos, reason }
    }
}

/// A typed field value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Float(f64),
    Integer(i64),
    Boolean(bool),
    String(String),
}

impl FieldValue {
    /// Numeric view, `None` for booleans and strings.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            FieldValue::Float(v) => Some(*v),
            FieldValue::Integer(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            FieldValue::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FieldValue::Float(_) => "float",
            FieldValue::Integer(_) => "integer",
            FieldValue::Boolean(_) => "boolean",
            FieldValue::String(_) => "string",
        }
    }
}

impl From<f64> for FieldValue {
    fn from(v: f64) -> Self {
        FieldValue::Float(v)
    }
}

impl From<i64> for FieldValue {
    fn from(v: i64) -> Self {
        FieldValue::Integer(v)
    }
}

impl From<bool> for FieldValue {
    fn from(v: bool) -> Self {
        FieldValue::Boolean(v)
    }
}

impl From<&str> for FieldValue {
    fn from(v: &str) -> Self {
        FieldValue::String(v.to_owned())
    }
}

impl From<String> for FieldValue {
    fn from(v: String) -> Self {
        FieldValue::String(v)
    }
}

/// One measurement point.
///
/// `timestamp` is `None` for lines received without one; the router stamps
/// those at receipt.
#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub measurement: String,
    pub tags: BTreeMap<String, String>,
    pub fields: BTreeMap<String, FieldValue>,
    pub timestamp: Option<i64>,
}

impl Metric {
    pub fn new(measurement: impl Into<String>) -> Self {
        Metric {
            measurement: measurement.into(),
            tags: BTreeMap::new(),
            fields: BTreeMap::new(),
            timestamp: None,
        }
    }

    pub fn tag(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.tags.insert(key.into(), value.into());
        self
    }

    pub fn field(mut self, key: impl Into<String>, value: impl Into<FieldValue>) -> Self {
        self.fields.insert(key.into(), value.into());
        self
    }

    pub fn at(mut self, timestamp: i64) -> Self {
        self.timestamp = Some(timestamp);
        self
    }

    pub fn hostname(&self) -> Option<&str> {
        self.tags.get("hostname").map(String::as_str)
    }

    /// Checks everything the serializer needs to emit a line that parses back
    /// to this exact metric.
    pub fn validate(&self) -> Result<(), LineError> {
        let bad = |what: String| Err(LineError::InvalidMetric(what));
        if self.measurement.is_empty() {
            return bad("empty measurement".into());
        }
        if self.measurement.starts_with('#') {
            return bad("measurement must not start with '#'".into());
        }
        check_text("measurement", &self.measurement)?;
        if self.fields.is_empty() {
            return bad("empty field set".into());
        }
        for (k, v) in &self.tags {
            if k.is_empty() || v.is_empty() {
                return bad(format!("empty tag key or value ({k:?}={v:?})"));
            }
            check_text("tag key", k)?;
            check_text("tag value", v)?;
        }
        for (k, v) in &self.fields {
            if k.is_empty() {
                return bad("empty field key".into());
            }
            check_text("field key", k)?;
            match v {
                FieldValue::Float(f) if !f.is_finite() => {
                    return bad(format!("non-finite float in field {k:?}"));
                }
                FieldValue::String(s) => check_text("string field", s)?,
                _ => {}
            }
        }
        Ok(())
    }
}

fn check_text(what: &str, s: &str) -> Result<(), LineError> {
    if s.contains('\n') {
        return Err(LineError::InvalidMetric(format!(
            "{what} contains a line break"
        )));
    }
    Ok(())
}

impl fmt::Display for Metric {
    /// Canonical form without validation; use [`serialize`] for checked output.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        write_canonical(&mut out, self);
        f.write_str(&out)
    }
}

/// Result of parsing a batch: every valid metric in order, plus the index and
/// error of each rejected line.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Batch {
    pub metrics: Vec<Metric>,
    pub errors: Vec<(usize, LineError)>,
    /// Non-blank, non-comment lines seen.
    pub lines: usize,
}

/// Parses a newline-separated body. Blank lines and `#` comments are skipped;
/// a bad line is reported and never discards the rest of the batch.
pub fn parse_batch(body: &str) -> Batch {
    let mut batch = Batch::default();
    for (idx, raw) in body.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if is_skippable(line) {
            continue;
        }
        batch.lines += 1;
        match parse_line(line) {
            Ok(m) => batch.metrics.push(m),
            Err(e) => batch.errors.push((idx, e)),
        }
    }
    batch
}

fn is_skippable(line: &str) -> bool {
    line.starts_with('#') || line.bytes().all(|b| b == b' ' || b == b'\t')
}

/// Parses exactly one line (no trailing newline).
pub fn parse_line(line: &str) -> Result<Metric, LineError> {
    let mut p = Parser {
        src: line.as_bytes(),
        line,
        pos: 0,
    };
    p.metric()
}

struct Parser<'a> {
    src: &'a [u8],
    line: &'a str,
    pos: usize,
}

#[derive(Clone, Copy)]
enum Token {
    Measurement,
    TagKey,
    TagValue,
    FieldKey,
}

impl Token {
    fn ends_at(self, b: u8) -> bool {
        match self {
            Token::Measurement => b == b',' || b == b' ',
            Token::TagKey | Token::FieldKey => b == b'=' || b == b',' || b == b' ',
            Token::TagValue => b == b',' || b == b' ' || b == b'=',
        }
    }

    fn escapable(self, b: u8) -> bool {
        match self {
            Token::Measurement => matches!(b, b',' | b' ' | b'\\'),
            _ => matches!(b, b',' | b'=' | b' ' | b'\\'),
        }
    }
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn err<T>(&self, reason: &'static str) -> Result<T, LineError> {
        Err(LineError::malformed(self.pos, reason))
    }

    fn metric(&mut self) -> Result<Metric, LineError> {
        if self.src.first() == Some(&b'#') {
            return self.err("comment line");
        }
        let measurement = self.token(Token::Measurement)?;
        if measurement.is_empty() {
            return self.err("empty measurement");
        }
        let mut tags = BTreeMap::new();
        while self.peek() == Some(b',') {
            self.pos += 1;
            let key = self.token(Token::TagKey)?;
            if key.is_empty() {
                return self.err("empty tag key");
            }
            if self.peek() != Some(b'=') {
                return self.err("expected '=' after tag key");
            }
            self.pos += 1;
            let value = self.token(Token::TagValue)?;
            if value.is_empty() {
                return self.err("empty tag value");
            }
            if tags.insert(key, value).is_some() {
                return self.err("duplicate tag key");
            }
        }
        if self.peek() != Some(b' ') {
            return self.err("expected space before field set");
        }
        self.skip_spaces();

        let mut fields = BTreeMap::new();
        loop {
            let key = self.token(Token::FieldKey)?;
            if key.is_empty() {
                return self.err("empty field key");
            }
            if self.peek() != Some(b'=') {
                return self.err("expected '=' after field key");
            }
            self.pos += 1;
            let value = self.field_value()?;
            if fields.insert(key, value).is_some() {
                return self.err("duplicate field key");
            }
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b' ') | None => break,
                Some(_) => return self.err("unexpected character after field value"),
            }
        }

        self.skip_spaces();
        let timestamp = if self.pos < self.src.len() {
            let start = self.pos;
            while self.peek().is_some_and(|b| b != b' ') {
                self.pos += 1;
            }
            let ts = parse_timestamp(&self.line[start..self.pos]).ok_or(LineError::malformed(
                start,
                "timestamp is not a 64-bit integer",
            ))?;
            self.skip_spaces();
            if self.pos < self.src.len() {
                return self.err("trailing data after timestamp");
            }
            Some(ts)
        } else {
            None
        };

        Ok(Metric {
            measurement,
            tags,
            fields,
            timestamp,
        })
    }

    fn skip_spaces(&mut self) {
        while self.peek() == Some(b' ') {
            self.pos += 1;
        }
    }

    /// Reads an escaped identifier up to its (unescaped) terminator.
    fn token(&mut self, kind: Token) -> Result<String, LineError> {
        let start = self.pos;
        let mut out: Option<String> = None;
        let mut run = start;
        while let Some(b) = self.peek() {
            if b == b'\\' {
                match self.src.get(self.pos + 1) {
                    None => return self.err("dangling escape at end of line"),
                    Some(&next) if kind.escapable(next) => {
                        let buf = out.get_or_insert_with(String::new);
                        buf.push_str(&self.line[run..self.pos]);
                        buf.push(next as char);
                        self.pos += 2;
                        run = self.pos;
                    }
                    Some(_) => self.pos += 1,
                }
                continue;
            }
            if kind.ends_at(b) {
                break;
            }
            self.pos += 1;
        }
        Ok(match out {
            Some(mut buf) => {
                buf.push_str(&self.line[run..self.pos]);
                buf
            }
            None => self.line[start..self.pos].to_owned(),
        })
    }

    fn field_value(&mut self) -> Result<FieldValue, LineError> {
        if self.peek() == Some(b'"') {
            return self.string_value();
        }
        let start = self.pos;
        while self.peek().is_some_and(|b| b != b',' && b != b' ') {
            self.pos += 1;
        }
        let raw = &self.line[start..self.pos];
        let err = |reason| Err(LineError::malformed(start, reason));
        if raw.is_empty() {
            return err("empty field value");
        }
        match raw {
            "t" | "T" | "true" | "True" => return Ok(FieldValue::Boolean(true)),
            "f" | "F" | "false" | "False" => return Ok(FieldValue::Boolean(false)),
            _ => {}
        }
        if let Some(digits) = raw.strip_suffix('i') {
            return match parse_signed_digits(digits) {
                Some(v) => Ok(FieldValue::Integer(v)),
                None => err("invalid integer field value"),
            };
        }
        match parse_float(raw) {
            Some(v) => Ok(FieldValue::Float(v)),
            None => err("invalid float field value"),
        }
    }

    fn string_value(&mut self) -> Result<FieldValue, LineError> {
        let open = self.pos;
        self.pos += 1;
        let mut out = String::new();
        let mut run = self.pos;
        loop {
            match self.peek() {
                None => return Err(LineError::malformed(open, "unterminated string field")),
                Some(b'"') => {
                    out.push_str(&self.line[run..self.pos]);
                    self.pos += 1;
                    return Ok(FieldValue::String(out));
                }
                Some(b'\\') => match self.src.get(self.pos + 1) {
                    Some(&next @ (b'"' | b'\\')) => {
                        out.push_str(&self.line[run..self.pos]);
                        out.push(next as char);
                        self.pos += 2;
                        run = self.pos;
                    }
                    Some(_) => self.pos += 1,
                    None => return Err(LineError::malformed(open, "unterminated string field")),
                },
                Some(_) => self.pos += 1,
            }
        }
    }
}

fn parse_signed_digits(s: &str) -> Option<i64> {
    let digits = s.strip_prefix('-').unwrap_or(s);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

fn parse_timestamp(s: &str) -> Option<i64> {
    parse_signed_digits(s)
}

/// Decimal float with optional sign, fraction and exponent. Rejects the
/// `inf`/`nan` spellings `f64::from_str` would accept, and overflow to infinity.
fn parse_float(s: &str) -> Option<f64> {
    let body = s.strip_prefix(['-', '+']).unwrap_or(s);
    let (mantissa, exponent) = match body.find(['e', 'E']) {
        Some(i) => (&body[..i], Some(&body[i + 1..])),
        None => (body, None),
    };
    let (int, frac) = match mantissa.split_once('.') {
        Some((a, b)) => (a, b),
        None => (mantissa, ""),
    };
    let all_digits = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
    if (int.is_empty() && frac.is_empty()) || !all_digits(int) || !all_digits(frac) {
        return None;
    }
    if let Some(exp) = exponent {
        let exp = exp.strip_prefix(['-', '+']).unwrap_or(exp);
        if exp.is_empty() || !all_digits(exp) {
            return None;
        }
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Canonical line for a valid metric: sorted keys, minimal escaping, shortest
/// round-tripping floats, `i`-suffixed integers and quoted strings.
pub fn serialize(metric: &Metric) -> Result<String, LineError> {
    metric.validate()?;
    let mut out = String::with_capacity(64);
    write_canonical(&mut out, metric);
    Ok(out)
}

/// Serializes many metrics into one `\n`-separated body.
pub fn serialize_batch<'a, I>(metrics: I) -> Result<String, LineError>
where
    I: IntoIterator<Item = &'a Metric>,
{
    let mut out = String::new();
    for m in metrics {
        m.validate()?;
        if !out.is_empty() {
            out.push('\n');
        }
        write_canonical(&mut out, m);
    }
    Ok(out)
}

fn write_canonical(out: &mut String, m: &Metric) {
    write_escaped(out, &m.measurement, Token::Measurement);
    for (k, v) in &m.tags {
        out.push(',');
        write_escaped(out, k, Token::TagKey);
        out.push('=');
        write_escaped(out, v, Token::TagValue);
    }
    out.push(' ');
    for (i, (k, v)) in m.fields.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write_escaped(out, k, Token::FieldKey);
        out.push('=');
        match v {
            FieldValue::Float(f) => {
                let _ = write!(out, "{f}");
            }
            FieldValue::Integer(i) => {
                let _ = write!(out, "{i}i");
            }
            FieldValue::Boolean(b) => out.push_str(if *b { "true" } else { "false" }),
            FieldValue::String(s) => {
                out.push('"');
                for c in s.chars() {
                    if c == '"' || c == '\\' {
                        out.push('\\');
                    }
                    out.push(c);
                }
                out.push('"');
            }
        }
    }
    if let Some(ts) = m.timestamp {
        let _ = write!(out, " {ts}");
    }
}

fn write_escaped(out: &mut String, s: &str, kind: Token) {
    let bytes = s.as_bytes();
    let mut run = 0;
    for (i, &b) in bytes.iter().enumerate() {
        let needs = if b == b'\\' {
            // Only where the parser would otherwise read an escape sequence
            // or a dangling escape.
            bytes.get(i + 1).is_none_or(|&n| kind.escapable(n))
        } else {
            kind.escapable(b)
        };
        if needs {
            out.push_str(&s[run..i]);
            out.push('\\');
            run = i;
        }
    }
    out.push_str(&s[run..]);
}
