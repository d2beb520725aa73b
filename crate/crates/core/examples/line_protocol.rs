//! Parsing, escaping and canonical serialization of line protocol.

use lms::lineproto::{parse_batch, parse_line, serialize, Metric};

fn main() {
    let m = Metric::new("disk io")
        .tag("hostname", "node 1")
        .tag("path", "/scratch,tmp")
        .field("bytes", 4096i64)
        .field("note", "say \"hi\"")
        .at(1_700_000_000_000_000_000);
    let line = serialize(&m).unwrap();
    println!("{line}");
    assert_eq!(parse_line(&line).unwrap(), m);

    let body = format!("{line}\nbroken line\ncpu,hostname=n2 value=0.5");
    let batch = parse_batch(&body);
    println!(
        "{} parsed, {} rejected",
        batch.metrics.len(),
        batch.errors.len()
    );
    for (index, err) in &batch.errors {
        println!("  line {index}: {err}");
    }
}
