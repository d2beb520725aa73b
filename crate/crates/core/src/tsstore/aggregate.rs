use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Point, Series, StoreError};
use crate::lineproto::FieldValue;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateFn {
    Min,
    Max,
    Mean,
    Sum,
    Count,
}

/// Downsamples every field of `series` into windows of `window` ns.
///
/// Windows are aligned to `floor(first_ts / window) * window` and only
/// non-empty windows produce a point, stamped at the window start. `Count`
/// yields integers and accepts any value kind; the numeric functions yield
/// floats and reject boolean or string values.
pub fn aggregate_window(
    series: &Series,
    func: AggregateFn,
    window: i64,
) -> Result<Series, StoreError> {
    if window <= 0 {
        return Err(StoreError::InvalidPoint(format!(
            "window must be positive, got {window}"
        )));
    }
    let mut out = Series::new(series.key.clone());
    let Some(first) = series.points.iter().map(|p| p.timestamp).min() else {
        return Ok(out);
    };
    let origin = first.div_euclid(window) * window;

    // (window start, field) -> accumulator
    let mut acc: BTreeMap<(i64, &str), Acc> = BTreeMap::new();
    for p in &series.points {
        let numeric = match (&p.value, func) {
            (_, AggregateFn::Count) => 0.0,
            (v, _) => v.as_f64().ok_or_else(|| {
                StoreError::TypeMismatch(format!(
                    "{func:?} over {} field {:?}",
                    p.value.kind(),
                    p.field
                ))
            })?,
        };
        let offset = (p.timestamp as i128 - origin as i128) / window as i128;
        let start = origin as i128 + offset * window as i128;
        let start = i64::try_from(start).expect("window start within range");
        acc.entry((start, p.field.as_str()))
            .or_default()
            .push(numeric);
    }
    for ((start, field), a) in acc {
        let value = match func {
            AggregateFn::Count => FieldValue::Integer(a.count as i64),
            AggregateFn::Sum => FieldValue::Float(a.sum),
            AggregateFn::Mean => FieldValue::Float(a.sum / a.count as f64),
            AggregateFn::Min => FieldValue::Float(a.min),
            AggregateFn::Max => FieldValue::Float(a.max),
        };
        out.points.push(Point {
            timestamp: start,
            field: field.to_owned(),
            value,
        });
    }
    Ok(out)
}

struct Acc {
    count: u64,
    sum: f64,
    min: f64,
    max: f64,
}

impl Default for Acc {
    fn default() -> Self {
        Acc {
            count: 0,
            sum: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }
}

impl Acc {
    fn push(&mut self, v: f64) {
        self.count += 1;
        self.sum += v;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tsstore::SeriesKey;

    fn series(points: &[(i64, FieldValue)]) -> Series {
        Series {
            key: SeriesKey {
                database: "db".into(),
                measurement: "m".into(),
                tags: BTreeMap::new(),
            },
            points: points
                .iter()
                .map(|(t, v)| Point {
                    timestamp: *t,
                    field: "value".into(),
                    value: v.clone(),
                })
                .collect(),
        }
    }

    #[test]
    fn constant_mean() {
        let s = series(
            &(0..20)
                .map(|t| (t * 10, FieldValue::Float(3.5)))
                .collect::<Vec<_>>(),
        );
        let out = aggregate_window(&s, AggregateFn::Mean, 50).unwrap();
        assert_eq!(out.points.len(), 4);
        assert!(out.points.iter().all(|p| p.value == FieldValue::Float(3.5)));
        assert_eq!(
            out.points.iter().map(|p| p.timestamp).collect::<Vec<_>>(),
            [0, 50, 100, 150]
        );
    }

    #[test]
    fn sum_in_one_window() {
        let s = series(&[
            (100, FieldValue::Float(1.0)),
            (101, FieldValue::Integer(2)),
            (102, FieldValue::Float(3.0)),
            (103, FieldValue::Float(4.0)),
        ]);
        let out = aggregate_window(&s, AggregateFn::Sum, 1000).unwrap();
        assert_eq!(out.points.len(), 1);
        assert_eq!(out.points[0].timestamp, 0);
        assert_eq!(out.points[0].value, FieldValue::Float(10.0));
    }

    #[test]
    fn negative_timestamps_floor() {
        let s = series(&[(-5, FieldValue::Float(1.0)), (3, FieldValue::Float(1.0))]);
        let out = aggregate_window(&s, AggregateFn::Count, 10).unwrap();
        assert_eq!(
            out.points.iter().map(|p| p.timestamp).collect::<Vec<_>>(),
            [-10, 0]
        );
    }

    #[test]
    fn strings_only_countable() {
        let s = series(&[(1, FieldValue::String("ev".into()))]);
        assert!(matches!(
            aggregate_window(&s, AggregateFn::Mean, 10),
            Err(StoreError::TypeMismatch(_))
        ));
        let c = aggregate_window(&s, AggregateFn::Count, 10).unwrap();
        assert_eq!(c.points[0].value, FieldValue::Integer(1));
    }

    #[test]
    fn zero_window_rejected() {
        assert!(aggregate_window(&series(&[]), AggregateFn::Sum, 0).is_err());
    }
}
