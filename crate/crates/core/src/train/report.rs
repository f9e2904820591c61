//! Metrics report files: one `key=value` record per variant, plus an aligned
//! table for terminals.

use std::fmt::Write as _;

use super::metrics::MetricsReport;
use crate::error::{Error, Result};

const HEADER: &str = "# psformer metrics v1";

/// One named row of a report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub metrics: MetricsReport,
}

pub fn write_report(rows: &[ReportRow]) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    for r in rows {
        let m = &r.metrics;
        writeln!(
            s,
            "variant={} mae={} f_measure={} e_measure={} iou={} threshold={} samples={}",
            r.variant, m.mae, m.f_measure, m.e_measure, m.iou, m.threshold, m.samples
        )
        .unwrap();
    }
    s
}

pub fn parse_report(text: &str) -> Result<Vec<ReportRow>> {
    let err = |line: usize, message: String| Error::Parse {
        path: "<metrics report>".into(),
        location: format!("line {line}"),
        message,
    };
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut variant = None;
        let mut nums = [None::<f64>; 5];
        let mut samples = None;
        for field in line.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| err(i + 1, format!("field `{field}` is not key=value")))?;
            let num = || v.parse::<f64>().map_err(|_| err(i + 1, format!("bad number `{v}` for {k}")));
            match k {
                "variant" => variant = Some(v.to_string()),
                "mae" => nums[0] = Some(num()?),
                "f_measure" => nums[1] = Some(num()?),
                "e_measure" => nums[2] = Some(num()?),
                "iou" => nums[3] = Some(num()?),
                "threshold" => nums[4] = Some(num()?),
                "samples" => samples = Some(v.parse::<usize>().map_err(|_| err(i + 1, format!("bad sample count `{v}`")))?),
                other => return Err(err(i + 1, format!("unknown field `{other}`"))),
            }
        }
        let missing = |name: &str| err(i + 1, format!("missing field `{name}`"));
        rows.push(ReportRow {
            variant: variant.ok_or_else(|| missing("variant"))?,
            metrics: MetricsReport {
                mae: nums[0].ok_or_else(|| missing("mae"))?,
                f_measure: nums[1].ok_or_else(|| missing("f_measure"))?,
                e_measure: nums[2].ok_or_else(|| missing("e_measure"))?,
                iou: nums[3].ok_or_else(|| missing("iou"))?,
                threshold: nums[4].ok_or_else(|| missing("threshold"))?,
                samples: samples.ok_or_else(|| missing("samples"))?,
            },
        });
    }
    Ok(rows)
}

/// Fixed-width table with one row per variant.
pub fn format_table(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max("variant".len());
    let mut s = format!(
        "{:<width$}  {:>8}  {:>9}  {:>9}  {:>8}  {:>9}  {:>7}\n",
        "variant", "MAE", "F-measure", "E-measure", "IoU", "threshold", "samples"
    );
    for r in rows {
        let m = &r.metrics;
        writeln!(
            s,
            "{:<width$}  {:>8.4}  {:>9.4}  {:>9.4}  {:>8.4}  {:>9.3}  {:>7}",
            r.variant, m.mae, m.f_measure, m.e_measure, m.iou, m.threshold, m.samples
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let rows = vec![
            ReportRow {
                variant: "full".into(),
                metrics: MetricsReport {
                    mae: 0.1 + 0.2,
                    f_measure: 1.0 / 3.0,
                    e_measure: 0.987654321,
                    iou: 0.0,
                    threshold: 0.5,
                    samples: 32,
                },
            },
            ReportRow {
                variant: "w/o-fn".into(),
                metrics: MetricsReport {
                    mae: 1e-17,
                    f_measure: 0.5,
                    e_measure: 0.25,
                    iou: 1.0,
                    threshold: 0.75,
                    samples: 1,
                },
            },
        ];
        assert_eq!(parse_report(&write_report(&rows)).unwrap(), rows);
    }

    #[test]
    fn rejects_missing_fields() {
        assert!(parse_report("variant=x mae=0.1\n").is_err());
        assert!(parse_report("variant=x mae=zero f_measure=0 e_measure=0 iou=0 threshold=0.5 samples=1").is_err());
    }
}
