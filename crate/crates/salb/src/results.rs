//! CSV and JSON emission of experiment results.

use std::path::Path;

use salb_core::harness::{LogitProfile, ResultRow};
use salb_core::trainer::StepLog;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::write_file;

pub const RESULT_COLUMNS: [&str; 13] = [
    "variant", "beta", "gamma", "seed", "dataset_hash", "r1_v2t", "r5_v2t", "r10_v2t", "r1_t2v", "r5_t2v", "r10_t2v",
    "spearman", "final_loss",
];

fn csv_bytes<T: Serialize>(rows: &[T], header: Option<&[&str]>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(header.is_none()).from_writer(Vec::new());
    if let Some(h) = header {
        w.write_record(h)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Config(e.to_string()))
}

pub fn results_csv(rows: &[ResultRow]) -> Result<Vec<u8>> {
    csv_bytes(rows, Some(&RESULT_COLUMNS))
}

pub fn parse_results_csv(bytes: &[u8]) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// JSON mirror of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub rows: Vec<ResultRow>,
    /// Sweep values that were not run, with the reason.
    pub skipped: Vec<String>,
}

pub fn results_json(rows: &[ResultRow], skipped: &[String]) -> Vec<u8> {
    let doc = ResultsDocument { rows: rows.to_vec(), skipped: skipped.to_vec() };
    let mut out = serde_json::to_vec_pretty(&doc).expect("results serialize");
    out.push(b'\n');
    out
}

/// Writes `<out>` as CSV and the JSON mirror next to it with a `.json` extension.
pub fn write_results(out: &Path, rows: &[ResultRow], skipped: &[String], force: bool) -> Result<()> {
    let json = out.with_extension("json");
    if json == out {
        return Err(Error::Config(format!("{} must not have a .json extension", out.display())));
    }
    if !force && json.exists() {
        return Err(Error::OutputExists(json));
    }
    write_file(out, &results_csv(rows)?, force)?;
    write_file(&json, &results_json(rows, skipped), force)
}

#[derive(Serialize)]
struct ProfileRow {
    position: usize,
    mean_probability: f64,
}

pub fn profile_csv(p: &LogitProfile) -> Result<Vec<u8>> {
    let rows: Vec<ProfileRow> =
        p.positions.iter().enumerate().map(|(i, &x)| ProfileRow { position: i + 1, mean_probability: x }).collect();
    csv_bytes(&rows, None)
}

pub fn step_log_csv(log: &[StepLog]) -> Result<Vec<u8>> {
    csv_bytes(log, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: &str) -> ResultRow {
        ResultRow {
            variant: variant.into(),
            beta: 0.3,
            gamma: 1.0,
            seed: 7,
            dataset_hash: "ab".into(),
            r1_v2t: 0.1,
            r5_v2t: 0.2,
            r10_v2t: 0.30000000000000004,
            r1_t2v: 0.1,
            r5_t2v: 0.25,
            r10_t2v: 0.5,
            spearman: -0.125,
            final_loss: 1.0 / 3.0,
        }
    }

    #[test]
    fn csv_header_and_round_trip() {
        let rows = vec![row("clip"), row("softclip")];
        let bytes = results_csv(&rows).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), RESULT_COLUMNS.join(","));
        assert_eq!(parse_results_csv(&bytes).unwrap(), rows);
        assert_eq!(results_csv(&[]).unwrap(), format!("{}\n", RESULT_COLUMNS.join(",")).into_bytes());
    }

    #[test]
    fn json_mirrors_rows() {
        let rows = vec![row("clip")];
        let doc: ResultsDocument = serde_json::from_slice(&results_json(&rows, &["x".into()])).unwrap();
        assert_eq!(doc.rows, rows);
        let v: serde_json::Value = serde_json::from_slice(&results_json(&rows, &[])).unwrap();
        let keys: Vec<&str> = v["rows"][0].as_object().unwrap().keys().map(String::as_str).collect();
        let mut cols = RESULT_COLUMNS.to_vec();
        cols.sort_unstable();
        let mut keys = keys;
        keys.sort_unstable();
        assert_eq!(keys, cols);
    }

    #[test]
    fn profile_columns() {
        let p = LogitProfile { positions: vec![0.5, 0.25], top1: 0.5, top2_10: 0.25, top11_50: 0.0, full_sum: 1.0 };
        assert_eq!(String::from_utf8(profile_csv(&p).unwrap()).unwrap(), "position,mean_probability\n1,0.5\n2,0.25\n");
    }
}
