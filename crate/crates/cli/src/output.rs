//! Run directories, CSV tables and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use guidance_lab::BoundReport;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Shortest round-trip decimal form; non-finite values as `NaN` / `inf` / `-inf`.
pub fn num(x: f64) -> String {
    format!("{x}")
}

/// A CSV artifact whose rows carry the seed and config hash.
pub struct Table {
    name: String,
    header: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.to_owned(),
            header: columns.iter().map(|c| (*c).to_owned()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, seed: u64, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len(), "{}", self.name);
        self.rows.push((seed, row));
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    /// Data rows for CSV files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub check: String,
    pub passed: bool,
    pub tolerance: f64,
    /// `None` when not finite.
    pub worst_margin: Option<f64>,
    pub max_relative_gap: Option<f64>,
    pub violations: usize,
    pub points: usize,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl Verdict {
    /// Merges reports of one check (e.g. across seeds or configurations).
    pub fn from_reports(check: &str, reports: &[&BoundReport]) -> Self {
        Verdict {
            check: check.to_owned(),
            passed: !reports.is_empty() && reports.iter().all(|r| r.passed),
            tolerance: reports.iter().map(|r| r.tolerance).fold(0.0, f64::max),
            worst_margin: finite(
                reports
                    .iter()
                    .map(|r| r.worst_margin())
                    .fold(f64::INFINITY, f64::min),
            ),
            max_relative_gap: finite(
                reports
                    .iter()
                    .map(|r| r.max_relative_gap())
                    .fold(0.0, f64::max),
            ),
            violations: reports.iter().map(|r| r.violations()).sum(),
            points: reports.iter().map(|r| r.points.len()).sum(),
        }
    }

    /// A single scalar check `value >= threshold`.
    pub fn threshold(check: &str, value: f64, threshold: f64) -> Self {
        let passed = value >= threshold;
        Verdict {
            check: check.to_owned(),
            passed,
            tolerance: threshold,
            worst_margin: finite(value - threshold),
            max_relative_gap: None,
            violations: usize::from(!passed),
            points: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Record of one run; written as `manifest.json` next to the artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub run_dir: PathBuf,
    pub sampler_kind: String,
    pub artifacts: Vec<Artifact>,
    pub verdicts: Vec<Verdict>,
    pub stages: Vec<StageTiming>,
    pub passed: bool,
}

impl RunManifest {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }

    pub fn verdict(&self, check: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.check == check)
    }
}

/// `<out>/<command>/<hash>/`, with the artifacts written so far.
pub struct RunDir {
    pub path: PathBuf,
    hash: String,
    pub artifacts: Vec<Artifact>,
}

impl RunDir {
    pub fn create(root: &Path, command: &str, hash: &str) -> Result<Self, CliError> {
        let path = root.join(command).join(hash);
        fs::create_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(RunDir {
            path,
            hash: hash.to_owned(),
            artifacts: Vec::new(),
        })
    }

    pub fn write_table(&mut self, table: &Table) -> Result<(), CliError> {
        let file = format!("{}.csv", table.name);
        let path = self.path.join(&file);
        let io = |e: csv::Error| match e.into_kind() {
            csv::ErrorKind::Io(e) => CliError::io(&path, e),
            other => CliError::io(&path, std::io::Error::other(format!("{other:?}"))),
        };
        let mut w = csv::Writer::from_path(&path).map_err(io)?;
        let mut header = vec!["seed".to_owned(), "config_hash".to_owned()];
        header.extend(table.header.iter().cloned());
        w.write_record(&header).map_err(io)?;
        for (seed, row) in &table.rows {
            let seed = seed.to_string();
            w.write_record(
                [seed.as_str(), self.hash.as_str()]
                    .into_iter()
                    .chain(row.iter().map(String::as_str)),
            )
            .map_err(io)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        self.artifacts.push(Artifact {
            file,
            rows: Some(table.len()),
        });
        Ok(())
    }

    pub fn write_text(&mut self, file: &str, text: &str) -> Result<(), CliError> {
        let path = self.path.join(file);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        self.artifacts.push(Artifact {
            file: file.to_owned(),
            rows: None,
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, file: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("JSON value serializes");
        text.push('\n');
        self.write_text(file, &text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use guidance_lab::theory::CheckMode;
    use guidance_lab::BoundPoint;

    #[test]
    fn merged_verdict_counts() {
        let ok = BoundReport::new(
            "c",
            "t",
            CheckMode::Inequality,
            vec![BoundPoint::new(0.0, 1.0, 2.0)],
            1e-9,
        );
        let bad = BoundReport::new(
            "c",
            "t",
            CheckMode::Inequality,
            vec![
                BoundPoint::new(0.0, 3.0, 2.0),
                BoundPoint::new(1.0, 0.0, 2.0),
            ],
            1e-9,
        );
        let v = Verdict::from_reports("c", &[&ok, &bad]);
        assert!(!v.passed);
        assert_eq!((v.violations, v.points), (1, 3));
        assert_eq!(v.worst_margin, Some(-1.0));
        assert!(!Verdict::from_reports("c", &[]).passed);
    }

    #[test]
    fn number_format_round_trips() {
        for x in [0.1, 1e-300, -2.5e17, 1.0 / 3.0] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(num(f64::NAN), "NaN");
    }

    #[test]
    fn threshold_verdict() {
        assert!(Verdict::threshold("rho", 0.9, 0.8).passed);
        let v = Verdict::threshold("rho", 0.7, 0.8);
        assert!(!v.passed && v.violations == 1);
    }
}
