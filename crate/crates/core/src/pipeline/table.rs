//! Dice tables: per-prediction rows, per-cell means and tests against a
//! baseline method.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stats::{mann_whitney_u, stars, MannWhitney};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub subject: String,
    pub method: String,
    /// Months between the subject's baseline and the predicted visit.
    pub horizon_months: i64,
    pub age: f64,
    pub dice: f64,
    /// Set when the matching time had to be clamped into the reference span.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: String,
    pub horizon_months: i64,
    pub n: usize,
    pub mean_dice: f64,
    /// Two-sided test against the baseline method at the same horizon.
    pub u: Option<f64>,
    pub p_vs_baseline: Option<f64>,
    pub stars: String,
    pub flagged: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

impl EvalTable {
    pub fn new(mut rows: Vec<EvalRow>) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| !(0.0..=1.0).contains(&r.dice)) {
            return Err(Error::Validation(format!("dice {} outside [0, 1]", r.dice)));
        }
        rows.sort_by(|a, b| {
            (&a.method, a.horizon_months, &a.subject)
                .cmp(&(&b.method, b.horizon_months, &b.subject))
                .then(a.age.total_cmp(&b.age))
        });
        Ok(Self { rows })
    }

    pub fn methods(&self) -> Vec<String> {
        let mut m: Vec<String> = self.rows.iter().map(|r| r.method.clone()).collect();
        m.dedup();
        m
    }

    pub fn horizons(&self) -> Vec<i64> {
        let mut h: Vec<i64> = self.rows.iter().map(|r| r.horizon_months).collect();
        h.sort_unstable();
        h.dedup();
        h
    }

    /// Dice values of one cell, in subject order.
    pub fn cell(&self, method: &str, horizon_months: i64) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.horizon_months == horizon_months)
            .map(|r| r.dice)
            .collect()
    }

    pub fn mean(&self, method: &str, horizon_months: i64) -> Option<f64> {
        let c = self.cell(method, horizon_months);
        (!c.is_empty()).then(|| c.iter().sum::<f64>() / c.len() as f64)
    }

    pub fn compare(&self, method: &str, baseline: &str, horizon_months: i64) -> Result<MannWhitney> {
        mann_whitney_u(&self.cell(method, horizon_months), &self.cell(baseline, horizon_months))
    }

    /// One summary per (method, horizon), tested against `baseline`.
    pub fn summarize(&self, baseline: &str) -> Vec<CellSummary> {
        let mut cells: BTreeMap<(String, i64), (Vec<f64>, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = cells.entry((r.method.clone(), r.horizon_months)).or_default();
            e.0.push(r.dice);
            e.1 += r.flagged as usize;
        }
        cells
            .into_iter()
            .map(|((method, h), (dice, flagged))| {
                let test = (method != baseline)
                    .then(|| self.compare(&method, baseline, h).ok())
                    .flatten();
                CellSummary {
                    n: dice.len(),
                    mean_dice: dice.iter().sum::<f64>() / dice.len() as f64,
                    u: test.map(|t| t.u),
                    p_vs_baseline: test.map(|t| t.p),
                    stars: test.map(|t| stars(t.p).to_string()).unwrap_or_default(),
                    method,
                    horizon_months: h,
                    flagged,
                }
            })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_records(path.as_ref(), &self.rows)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let rows = rd
            .deserialize()
            .collect::<std::result::Result<Vec<EvalRow>, _>>()
            .map_err(|e| csv_err(path, e))?;
        Self::new(rows)
    }

    /// Plain-text table: one line per method, one column per horizon.
    pub fn render_text(&self, baseline: &str, title: &str) -> String {
        let summary = self.summarize(baseline);
        let horizons = self.horizons();
        let mut out = String::new();
        writeln!(out, "{title}").unwrap();
        write!(out, "{:<24}", "method").unwrap();
        for h in &horizons {
            write!(out, "{:>12}", format!("M{h}")).unwrap();
        }
        writeln!(out).unwrap();
        write!(out, "{:<24}", "").unwrap();
        for h in &horizons {
            let n = summary.iter().filter(|c| c.horizon_months == *h).map(|c| c.n).max().unwrap_or(0);
            write!(out, "{:>12}", format!("N={n}")).unwrap();
        }
        writeln!(out).unwrap();
        for m in self.methods() {
            write!(out, "{m:<24}").unwrap();
            for h in &horizons {
                let cell = summary.iter().find(|c| c.method == m && c.horizon_months == *h);
                let text = cell.map(|c| format!("{:.3}{:<4}", c.mean_dice, c.stars)).unwrap_or_else(|| "-".into());
                write!(out, "{text:>12}").unwrap();
            }
            writeln!(out).unwrap();
        }
        writeln!(
            out,
            "Mean Dice. Stars: two-sided Mann-Whitney test against [{baseline}] at levels .05, .01, .001, .0001."
        )
        .unwrap();
        let flagged: usize = summary.iter().map(|c| c.flagged).sum();
        if flagged > 0 {
            writeln!(out, "{flagged} predictions used a matching time clamped into the reference span.").unwrap();
        }
        out
    }
}

pub(crate) fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the per-cell summary as CSV.
pub fn write_summary_csv(summary: &[CellSummary], path: impl AsRef<Path>) -> Result<()> {
    write_records(path.as_ref(), summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(subject: &str, method: &str, h: i64, dice: f64) -> EvalRow {
        EvalRow {
            subject: subject.into(),
            method: method.into(),
            horizon_months: h,
            age: 70.0,
            dice,
            flagged: false,
        }
    }

    #[test]
    fn means_match_hand_computation() {
        let t = EvalTable::new(vec![
            row("a", "naive", 12, 0.8),
            row("b", "naive", 12, 0.9),
            row("a", "x", 12, 0.7),
            row("b", "x", 12, 0.95),
        ])
        .unwrap();
        assert!((t.mean("naive", 12).unwrap() - 0.85).abs() < 1e-15);
        assert!((t.mean("x", 12).unwrap() - 0.825).abs() < 1e-15);
        let s = t.summarize("naive");
        assert_eq!(s.len(), 2);
        assert!(s[0].p_vs_baseline.is_none());
        assert!(s[1].p_vs_baseline.is_some());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = EvalTable::new(vec![row("a", "naive", 12, 0.8), row("a", "x", 24, 0.5)]).unwrap();
        let p = dir.path().join("eval.csv");
        t.write_csv(&p).unwrap();
        assert_eq!(EvalTable::read_csv(&p).unwrap(), t);
    }

    #[test]
    fn rejects_out_of_range_dice() {
        assert!(EvalTable::new(vec![row("a", "naive", 12, 1.5)]).is_err());
    }
}
