//! Per-run metric records and the summaries derived from them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::train::{self, MetricRow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitBest {
    pub accuracy: f64,
    /// Checkpoint index (epoch, or iteration in iteration mode) of the first maximum.
    pub at: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub split: String,
    pub at: usize,
    /// Accuracy of every split at the selected checkpoint.
    pub accuracy: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best: BTreeMap<String, SplitBest>,
    /// Accuracy at the last recorded checkpoint.
    #[serde(rename = "final")]
    pub last: BTreeMap<String, f64>,
    pub selected: Option<Selection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub config_hash: String,
    pub rows: Vec<MetricRow>,
    pub summary: RunSummary,
    /// Kept out of `summary.json` so reruns produce identical files.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Checkpoint index of a row: the epoch in epoch mode, else the iteration.
fn index(row: &MetricRow) -> usize {
    row.epoch
}

/// Early-stopped checkpoint on `split`. Errors when no checkpoint has it.
pub fn early_stop_select(rows: &[MetricRow], split: &str) -> Result<usize> {
    train::early_stop_select(rows, split)
        .ok_or_else(|| invalid("early_stop_select", format!("no checkpoints recorded for split `{split}`")))
}

pub fn summarize(rows: &[MetricRow], early_stop_split: Option<&str>) -> Result<RunSummary> {
    let mut best: BTreeMap<String, SplitBest> = BTreeMap::new();
    let mut last = BTreeMap::new();
    for r in rows {
        let b = best.entry(r.split.clone()).or_insert(SplitBest {
            accuracy: r.accuracy,
            at: index(r),
        });
        if r.accuracy > b.accuracy {
            *b = SplitBest {
                accuracy: r.accuracy,
                at: index(r),
            };
        }
        last.insert(r.split.clone(), r.accuracy);
    }
    let selected = match early_stop_split {
        Some(split) => {
            let at = early_stop_select(rows, split)?;
            let accuracy = rows.iter().filter(|r| index(r) == at).map(|r| (r.split.clone(), r.accuracy)).collect();
            Some(Selection {
                split: split.to_string(),
                at,
                accuracy,
            })
        }
        None => None,
    };
    Ok(RunSummary { best, last, selected })
}

impl RunRecord {
    pub fn new(method: &str, config_hash: String, rows: Vec<MetricRow>, early_stop_split: Option<&str>) -> Result<Self> {
        let summary = summarize(&rows, early_stop_split)?;
        Ok(Self {
            method: method.to_string(),
            config_hash,
            rows,
            summary,
            wall_clock_secs: 0.0,
        })
    }

    /// Recompute the summary from the rows and compare.
    pub fn check_consistency(&self) -> Result<()> {
        let split = self.summary.selected.as_ref().map(|s| s.split.as_str());
        let again = summarize(&self.rows, split)?;
        if again != self.summary {
            return Err(invalid("run_record", "summary does not match its metric rows"));
        }
        Ok(())
    }

    pub fn best_accuracy(&self, split: &str) -> Option<f64> {
        self.summary.best.get(split).map(|b| b.accuracy)
    }

    pub fn metrics_csv(&self) -> String {
        train::history_csv(&self.rows)
    }
}

/// Parse the output of [`train::history_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "epoch,iteration,split,loss,accuracy" {
        return Err(invalid("metrics_csv", format!("unexpected header `{header}`")));
    }
    let bad = |line: &str| invalid("metrics_csv", format!("malformed row `{line}`"));
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(line));
            }
            Ok(MetricRow {
                epoch: f[0].parse().map_err(|_| bad(line))?,
                iteration: f[1].parse().map_err(|_| bad(line))?,
                split: f[2].to_string(),
                loss: f[3].parse().map_err(|_| bad(line))?,
                accuracy: f[4].parse().map_err(|_| bad(line))?,
            })
        })
        .collect::<std::result::Result<Vec<_>, Error>>()
}
