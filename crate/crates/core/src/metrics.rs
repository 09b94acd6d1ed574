//! Continual-learning indicators over per-session accuracies.
//!
//! All accuracies are percentages. Seen-domain accuracy `α`, unseen-domain
//! accuracy `δ`, base-class accuracy `α^b` and novel-class accuracy `α^n`
//! are collected per session; aggregates follow from them and from the
//! class-group intervals recorded in the protocol manifest.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact correct/total count, converted to percent only on request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: u64,
    pub total: u64,
}

impl Accuracy {
    pub fn new(correct: u64, total: u64) -> Self {
        debug_assert!(correct <= total);
        Self { correct, total }
    }

    pub fn record(&mut self, hit: bool) {
        self.total += 1;
        self.correct += u64::from(hit);
    }

    pub fn merge(&mut self, other: Accuracy) {
        self.correct += other.correct;
        self.total += other.total;
    }

    /// `None` on an empty count.
    pub fn percent(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.correct as f64 / self.total as f64)
    }
}

/// Per-session inputs to the aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub session_id: usize,
    pub task: String,
    pub alpha: f64,
    pub delta: f64,
    pub base: f64,
    /// Absent for the first session.
    pub novel: Option<f64>,
}

fn mean(values: &[f64], what: &str) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Metrics(format!("{what} needs at least one value")));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn average_accuracy(alpha: &[f64]) -> Result<f64> {
    mean(alpha, "average accuracy")
}

/// Mean over intervals `(i, j)` of `δ_j − δ_i`, with 1-based session ids.
pub fn average_dge(delta: &[f64], intervals: &[(usize, usize)]) -> Result<f64> {
    if intervals.is_empty() {
        return Err(Error::Metrics("average DGE needs at least one interval".into()));
    }
    let mut total = 0.0;
    for &(i, j) in intervals {
        if i < 1 || j <= i || j > delta.len() {
            return Err(Error::Metrics(format!(
                "interval ({i}, {j}) is invalid for {} sessions",
                delta.len()
            )));
        }
        total += delta[j - 1] - delta[i - 1];
    }
    Ok(total / intervals.len() as f64)
}

/// `(1/(S−1)) Σ_{i≥2} (α^b_1 − α^b_i)`.
pub fn average_forgetting(base: &[f64]) -> Result<f64> {
    if base.len() < 2 {
        return Err(Error::Metrics("average forgetting needs at least two sessions".into()));
    }
    let first = base[0];
    let total: f64 = base[1..].iter().map(|b| first - b).sum();
    Ok(total / (base.len() - 1) as f64)
}

/// Mean novel-class accuracy over the incremental sessions.
pub fn average_novel_accuracy(novel: &[f64]) -> Result<f64> {
    mean(novel, "average novel accuracy")
}

pub fn final_accuracy(sessions: &[SessionMetrics]) -> Result<f64> {
    sessions
        .last()
        .map(|s| s.alpha)
        .ok_or_else(|| Error::Metrics("no sessions".into()))
}

pub fn final_dg(sessions: &[SessionMetrics]) -> Result<f64> {
    sessions
        .last()
        .map(|s| s.delta)
        .ok_or_else(|| Error::Metrics("no sessions".into()))
}

/// The six indicators. Those undefined for the given run are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub average_accuracy: f64,
    pub average_dge: Option<f64>,
    pub average_forgetting: Option<f64>,
    pub average_novel_accuracy: Option<f64>,
    pub final_accuracy: f64,
    pub final_dg: f64,
}

pub fn aggregate(sessions: &[SessionMetrics], intervals: &[(usize, usize)]) -> Result<Aggregates> {
    if sessions.is_empty() {
        return Err(Error::Metrics("no sessions".into()));
    }
    for (k, s) in sessions.iter().enumerate() {
        if s.session_id != k + 1 {
            return Err(Error::Metrics(format!("session {} found at position {}", s.session_id, k + 1)));
        }
        for v in [s.alpha, s.delta, s.base].into_iter().chain(s.novel) {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Metrics(format!("session {}: accuracy {v} outside [0, 100]", s.session_id)));
            }
        }
    }
    let alpha: Vec<f64> = sessions.iter().map(|s| s.alpha).collect();
    let delta: Vec<f64> = sessions.iter().map(|s| s.delta).collect();
    let base: Vec<f64> = sessions.iter().map(|s| s.base).collect();
    let novel: Vec<f64> = sessions.iter().skip(1).filter_map(|s| s.novel).collect();
    Ok(Aggregates {
        average_accuracy: average_accuracy(&alpha)?,
        average_dge: if intervals.is_empty() { None } else { Some(average_dge(&delta, intervals)?) },
        average_forgetting: average_forgetting(&base).ok(),
        average_novel_accuracy: average_novel_accuracy(&novel).ok(),
        final_accuracy: final_accuracy(sessions)?,
        final_dg: final_dg(sessions)?,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"))
}

pub const SESSIONS_HEADER: &str = "session,task,alpha,delta,base,novel";
pub const AGGREGATES_HEADER: &str =
    "average_accuracy,average_dge,average_forgetting,average_novel_accuracy,final_accuracy,final_dg";

/// One row per session, four decimals, `NA` for undefined cells.
pub fn sessions_csv(sessions: &[SessionMetrics]) -> String {
    let mut out = format!("{SESSIONS_HEADER}\n");
    for s in sessions {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{:.4},{}",
            s.session_id,
            s.task,
            s.alpha,
            s.delta,
            s.base,
            cell(s.novel)
        );
    }
    out
}

pub fn aggregates_csv(a: &Aggregates) -> String {
    format!(
        "{AGGREGATES_HEADER}\n{:.4},{},{},{},{:.4},{:.4}\n",
        a.average_accuracy,
        cell(a.average_dge),
        cell(a.average_forgetting),
        cell(a.average_novel_accuracy),
        a.final_accuracy,
        a.final_dg
    )
}

/// Plain-text table: one Acc and one DG row across sessions, then the
/// aggregates.
pub fn summary_table(sessions: &[SessionMetrics], a: &Aggregates) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<8}", "");
    for s in sessions {
        let _ = write!(out, "{:>8}", format!("S{}", s.session_id));
    }
    out.push('\n');
    let _ = write!(out, "{:<8}", "task");
    for s in sessions {
        let _ = write!(out, "{:>8}", s.task);
    }
    out.push('\n');
    for (label, pick) in [("Acc", 0), ("DG", 1)] {
        let _ = write!(out, "{label:<8}");
        for s in sessions {
            let v = if pick == 0 { s.alpha } else { s.delta };
            let _ = write!(out, "{v:>8.2}");
        }
        out.push('\n');
    }
    out.push('\n');
    let two = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.2}"));
    let _ = writeln!(out, "average accuracy        {:.2}", a.average_accuracy);
    let _ = writeln!(out, "average DGE             {}", two(a.average_dge));
    let _ = writeln!(out, "average forgetting      {}", two(a.average_forgetting));
    let _ = writeln!(out, "average novel accuracy  {}", two(a.average_novel_accuracy));
    let _ = writeln!(out, "final accuracy          {:.2}", a.final_accuracy);
    let _ = writeln!(out, "final DG                {:.2}", a.final_dg);
    out
}
