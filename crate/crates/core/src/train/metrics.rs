use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const METRICS_CSV_HEADER: &str = "period,model,train_loss,val_loss,val_fer,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// The synchronized model workers train on.
    Global,
    Ema,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Global => "global",
            ModelKind::Ema => "ema",
        })
    }
}

/// Evaluation of one model after synchronization `period` (0 is the initial
/// model, which has no training loss).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub period: usize,
    pub model: ModelKind,
    /// Mean per-utterance training loss since the previous row.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub val_fer: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rows: Vec<MetricRow>,
}

impl Metrics {
    pub fn push(&mut self, row: MetricRow) {
        debug_assert!(self.rows.last().is_none_or(|r| r.period <= row.period));
        self.rows.push(row);
    }

    pub fn last(&self, kind: ModelKind) -> Option<&MetricRow> {
        self.rows.iter().rev().find(|r| r.model == kind)
    }

    /// Appends another run's rows, shifting their periods past this one's.
    pub fn extend_after(&mut self, other: Metrics) {
        let offset = self.rows.last().map_or(0, |r| r.period + 1);
        self.rows.extend(other.rows.into_iter().map(|mut r| {
            r.period += offset;
            r
        }));
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let train = r.train_loss.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{:.3}",
                r.period, r.model, train, r.val_loss, r.val_fer, r.wall_ms
            )
            .expect("writing to a string");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}
