//! Structured training logs: line-delimited JSON records.
//!
//! Records carry wall-clock timestamps for operators; every comparison
//! path (resume tests, determinism checks) strips them first.

use std::io::{BufRead, Write};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::LossBreakdown;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    AcanEpoch {
        epoch: usize,
        loss: f64,
        per_attribute: Vec<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        ts: Option<u64>,
    },
    GanStep {
        step: usize,
        breakdown: LossBreakdown,
        #[serde(skip_serializing_if = "Option::is_none")]
        ts: Option<u64>,
    },
    /// Oracle measurements of the fixed probe batch after an epoch.
    GanEpoch {
        epoch: usize,
        probe_contrast: f64,
        probe_color_variety: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        ts: Option<u64>,
    },
}

impl LogRecord {
    pub fn step_index(&self) -> usize {
        match self {
            LogRecord::AcanEpoch { epoch, .. } => *epoch,
            LogRecord::GanStep { step, .. } => *step,
            LogRecord::GanEpoch { epoch, .. } => *epoch,
        }
    }

    pub fn stamp_now(&mut self) {
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        match self {
            LogRecord::AcanEpoch { ts, .. }
            | LogRecord::GanStep { ts, .. }
            | LogRecord::GanEpoch { ts, .. } => *ts = Some(now),
        }
    }

    pub fn without_timestamp(&self) -> LogRecord {
        let mut r = self.clone();
        match &mut r {
            LogRecord::AcanEpoch { ts, .. }
            | LogRecord::GanStep { ts, .. }
            | LogRecord::GanEpoch { ts, .. } => *ts = None,
        }
        r
    }
}

/// Append-only record sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record; indices of the same kind must strictly increase.
    pub fn push(&mut self, record: LogRecord) {
        if let Some(last) = self
            .records
            .iter()
            .rev()
            .find(|r| std::mem::discriminant(*r) == std::mem::discriminant(&record))
        {
            assert!(
                record.step_index() > last.step_index(),
                "log indices must strictly increase"
            );
        }
        self.records.push(record);
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LogRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("bad log line: {e}")))?;
            records.push(rec);
        }
        Ok(Self { records })
    }

    /// Timestamp-free view used by all determinism comparisons.
    pub fn without_timestamps(&self) -> TrainingLog {
        TrainingLog {
            records: self.records.iter().map(|r| r.without_timestamp()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_jsonl() {
        let mut log = TrainingLog::new();
        log.push(LogRecord::AcanEpoch { epoch: 1, loss: 2.5, per_attribute: vec![0.1; 8], ts: Some(99) });
        log.push(LogRecord::AcanEpoch { epoch: 2, loss: 1.5, per_attribute: vec![0.05; 8], ts: Some(100) });
        let text = log.to_jsonl();
        let back = TrainingLog::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(log, back);
    }

    #[test]
    #[should_panic(expected = "strictly increase")]
    fn rejects_non_increasing_epochs() {
        let mut log = TrainingLog::new();
        log.push(LogRecord::AcanEpoch { epoch: 2, loss: 1.0, per_attribute: vec![], ts: None });
        log.push(LogRecord::AcanEpoch { epoch: 2, loss: 1.0, per_attribute: vec![], ts: None });
    }

    #[test]
    fn timestamp_stripping_compares_equal() {
        let mut a = TrainingLog::new();
        a.push(LogRecord::AcanEpoch { epoch: 1, loss: 1.0, per_attribute: vec![], ts: Some(5) });
        let mut b = TrainingLog::new();
        b.push(LogRecord::AcanEpoch { epoch: 1, loss: 1.0, per_attribute: vec![], ts: Some(9) });
        assert_ne!(a, b);
        assert_eq!(a.without_timestamps(), b.without_timestamps());
    }
}
