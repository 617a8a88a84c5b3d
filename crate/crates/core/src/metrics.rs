//! Append-only metric records and their CSV form.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Align,
    Train,
    Eval,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Align => "align",
            Phase::Train => "train",
            Phase::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub phase: Phase,
    pub stage: String,
    pub step: usize,
    pub seed: u64,
    pub task: Option<String>,
    pub values: BTreeMap<String, f64>,
    /// Seconds since the run started. Kept out of the CSV so that
    /// identical runs produce identical files.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock: Option<f64>,
}

impl MetricsRecord {
    pub fn new(run_id: &str, phase: Phase, stage: &str, step: usize, seed: u64) -> Self {
        Self {
            run_id: run_id.to_string(),
            phase,
            stage: stage.to_string(),
            step,
            seed,
            task: None,
            values: BTreeMap::new(),
            wall_clock: None,
        }
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.values.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("step {step} after {prev} in ({run}, {phase}, {stage})")]
    NonMonotone {
        run: String,
        phase: &'static str,
        stage: String,
        prev: usize,
        step: usize,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Checks that steps increase within every (run, phase, stage).
pub fn check_monotone(records: &[MetricsRecord]) -> Result<(), MetricsError> {
    let mut last: BTreeMap<(String, &'static str, String), usize> = BTreeMap::new();
    for r in records {
        let key = (r.run_id.clone(), r.phase.name(), r.stage.clone());
        if let Some(&prev) = last.get(&key) {
            if r.step <= prev {
                return Err(MetricsError::NonMonotone {
                    run: key.0,
                    phase: key.1,
                    stage: key.2,
                    prev,
                    step: r.step,
                });
            }
        }
        last.insert(key, r.step);
    }
    Ok(())
}

/// Writes records as CSV with fixed leading columns followed by `columns`;
/// absent values are left empty.
pub fn write_csv<W: Write>(
    w: W,
    records: &[MetricsRecord],
    columns: &[&str],
    config_hash: &str,
) -> Result<(), MetricsError> {
    check_monotone(records)?;
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["run_id", "config_hash", "phase", "stage", "step", "seed", "eval_task"];
    header.extend_from_slice(columns);
    out.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.run_id.clone(),
            config_hash.to_string(),
            r.phase.name().to_string(),
            r.stage.clone(),
            r.step.to_string(),
            r.seed.to_string(),
            r.task.clone().unwrap_or_default(),
        ];
        for c in columns {
            row.push(r.get(c).map(|v| v.to_string()).unwrap_or_default());
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}
