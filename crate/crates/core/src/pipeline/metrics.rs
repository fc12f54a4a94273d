use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub phase: String,
    pub epoch: usize,
    pub step: u64,
    pub metric: String,
    pub value: f64,
}

/// Append-only metric rows, written as `phase,epoch,step,metric,value`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub const HEADER: [&'static str; 5] = ["phase", "epoch", "step", "metric", "value"];

    pub fn push(&mut self, phase: &str, epoch: usize, step: u64, metric: &str, value: f64) {
        log::debug!("{phase} epoch {epoch} step {step} {metric}={value}");
        self.rows.push(MetricRow {
            phase: phase.to_string(),
            epoch,
            step,
            metric: metric.to_string(),
            value,
        });
    }

    pub fn extend(&mut self, other: MetricsLog) {
        self.rows.extend(other.rows);
    }

    pub fn series(&self, phase: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.phase == phase && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn first(&self, phase: &str, metric: &str) -> Option<f64> {
        self.series(phase, metric).first().copied()
    }

    pub fn last(&self, phase: &str, metric: &str) -> Option<f64> {
        self.series(phase, metric).last().copied()
    }

    /// Phases in order of first appearance.
    pub fn phase_order(&self) -> Vec<String> {
        let mut seen: Vec<String> = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.phase) {
                seen.push(r.phase.clone());
            }
        }
        seen
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(Self::HEADER).map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.phase.clone(),
                r.epoch.to_string(),
                r.step.to_string(),
                r.metric.clone(),
                r.value.to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}
