//! Line-delimited JSON training metrics.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: String,
    /// Environment steps so far (0 during warm-up).
    pub step: u64,
    pub updates: u64,
    pub success_ema: Vec<f64>,
    pub critic_loss: Vec<f64>,
    pub actor_loss: f64,
    pub bc: f64,
    pub q_term: f64,
    pub q_bars: Vec<f64>,
    pub task_weights: Vec<f64>,
    pub lambda: (f64, f64),
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub refine: Option<(f64, f64, f64)>,
    pub intervention_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_success: Option<Vec<f64>>,
    pub wall_s: f64,
    /// Counters reported by a remote actor.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub counters: BTreeMap<String, u64>,
}

/// Appends one JSON object per line; a log without a path only counts.
pub struct MetricsLog {
    out: Option<BufWriter<File>>,
    pub written: usize,
}

impl MetricsLog {
    pub fn discard() -> Self {
        Self { out: None, written: 0 }
    }

    pub fn append_to(path: impl AsRef<Path>) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: Some(BufWriter::new(f)),
            written: 0,
        })
    }

    pub fn log(&mut self, rec: &MetricsRecord) -> Result<()> {
        if let Some(out) = self.out.as_mut() {
            serde_json::to_writer(&mut *out, rec).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = self.out.as_mut() {
            out.flush()?;
        }
        Ok(())
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_parse_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        {
            let mut m = MetricsLog::append_to(&path).unwrap();
            for step in 0..3 {
                m.log(&MetricsRecord {
                    phase: "online".into(),
                    step,
                    ..Default::default()
                })
                .unwrap();
            }
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let recs: Vec<MetricsRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].step, 2);
    }
}
