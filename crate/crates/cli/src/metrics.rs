//! Append-only training log: one JSON object per optimizer step. Records hold
//! no timing so that logs of identical runs compare byte for byte.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use bytelift_core::training::StepMetrics;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: String,
    pub step: usize,
    pub loss: f64,
    pub l_boundary: f64,
    pub l_encoder: f64,
    pub l_distill: f64,
    pub l_ce: f64,
    pub boundary_acc: f64,
    pub compression: f64,
    pub lr_global: f64,
    pub lr_local: f64,
    pub grad_norm: f64,
}

impl MetricsRecord {
    pub fn new(phase: &str, m: &StepMetrics) -> Self {
        Self {
            phase: phase.to_string(),
            step: m.step,
            loss: m.loss.total,
            l_boundary: m.loss.l_boundary,
            l_encoder: m.loss.l_encoder,
            l_distill: m.loss.l_distill,
            l_ce: m.loss.l_ce,
            boundary_acc: m.boundary_acc,
            compression: m.compression,
            lr_global: m.lr_global,
            lr_local: m.lr_local,
            grad_norm: m.grad_norm,
        }
    }
}

pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    /// Appends to `path`, creating it if needed.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(Self {
            out: BufWriter::new(f),
        })
    }

    pub fn write(&mut self, r: &MetricsRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, r)?;
        self.out.write_all(b"\n")
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

/// Parses a log written by [`MetricsLog`].
pub fn read_log(text: &str) -> serde_json::Result<Vec<MetricsRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
