//! Search traces and checkpoints.
//!
//! Traces are JSONL (one step record per line) so partial runs stay
//! readable. Checkpoints store every float as a 17-significant-digit decimal
//! string, which round-trips `f64` bit-exactly; resuming from a checkpoint
//! therefore reproduces the remaining trajectory exactly.
//!
//! `wall_ms` is the single nondeterministic field a record carries. Anything
//! comparing traces for reproducibility should compare them through
//! [`SearchTrace::canonical`], which zeroes it.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::util::{fmt17, parse17};

// ---------------------------------------------------------------------------
// Step records
// ---------------------------------------------------------------------------

/// One architecture-search step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Hex digest prefix of the distribution mean, for cheap trajectory
    /// comparison without storing the full vector per step.
    pub mu_hash: String,
    /// Architecture sampled for this step's weight update, compact form.
    pub sampled_arch: String,
    /// Argmax-of-mean architecture at this step, compact form.
    pub argmax_arch: String,
    /// Fraction of edges whose argmax op is `skip`.
    pub skip_ratio: f64,
    /// Hessian-trace estimate, when diagnostics ran this step.
    pub trace_estimate: Option<f64>,
    /// Dominant Hessian eigenvalue estimate, when diagnostics ran this step.
    pub dominant_eig: Option<f64>,
    /// Wall-clock milliseconds spent on the step (nondeterministic).
    pub wall_ms: f64,
}

/// Short stable digest of a float vector: floats are rendered with 17
/// significant digits (bit-exact) and hashed, keeping the digest independent
/// of formatting whims.
pub fn param_hash(values: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(fmt17(*v).as_bytes());
        hasher.update(b",");
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Traces
// ---------------------------------------------------------------------------

/// An append-only sequence of step records with strictly increasing steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    records: Vec<StepRecord>,
}

impl SearchTrace {
    pub fn new() -> Self {
        SearchTrace::default()
    }

    pub fn push(&mut self, record: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(Error::InvalidArg {
                    ctx: "trace",
                    msg: format!(
                        "step {} does not follow step {}; steps must strictly increase",
                        record.step, last.step
                    ),
                });
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    /// Copy with the nondeterministic `wall_ms` field zeroed on every record;
    /// two runs of the same seed must agree on this view exactly.
    pub fn canonical(&self) -> SearchTrace {
        let mut out = self.clone();
        for r in out.records.iter_mut() {
            r.wall_ms = 0.0;
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<SearchTrace> {
        let mut trace = SearchTrace::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: StepRecord = serde_json::from_str(&line)?;
            trace.push(record)?;
        }
        Ok(trace)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<SearchTrace> {
        let file = std::fs::File::open(path)?;
        SearchTrace::read_jsonl(BufReader::new(file))
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Complete optimizer + supernet state at one step. Floats are stored as
/// decimal strings with enough digits to round-trip bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchCheckpoint {
    pub step: u64,
    /// Distribution mean (or baseline logits).
    pub mu: Vec<String>,
    /// Scale/second-moment accumulator.
    pub s: Vec<String>,
    /// Previous mean, for the momentum term.
    pub mu_prev: Vec<String>,
    /// Supernet weights, canonical flat order.
    pub weights: Vec<String>,
    /// SGD momentum buffer, same layout as `weights`.
    pub momentum: Vec<String>,
    /// Effective prior precision baked into the optimizer.
    pub delta_tilde: String,
    /// Dataset size the variational scheme assumes.
    pub n_data: u64,
}

pub fn encode_f64s(values: &[f64]) -> Vec<String> {
    values.iter().map(|v| fmt17(*v)).collect()
}

pub fn decode_f64s(values: &[String]) -> Result<Vec<f64>> {
    values.iter().map(|s| parse17(s)).collect()
}

impl SearchCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SearchCheckpoint> {
        let file = std::fs::File::open(path)?;
        let ckpt = serde_json::from_reader(BufReader::new(file))?;
        Ok(ckpt)
    }
}
