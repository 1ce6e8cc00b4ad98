//! Exhaustive tabular benchmark over a cell space.
//!
//! Every architecture is trained standalone from the same template
//! initialization on the same minibatch schedule, so the only thing that
//! varies between entries is the architecture itself. The resulting table
//! serves as ground truth for ranking search output.

use std::path::Path;

use rayon::prelude::*;

use dnas_core::error::{Error, Result};
use dnas_core::search::minibatch_for_step;
use dnas_core::space::{CellSpace, DiscreteArch};
use dnas_core::supernet::{Batch, Supernet, TrainTarget};
use dnas_core::util::derive_seed;

use crate::metrics::{competition_ranks, median};

#[derive(Clone, Debug)]
pub struct OracleConfig {
    /// SGD steps per architecture.
    pub budget: u64,
    pub lr: f64,
    pub momentum: f64,
    pub minibatch: usize,
    pub hidden_dim: usize,
    /// Refuse to enumerate spaces larger than this.
    pub enum_cap: u128,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            budget: 200,
            lr: 0.05,
            momentum: 0.9,
            minibatch: 32,
            hidden_dim: 16,
            enum_cap: dnas_core::space::DEFAULT_ENUM_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchEntry {
    pub arch_id: usize,
    /// Compact op string, e.g. `1-0-2-0-1-1`.
    pub ops: String,
    pub val_acc: f64,
    pub test_acc: f64,
}

/// Benchmark table indexed densely by architecture id.
#[derive(Clone, Debug)]
pub struct TabularBenchmark {
    entries: Vec<BenchEntry>,
}

impl TabularBenchmark {
    pub fn new(entries: Vec<BenchEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyData { ctx: "benchmark" });
        }
        for (i, e) in entries.iter().enumerate() {
            if e.arch_id != i {
                return Err(Error::InvalidArg {
                    ctx: "benchmark",
                    msg: format!("entry {i} has arch_id {}; table must be dense", e.arch_id),
                });
            }
            if !e.val_acc.is_finite() || !e.test_acc.is_finite() {
                return Err(Error::NonFinite { ctx: "benchmark accuracy" });
            }
        }
        Ok(TabularBenchmark { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BenchEntry] {
        &self.entries
    }

    pub fn entry(&self, arch_id: usize) -> Result<&BenchEntry> {
        self.entries.get(arch_id).ok_or(Error::InvalidArg {
            ctx: "benchmark",
            msg: format!("arch id {arch_id} out of range (table has {})", self.entries.len()),
        })
    }

    pub fn val_accs(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.val_acc).collect()
    }

    pub fn best_val_acc(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.val_acc)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Competition rank of an architecture by validation accuracy (1 = best;
    /// ties share the better rank).
    pub fn rank_of(&self, arch_id: usize) -> Result<usize> {
        self.entry(arch_id)?;
        Ok(competition_ranks(&self.val_accs())[arch_id])
    }

    /// Validation-accuracy gap to the best architecture in the table.
    pub fn regret_of(&self, arch_id: usize) -> Result<f64> {
        Ok(self.best_val_acc() - self.entry(arch_id)?.val_acc)
    }

    /// Exact median regret of a uniform-random pick: the median of every
    /// architecture's regret.
    pub fn median_uniform_regret(&self) -> f64 {
        let best = self.best_val_acc();
        let regrets: Vec<f64> = self.entries.iter().map(|e| best - e.val_acc).collect();
        median(&regrets).expect("table is non-empty")
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["arch_id", "ops", "val_acc", "test_acc"])
            .map_err(csv_err)?;
        for e in &self.entries {
            w.write_record([
                e.arch_id.to_string(),
                e.ops.clone(),
                e.val_acc.to_string(),
                e.test_acc.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
        let mut entries = Vec::new();
        for record in reader.records() {
            let record = record.map_err(csv_err)?;
            if record.len() != 4 {
                return Err(Error::Parse {
                    ctx: format!(
                        "{}: expected 4 columns, got {}",
                        path.display(),
                        record.len()
                    ),
                });
            }
            let field = |i: usize, name: &str| -> Result<f64> {
                record[i].parse().map_err(|_| Error::Parse {
                    ctx: format!("{}: bad {name} value {:?}", path.display(), &record[i]),
                })
            };
            entries.push(BenchEntry {
                arch_id: record[0].parse().map_err(|_| Error::Parse {
                    ctx: format!("{}: bad arch_id {:?}", path.display(), &record[0]),
                })?,
                ops: record[1].to_string(),
                val_acc: field(2, "val_acc")?,
                test_acc: field(3, "test_acc")?,
            });
        }
        TabularBenchmark::new(entries)
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArg {
            ctx: "csv",
            msg: format!("{other:?}"),
        },
    }
}

/// Trains one architecture from the template and returns `(val_acc,
/// test_acc)`. Architectures whose training produces non-finite values score
/// 0.0 on both splits rather than aborting the whole table.
fn train_one(
    template: &Supernet,
    arch: &DiscreteArch,
    train: &Batch,
    val: &Batch,
    test: &Batch,
    cfg: &OracleConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut net = template.clone();
    let mut momentum = net.zero_momentum();
    let target = TrainTarget::Discrete(arch);
    for t in 0..cfg.budget {
        let mb = minibatch_for_step(train, cfg.minibatch, seed, "oracle-train", t)?;
        match net.sgd_weight_step(&mut momentum, &target, &mb, cfg.lr, cfg.momentum) {
            Ok(_) => {}
            Err(Error::NonFinite { .. }) => return Ok((0.0, 0.0)),
            Err(e) => return Err(e),
        }
    }
    Ok((net.accuracy(&target, val)?, net.accuracy(&target, test)?))
}

/// Builds the full table by training every architecture in `space`.
/// All entries share one template initialization (stream `oracle-init`) and
/// one minibatch schedule (stream `oracle-train`), and the table is identical
/// regardless of worker count.
pub fn build_oracle(
    space: &CellSpace,
    train: &Batch,
    val: &Batch,
    test: &Batch,
    cfg: &OracleConfig,
    seed: u64,
) -> Result<TabularBenchmark> {
    if cfg.budget == 0 || cfg.minibatch == 0 {
        return Err(Error::InvalidArg {
            ctx: "oracle",
            msg: "budget and minibatch must be positive".into(),
        });
    }
    let template = Supernet::new(
        space.clone(),
        train.input_dim(),
        cfg.hidden_dim,
        train.num_classes(),
        derive_seed(seed, "oracle-init"),
    )?;
    let archs: Vec<DiscreteArch> = space.enumerate_all(cfg.enum_cap)?.collect();
    let mut entries = archs
        .par_iter()
        .map(|arch| -> Result<BenchEntry> {
            let (val_acc, test_acc) = train_one(&template, arch, train, val, test, cfg, seed)?;
            Ok(BenchEntry {
                arch_id: arch.id(space)?,
                ops: arch.compact(),
                val_acc,
                test_acc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.arch_id);
    TabularBenchmark::new(entries)
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use dnas_core::space::OpKind;
    use dnas_core::tape::Tensor;

    fn tiny_space() -> CellSpace {
        CellSpace::dense(2, vec![OpKind::Skip, OpKind::DenseRelu, OpKind::Zero]).unwrap()
    }

    fn tiny_batches() -> (Batch, Batch, Batch) {
        let make = |offset: f64| {
            let mut inputs = Vec::new();
            let mut labels = Vec::new();
            for i in 0..8 {
                let side = i % 2;
                let x = if side == 0 { -1.0 } else { 1.0 };
                inputs.push(x + 0.05 * (i as f64 + offset));
                inputs.push(x - 0.05 * (i as f64 + offset));
                labels.push(side);
            }
            Batch::new(Tensor::matrix(8, 2, inputs).unwrap(), labels, 2).unwrap()
        };
        (make(0.0), make(0.3), make(0.6))
    }

    fn fake_entries(accs: &[f64]) -> Vec<BenchEntry> {
        accs.iter()
            .enumerate()
            .map(|(i, a)| BenchEntry {
                arch_id: i,
                ops: format!("{i}"),
                val_acc: *a,
                test_acc: *a,
            })
            .collect()
    }

    #[test]
    fn ranks_and_regrets_match_hand_values() {
        let b = TabularBenchmark::new(fake_entries(&[0.5, 0.9, 0.7, 0.9])).unwrap();
        assert_eq!(b.best_val_acc(), 0.9);
        assert_eq!(b.rank_of(1).unwrap(), 1);
        assert_eq!(b.rank_of(3).unwrap(), 1);
        assert_eq!(b.rank_of(2).unwrap(), 3);
        assert_eq!(b.rank_of(0).unwrap(), 4);
        assert!((b.regret_of(0).unwrap() - 0.4).abs() < 1e-15);
        // Regrets are [0.4, 0, 0.2, 0]; median = (0.2 + 0) / 2 = 0.1.
        assert!((b.median_uniform_regret() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn dense_id_requirement_is_enforced() {
        let mut entries = fake_entries(&[0.5, 0.6]);
        entries[1].arch_id = 5;
        assert!(TabularBenchmark::new(entries).is_err());
        assert!(TabularBenchmark::new(vec![]).is_err());
    }

    #[test]
    fn oracle_is_deterministic_and_dense() {
        let space = tiny_space();
        let (train, val, test) = tiny_batches();
        let cfg = OracleConfig {
            budget: 12,
            hidden_dim: 4,
            minibatch: 4,
            ..OracleConfig::default()
        };
        let a = build_oracle(&space, &train, &val, &test, &cfg, 11).unwrap();
        let b = build_oracle(&space, &train, &val, &test, &cfg, 11).unwrap();
        assert_eq!(a.len(), space.count_archs(1 << 20).unwrap() as usize);
        for (x, y) in a.entries().iter().zip(b.entries()) {
            assert_eq!(x, y);
        }
        // Architectures actually separate: the table is not one constant.
        let accs = a.val_accs();
        assert!(accs.iter().any(|v| *v != accs[0]));
    }

    #[test]
    fn oracle_csv_round_trips() {
        let space = tiny_space();
        let (train, val, test) = tiny_batches();
        let cfg = OracleConfig {
            budget: 6,
            hidden_dim: 4,
            minibatch: 4,
            ..OracleConfig::default()
        };
        let bench = build_oracle(&space, &train, &val, &test, &cfg, 3).unwrap();
        let dir = std::env::temp_dir().join(format!("dnas_oracle_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bench.csv");
        bench.save_csv(&path).unwrap();
        let loaded = TabularBenchmark::load_csv(&path).unwrap();
        for (x, y) in bench.entries().iter().zip(loaded.entries()) {
            assert_eq!(x.arch_id, y.arch_id);
            assert_eq!(x.ops, y.ops);
            assert_eq!(x.val_acc.to_bits(), y.val_acc.to_bits());
            assert_eq!(x.test_acc.to_bits(), y.test_acc.to_bits());
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
