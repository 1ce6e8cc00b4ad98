//! Report generation: joins search traces, proxy scores and the tabular
//! benchmark into CSV summaries.

use std::path::Path;

use dnas_core::error::{Error, Result};
use dnas_core::space::{CellSpace, DiscreteArch};
use dnas_core::trace::SearchTrace;

use crate::metrics::spearman;
use crate::oracle::TabularBenchmark;

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArg {
            ctx: "csv",
            msg: format!("{other:?}"),
        },
    }
}

// ---------------------------------------------------------------------------
// Regret over a search trajectory
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct RegretRow {
    pub step: u64,
    pub argmax_arch: String,
    pub rank: usize,
    pub regret: f64,
}

/// One row per trace record: where the step's argmax architecture lands in
/// the benchmark table.
pub fn regret_rows(
    trace: &SearchTrace,
    bench: &TabularBenchmark,
    space: &CellSpace,
) -> Result<Vec<RegretRow>> {
    trace
        .records()
        .iter()
        .map(|r| {
            let arch = DiscreteArch::parse_compact(&r.argmax_arch)?;
            let id = arch.id(space)?;
            Ok(RegretRow {
                step: r.step,
                argmax_arch: r.argmax_arch.clone(),
                rank: bench.rank_of(id)?,
                regret: bench.regret_of(id)?,
            })
        })
        .collect()
}

pub fn write_regret_csv(path: &Path, rows: &[RegretRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["step", "argmax_arch", "rank", "regret"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.argmax_arch.clone(),
            r.rank.to_string(),
            r.regret.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Proxy-score agreement with the benchmark
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct SpearmanReport {
    pub rho: f64,
    pub n: usize,
}

/// Rank correlation between per-architecture scores (dense by id) and the
/// benchmark's validation accuracies.
pub fn spearman_report(scores: &[f64], bench: &TabularBenchmark) -> Result<SpearmanReport> {
    if scores.len() != bench.len() {
        return Err(Error::InvalidArg {
            ctx: "spearman report",
            msg: format!(
                "{} scores for a table of {} architectures",
                scores.len(),
                bench.len()
            ),
        });
    }
    Ok(SpearmanReport {
        rho: spearman(scores, &bench.val_accs())?,
        n: scores.len(),
    })
}

/// Reads a `arch_id,ops,score` CSV (as written by `score-all`) into a dense
/// score vector.
pub fn load_scores_csv(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut scores: Vec<(usize, f64)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        if record.len() != 3 {
            return Err(Error::Parse {
                ctx: format!("{}: expected 3 columns, got {}", path.display(), record.len()),
            });
        }
        let id: usize = record[0].parse().map_err(|_| Error::Parse {
            ctx: format!("{}: bad arch_id {:?}", path.display(), &record[0]),
        })?;
        let score: f64 = record[2].parse().map_err(|_| Error::Parse {
            ctx: format!("{}: bad score {:?}", path.display(), &record[2]),
        })?;
        scores.push((id, score));
    }
    scores.sort_by_key(|(id, _)| *id);
    for (i, (id, _)) in scores.iter().enumerate() {
        if *id != i {
            return Err(Error::Parse {
                ctx: format!("{}: score table is not dense at id {id}", path.display()),
            });
        }
    }
    if scores.is_empty() {
        return Err(Error::EmptyData { ctx: "score file" });
    }
    Ok(scores.into_iter().map(|(_, s)| s).collect())
}

pub fn write_scores_csv(path: &Path, rows: &[(usize, String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["arch_id", "ops", "score"]).map_err(csv_err)?;
    for (id, ops, score) in rows {
        w.write_record([id.to_string(), ops.clone(), score.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Curvature trajectory
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct HessianRow {
    pub label: String,
    pub step: u64,
    pub trace_estimate: f64,
    pub dominant_eig: f64,
}

/// Flattens the diagnostic fields of one or more labeled traces, skipping
/// steps where diagnostics did not run.
pub fn hessian_rows(traces: &[(String, &SearchTrace)]) -> Vec<HessianRow> {
    let mut rows = Vec::new();
    for (label, trace) in traces {
        for r in trace.records() {
            if let (Some(t), Some(e)) = (r.trace_estimate, r.dominant_eig) {
                rows.push(HessianRow {
                    label: label.clone(),
                    step: r.step,
                    trace_estimate: t,
                    dominant_eig: e,
                });
            }
        }
    }
    rows
}

pub fn write_hessian_csv(path: &Path, rows: &[HessianRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["label", "step", "trace_estimate", "dominant_eig"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.step.to_string(),
            r.trace_estimate.to_string(),
            r.dominant_eig.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use dnas_core::space::OpKind;
    use dnas_core::trace::StepRecord;

    use crate::oracle::BenchEntry;

    fn space2() -> CellSpace {
        CellSpace::dense(2, vec![OpKind::Skip, OpKind::DenseRelu, OpKind::Zero]).unwrap()
    }

    fn bench27() -> TabularBenchmark {
        let space = space2();
        let entries = (0..27)
            .map(|i| {
                let arch = DiscreteArch::from_id(&space, i).unwrap();
                BenchEntry {
                    arch_id: i,
                    ops: arch.compact(),
                    val_acc: (i as f64) / 26.0,
                    test_acc: 0.0,
                }
            })
            .collect();
        TabularBenchmark::new(entries).unwrap()
    }

    fn record(step: u64, argmax: &str, diag: Option<(f64, f64)>) -> StepRecord {
        StepRecord {
            step,
            train_loss: 1.0,
            val_loss: 1.0,
            mu_hash: "0".repeat(16),
            sampled_arch: argmax.to_string(),
            argmax_arch: argmax.to_string(),
            skip_ratio: 0.0,
            trace_estimate: diag.map(|d| d.0),
            dominant_eig: diag.map(|d| d.1),
            wall_ms: 0.0,
        }
    }

    #[test]
    fn regret_rows_join_trace_with_benchmark() {
        let bench = bench27();
        let space = space2();
        let mut trace = SearchTrace::new();
        // Ids: 2-2-2 is 26 (best), 0-0-0 is 0 (worst).
        trace.push(record(0, "0-0-0", None)).unwrap();
        trace.push(record(1, "2-2-2", None)).unwrap();
        let rows = regret_rows(&trace, &bench, &space).unwrap();
        assert_eq!(rows[0].rank, 27);
        assert!((rows[0].regret - 1.0).abs() < 1e-15);
        assert_eq!(rows[1].rank, 1);
        assert_eq!(rows[1].regret, 0.0);
    }

    #[test]
    fn spearman_report_checks_length_and_correlates() {
        let bench = bench27();
        let accs = bench.val_accs();
        let report = spearman_report(&accs, &bench).unwrap();
        assert!((report.rho - 1.0).abs() < 1e-12);
        assert_eq!(report.n, 27);
        assert!(spearman_report(&accs[..5], &bench).is_err());
    }

    #[test]
    fn hessian_rows_skip_steps_without_diagnostics() {
        let mut trace = SearchTrace::new();
        trace.push(record(0, "0-0-0", None)).unwrap();
        trace.push(record(1, "0-0-0", Some((3.5, 1.25)))).unwrap();
        let rows = hessian_rows(&[("run".to_string(), &trace)]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].step, 1);
        assert_eq!(rows[0].trace_estimate, 3.5);
        assert_eq!(rows[0].dominant_eig, 1.25);
    }

    #[test]
    fn score_csv_round_trips_and_requires_density() {
        let dir = std::env::temp_dir().join(format!("dnas_report_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("scores.csv");
        write_scores_csv(
            &p,
            &[
                (0, "0-0-0".into(), 1.5),
                (1, "0-0-1".into(), -2.25),
            ],
        )
        .unwrap();
        assert_eq!(load_scores_csv(&p).unwrap(), vec![1.5, -2.25]);
        write_scores_csv(&p, &[(1, "0-0-1".into(), 1.0)]).unwrap();
        assert!(load_scores_csv(&p).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
