//! Hyperparameter sweeps: repeat the search across a grid of one parameter's
//! values and several seeds, and report per-run and median regret against a
//! benchmark table.

use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dnas_core::error::{Error, Result};
use dnas_core::proxies::{select_architecture, ProxyMetric};
use dnas_core::search::run_bayes_search;
use dnas_core::space::CellSpace;
use dnas_core::supernet::{Batch, Supernet};
use dnas_core::util::derive_seed;

use crate::config::RunConfig;
use crate::metrics::median;
use crate::oracle::TabularBenchmark;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    /// Monte Carlo draws per architecture step.
    MSamples,
    /// Candidate pool size for training-free selection.
    ProxyK,
    /// Natural-gradient learning rate.
    Beta,
    /// Mean-update momentum weight.
    Gamma,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m_samples" => Ok(SweepParam::MSamples),
            "proxy_k" => Ok(SweepParam::ProxyK),
            "beta" => Ok(SweepParam::Beta),
            "gamma" => Ok(SweepParam::Gamma),
            other => Err(Error::InvalidArg {
                ctx: "sweep param",
                msg: format!(
                    "unknown parameter {other:?}; expected m_samples, proxy_k, beta, or gamma"
                ),
            }),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            SweepParam::MSamples => "m_samples",
            SweepParam::ProxyK => "proxy_k",
            SweepParam::Beta => "beta",
            SweepParam::Gamma => "gamma",
        };
        write!(f, "{name}")
    }
}

impl SweepParam {
    fn integer_valued(&self) -> bool {
        matches!(self, SweepParam::MSamples | SweepParam::ProxyK)
    }

    fn apply(&self, cfg: &mut RunConfig, value: f64) {
        match self {
            SweepParam::MSamples => cfg.m_samples = value as usize,
            SweepParam::ProxyK => cfg.select_k = value as usize,
            SweepParam::Beta => cfg.beta = value,
            SweepParam::Gamma => cfg.gamma = value,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    /// `run` for one (value, seed) result, `aggregate` for the per-value
    /// median over seeds.
    pub kind: &'static str,
    pub param: String,
    pub value: f64,
    pub seed: Option<u64>,
    pub status: &'static str,
    pub regret: Option<f64>,
}

fn one_run(
    space: &CellSpace,
    train: &Batch,
    val: &Batch,
    cfg: &RunConfig,
    bench: &TabularBenchmark,
    param: SweepParam,
    seed: u64,
) -> Result<f64> {
    let mut net = Supernet::new(
        space.clone(),
        train.input_dim(),
        cfg.hidden_dim,
        train.num_classes(),
        derive_seed(seed, "weights"),
    )?;
    let outcome = run_bayes_search(&mut net, train, val, &cfg.to_settings(), seed, None)?;
    let arch = if param == SweepParam::ProxyK {
        let metric: ProxyMetric = cfg.select_metric.parse()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "proxy-sample"));
        select_architecture(&net, &outcome.dist, cfg.select_k, metric, Some(val), &mut rng)?.arch
    } else {
        outcome.argmax
    };
    bench.regret_of(arch.id(space)?)
}

/// Runs the full grid. Individual run failures (divergence, bad derived
/// settings) are recorded as `status = error` rows and the sweep continues;
/// only invalid grids fail upfront.
pub fn run_sweep(
    space: &CellSpace,
    train: &Batch,
    val: &Batch,
    base: &RunConfig,
    bench: &TabularBenchmark,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArg {
            ctx: "sweep",
            msg: "values and seeds must both be non-empty".into(),
        });
    }
    for v in values {
        if !v.is_finite() || (param.integer_valued() && (*v < 0.0 || v.fract() != 0.0)) {
            return Err(Error::InvalidArg {
                ctx: "sweep",
                msg: format!("bad value {v} for parameter {param}"),
            });
        }
    }
    let mut rows = Vec::new();
    for &value in values {
        let mut cfg = base.clone();
        param.apply(&mut cfg, value);
        let mut ok_regrets = Vec::new();
        for &seed in seeds {
            match one_run(space, train, val, &cfg, bench, param, seed) {
                Ok(regret) => {
                    ok_regrets.push(regret);
                    rows.push(SweepRow {
                        kind: "run",
                        param: param.to_string(),
                        value,
                        seed: Some(seed),
                        status: "ok",
                        regret: Some(regret),
                    });
                }
                Err(_) => rows.push(SweepRow {
                    kind: "run",
                    param: param.to_string(),
                    value,
                    seed: Some(seed),
                    status: "error",
                    regret: None,
                }),
            }
        }
        let aggregate = median(&ok_regrets).ok();
        rows.push(SweepRow {
            kind: "aggregate",
            param: param.to_string(),
            value,
            seed: None,
            status: if aggregate.is_some() { "ok" } else { "error" },
            regret: aggregate,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["kind", "param", "value", "seed", "status", "regret"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.kind.to_string(),
            r.param.clone(),
            r.value.to_string(),
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
            r.status.to_string(),
            r.regret.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
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

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use dnas_core::space::{DiscreteArch, OpKind};
    use dnas_core::tape::Tensor;

    use crate::oracle::BenchEntry;

    fn space2() -> CellSpace {
        CellSpace::dense(2, vec![OpKind::Skip, OpKind::DenseRelu, OpKind::Zero]).unwrap()
    }

    fn batches() -> (Batch, Batch) {
        let make = |offset: f64| {
            let mut inputs = Vec::new();
            let mut labels = Vec::new();
            for i in 0..8 {
                let side = i % 2;
                let x = if side == 0 { -1.0 } else { 1.0 };
                inputs.push(x + 0.1 * (i as f64 + offset));
                inputs.push(-x + 0.1 * offset);
                labels.push(side);
            }
            Batch::new(Tensor::matrix(8, 2, inputs).unwrap(), labels, 2).unwrap()
        };
        (make(0.0), make(0.5))
    }

    fn bench27() -> TabularBenchmark {
        let space = space2();
        let entries = (0..27)
            .map(|i| BenchEntry {
                arch_id: i,
                ops: DiscreteArch::from_id(&space, i).unwrap().compact(),
                val_acc: (i as f64) / 26.0,
                test_acc: 0.0,
            })
            .collect();
        TabularBenchmark::new(entries).unwrap()
    }

    fn tiny_config() -> RunConfig {
        RunConfig {
            steps: 3,
            m_samples: 1,
            train_minibatch: 4,
            val_minibatch: 8,
            hidden_dim: 3,
            ..RunConfig::default()
        }
    }

    #[test]
    fn sweep_emits_runs_then_aggregate_per_value() {
        let (train, val) = batches();
        let rows = run_sweep(
            &space2(),
            &train,
            &val,
            &tiny_config(),
            &bench27(),
            SweepParam::Beta,
            &[0.05, 0.1],
            &[1, 2],
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].kind, "run");
        assert_eq!(rows[1].kind, "run");
        assert_eq!(rows[2].kind, "aggregate");
        assert_eq!(rows[2].value, 0.05);
        assert!(rows.iter().all(|r| r.status == "ok"));
        let expected = median(&[rows[0].regret.unwrap(), rows[1].regret.unwrap()]).unwrap();
        assert_eq!(rows[2].regret.unwrap(), expected);
    }

    #[test]
    fn failed_runs_are_recorded_and_do_not_stop_the_sweep() {
        let (train, val) = batches();
        // proxy_k = 0 makes selection fail for that value; the other value
        // still completes.
        let rows = run_sweep(
            &space2(),
            &train,
            &val,
            &tiny_config(),
            &bench27(),
            SweepParam::ProxyK,
            &[0.0, 2.0],
            &[1],
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].status, "error");
        assert_eq!(rows[1].status, "error");
        assert!(rows[1].regret.is_none());
        assert_eq!(rows[2].status, "ok");
        assert_eq!(rows[3].status, "ok");
    }

    #[test]
    fn invalid_grids_fail_upfront() {
        let (train, val) = batches();
        let err = run_sweep(
            &space2(),
            &train,
            &val,
            &tiny_config(),
            &bench27(),
            SweepParam::Beta,
            &[],
            &[1],
        );
        assert!(err.is_err());
        let err = run_sweep(
            &space2(),
            &train,
            &val,
            &tiny_config(),
            &bench27(),
            SweepParam::MSamples,
            &[1.5],
            &[1],
        );
        assert!(err.is_err());
        assert!("lr".parse::<SweepParam>().is_err());
    }

    #[test]
    fn sweep_csv_has_empty_cells_for_missing_fields() {
        let dir = std::env::temp_dir().join(format!("dnas_sweep_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("sweep.csv");
        write_sweep_csv(
            &p,
            &[SweepRow {
                kind: "aggregate",
                param: "beta".into(),
                value: 0.1,
                seed: None,
                status: "error",
                regret: None,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("aggregate,beta,0.1,,error,"));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
