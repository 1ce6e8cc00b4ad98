//! `dnas` — command-line harness for distribution-learning architecture
//! search on desk-scale synthetic tasks.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 unreadable
//! configuration file. Runtime failures print one JSON object to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use dnas_bench::canonical_space;
use dnas_bench::config::RunConfig;
use dnas_bench::dataset::{self, DatasetKind};
use dnas_bench::manifest::RunManifest;
use dnas_bench::oracle::{build_oracle, TabularBenchmark};
use dnas_bench::report;
use dnas_bench::sweep::{run_sweep, write_sweep_csv, SweepParam};
use dnas_core::diag::{dominant_eigenvalue, hutchinson_trace, supernet_discretization_gap};
use dnas_core::error::Error;
use dnas_core::ngvi::ArchDistribution;
use dnas_core::params::hvp;
use dnas_core::proxies::{proxy_score, select_architecture, ProxyMetric};
use dnas_core::search::{arch_grad_first_order, run_bayes_search, run_darts_baseline};
use dnas_core::space::{ArchLogits, DiscreteArch, DEFAULT_ENUM_CAP};
use dnas_core::supernet::{Batch, Supernet};
use dnas_core::trace::{decode_f64s, SearchCheckpoint, SearchTrace};
use dnas_core::util::{derive_seed, parse17};

#[derive(Parser)]
#[command(name = "dnas", version, about = "Architecture search over a small cell space")]
struct Cli {
    /// Worker threads for parallel sections (also: DNAS_WORKERS). Defaults to
    /// all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset CSV plus a held-out `<stem>_test.csv`.
    GenData(GenDataArgs),
    /// Train every architecture standalone and write the benchmark table.
    Oracle(OracleArgs),
    /// Run architecture search (distribution learning, or a point-estimate
    /// baseline with --baseline).
    Search(SearchArgs),
    /// Training-free selection from a search checkpoint.
    Select(SelectArgs),
    /// Score every architecture in the space with one proxy metric.
    ScoreAll(ScoreAllArgs),
    /// Curvature diagnostics and discretization gap at a checkpoint.
    Diag(DiagArgs),
    /// Repeat the search over a parameter grid and summarize regret.
    Sweep(SweepArgs),
    /// Join traces, scores and benchmark tables into CSV reports.
    #[command(subcommand)]
    Report(ReportCmd),
    /// Print the effective configuration as TOML.
    DumpConfig(DumpConfigArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// moons or blobs.
    #[arg(long, default_value = "moons")]
    kind: String,
    /// Points in the main file (train+validation; the test sibling gets half
    /// as many again).
    #[arg(long, default_value_t = 400)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Point-estimate RMSprop baseline instead of distribution learning.
    #[arg(long)]
    baseline: bool,
    /// Where to write the per-step trace (JSON lines).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Where to write the final checkpoint (JSON).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Resume from a checkpoint written by an identical configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreAllArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "synflow")]
    metric: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hutchinson probes (default: config diag_probes).
    #[arg(long)]
    probes: Option<usize>,
    /// Power-iteration steps (default: config eig_iters).
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Benchmark table CSV (from `oracle`).
    #[arg(long)]
    bench: PathBuf,
    /// m_samples, proxy_k, beta, or gamma.
    #[arg(long)]
    param: String,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Per-step rank and regret of a trace's argmax architectures.
    Regret {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank correlation between a score table and the benchmark.
    Spearman {
        /// `arch_id,ops,score` CSV (from `score-all`).
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Curvature columns of one or more traces, labeled.
    Hessian {
        /// Repeatable LABEL=PATH pairs.
        #[arg(long = "trace", value_name = "LABEL=PATH", required = true)]
        traces: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DumpConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Entry point and error mapping
// ---------------------------------------------------------------------------

/// Wrapper marking an error as "the configuration file could not be read",
/// which gets its own exit code.
#[derive(Debug)]
struct ConfigError(Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_workers(cli.workers) {
        eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
        return ExitCode::from(1);
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.downcast_ref::<ConfigError>().is_some() {
                3
            } else {
                1
            };
            eprintln!("{}", serde_json::json!({ "error": format!("{e:#}") }));
            ExitCode::from(code)
        }
    }
}

fn init_workers(flag: Option<usize>) -> anyhow::Result<()> {
    let env_workers = std::env::var("DNAS_WORKERS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok());
    if let Some(w) = flag.or(env_workers) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build_global()
            .map_err(|e| anyhow!("worker pool: {e}"))?;
    }
    Ok(())
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Oracle(a) => cmd_oracle(a),
        Cmd::Search(a) => cmd_search(a),
        Cmd::Select(a) => cmd_select(a),
        Cmd::ScoreAll(a) => cmd_score_all(a),
        Cmd::Diag(a) => cmd_diag(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Report(r) => cmd_report(r),
        Cmd::DumpConfig(a) => {
            let cfg = load_config(a.config.as_deref())?;
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::load_toml(p).map_err(|e| ConfigError(e).into()),
    }
}

struct Splits {
    train: Batch,
    val: Batch,
}

fn load_splits(path: &Path) -> anyhow::Result<Splits> {
    let all = dataset::load(path)?;
    let (train, val) = dataset::split_half(&all)?;
    Ok(Splits { train, val })
}

fn fresh_net(cfg: &RunConfig, like: &Batch, seed: u64) -> anyhow::Result<Supernet> {
    Ok(Supernet::new(
        canonical_space(),
        like.input_dim(),
        cfg.hidden_dim,
        like.num_classes(),
        seed,
    )?)
}

fn dist_from_checkpoint(ckpt: &SearchCheckpoint) -> anyhow::Result<ArchDistribution> {
    let mu = decode_f64s(&ckpt.mu)?;
    let s = decode_f64s(&ckpt.s)?;
    let delta_tilde = parse17(&ckpt.delta_tilde)?;
    let n = ckpt.n_data as usize;
    Ok(ArchDistribution::with_state(
        mu,
        s,
        delta_tilde * n as f64,
        n,
    )?)
}

fn write_manifest(
    path: Option<&Path>,
    subcommand: &str,
    seed: u64,
    cfg: &RunConfig,
    artifacts: &[PathBuf],
) -> anyhow::Result<()> {
    if let Some(p) = path {
        let mut m = RunManifest::new(subcommand, seed, &cfg.hash());
        for a in artifacts {
            m.push_artifact(a);
        }
        m.save(p)?;
    }
    Ok(())
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let kind: DatasetKind = a.kind.parse()?;
    let paths = dataset::generate(kind, a.n, a.classes, a.noise, a.seed, &a.out)?;
    emit(serde_json::json!({
        "kind": kind.to_string(),
        "n": a.n,
        "data": paths.data.display().to_string(),
        "test": paths.test.display().to_string(),
    }));
    Ok(())
}

fn cmd_oracle(a: OracleArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let splits = load_splits(&a.data)?;
    let test = dataset::load(&dataset::test_path_for(&a.data)?)?;
    let space = canonical_space();
    let bench = build_oracle(
        &space,
        &splits.train,
        &splits.val,
        &test,
        &cfg.oracle_config(),
        a.seed,
    )?;
    bench.save_csv(&a.out)?;
    write_manifest(a.manifest.as_deref(), "oracle", a.seed, &cfg, &[a.out.clone()])?;
    emit(serde_json::json!({
        "archs": bench.len(),
        "best_val_acc": bench.best_val_acc(),
        "out": a.out.display().to_string(),
    }));
    Ok(())
}

fn cmd_search(a: SearchArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let splits = load_splits(&a.data)?;
    let settings = cfg.to_settings();
    let mut net = fresh_net(&cfg, &splits.train, derive_seed(a.seed, "weights"))?;
    let resume = match &a.resume {
        Some(p) => Some(SearchCheckpoint::load(p)?),
        None => None,
    };
    let result = if a.baseline {
        run_darts_baseline(
            &mut net,
            &splits.train,
            &splits.val,
            &settings,
            a.seed,
            resume.as_ref(),
        )
    } else {
        run_bayes_search(
            &mut net,
            &splits.train,
            &splits.val,
            &settings,
            a.seed,
            resume.as_ref(),
        )
    };
    let outcome = match result {
        Ok(o) => o,
        Err(Error::Diverged { step, trace }) => {
            if let Some(path) = &a.trace {
                trace.save(path)?;
            }
            return Err(anyhow!(
                "search diverged at step {step} (validation loss runaway)"
            ));
        }
        Err(e) => return Err(e.into()),
    };
    let mut artifacts = Vec::new();
    if let Some(path) = &a.trace {
        outcome.trace.save(path)?;
        artifacts.push(path.clone());
    }
    if let Some(path) = &a.checkpoint {
        outcome.checkpoint.save(path)?;
        artifacts.push(path.clone());
    }
    write_manifest(a.manifest.as_deref(), "search", a.seed, &cfg, &artifacts)?;
    let space = canonical_space();
    emit(serde_json::json!({
        "argmax": outcome.argmax.compact(),
        "arch_id": outcome.argmax.id(&space)?,
        "steps": outcome.trace.len(),
        "val_loss": outcome.trace.last().map(|r| r.val_loss),
    }));
    Ok(())
}

fn cmd_select(a: SelectArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let splits = load_splits(&a.data)?;
    let ckpt = SearchCheckpoint::load(&a.checkpoint)?;
    let dist = dist_from_checkpoint(&ckpt)?;
    let metric: ProxyMetric = cfg.select_metric.parse()?;
    let net = fresh_net(&cfg, &splits.val, derive_seed(a.seed, "proxy-template"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(a.seed, "proxy-sample"));
    let sel = select_architecture(&net, &dist, cfg.select_k, metric, Some(&splits.val), &mut rng)?;
    let space = canonical_space();
    let value = serde_json::json!({
        "arch": sel.arch.compact(),
        "arch_id": sel.arch.id(&space)?,
        "score": sel.score,
        "candidates": sel.candidates,
        "metric": cfg.select_metric,
        "k": cfg.select_k,
    });
    let mut artifacts = Vec::new();
    if let Some(out) = &a.out {
        write_json(out, &value)?;
        artifacts.push(out.clone());
    }
    write_manifest(a.manifest.as_deref(), "select", a.seed, &cfg, &artifacts)?;
    emit(value);
    Ok(())
}

fn cmd_score_all(a: ScoreAllArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let splits = load_splits(&a.data)?;
    let metric: ProxyMetric = a.metric.parse()?;
    let space = canonical_space();
    let net = fresh_net(&cfg, &splits.val, derive_seed(a.seed, "proxy-template"))?;
    let archs: Vec<DiscreteArch> = space.enumerate_all(DEFAULT_ENUM_CAP)?.collect();
    let mut rows = archs
        .par_iter()
        .map(|arch| -> dnas_core::error::Result<(usize, String, f64)> {
            let score = proxy_score(&net, arch, metric, Some(&splits.val))?;
            Ok((arch.id(&space)?, arch.compact(), score))
        })
        .collect::<dnas_core::error::Result<Vec<_>>>()?;
    rows.sort_by_key(|(id, _, _)| *id);
    report::write_scores_csv(&a.out, &rows)?;
    emit(serde_json::json!({
        "archs": rows.len(),
        "metric": a.metric,
        "out": a.out.display().to_string(),
    }));
    Ok(())
}

fn cmd_diag(a: DiagArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let splits = load_splits(&a.data)?;
    let ckpt = SearchCheckpoint::load(&a.checkpoint)?;
    let mut net = fresh_net(&cfg, &splits.val, 0)?;
    net.set_weights_flat(&decode_f64s(&ckpt.weights)?)?;
    let mu = decode_f64s(&ckpt.mu)?;
    let dim = mu.len();
    let val = &splits.val;
    let net_ref = &net;
    let mut logit_grad = |theta: &[f64]| -> dnas_core::error::Result<Vec<f64>> {
        arch_grad_first_order(net_ref, theta, val).map(|(_, g)| g)
    };
    let mut apply = |v: &[f64]| hvp(&mut logit_grad, &mu, v);
    let probes = a.probes.unwrap_or(cfg.diag_probes).max(2);
    let iters = a.iters.unwrap_or(cfg.eig_iters).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(a.seed, "probes"));
    let tr = hutchinson_trace(&mut apply, dim, probes, &mut rng)?;
    let eig = dominant_eigenvalue(&mut apply, dim, iters, 1e-9, &mut rng)?;
    let logits = ArchLogits::from_flat(&canonical_space(), mu.clone())?;
    let gap = supernet_discretization_gap(&net, &logits, val)?;
    let value = serde_json::json!({
        "trace_mean": tr.mean,
        "trace_stderr": tr.stderr,
        "probes": tr.probes,
        "dominant_eig": eig,
        "gap_measured": gap.measured,
        "gap_taylor": gap.taylor,
        "loss_relaxed": gap.loss_from,
        "loss_discrete": gap.loss_to,
    });
    if let Some(out) = &a.out {
        write_json(out, &value)?;
    }
    emit(value);
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let splits = load_splits(&a.data)?;
    let bench = TabularBenchmark::load_csv(&a.bench)?;
    let param: SweepParam = a.param.parse()?;
    let rows = run_sweep(
        &canonical_space(),
        &splits.train,
        &splits.val,
        &cfg,
        &bench,
        param,
        &a.values,
        &a.seeds,
    )?;
    write_sweep_csv(&a.out, &rows)?;
    emit(serde_json::json!({
        "rows": rows.len(),
        "param": a.param,
        "out": a.out.display().to_string(),
    }));
    Ok(())
}

fn cmd_report(r: ReportCmd) -> anyhow::Result<()> {
    match r {
        ReportCmd::Regret { trace, bench, out } => {
            let trace = SearchTrace::load(&trace)?;
            let bench = TabularBenchmark::load_csv(&bench)?;
            let rows = report::regret_rows(&trace, &bench, &canonical_space())?;
            report::write_regret_csv(&out, &rows)?;
            emit(serde_json::json!({
                "rows": rows.len(),
                "out": out.display().to_string(),
            }));
        }
        ReportCmd::Spearman { scores, bench, out } => {
            let scores = report::load_scores_csv(&scores)?;
            let bench = TabularBenchmark::load_csv(&bench)?;
            let rep = report::spearman_report(&scores, &bench)?;
            let value = serde_json::json!({ "rho": rep.rho, "n": rep.n });
            if let Some(p) = &out {
                write_json(p, &value)?;
            }
            emit(value);
        }
        ReportCmd::Hessian { traces, out } => {
            let mut labeled = Vec::new();
            for spec in &traces {
                let (label, path) = spec.split_once('=').ok_or_else(|| {
                    anyhow!("--trace expects LABEL=PATH, got {spec:?}")
                })?;
                labeled.push((label.to_string(), SearchTrace::load(Path::new(path))?));
            }
            let refs: Vec<(String, &SearchTrace)> =
                labeled.iter().map(|(l, t)| (l.clone(), t)).collect();
            let rows = report::hessian_rows(&refs);
            report::write_hessian_csv(&out, &rows)?;
            emit(serde_json::json!({
                "rows": rows.len(),
                "out": out.display().to_string(),
            }));
        }
    }
    Ok(())
}
