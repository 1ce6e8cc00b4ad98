//! Training-free architecture scoring.
//!
//! All three proxies score a discrete architecture against a shared
//! template supernet (one seeded initialization reused for every candidate),
//! summing only over the parameters that architecture actually uses (stem,
//! selected parametric edge ops, head). Higher scores are better for every
//! metric.
//!
//! * `snip`: sum of |g * theta| — gradient-magnitude saliency.
//! * `grasp`: sum of -(H g) * theta — gradient-flow preservation.
//! * `synflow`: data-free path sensitivity. The network is rebuilt with
//!   absolute weights, identity activations, no biases, and an all-ones
//!   input; each weight matrix is scaled to unit max-abs before the forward
//!   pass to keep products bounded, and the score is corrected by the product
//!   of the scale factors afterwards. A weight matrix that is identically
//!   zero makes the whole score zero.

use std::collections::BTreeSet;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ngvi::ArchDistribution;
use crate::params::hvp;
use crate::space::{discretize_argmax, ArchLogits, DiscreteArch, OpKind};
use crate::supernet::{Batch, Supernet};
use crate::tape::{Shape, Tape, Tensor};

// ---------------------------------------------------------------------------
// Metric selection
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyMetric {
    Snip,
    Grasp,
    Synflow,
}

impl ProxyMetric {
    pub fn name(&self) -> &'static str {
        match self {
            ProxyMetric::Snip => "snip",
            ProxyMetric::Grasp => "grasp",
            ProxyMetric::Synflow => "synflow",
        }
    }

    pub fn needs_batch(&self) -> bool {
        !matches!(self, ProxyMetric::Synflow)
    }
}

impl std::fmt::Display for ProxyMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProxyMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snip" => Ok(ProxyMetric::Snip),
            "grasp" => Ok(ProxyMetric::Grasp),
            "synflow" => Ok(ProxyMetric::Synflow),
            other => Err(Error::InvalidArg {
                ctx: "proxy metric",
                msg: format!("unknown metric {other:?}; expected snip, grasp, or synflow"),
            }),
        }
    }
}

/// Scores `arch` with the requested metric. Data-dependent metrics error
/// without a batch; `synflow` ignores one.
pub fn proxy_score(
    net: &Supernet,
    arch: &DiscreteArch,
    metric: ProxyMetric,
    batch: Option<&Batch>,
) -> Result<f64> {
    match metric {
        ProxyMetric::Snip => {
            let batch = batch.ok_or(Error::MetricNeedsBatch { metric: "snip" })?;
            snip_score(net, arch, batch)
        }
        ProxyMetric::Grasp => {
            let batch = batch.ok_or(Error::MetricNeedsBatch { metric: "grasp" })?;
            grasp_score(net, arch, batch)
        }
        ProxyMetric::Synflow => synflow_score(net, arch),
    }
}

// ---------------------------------------------------------------------------
// Parameter bookkeeping
// ---------------------------------------------------------------------------

/// Flat-index ranges (into the canonical weight vector) of the parameters an
/// architecture owns.
fn owned_ranges(net: &Supernet, arch: &DiscreteArch) -> Result<Vec<(usize, usize)>> {
    let owned: BTreeSet<String> = net.arch_param_names(arch)?.into_iter().collect();
    let mut ranges = Vec::new();
    let mut offset = 0usize;
    for (name, tensor) in net.weights().iter() {
        let len = tensor.shape().len();
        if owned.contains(name) {
            ranges.push((offset, offset + len));
        }
        offset += len;
    }
    Ok(ranges)
}

fn masked_dot_abs(a: &[f64], b: &[f64], ranges: &[(usize, usize)]) -> f64 {
    let mut total = 0.0;
    for &(lo, hi) in ranges {
        for i in lo..hi {
            total += (a[i] * b[i]).abs();
        }
    }
    total
}

fn masked_neg_dot(a: &[f64], b: &[f64], ranges: &[(usize, usize)]) -> f64 {
    let mut total = 0.0;
    for &(lo, hi) in ranges {
        for i in lo..hi {
            total -= a[i] * b[i];
        }
    }
    total
}

// ---------------------------------------------------------------------------
// SNIP and GraSP
// ---------------------------------------------------------------------------

/// `sum |g_i theta_i|` over the architecture's own parameters, with `g` the
/// gradient of the mean per-datum loss on `batch`.
pub fn snip_score(net: &Supernet, arch: &DiscreteArch, batch: &Batch) -> Result<f64> {
    let ranges = owned_ranges(net, arch)?;
    let mut graph = net.eval_discrete(arch, batch)?;
    let loss = graph.tape.forward_scalar(graph.loss)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { ctx: "snip loss" });
    }
    graph.tape.backward(graph.loss)?;
    let grad = graph.weight_grad(net)?;
    Ok(masked_dot_abs(&grad, &net.weights_flat(), &ranges))
}

/// `sum -(H g)_i theta_i` over the architecture's own parameters, with `H`
/// the loss Hessian and `g` the gradient, both at the template weights.
pub fn grasp_score(net: &Supernet, arch: &DiscreteArch, batch: &Batch) -> Result<f64> {
    let ranges = owned_ranges(net, arch)?;
    let flat0 = net.weights_flat();
    let mut grad_at = |p: &[f64]| -> Result<Vec<f64>> {
        let mut probe = net.clone();
        probe.set_weights_flat(p)?;
        let mut graph = probe.eval_discrete(arch, batch)?;
        let loss = graph.tape.forward_scalar(graph.loss)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { ctx: "grasp loss" });
        }
        graph.tape.backward(graph.loss)?;
        graph.weight_grad(&probe)
    };
    let g0 = grad_at(&flat0)?;
    let hg = hvp(&mut grad_at, &flat0, &g0)?;
    Ok(masked_neg_dot(&hg, &flat0, &ranges))
}

// ---------------------------------------------------------------------------
// Synflow
// ---------------------------------------------------------------------------

/// Data-free path-sensitivity score. See the module docs for the
/// construction; biases never participate.
pub fn synflow_score(net: &Supernet, arch: &DiscreteArch) -> Result<f64> {
    // Weight matrices the architecture routes signal through, in network
    // order: stem, selected parametric edges, head.
    let mut layer_names = vec!["stem_w".to_string()];
    for (e, &op) in arch.0.iter().enumerate() {
        let kind = net.space().ops().get(op).copied().ok_or(Error::InvalidArg {
            ctx: "synflow",
            msg: format!("op index {op} out of range"),
        })?;
        if kind.is_parametric() {
            layer_names.push(Supernet::edge_param_names(e, kind).0);
        }
    }
    layer_names.push("head_w".to_string());

    // Per-layer max-abs scale; a zero matrix zeroes every path through it.
    let mut scales = Vec::with_capacity(layer_names.len());
    for name in &layer_names {
        let w = net.weights().get(name).expect("layer names are canonical");
        let c = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if c == 0.0 {
            return Ok(0.0);
        }
        scales.push(c);
    }

    // Build the abs/identity network on the tape with normalized weights.
    let mut tape = Tape::new();
    let mut leaf_of = std::collections::BTreeMap::new();
    for (name, c) in layer_names.iter().zip(&scales) {
        let w = net.weights().get(name).unwrap();
        let (rows, cols) = match w.shape() {
            Shape::Matrix(r, k) => (r, k),
            other => {
                return Err(Error::InvalidArg {
                    ctx: "synflow",
                    msg: format!("weight {name:?} is not a matrix: {other}"),
                })
            }
        };
        let data: Vec<f64> = w.data().iter().map(|v| v.abs() / c).collect();
        let leaf = tape.leaf(Tensor::matrix(rows, cols, data)?);
        leaf_of.insert(name.clone(), leaf);
    }

    let h = net.hidden_dim();
    let ones = tape.constant(Tensor::matrix(1, net.input_dim(), vec![1.0; net.input_dim()])?);
    let stem = tape.matmul(ones, leaf_of["stem_w"])?;

    let space = net.space();
    let mut feats: Vec<Option<crate::tape::NodeId>> = vec![None; space.num_nodes() + 1];
    feats[0] = Some(stem);
    for to in 1..=space.num_nodes() {
        let mut acc = None;
        for (e, &(from, dst)) in space.edges().iter().enumerate() {
            if dst != to {
                continue;
            }
            let src = feats[from].expect("edges are topologically ordered");
            let kind = space.ops()[arch.0[e]];
            let out = match kind {
                OpKind::Skip => src,
                OpKind::Zero => tape.constant(Tensor::zeros(Shape::Matrix(1, h))),
                OpKind::AvgCombine => {
                    let avg = tape.constant(Tensor::matrix(h, h, vec![1.0 / h as f64; h * h])?);
                    tape.matmul(src, avg)?
                }
                OpKind::DenseRelu | OpKind::DenseTanh => {
                    let name = Supernet::edge_param_names(e, kind).0;
                    tape.matmul(src, leaf_of[&name])?
                }
            };
            acc = Some(match acc {
                Some(prev) => tape.add(prev, out)?,
                None => out,
            });
        }
        feats[to] = Some(acc.expect("validated: every node has an incoming edge"));
    }
    let mut cell = feats[1].unwrap();
    for f in feats.iter().skip(2).flatten() {
        cell = tape.add(cell, *f)?;
    }
    let cell = tape.scale(cell, 1.0 / space.num_nodes() as f64)?;
    let head = tape.matmul(cell, leaf_of["head_w"])?;
    let objective = tape.sum(head)?;

    tape.forward_scalar(objective)?;
    tape.backward(objective)?;

    let mut scaled = 0.0;
    for name in &layer_names {
        let leaf = leaf_of[name];
        let grad = tape.grad(leaf)?;
        let value = tape.value(leaf)?;
        for (g, w) in grad.iter().zip(value.data()) {
            scaled += g * w;
        }
    }
    Ok(scaled * scales.iter().product::<f64>())
}

// ---------------------------------------------------------------------------
// Proxy-based selection
// ---------------------------------------------------------------------------

/// Outcome of proxy-based candidate selection.
#[derive(Clone, Debug)]
pub struct Selection {
    pub arch: DiscreteArch,
    pub score: f64,
    /// Distinct candidates that were actually scored (samples are deduped).
    pub candidates: usize,
}

/// Draws `k` architectures from the distribution (each draw is discretized by
/// per-edge argmax), dedupes them, scores every distinct candidate, and
/// returns the best. Ties go to the lexicographically smallest architecture.
pub fn select_architecture<R: Rng>(
    net: &Supernet,
    dist: &ArchDistribution,
    k: usize,
    metric: ProxyMetric,
    batch: Option<&Batch>,
    rng: &mut R,
) -> Result<Selection> {
    if k == 0 {
        return Err(Error::InvalidArg {
            ctx: "selection",
            msg: "need at least one candidate draw".into(),
        });
    }
    let space = net.space();
    if dist.dim() != space.num_edges() * space.num_ops() {
        return Err(Error::InvalidArg {
            ctx: "selection",
            msg: format!(
                "distribution dim {} does not match {} edges x {} ops",
                dist.dim(),
                space.num_edges(),
                space.num_ops()
            ),
        });
    }
    let mut seen: BTreeSet<DiscreteArch> = BTreeSet::new();
    for _ in 0..k {
        let theta = dist.sample(rng)?;
        let logits = ArchLogits::from_flat(space, theta)?;
        seen.insert(discretize_argmax(&logits));
    }
    let mut best: Option<Selection> = None;
    for arch in seen.iter() {
        let score = proxy_score(net, arch, metric, batch)?;
        let better = match &best {
            None => true,
            Some(b) => score > b.score,
        };
        if better {
            best = Some(Selection {
                arch: arch.clone(),
                score,
                candidates: seen.len(),
            });
        }
    }
    Ok(best.expect("k >= 1 guarantees at least one candidate"))
}
