//! Cell-structured search space: a small DAG whose edges each carry one
//! operation chosen from a fixed menu.
//!
//! Node 0 is the cell input (the stem output at network level); nodes
//! `1..=num_nodes` are intermediate nodes. An architecture assigns one op
//! index to every edge. Continuous relaxation replaces the hard choice with a
//! rowwise softmax over per-edge logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default ceiling for exhaustive enumeration.
pub const DEFAULT_ENUM_CAP: u128 = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    /// Identity: passes features through unchanged.
    Skip,
    /// Produces zeros of the input shape (severs the edge).
    Zero,
    /// Dense layer followed by relu.
    DenseRelu,
    /// Dense layer followed by tanh.
    DenseTanh,
    /// Replaces every feature with the mean over the feature dimension.
    AvgCombine,
}

impl OpKind {
    /// Whether the op owns a weight block.
    pub fn is_parametric(&self) -> bool {
        matches!(self, OpKind::DenseRelu | OpKind::DenseTanh)
    }

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Skip => "skip",
            OpKind::Zero => "zero",
            OpKind::DenseRelu => "dense_relu",
            OpKind::DenseTanh => "dense_tanh",
            OpKind::AvgCombine => "avg_combine",
        }
    }
}

/// The search space: intermediate node count, op menu, and DAG edges.
///
/// Edges are `(from, to)` with `from < to`; `to` is always an intermediate
/// node. Edge order is canonical and defines logits rows and weight naming.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpace {
    num_nodes: usize,
    ops: Vec<OpKind>,
    edges: Vec<(usize, usize)>,
}

impl CellSpace {
    /// Space with the given edges. Validates DAG structure (`from < to`),
    /// reachability (every intermediate node has at least one incoming edge),
    /// an op menu of at least two entries, and at most one skip and one zero.
    pub fn new(num_nodes: usize, ops: Vec<OpKind>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let space = CellSpace {
            num_nodes,
            ops,
            edges,
        };
        space.validate()?;
        Ok(space)
    }

    /// Densely connected cell: every intermediate node receives an edge from
    /// every earlier node including the input. Edge order: ascending by
    /// destination, then by source.
    pub fn dense(num_nodes: usize, ops: Vec<OpKind>) -> Result<Self> {
        let mut edges = Vec::new();
        for to in 1..=num_nodes {
            for from in 0..to {
                edges.push((from, to));
            }
        }
        CellSpace::new(num_nodes, ops, edges)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Error::InvalidArg {
            ctx: "cell_space",
            msg,
        };
        if self.num_nodes == 0 {
            return Err(fail("need at least one intermediate node".into()));
        }
        if self.ops.len() < 2 {
            return Err(fail(format!("need at least 2 ops, got {}", self.ops.len())));
        }
        for kind in [OpKind::Skip, OpKind::Zero] {
            if self.ops.iter().filter(|o| **o == kind).count() > 1 {
                return Err(fail(format!("op {} listed more than once", kind.name())));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut incoming = vec![0usize; self.num_nodes + 1];
        for &(from, to) in &self.edges {
            if from >= to || to > self.num_nodes {
                return Err(fail(format!("edge ({from}, {to}) violates from < to <= {}", self.num_nodes)));
            }
            if !seen.insert((from, to)) {
                return Err(fail(format!("duplicate edge ({from}, {to})")));
            }
            incoming[to] += 1;
        }
        for node in 1..=self.num_nodes {
            if incoming[node] == 0 {
                return Err(fail(format!("intermediate node {node} has no incoming edge")));
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn ops(&self) -> &[OpKind] {
        &self.ops
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Number of discrete architectures (`num_ops ^ num_edges`) if it fits
    /// the cap.
    pub fn count_archs(&self, cap: u128) -> Result<u128> {
        let mut total: u128 = 1;
        for _ in 0..self.num_edges() {
            total = total
                .checked_mul(self.num_ops() as u128)
                .ok_or(Error::EnumerationCap {
                    required: u128::MAX,
                    cap,
                })?;
            if total > cap {
                return Err(Error::EnumerationCap {
                    required: total,
                    cap,
                });
            }
        }
        Ok(total)
    }

    /// Lexicographic iterator over every discrete architecture. Errors when
    /// the space exceeds `cap` (pass [`DEFAULT_ENUM_CAP`] for the default).
    pub fn enumerate_all(&self, cap: u128) -> Result<ArchIter> {
        let total = self.count_archs(cap)?;
        Ok(ArchIter {
            num_edges: self.num_edges(),
            num_ops: self.num_ops(),
            next: 0,
            total: total as usize,
        })
    }
}

/// One discrete architecture: an op index per edge, in canonical edge order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DiscreteArch(pub Vec<usize>);

impl DiscreteArch {
    /// Position in lexicographic enumeration order.
    pub fn id(&self, space: &CellSpace) -> Result<usize> {
        if self.0.len() != space.num_edges() {
            return Err(Error::InvalidArg {
                ctx: "discrete_arch",
                msg: format!("{} ops for {} edges", self.0.len(), space.num_edges()),
            });
        }
        let mut id = 0usize;
        for &op in &self.0 {
            if op >= space.num_ops() {
                return Err(Error::InvalidArg {
                    ctx: "discrete_arch",
                    msg: format!("op index {op} out of range ({} ops)", space.num_ops()),
                });
            }
            id = id * space.num_ops() + op;
        }
        Ok(id)
    }

    /// Inverse of [`DiscreteArch::id`].
    pub fn from_id(space: &CellSpace, mut id: usize) -> Result<Self> {
        let mut ops = vec![0usize; space.num_edges()];
        for slot in ops.iter_mut().rev() {
            *slot = id % space.num_ops();
            id /= space.num_ops();
        }
        if id != 0 {
            return Err(Error::InvalidArg {
                ctx: "discrete_arch",
                msg: "id out of range".into(),
            });
        }
        Ok(DiscreteArch(ops))
    }

    /// Compact `"1-0-2"` notation used in CSV exports and traces.
    pub fn compact(&self) -> String {
        self.0
            .iter()
            .map(|o| o.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn parse_compact(s: &str) -> Result<Self> {
        let ops = s
            .split('-')
            .map(|tok| {
                tok.parse::<usize>().map_err(|e| Error::Parse {
                    ctx: format!("arch token {tok:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DiscreteArch(ops))
    }
}

/// Lexicographic architecture iterator (see [`CellSpace::enumerate_all`]).
pub struct ArchIter {
    num_edges: usize,
    num_ops: usize,
    next: usize,
    total: usize,
}

impl Iterator for ArchIter {
    type Item = DiscreteArch;

    fn next(&mut self) -> Option<DiscreteArch> {
        if self.next >= self.total {
            return None;
        }
        let mut id = self.next;
        self.next += 1;
        let mut ops = vec![0usize; self.num_edges];
        for slot in ops.iter_mut().rev() {
            *slot = id % self.num_ops;
            id /= self.num_ops;
        }
        Some(DiscreteArch(ops))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let rem = self.total - self.next;
        (rem, Some(rem))
    }
}

impl ExactSizeIterator for ArchIter {}

/// Per-edge op logits: a dense `num_edges x num_ops` matrix in edge order.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchLogits {
    num_edges: usize,
    num_ops: usize,
    data: Vec<f64>,
}

impl ArchLogits {
    pub fn zeros(space: &CellSpace) -> Self {
        ArchLogits {
            num_edges: space.num_edges(),
            num_ops: space.num_ops(),
            data: vec![0.0; space.num_edges() * space.num_ops()],
        }
    }

    pub fn from_flat(space: &CellSpace, data: Vec<f64>) -> Result<Self> {
        if data.len() != space.num_edges() * space.num_ops() {
            return Err(Error::InvalidArg {
                ctx: "arch_logits",
                msg: format!(
                    "flat length {} != {} edges x {} ops",
                    data.len(),
                    space.num_edges(),
                    space.num_ops()
                ),
            });
        }
        Ok(ArchLogits {
            num_edges: space.num_edges(),
            num_ops: space.num_ops(),
            data,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn num_ops(&self) -> usize {
        self.num_ops
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, edge: usize) -> &[f64] {
        &self.data[edge * self.num_ops..(edge + 1) * self.num_ops]
    }

    /// Rowwise softmax: the continuous relaxation's mixture weights. Each row
    /// sums to 1 up to roundoff.
    pub fn relaxed(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        for e in 0..self.num_edges {
            let row = self.row(e);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, x) in row.iter().enumerate() {
                let v = (x - max).exp();
                out[e * self.num_ops + j] = v;
                denom += v;
            }
            for j in 0..self.num_ops {
                out[e * self.num_ops + j] /= denom;
            }
        }
        out
    }
}

/// Hard selection: per-edge argmax over raw logits, ties resolved to the
/// lowest op index. Softmax is strictly monotone per row, so discretizing raw
/// logits and discretizing relaxed weights agree.
pub fn discretize_argmax(logits: &ArchLogits) -> DiscreteArch {
    let mut ops = Vec::with_capacity(logits.num_edges());
    for e in 0..logits.num_edges() {
        let row = logits.row(e);
        let mut best = 0usize;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        ops.push(best);
    }
    DiscreteArch(ops)
}

/// Fraction of edges assigned the given op kind. Errors when the kind is not
/// on the space's menu or the arch does not match the space.
pub fn op_ratio(space: &CellSpace, arch: &DiscreteArch, kind: OpKind) -> Result<f64> {
    let kind_idx = space
        .ops()
        .iter()
        .position(|o| *o == kind)
        .ok_or_else(|| Error::UnknownOp {
            kind: kind.name().into(),
        })?;
    if arch.0.len() != space.num_edges() {
        return Err(Error::InvalidArg {
            ctx: "op_ratio",
            msg: format!("{} ops for {} edges", arch.0.len(), space.num_edges()),
        });
    }
    let count = arch.0.iter().filter(|&&o| o == kind_idx).count();
    Ok(count as f64 / space.num_edges() as f64)
}
