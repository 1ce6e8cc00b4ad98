//! Weight-sharing supernet over a [`CellSpace`].
//!
//! Network layout: dense stem (input -> hidden), one cell whose node features
//! are sums over incoming edge ops, mean over the cell's intermediate nodes,
//! dense head (hidden -> classes), softmax cross-entropy loss.
//!
//! Every parametric op on every edge owns a distinct weight block: sharing is
//! across architectures, never across edges. Three forward modes share one
//! graph builder:
//!
//! * mixed   - edge outputs weighted by rowwise softmax of logits, the
//!             continuous relaxation (differentiable w.r.t. logits too);
//! * discrete - only the selected op per edge is materialized;
//! * raw      - edge outputs weighted by caller-supplied mixture weights with
//!              no softmax in between (used for one-hot consistency checks and
//!              discretization-gap measurements).

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::space::{ArchLogits, CellSpace, DiscreteArch, OpKind};
use crate::tape::{NodeId, Shape, Tape, Tensor};

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// A labeled input batch. Construction validates shapes and label range, so
/// downstream code can assume a non-empty, consistent batch.
#[derive(Clone, Debug)]
pub struct Batch {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let rows = match inputs.shape() {
            Shape::Matrix(r, _) => r,
            other => {
                return Err(Error::InvalidArg {
                    ctx: "batch",
                    msg: format!("inputs must be a matrix, got {other}"),
                })
            }
        };
        if rows == 0 {
            return Err(Error::EmptyData { ctx: "batch" });
        }
        if rows != labels.len() {
            return Err(Error::InvalidArg {
                ctx: "batch",
                msg: format!("{rows} input rows vs {} labels", labels.len()),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArg {
                ctx: "batch",
                msg: format!("label {bad} out of range for {num_classes} classes"),
            });
        }
        Ok(Batch {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        match self.inputs.shape() {
            Shape::Matrix(_, c) => c,
            _ => unreachable!("validated in new"),
        }
    }

    /// New batch from a subset of row indices (minibatch extraction).
    pub fn subset(&self, rows: &[usize]) -> Result<Batch> {
        if rows.is_empty() {
            return Err(Error::EmptyData { ctx: "batch subset" });
        }
        let dim = self.input_dim();
        let src = self.inputs.data();
        let mut data = Vec::with_capacity(rows.len() * dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.len() {
                return Err(Error::InvalidArg {
                    ctx: "batch subset",
                    msg: format!("row {r} out of range ({} rows)", self.len()),
                });
            }
            data.extend_from_slice(&src[r * dim..(r + 1) * dim]);
            labels.push(self.labels[r]);
        }
        Batch::new(
            Tensor::matrix(rows.len(), dim, data)?,
            labels,
            self.num_classes,
        )
    }
}

// ---------------------------------------------------------------------------
// Supernet
// ---------------------------------------------------------------------------

/// Which architecture view a forward/SGD step should use.
#[derive(Clone, Copy, Debug)]
pub enum TrainTarget<'a> {
    Mixed(&'a ArchLogits),
    Discrete(&'a DiscreteArch),
}

/// One evaluated forward graph plus handles into it.
pub struct EvalGraph {
    pub tape: Tape,
    /// Scalar cross-entropy loss node.
    pub loss: NodeId,
    /// Class-logit matrix node (for predictions).
    pub pred_logits: NodeId,
    /// The architecture-logits leaf (mixed mode only).
    pub arch_node: Option<NodeId>,
    /// The raw mixture-weights leaf (raw mode only).
    pub mixture_node: Option<NodeId>,
    /// Weight leaves aligned with the canonical parameter order; `None` for
    /// parameters the chosen mode never touched (their gradient is zero).
    pub weight_nodes: Vec<Option<NodeId>>,
}

impl EvalGraph {
    /// Flat weight gradient in canonical parameter order (zeros for unused
    /// blocks). Call after `tape.backward(self.loss)`.
    pub fn weight_grad(&self, net: &Supernet) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(net.weights.dim());
        for ((_, tensor), node) in net.weights.iter().zip(&self.weight_nodes) {
            match node {
                Some(id) => out.extend_from_slice(self.tape.grad(*id)?),
                None => out.extend(std::iter::repeat(0.0).take(tensor.shape().len())),
            }
        }
        Ok(out)
    }
}

enum BuildMode<'a> {
    Mixed(&'a ArchLogits),
    Discrete(&'a DiscreteArch),
    Raw(&'a [f64]),
}

#[derive(Clone, Debug)]
pub struct Supernet {
    space: CellSpace,
    input_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
    weights: ParamSet,
}

impl Supernet {
    /// Fresh supernet with uniform `(-1/sqrt(fan_in), +1/sqrt(fan_in))` init
    /// drawn from a dedicated stream seeded by `seed`.
    pub fn new(
        space: CellSpace,
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || num_classes < 2 {
            return Err(Error::InvalidArg {
                ctx: "supernet",
                msg: format!(
                    "bad dims: input {input_dim}, hidden {hidden_dim}, classes {num_classes}"
                ),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = ParamSet::new();
        let dense = |weights: &mut ParamSet,
                         rng: &mut ChaCha8Rng,
                         name_w: String,
                         name_b: String,
                         fan_in: usize,
                         fan_out: usize|
         -> Result<()> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
            let b: Vec<f64> = (0..fan_out).map(|_| dist.sample(rng)).collect();
            weights.push(name_w, Tensor::matrix(fan_in, fan_out, w)?)?;
            weights.push(name_b, Tensor::vector(b))?;
            Ok(())
        };

        dense(
            &mut weights,
            &mut rng,
            "stem_w".into(),
            "stem_b".into(),
            input_dim,
            hidden_dim,
        )?;
        for e in 0..space.num_edges() {
            for kind in space.ops() {
                if kind.is_parametric() {
                    let (w, b) = Supernet::edge_param_names(e, *kind);
                    dense(&mut weights, &mut rng, w, b, hidden_dim, hidden_dim)?;
                }
            }
        }
        dense(
            &mut weights,
            &mut rng,
            "head_w".into(),
            "head_b".into(),
            hidden_dim,
            num_classes,
        )?;

        Ok(Supernet {
            space,
            input_dim,
            hidden_dim,
            num_classes,
            weights,
        })
    }

    /// Canonical weight-block names for a parametric op on an edge.
    pub fn edge_param_names(edge: usize, kind: OpKind) -> (String, String) {
        (
            format!("e{edge}_{}_w", kind.name()),
            format!("e{edge}_{}_b", kind.name()),
        )
    }

    /// Names of the parameters a discrete architecture actually uses: stem,
    /// the selected parametric edge ops, head.
    pub fn arch_param_names(&self, arch: &DiscreteArch) -> Result<Vec<String>> {
        self.check_arch(arch)?;
        let mut names = vec!["stem_w".to_string(), "stem_b".to_string()];
        for (e, &op) in arch.0.iter().enumerate() {
            let kind = self.space.ops()[op];
            if kind.is_parametric() {
                let (w, b) = Supernet::edge_param_names(e, kind);
                names.push(w);
                names.push(b);
            }
        }
        names.push("head_w".into());
        names.push("head_b".into());
        Ok(names)
    }

    pub fn space(&self) -> &CellSpace {
        &self.space
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn weights(&self) -> &ParamSet {
        &self.weights
    }

    pub fn weights_flat(&self) -> Vec<f64> {
        self.weights.flatten()
    }

    pub fn set_weights_flat(&mut self, flat: &[f64]) -> Result<()> {
        self.weights.assign_flat(flat)
    }

    /// Copies weight tensors from `other` by name (shapes must match). Used
    /// to transplant weights between supernets whose canonical orders differ,
    /// e.g. under op-menu permutations.
    pub fn copy_weights_by_name(&mut self, other: &ParamSet) -> Result<()> {
        let mut fresh = ParamSet::new();
        for (name, own) in self.weights.iter() {
            let src = other.get(name).ok_or_else(|| Error::InvalidArg {
                ctx: "supernet",
                msg: format!("missing weight {name:?} in source set"),
            })?;
            if src.shape() != own.shape() {
                return Err(Error::ShapeMismatch {
                    op: "copy_weights_by_name",
                    lhs: own.shape(),
                    rhs: src.shape(),
                });
            }
            fresh.push(name, src.clone())?;
        }
        self.weights = fresh;
        Ok(())
    }

    fn check_arch(&self, arch: &DiscreteArch) -> Result<()> {
        if arch.0.len() != self.space.num_edges() {
            return Err(Error::InvalidArg {
                ctx: "supernet",
                msg: format!(
                    "arch has {} edges, space has {}",
                    arch.0.len(),
                    self.space.num_edges()
                ),
            });
        }
        if let Some(bad) = arch.0.iter().find(|&&o| o >= self.space.num_ops()) {
            return Err(Error::InvalidArg {
                ctx: "supernet",
                msg: format!("op index {bad} out of range"),
            });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.input_dim() != self.input_dim {
            return Err(Error::InvalidArg {
                ctx: "supernet",
                msg: format!(
                    "batch dim {} != input dim {}",
                    batch.input_dim(),
                    self.input_dim
                ),
            });
        }
        if batch.num_classes() != self.num_classes {
            return Err(Error::InvalidArg {
                ctx: "supernet",
                msg: format!(
                    "batch classes {} != head classes {}",
                    batch.num_classes(),
                    self.num_classes
                ),
            });
        }
        Ok(())
    }

    // ----- Graph construction -----

    /// Mixed (relaxed) forward: differentiable w.r.t. weights and logits.
    pub fn eval_mixed(&self, logits: &ArchLogits, batch: &Batch) -> Result<EvalGraph> {
        if logits.num_edges() != self.space.num_edges() || logits.num_ops() != self.space.num_ops()
        {
            return Err(Error::InvalidArg {
                ctx: "supernet",
                msg: "logits grid does not match space".into(),
            });
        }
        self.build(BuildMode::Mixed(logits), batch)
    }

    /// Discrete forward: only selected ops are materialized.
    pub fn eval_discrete(&self, arch: &DiscreteArch, batch: &Batch) -> Result<EvalGraph> {
        self.check_arch(arch)?;
        self.build(BuildMode::Discrete(arch), batch)
    }

    /// Forward with explicit mixture weights (`num_edges * num_ops`, row
    /// major), no softmax applied. One-hot rows reproduce the discrete
    /// forward exactly.
    pub fn eval_raw_weights(&self, mixture: &[f64], batch: &Batch) -> Result<EvalGraph> {
        if mixture.len() != self.space.num_edges() * self.space.num_ops() {
            return Err(Error::InvalidArg {
                ctx: "supernet",
                msg: format!(
                    "mixture length {} != {} edges x {} ops",
                    mixture.len(),
                    self.space.num_edges(),
                    self.space.num_ops()
                ),
            });
        }
        self.build(BuildMode::Raw(mixture), batch)
    }

    pub fn eval(&self, target: &TrainTarget, batch: &Batch) -> Result<EvalGraph> {
        match target {
            TrainTarget::Mixed(logits) => self.eval_mixed(logits, batch),
            TrainTarget::Discrete(arch) => self.eval_discrete(arch, batch),
        }
    }

    fn build(&self, mode: BuildMode, batch: &Batch) -> Result<EvalGraph> {
        self.check_batch(batch)?;
        let bsz = batch.len();
        let h = self.hidden_dim;
        let mut tape = Tape::new();

        // Weight leaves, created lazily so unused blocks stay off the tape.
        let mut weight_nodes: Vec<Option<NodeId>> = vec![None; self.weights.len()];
        let index_of = |name: &str, net: &Supernet| -> usize {
            net.weights
                .iter()
                .position(|(n, _)| n == name)
                .expect("weight names are fixed at construction")
        };
        macro_rules! weight_leaf {
            ($tape:expr, $name:expr) => {{
                let idx = index_of($name, self);
                if weight_nodes[idx].is_none() {
                    let tensor = self.weights.get($name).unwrap().clone();
                    weight_nodes[idx] = Some($tape.leaf(tensor));
                }
                weight_nodes[idx].unwrap()
            }};
        }

        let x = tape.constant(batch.inputs().clone());

        // Stem affine.
        let stem_w = weight_leaf!(tape, "stem_w");
        let stem_b = weight_leaf!(tape, "stem_b");
        let z = tape.matmul(x, stem_w)?;
        let stem_out = tape.add_row(z, stem_b)?;

        // Architecture weighting leaves.
        let (arch_node, mixture_node, edge_weights) = match &mode {
            BuildMode::Mixed(logits) => {
                let leaf = tape.leaf(Tensor::matrix(
                    logits.num_edges(),
                    logits.num_ops(),
                    logits.flat().to_vec(),
                )?);
                let relaxed = tape.softmax(leaf)?;
                (Some(leaf), None, Some(relaxed))
            }
            BuildMode::Raw(mixture) => {
                let leaf = tape.leaf(Tensor::matrix(
                    self.space.num_edges(),
                    self.space.num_ops(),
                    mixture.to_vec(),
                )?);
                (None, Some(leaf), Some(leaf))
            }
            BuildMode::Discrete(_) => (None, None, None),
        };

        // Cell: node 0 is the stem output; every intermediate node sums its
        // incoming edge outputs.
        let mut node_feats: Vec<Option<NodeId>> = vec![None; self.space.num_nodes() + 1];
        node_feats[0] = Some(stem_out);

        for to in 1..=self.space.num_nodes() {
            let mut acc: Option<NodeId> = None;
            for (e, &(from, dst)) in self.space.edges().iter().enumerate() {
                if dst != to {
                    continue;
                }
                let src = node_feats[from].expect("edges are topologically ordered");
                let contribution = match &mode {
                    BuildMode::Discrete(arch) => {
                        let kind = self.space.ops()[arch.0[e]];
                        self.apply_op(&mut tape, kind, src, e, bsz, &mut weight_nodes, &index_of)?
                    }
                    BuildMode::Mixed(_) | BuildMode::Raw(_) => {
                        let grid = edge_weights.expect("set for mixed/raw modes");
                        let mut mix: Option<NodeId> = None;
                        for (k, kind) in self.space.ops().iter().enumerate() {
                            // A zero op contributes exactly nothing to the
                            // mixture for any weight; skip the term.
                            if matches!(kind, OpKind::Zero) {
                                continue;
                            }
                            let out = self.apply_op(
                                &mut tape,
                                *kind,
                                src,
                                e,
                                bsz,
                                &mut weight_nodes,
                                &index_of,
                            )?;
                            let w = tape.select(grid, e * self.space.num_ops() + k)?;
                            let term = tape.mul(w, out)?;
                            mix = Some(match mix {
                                Some(prev) => tape.add(prev, term)?,
                                None => term,
                            });
                        }
                        match mix {
                            Some(id) => id,
                            None => tape.constant(Tensor::zeros(Shape::Matrix(bsz, h))),
                        }
                    }
                };
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, contribution)?,
                    None => contribution,
                });
            }
            node_feats[to] = Some(acc.expect("validated: every node has an incoming edge"));
        }

        // Mean over intermediate node features.
        let mut cell = node_feats[1].unwrap();
        for feats in node_feats.iter().skip(2).flatten() {
            cell = tape.add(cell, *feats)?;
        }
        let cell = tape.scale(cell, 1.0 / self.space.num_nodes() as f64)?;

        // Head affine + loss.
        let head_w = weight_leaf!(tape, "head_w");
        let head_b = weight_leaf!(tape, "head_b");
        let z = tape.matmul(cell, head_w)?;
        let pred_logits = tape.add_row(z, head_b)?;
        let loss = tape.cross_entropy(pred_logits, batch.labels())?;

        Ok(EvalGraph {
            tape,
            loss,
            pred_logits,
            arch_node,
            mixture_node,
            weight_nodes,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_op(
        &self,
        tape: &mut Tape,
        kind: OpKind,
        src: NodeId,
        edge: usize,
        bsz: usize,
        weight_nodes: &mut Vec<Option<NodeId>>,
        index_of: &dyn Fn(&str, &Supernet) -> usize,
    ) -> Result<NodeId> {
        let h = self.hidden_dim;
        match kind {
            OpKind::Skip => Ok(src),
            OpKind::Zero => Ok(tape.constant(Tensor::zeros(Shape::Matrix(bsz, h)))),
            OpKind::AvgCombine => {
                let avg = Tensor::matrix(h, h, vec![1.0 / h as f64; h * h])?;
                let m = tape.constant(avg);
                tape.matmul(src, m)
            }
            OpKind::DenseRelu | OpKind::DenseTanh => {
                let (wn, bn) = Supernet::edge_param_names(edge, kind);
                let (wi, bi) = (index_of(&wn, self), index_of(&bn, self));
                if weight_nodes[wi].is_none() {
                    weight_nodes[wi] = Some(tape.leaf(self.weights.get(&wn).unwrap().clone()));
                }
                if weight_nodes[bi].is_none() {
                    weight_nodes[bi] = Some(tape.leaf(self.weights.get(&bn).unwrap().clone()));
                }
                let z = tape.matmul(src, weight_nodes[wi].unwrap())?;
                let z = tape.add_row(z, weight_nodes[bi].unwrap())?;
                match kind {
                    OpKind::DenseRelu => tape.relu(z),
                    OpKind::DenseTanh => tape.tanh(z),
                    _ => unreachable!(),
                }
            }
        }
    }

    // ----- Losses, gradients, training -----

    /// Loss of the relaxed network.
    pub fn mixed_loss(&self, logits: &ArchLogits, batch: &Batch) -> Result<f64> {
        let g = self.eval_mixed(logits, batch)?;
        g.tape.forward_scalar(g.loss)
    }

    /// Loss and gradients (w.r.t. logits and weights) of the relaxed network.
    pub fn mixed_grads(&self, logits: &ArchLogits, batch: &Batch) -> Result<MixedGrads> {
        let mut g = self.eval_mixed(logits, batch)?;
        let loss = g.tape.forward_scalar(g.loss)?;
        g.tape.backward(g.loss)?;
        let arch = g.arch_node.expect("mixed mode sets arch_node");
        Ok(MixedGrads {
            loss,
            logits_grad: g.tape.grad(arch)?.to_vec(),
            weight_grad: g.weight_grad(self)?,
        })
    }

    /// One SGD-with-momentum step on the supernet weights for the given
    /// target. Returns the (pre-step) loss. A non-finite loss is an error and
    /// leaves weights and momentum untouched.
    pub fn sgd_weight_step(
        &mut self,
        momentum_buf: &mut [f64],
        target: &TrainTarget,
        batch: &Batch,
        lr: f64,
        momentum: f64,
    ) -> Result<f64> {
        if momentum_buf.len() != self.weights.dim() {
            return Err(Error::InvalidArg {
                ctx: "sgd",
                msg: format!(
                    "momentum buffer has {} entries, weights have {}",
                    momentum_buf.len(),
                    self.weights.dim()
                ),
            });
        }
        let mut g = self.eval(target, batch)?;
        let loss = g.tape.forward_scalar(g.loss)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { ctx: "sgd loss" });
        }
        g.tape.backward(g.loss)?;
        let grad = g.weight_grad(self)?;
        let mut flat = self.weights.flatten();
        for i in 0..flat.len() {
            momentum_buf[i] = momentum * momentum_buf[i] + grad[i];
            flat[i] -= lr * momentum_buf[i];
        }
        self.weights.assign_flat(&flat)?;
        Ok(loss)
    }

    /// Zeroed momentum buffer matching the weight layout.
    pub fn zero_momentum(&self) -> Vec<f64> {
        vec![0.0; self.weights.dim()]
    }

    /// Classification accuracy of the target on a batch. Ties in the argmax
    /// go to the lowest class index.
    pub fn accuracy(&self, target: &TrainTarget, batch: &Batch) -> Result<f64> {
        let g = self.eval(target, batch)?;
        let logits = g.tape.value(g.pred_logits)?;
        let (rows, cols) = match logits.shape() {
            Shape::Matrix(r, c) => (r, c),
            _ => unreachable!("head output is a matrix"),
        };
        let data = logits.data();
        let mut correct = 0usize;
        for (r, &label) in batch.labels().iter().enumerate() {
            let row = &data[r * cols..(r + 1) * cols];
            let mut best = 0usize;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / rows as f64)
    }
}

/// Result bundle of [`Supernet::mixed_grads`].
pub struct MixedGrads {
    pub loss: f64,
    /// Gradient w.r.t. the raw logits grid, row major.
    pub logits_grad: Vec<f64>,
    /// Gradient w.r.t. the flat weight vector, canonical order.
    pub weight_grad: Vec<f64>,
}
