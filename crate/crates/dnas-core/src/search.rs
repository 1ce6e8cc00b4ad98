//! Architecture search loops.
//!
//! Both runners alternate one architecture update with one supernet weight
//! update per step. The Bayes runner maintains a Gaussian distribution over
//! logits and updates it with natural-gradient steps; the baseline runner
//! treats the logits as a point estimate under RMSprop. Architecture
//! gradients come from the relaxed supernet, either directly (first order)
//! or through the finite-difference bilevel correction (second order).
//!
//! Determinism: every random choice at step `t` is drawn from a stream
//! seeded by `(seed, label, t)` or `(seed, label, epoch)`, so a run resumed
//! from a checkpoint reproduces the remaining trajectory bit for bit without
//! serializing generator state.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ngvi::{rmsprop_step, vadam_step, ArchDistribution, VAdamState};
use crate::params::hvp;
use crate::space::{discretize_argmax, op_ratio, ArchLogits, DiscreteArch, OpKind};
use crate::supernet::{Batch, Supernet, TrainTarget};
use crate::trace::{
    decode_f64s, encode_f64s, param_hash, SearchCheckpoint, SearchTrace, StepRecord,
};
use crate::util::{derive_seed_indexed, fmt17, parse17};

// ---------------------------------------------------------------------------
// Bilevel architecture gradients
// ---------------------------------------------------------------------------

/// First-order architecture gradient: mean validation loss and its gradient
/// w.r.t. the raw logits of the relaxed supernet.
pub fn arch_grad_first_order(
    net: &Supernet,
    logits_flat: &[f64],
    val: &Batch,
) -> Result<(f64, Vec<f64>)> {
    let logits = ArchLogits::from_flat(net.space(), logits_flat.to_vec())?;
    let g = net.mixed_grads(&logits, val)?;
    Ok((g.loss, g.logits_grad))
}

/// Generic second-order (bilevel) architecture gradient with the
/// finite-difference Hessian-vector correction:
///
/// ```text
/// w'  = w - xi * dL_train/dw(w, a)
/// v   = dL_val/dw(w', a)
/// eps = 0.01 / ||dL_train/dw(w, a)||
/// g   = dL_val/da(w', a) - (xi / 2 eps) * [dL_train/da(w + eps v, a)
///                                          - dL_train/da(w - eps v, a)]
/// ```
///
/// Returns the validation loss at `(w', a)` and `g`. When the training
/// gradient vanishes there is no virtual step and no correction; the plain
/// validation gradient at `(w, a)` comes back.
pub fn second_order_arch_grad(
    train_weight_grad: &mut dyn FnMut(&[f64], &[f64]) -> Result<Vec<f64>>,
    train_arch_grad: &mut dyn FnMut(&[f64], &[f64]) -> Result<Vec<f64>>,
    val_eval: &mut dyn FnMut(&[f64], &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)>,
    w: &[f64],
    alpha: &[f64],
    xi: f64,
) -> Result<(f64, Vec<f64>)> {
    let gw = train_weight_grad(w, alpha)?;
    if gw.len() != w.len() {
        return Err(Error::InvalidArg {
            ctx: "bilevel gradient",
            msg: "training weight-gradient length mismatch".into(),
        });
    }
    let norm = gw.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm == 0.0 {
        let (loss, _, ga) = val_eval(w, alpha)?;
        return Ok((loss, ga));
    }
    let w1: Vec<f64> = w.iter().zip(&gw).map(|(wi, gi)| wi - xi * gi).collect();
    let (val_loss, v, ga_val) = val_eval(&w1, alpha)?;
    if v.len() != w.len() || ga_val.len() != alpha.len() {
        return Err(Error::InvalidArg {
            ctx: "bilevel gradient",
            msg: "validation gradient length mismatch".into(),
        });
    }
    let eps = 0.01 / norm;
    let plus: Vec<f64> = w.iter().zip(&v).map(|(wi, vi)| wi + eps * vi).collect();
    let minus: Vec<f64> = w.iter().zip(&v).map(|(wi, vi)| wi - eps * vi).collect();
    let gp = train_arch_grad(&plus, alpha)?;
    let gm = train_arch_grad(&minus, alpha)?;
    if gp.len() != alpha.len() || gm.len() != alpha.len() {
        return Err(Error::InvalidArg {
            ctx: "bilevel gradient",
            msg: "training arch-gradient length mismatch".into(),
        });
    }
    let scale = xi / (2.0 * eps);
    let grad: Vec<f64> = ga_val
        .iter()
        .zip(&gp)
        .zip(&gm)
        .map(|((a, p), m)| a - scale * (p - m))
        .collect();
    Ok((val_loss, grad))
}

/// Second-order architecture gradient of a supernet at the given logits,
/// using `train` for the virtual weight step and `val` for the outer loss.
pub fn arch_grad_second_order(
    net: &Supernet,
    logits_flat: &[f64],
    train: &Batch,
    val: &Batch,
    xi: f64,
) -> Result<(f64, Vec<f64>)> {
    let eval_at = |weights: &[f64], alpha: &[f64], batch: &Batch| -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let mut probe = net.clone();
        probe.set_weights_flat(weights)?;
        let logits = ArchLogits::from_flat(probe.space(), alpha.to_vec())?;
        let g = probe.mixed_grads(&logits, batch)?;
        Ok((g.loss, g.weight_grad, g.logits_grad))
    };
    let mut train_weight_grad =
        |w: &[f64], a: &[f64]| -> Result<Vec<f64>> { Ok(eval_at(w, a, train)?.1) };
    let mut train_arch_grad =
        |w: &[f64], a: &[f64]| -> Result<Vec<f64>> { Ok(eval_at(w, a, train)?.2) };
    let mut val_eval = |w: &[f64], a: &[f64]| eval_at(w, a, val);
    second_order_arch_grad(
        &mut train_weight_grad,
        &mut train_arch_grad,
        &mut val_eval,
        &net.weights_flat(),
        logits_flat,
        xi,
    )
}

// ---------------------------------------------------------------------------
// Minibatch schedule
// ---------------------------------------------------------------------------

/// Deterministic minibatch for a step: each epoch shuffles the row indices
/// with a seed derived from `(seed, label, epoch)` and hands out consecutive
/// chunks, the last chunk possibly short. Stateless in `step`, so resumed
/// runs see the same schedule.
pub fn minibatch_for_step(
    data: &Batch,
    batch_size: usize,
    seed: u64,
    label: &str,
    step: u64,
) -> Result<Batch> {
    if batch_size == 0 {
        return Err(Error::InvalidArg {
            ctx: "minibatch",
            msg: "batch size must be positive".into(),
        });
    }
    let n = data.len();
    let b = batch_size.min(n);
    let chunks = n.div_ceil(b) as u64;
    let epoch = step / chunks;
    let k = (step % chunks) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(seed, label, epoch));
    order.shuffle(&mut rng);
    let lo = k * b;
    let hi = (lo + b).min(n);
    data.subset(&order[lo..hi])
}

// ---------------------------------------------------------------------------
// Settings and outcome
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SearchSettings {
    pub steps: u64,
    /// Prior precision of the architecture distribution.
    pub delta: f64,
    /// Natural-gradient learning rate (and RMSprop rate for the baseline).
    pub beta: f64,
    /// Momentum weight of the mean update.
    pub gamma: f64,
    /// Monte Carlo draws per architecture step.
    pub m_samples: usize,
    /// Use the bilevel finite-difference correction for arch gradients.
    pub second_order: bool,
    /// Virtual weight-step size of the bilevel correction.
    pub xi: f64,
    /// Supernet weight learning rate and momentum.
    pub lr_w: f64,
    pub momentum_w: f64,
    pub train_minibatch: usize,
    pub val_minibatch: usize,
    /// Train weights at a sampled architecture (true) or at the mean (false).
    pub sample_weight_arch: bool,
    /// Run curvature diagnostics every this many steps.
    pub diag_every: Option<u64>,
    pub diag_probes: usize,
    pub eig_iters: usize,
    /// Scale accumulator damping for the baseline runner.
    pub rms_damping: f64,
    /// Abort when the validation loss exceeds `divergence_factor` times its
    /// initial value for `divergence_patience` consecutive steps.
    pub divergence_factor: f64,
    pub divergence_patience: u64,
}

impl Default for SearchSettings {
    fn default() -> Self {
        SearchSettings {
            steps: 100,
            delta: 1.0,
            beta: 0.05,
            gamma: 0.9,
            m_samples: 3,
            second_order: false,
            xi: 0.05,
            lr_w: 0.05,
            momentum_w: 0.9,
            train_minibatch: 64,
            val_minibatch: 64,
            sample_weight_arch: true,
            diag_every: None,
            diag_probes: 16,
            eig_iters: 50,
            rms_damping: 1e-8,
            divergence_factor: 10.0,
            divergence_patience: 100,
        }
    }
}

/// Result of a completed search run.
#[derive(Debug)]
pub struct SearchOutcome {
    pub trace: SearchTrace,
    /// Final architecture distribution. For the baseline runner the mean
    /// holds the point-estimate logits and the variance is meaningless.
    pub dist: ArchDistribution,
    pub argmax: DiscreteArch,
    pub checkpoint: SearchCheckpoint,
}

// ---------------------------------------------------------------------------
// Shared loop
// ---------------------------------------------------------------------------

enum ArchUpdater {
    Bayes {
        dist: ArchDistribution,
        state: VAdamState,
    },
    PointRms {
        alpha: Vec<f64>,
        s: Vec<f64>,
        beta: f64,
        damping: f64,
    },
}

impl ArchUpdater {
    fn mu(&self) -> &[f64] {
        match self {
            ArchUpdater::Bayes { dist, .. } => dist.mu(),
            ArchUpdater::PointRms { alpha, .. } => alpha,
        }
    }
}

fn checkpoint_of(
    step: u64,
    updater: &ArchUpdater,
    net: &Supernet,
    momentum: &[f64],
    n_data: usize,
) -> SearchCheckpoint {
    let (mu, s, mu_prev, delta_tilde) = match updater {
        ArchUpdater::Bayes { dist, state } => (
            dist.mu().to_vec(),
            dist.s().to_vec(),
            state.mu_prev.clone(),
            dist.delta_tilde(),
        ),
        ArchUpdater::PointRms { alpha, s, .. } => {
            (alpha.clone(), s.clone(), vec![0.0; alpha.len()], 0.0)
        }
    };
    SearchCheckpoint {
        step,
        mu: encode_f64s(&mu),
        s: encode_f64s(&s),
        mu_prev: encode_f64s(&mu_prev),
        weights: encode_f64s(&net.weights_flat()),
        momentum: encode_f64s(momentum),
        delta_tilde: fmt17(delta_tilde),
        n_data: n_data as u64,
    }
}

struct LoopArgs<'a> {
    net: &'a mut Supernet,
    train: &'a Batch,
    val: &'a Batch,
    settings: &'a SearchSettings,
    seed: u64,
    start_step: u64,
    momentum: Vec<f64>,
}

fn validate_run(net: &Supernet, train: &Batch, val: &Batch, dim: usize) -> Result<()> {
    let want = net.space().num_edges() * net.space().num_ops();
    if dim != want {
        return Err(Error::InvalidArg {
            ctx: "search",
            msg: format!("logit dim {dim} does not match space dim {want}"),
        });
    }
    if train.input_dim() != net.input_dim() || val.input_dim() != net.input_dim() {
        return Err(Error::InvalidArg {
            ctx: "search",
            msg: "data dimension does not match the supernet".into(),
        });
    }
    Ok(())
}

fn run_loop(mut args: LoopArgs, mut updater: ArchUpdater) -> Result<SearchOutcome> {
    let settings = args.settings;
    let space = args.net.space().clone();
    let dim = updater.mu().len();
    validate_run(args.net, args.train, args.val, dim)?;

    let mut trace = SearchTrace::new();
    let mut initial_val: Option<f64> = None;
    let mut high_streak: u64 = 0;

    for step in args.start_step..settings.steps {
        let started = Instant::now();
        let train_mb = minibatch_for_step(
            args.train,
            settings.train_minibatch,
            args.seed,
            "train-batch",
            step,
        )?;
        let val_mb = minibatch_for_step(
            args.val,
            settings.val_minibatch,
            args.seed,
            "val-batch",
            step,
        )?;

        // --- Architecture update ---
        let net_ref: &Supernet = args.net;
        let mut grad_at = |theta: &[f64]| -> Result<Vec<f64>> {
            if settings.second_order {
                Ok(arch_grad_second_order(net_ref, theta, &train_mb, &val_mb, settings.xi)?.1)
            } else {
                Ok(arch_grad_first_order(net_ref, theta, &val_mb)?.1)
            }
        };
        let arch_step_result: Result<()> = match &mut updater {
            ArchUpdater::Bayes { dist, state } => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(
                    args.seed,
                    "arch-sample",
                    step,
                ));
                vadam_step(dist, state, &mut rng, &mut grad_at).map(|_| ())
            }
            ArchUpdater::PointRms {
                alpha,
                s,
                beta,
                damping,
            } => {
                let g = grad_at(alpha)?;
                rmsprop_step(alpha, s, *beta, *damping, &g)
            }
        };
        match arch_step_result {
            Ok(()) => {}
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged {
                    step,
                    trace: Box::new(trace),
                });
            }
            Err(e) => return Err(e),
        }

        // --- Weight update ---
        let (weight_logits, sampled_arch) = match (&updater, settings.sample_weight_arch) {
            (ArchUpdater::Bayes { dist, .. }, true) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(
                    args.seed,
                    "weight-arch",
                    step,
                ));
                let theta = dist.sample(&mut rng)?;
                let logits = ArchLogits::from_flat(&space, theta)?;
                let arch = discretize_argmax(&logits);
                (logits, arch)
            }
            _ => {
                let logits = ArchLogits::from_flat(&space, updater.mu().to_vec())?;
                let arch = discretize_argmax(&logits);
                (logits, arch)
            }
        };
        let train_loss = match args.net.sgd_weight_step(
            &mut args.momentum,
            &TrainTarget::Mixed(&weight_logits),
            &train_mb,
            settings.lr_w,
            settings.momentum_w,
        ) {
            Ok(loss) => loss,
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged {
                    step,
                    trace: Box::new(trace),
                });
            }
            Err(e) => return Err(e),
        };

        // --- Bookkeeping, diagnostics, divergence policing ---
        let mu_logits = ArchLogits::from_flat(&space, updater.mu().to_vec())?;
        let val_loss = args.net.mixed_loss(&mu_logits, &val_mb)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                trace: Box::new(trace),
            });
        }
        let initial = *initial_val.get_or_insert(val_loss);
        if val_loss > settings.divergence_factor * initial {
            high_streak += 1;
        } else {
            high_streak = 0;
        }

        let (trace_estimate, dominant_eig) = match settings.diag_every {
            Some(every) if every > 0 && step % every == 0 => {
                let net_ref: &Supernet = args.net;
                let mu_flat = updater.mu().to_vec();
                let mut logit_grad = |theta: &[f64]| -> Result<Vec<f64>> {
                    arch_grad_first_order(net_ref, theta, &val_mb).map(|(_, g)| g)
                };
                let mut apply =
                    |v: &[f64]| -> Result<Vec<f64>> { hvp(&mut logit_grad, &mu_flat, v) };
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(
                    args.seed, "probes", step,
                ));
                // Saturated logits make the softmax Jacobian numerically
                // zero, so the curvature probes can annihilate; a failed
                // estimate is recorded as absent rather than aborting the
                // run.
                let tr = crate::diag::hutchinson_trace(
                    &mut apply,
                    dim,
                    settings.diag_probes.max(2),
                    &mut rng,
                )
                .ok()
                .map(|t| t.mean);
                let eig = crate::diag::dominant_eigenvalue(
                    &mut apply,
                    dim,
                    settings.eig_iters.max(1),
                    1e-9,
                    &mut rng,
                )
                .ok();
                (tr, eig)
            }
            _ => (None, None),
        };

        let argmax = discretize_argmax(&mu_logits);
        let record = StepRecord {
            step,
            train_loss,
            val_loss,
            mu_hash: param_hash(updater.mu()),
            sampled_arch: sampled_arch.compact(),
            argmax_arch: argmax.compact(),
            skip_ratio: op_ratio(&space, &argmax, OpKind::Skip).unwrap_or(0.0),
            trace_estimate,
            dominant_eig,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        trace.push(record)?;

        if high_streak >= settings.divergence_patience {
            return Err(Error::Diverged {
                step,
                trace: Box::new(trace),
            });
        }
    }

    let final_mu = ArchLogits::from_flat(&space, updater.mu().to_vec())?;
    let argmax = discretize_argmax(&final_mu);
    let checkpoint = checkpoint_of(
        settings.steps,
        &updater,
        args.net,
        &args.momentum,
        args.val.len(),
    );
    let dist = match updater {
        ArchUpdater::Bayes { dist, .. } => dist,
        ArchUpdater::PointRms { alpha, s, .. } => {
            let clamped: Vec<f64> = s.iter().map(|v| v.max(0.0)).collect();
            ArchDistribution::with_state(alpha, clamped, 0.0, args.val.len().max(1))?
        }
    };
    Ok(SearchOutcome {
        trace,
        dist,
        argmax,
        checkpoint,
    })
}

// ---------------------------------------------------------------------------
// Public runners
// ---------------------------------------------------------------------------

/// Distribution-learning search: natural-gradient updates on a Gaussian over
/// logits, alternating with supernet weight training. `resume` continues
/// from a checkpoint produced by an identical configuration.
pub fn run_bayes_search(
    net: &mut Supernet,
    train: &Batch,
    val: &Batch,
    settings: &SearchSettings,
    seed: u64,
    resume: Option<&SearchCheckpoint>,
) -> Result<SearchOutcome> {
    let dim = net.space().num_edges() * net.space().num_ops();
    let (dist, state, momentum, start_step) = match resume {
        None => {
            let dist = ArchDistribution::new(dim, settings.delta, val.len())?;
            let state = VAdamState::new(&dist, settings.beta, settings.gamma, settings.m_samples)?;
            (dist, state, net.zero_momentum(), 0)
        }
        Some(ckpt) => {
            let mu = decode_f64s(&ckpt.mu)?;
            let s = decode_f64s(&ckpt.s)?;
            let delta_tilde = parse17(&ckpt.delta_tilde)?;
            let n_data = ckpt.n_data as usize;
            let dist =
                ArchDistribution::with_state(mu, s, delta_tilde * n_data as f64, n_data)?;
            let mut state =
                VAdamState::new(&dist, settings.beta, settings.gamma, settings.m_samples)?;
            state.mu_prev = decode_f64s(&ckpt.mu_prev)?;
            state.step = ckpt.step;
            net.set_weights_flat(&decode_f64s(&ckpt.weights)?)?;
            (dist, state, decode_f64s(&ckpt.momentum)?, ckpt.step)
        }
    };
    if start_step > settings.steps {
        return Err(Error::InvalidArg {
            ctx: "search",
            msg: format!(
                "checkpoint is at step {start_step}, beyond the {}-step budget",
                settings.steps
            ),
        });
    }
    run_loop(
        LoopArgs {
            net,
            train,
            val,
            settings,
            seed,
            start_step,
            momentum,
        },
        ArchUpdater::Bayes { dist, state },
    )
}

/// Point-estimate baseline: identical loop shape, but the logits are a plain
/// parameter vector updated by RMSprop — no prior, no sampling, no momentum.
pub fn run_darts_baseline(
    net: &mut Supernet,
    train: &Batch,
    val: &Batch,
    settings: &SearchSettings,
    seed: u64,
    resume: Option<&SearchCheckpoint>,
) -> Result<SearchOutcome> {
    let dim = net.space().num_edges() * net.space().num_ops();
    let (alpha, s, momentum, start_step) = match resume {
        None => (vec![0.0; dim], vec![0.0; dim], net.zero_momentum(), 0),
        Some(ckpt) => {
            net.set_weights_flat(&decode_f64s(&ckpt.weights)?)?;
            (
                decode_f64s(&ckpt.mu)?,
                decode_f64s(&ckpt.s)?,
                decode_f64s(&ckpt.momentum)?,
                ckpt.step,
            )
        }
    };
    if start_step > settings.steps {
        return Err(Error::InvalidArg {
            ctx: "search",
            msg: format!(
                "checkpoint is at step {start_step}, beyond the {}-step budget",
                settings.steps
            ),
        });
    }
    run_loop(
        LoopArgs {
            net,
            train,
            val,
            settings,
            seed,
            start_step,
            momentum,
        },
        ArchUpdater::PointRms {
            alpha,
            s,
            beta: settings.beta,
            damping: settings.rms_damping,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::CellSpace;
    use crate::tape::Tensor;
    use std::collections::BTreeSet;

    fn small_space() -> CellSpace {
        CellSpace::dense(2, vec![OpKind::Skip, OpKind::DenseRelu, OpKind::Zero]).unwrap()
    }

    fn toy_data(n: usize, seed_phase: f64) -> Batch {
        // Two interleaved noisy clusters; enough signal that training moves.
        let mut inputs = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let t = i as f64 * 0.7 + seed_phase;
            let label = i % 2;
            let cx = if label == 0 { -1.0 } else { 1.0 };
            inputs.push(cx + 0.3 * t.sin());
            inputs.push(-cx + 0.3 * (1.3 * t).cos());
            labels.push(label);
        }
        Batch::new(Tensor::matrix(n, 2, inputs).unwrap(), labels, 2).unwrap()
    }

    fn quick_settings(steps: u64) -> SearchSettings {
        SearchSettings {
            steps,
            beta: 0.1,
            gamma: 0.5,
            m_samples: 2,
            lr_w: 0.05,
            momentum_w: 0.9,
            train_minibatch: 8,
            val_minibatch: 8,
            ..SearchSettings::default()
        }
    }

    #[test]
    fn second_order_gradient_matches_analytic_quadratic_oracle() {
        // L_train = (w - a alpha)^2 / 2, L_val = (w' - b alpha)^2 / 2
        //           + c alpha^2 / 2.
        // The exact bilevel gradient is (w' - b alpha)(xi a - b) + c alpha,
        // and the finite-difference correction is exact for quadratics.
        let (a, b, c) = (1.2, 0.8, 0.5);
        let (w0, alpha0, xi) = (0.7, 0.3, 0.4);
        let mut twg = |w: &[f64], al: &[f64]| Ok(vec![w[0] - a * al[0]]);
        let mut tag = |w: &[f64], al: &[f64]| Ok(vec![-a * (w[0] - a * al[0])]);
        let mut ve = |w: &[f64], al: &[f64]| {
            let r = w[0] - b * al[0];
            Ok((
                0.5 * r * r + 0.5 * c * al[0] * al[0],
                vec![r],
                vec![-b * r + c * al[0]],
            ))
        };
        let (_, g) =
            second_order_arch_grad(&mut twg, &mut tag, &mut ve, &[w0], &[alpha0], xi).unwrap();
        let w1 = w0 - xi * (w0 - a * alpha0);
        let want = (w1 - b * alpha0) * (xi * a - b) + c * alpha0;
        assert!((g[0] - want).abs() < 1e-9, "{} vs {want}", g[0]);
    }

    #[test]
    fn second_order_collapses_to_first_order_as_xi_vanishes() {
        let net = Supernet::new(small_space(), 2, 4, 2, 21).unwrap();
        let train = toy_data(16, 0.0);
        let val = toy_data(16, 5.0);
        let logits = vec![0.3, -0.2, 0.1, 0.0, 0.4, -0.1, 0.2, 0.0, -0.3];
        let (_, g2) = arch_grad_second_order(&net, &logits, &train, &val, 1e-8).unwrap();
        let (_, g1) = arch_grad_first_order(&net, &logits, &val).unwrap();
        for (a, b) in g2.iter().zip(&g1) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn second_order_skips_the_correction_on_a_flat_training_loss() {
        let mut twg = |_: &[f64], _: &[f64]| Ok(vec![0.0, 0.0]);
        let mut tag =
            |_: &[f64], _: &[f64]| -> Result<Vec<f64>> { panic!("must not be called") };
        let mut ve = |_: &[f64], _: &[f64]| Ok((1.0, vec![0.0, 0.0], vec![0.5]));
        let (loss, g) =
            second_order_arch_grad(&mut twg, &mut tag, &mut ve, &[1.0, 2.0], &[0.1], 0.5).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(g, vec![0.5]);
    }

    #[test]
    fn minibatch_schedule_is_deterministic_and_covers_an_epoch() {
        let data = toy_data(10, 0.0);
        let a = minibatch_for_step(&data, 4, 7, "train-batch", 3).unwrap();
        let b = minibatch_for_step(&data, 4, 7, "train-batch", 3).unwrap();
        assert_eq!(a.inputs().data(), b.inputs().data());
        assert_eq!(a.labels(), b.labels());

        // One epoch = ceil(10/4) = 3 chunks covering all rows exactly once.
        let mut seen = Vec::new();
        for step in 0..3 {
            let mb = minibatch_for_step(&data, 4, 7, "train-batch", step).unwrap();
            for r in 0..mb.len() {
                let row = &mb.inputs().data()[r * 2..r * 2 + 2];
                seen.push((row[0].to_bits(), row[1].to_bits()));
            }
        }
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 10);
        // Different epochs get different orders with overwhelming likelihood.
        let e0 = minibatch_for_step(&data, 10, 7, "train-batch", 0).unwrap();
        let e1 = minibatch_for_step(&data, 10, 7, "train-batch", 1).unwrap();
        assert_ne!(e0.labels(), e1.labels());
    }

    #[test]
    fn bayes_search_is_deterministic_per_seed() {
        let train = toy_data(24, 0.0);
        let val = toy_data(24, 3.0);
        let settings = quick_settings(6);
        let run = || {
            let mut net = Supernet::new(small_space(), 2, 4, 2, 3).unwrap();
            run_bayes_search(&mut net, &train, &val, &settings, 99, None).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.trace.canonical(), b.trace.canonical());
        assert_eq!(a.checkpoint.mu, b.checkpoint.mu);
        assert_eq!(a.checkpoint.weights, b.checkpoint.weights);
        assert_eq!(a.trace.len(), 6);
        assert_eq!(a.checkpoint.step, 6);
        // A different seed takes a different trajectory.
        let mut net = Supernet::new(small_space(), 2, 4, 2, 3).unwrap();
        let c = run_bayes_search(&mut net, &train, &val, &settings, 100, None).unwrap();
        assert_ne!(a.checkpoint.mu, c.checkpoint.mu);
    }

    #[test]
    fn resumed_run_reproduces_the_uninterrupted_trajectory() {
        let train = toy_data(24, 0.0);
        let val = toy_data(24, 3.0);
        let full_settings = quick_settings(10);

        let mut net_full = Supernet::new(small_space(), 2, 4, 2, 3).unwrap();
        let full =
            run_bayes_search(&mut net_full, &train, &val, &full_settings, 42, None).unwrap();

        let mut part_settings = full_settings.clone();
        part_settings.steps = 6;
        let mut net_part = Supernet::new(small_space(), 2, 4, 2, 3).unwrap();
        let part =
            run_bayes_search(&mut net_part, &train, &val, &part_settings, 42, None).unwrap();

        let resumed = run_bayes_search(
            &mut net_part,
            &train,
            &val,
            &full_settings,
            42,
            Some(&part.checkpoint),
        )
        .unwrap();

        assert_eq!(full.checkpoint, resumed.checkpoint);
        // Concatenated partial traces equal the straight-through trace.
        let mut joined = part.trace.canonical();
        for r in resumed.trace.canonical().records() {
            joined.push(r.clone()).unwrap();
        }
        assert_eq!(joined, full.trace.canonical());
        assert_eq!(net_full.weights_flat(), net_part.weights_flat());
    }

    #[test]
    fn exploding_weight_steps_abort_with_a_divergence_error() {
        let train = toy_data(24, 0.0);
        let val = toy_data(24, 3.0);
        let mut settings = quick_settings(50);
        settings.lr_w = 1e8;
        settings.momentum_w = 0.0;
        let mut net = Supernet::new(small_space(), 2, 4, 2, 3).unwrap();
        let err = run_bayes_search(&mut net, &train, &val, &settings, 11, None).unwrap_err();
        match err {
            Error::Diverged { step, trace } => {
                assert!(step < 50);
                assert!(trace.len() as u64 <= step + 1);
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn sustained_high_validation_loss_trips_the_patience_abort() {
        let train = toy_data(24, 0.0);
        let val = toy_data(24, 3.0);
        let mut settings = quick_settings(50);
        settings.divergence_factor = 1e-12;
        settings.divergence_patience = 3;
        let mut net = Supernet::new(small_space(), 2, 4, 2, 3).unwrap();
        let err = run_bayes_search(&mut net, &train, &val, &settings, 5, None).unwrap_err();
        match err {
            Error::Diverged { step, trace } => {
                assert_eq!(step, 2);
                assert_eq!(trace.len(), 3);
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn distribution_search_explores_more_architectures_than_the_baseline() {
        let train = toy_data(32, 0.0);
        let val = toy_data(32, 3.0);
        let settings = quick_settings(30);
        let mut bayes_unique = 0usize;
        let mut darts_unique = 0usize;
        for seed in [1u64, 2, 3] {
            let mut net = Supernet::new(small_space(), 2, 4, 2, seed).unwrap();
            let bayes =
                run_bayes_search(&mut net, &train, &val, &settings, seed, None).unwrap();
            let sampled: BTreeSet<&str> = bayes
                .trace
                .records()
                .iter()
                .map(|r| r.sampled_arch.as_str())
                .collect();
            bayes_unique += sampled.len();

            let mut net = Supernet::new(small_space(), 2, 4, 2, seed).unwrap();
            let darts =
                run_darts_baseline(&mut net, &train, &val, &settings, seed, None).unwrap();
            let visited: BTreeSet<&str> = darts
                .trace
                .records()
                .iter()
                .map(|r| r.argmax_arch.as_str())
                .collect();
            darts_unique += visited.len();
        }
        assert!(
            bayes_unique > darts_unique,
            "bayes visited {bayes_unique}, baseline visited {darts_unique}"
        );
    }

    #[test]
    fn baseline_first_step_matches_direct_rmsprop_arithmetic() {
        let train = toy_data(24, 0.0);
        let val = toy_data(24, 3.0);
        let mut settings = quick_settings(1);
        settings.sample_weight_arch = false;
        let mut net = Supernet::new(small_space(), 2, 4, 2, 3).unwrap();

        // Expected: gradient at zero logits on the step-0 val minibatch.
        let val_mb = minibatch_for_step(&val, 8, 77, "val-batch", 0).unwrap();
        let dim = 9;
        let (_, g) = arch_grad_first_order(&net, &vec![0.0; dim], &val_mb).unwrap();
        let mut alpha = vec![0.0; dim];
        let mut s = vec![0.0; dim];
        rmsprop_step(&mut alpha, &mut s, settings.beta, settings.rms_damping, &g).unwrap();

        let out = run_darts_baseline(&mut net, &train, &val, &settings, 77, None).unwrap();
        let got = decode_f64s(&out.checkpoint.mu).unwrap();
        for (a, b) in got.iter().zip(&alpha) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn diagnostics_fields_appear_on_schedule() {
        let train = toy_data(24, 0.0);
        let val = toy_data(24, 3.0);
        let mut settings = quick_settings(4);
        settings.diag_every = Some(2);
        settings.diag_probes = 4;
        settings.eig_iters = 10;
        let mut net = Supernet::new(small_space(), 2, 4, 2, 3).unwrap();
        let out = run_bayes_search(&mut net, &train, &val, &settings, 13, None).unwrap();
        for r in out.trace.records() {
            let expect = r.step % 2 == 0;
            assert_eq!(r.trace_estimate.is_some(), expect, "step {}", r.step);
            assert_eq!(r.dominant_eig.is_some(), expect, "step {}", r.step);
        }
    }

    #[test]
    fn diagnostics_outlive_saturated_point_estimates() {
        // Logits at ±2000 make every softmax row exactly one-hot, so the
        // curvature operator annihilates every probe. The run must still
        // complete, recording the eigenvalue as absent.
        let train = toy_data(24, 0.0);
        let val = toy_data(24, 3.0);
        let mut settings = quick_settings(1);
        settings.diag_every = Some(1);
        settings.diag_probes = 2;
        settings.eig_iters = 8;
        let mut net = Supernet::new(small_space(), 2, 4, 2, 3).unwrap();
        let mut ckpt =
            run_darts_baseline(&mut net, &train, &val, &settings, 5, None)
                .unwrap()
                .checkpoint;
        let saturated: Vec<f64> =
            (0..9).map(|i| if i % 3 == 0 { 2000.0 } else { -2000.0 }).collect();
        ckpt.mu = encode_f64s(&saturated);
        settings.steps = 2;
        let out =
            run_darts_baseline(&mut net, &train, &val, &settings, 5, Some(&ckpt)).unwrap();
        let last = out.trace.records().last().unwrap().clone();
        assert_eq!(last.step, 1);
        assert_eq!(last.trace_estimate, Some(0.0));
        assert_eq!(last.dominant_eig, None);
    }

    #[test]
    fn weight_training_at_the_mean_is_available() {
        let train = toy_data(24, 0.0);
        let val = toy_data(24, 3.0);
        let mut settings = quick_settings(3);
        settings.sample_weight_arch = false;
        let mut net = Supernet::new(small_space(), 2, 4, 2, 3).unwrap();
        let out = run_bayes_search(&mut net, &train, &val, &settings, 1, None).unwrap();
        for r in out.trace.records() {
            assert_eq!(r.sampled_arch, r.argmax_arch);
        }
    }
}
