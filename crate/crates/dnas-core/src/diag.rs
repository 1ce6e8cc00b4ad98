//! Curvature and relaxation diagnostics: stochastic trace estimation,
//! dominant-eigenvalue power iteration, discretization-gap measurement, and
//! a Monte Carlo check of the Gaussian expected-quadratic identity.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ngvi::LossFn;
use crate::params::{hvp, GradFn};
use crate::space::{discretize_argmax, ArchLogits};
use crate::supernet::{Batch, Supernet};
use crate::util::{sorted_mean, sorted_sum};

/// Matrix-free linear operator: `v -> H v`.
pub type LinOpFn<'a> = dyn FnMut(&[f64]) -> Result<Vec<f64>> + 'a;

// ---------------------------------------------------------------------------
// Hutchinson trace estimation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct TraceEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub probes: usize,
}

/// Rademacher-probe trace estimator: `E[z^T H z] = tr(H)` for `z` with
/// independent +-1 entries. Needs at least two probes so the standard error
/// is defined.
pub fn hutchinson_trace<R: Rng>(
    apply: &mut LinOpFn,
    dim: usize,
    probes: usize,
    rng: &mut R,
) -> Result<TraceEstimate> {
    if dim == 0 {
        return Err(Error::InvalidArg {
            ctx: "hutchinson",
            msg: "dimension must be positive".into(),
        });
    }
    if probes < 2 {
        return Err(Error::InvalidArg {
            ctx: "hutchinson",
            msg: format!("need at least 2 probes for a standard error, got {probes}"),
        });
    }
    let mut quads = Vec::with_capacity(probes);
    let mut z = vec![0.0; dim];
    for _ in 0..probes {
        for zi in z.iter_mut() {
            *zi = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        }
        let hz = apply(&z)?;
        if hz.len() != dim {
            return Err(Error::InvalidArg {
                ctx: "hutchinson",
                msg: format!("operator returned {} entries for dim {dim}", hz.len()),
            });
        }
        let terms: Vec<f64> = z.iter().zip(&hz).map(|(a, b)| a * b).collect();
        let q = sorted_sum(&terms);
        if !q.is_finite() {
            return Err(Error::NonFinite {
                ctx: "hutchinson probe",
            });
        }
        quads.push(q);
    }
    let mean = sorted_mean(&quads);
    let var_terms: Vec<f64> = quads.iter().map(|q| (q - mean) * (q - mean)).collect();
    let var = sorted_sum(&var_terms) / (probes as f64 - 1.0);
    Ok(TraceEstimate {
        mean,
        stderr: (var / probes as f64).sqrt(),
        probes,
    })
}

// ---------------------------------------------------------------------------
// Power iteration
// ---------------------------------------------------------------------------

/// Dominant (largest-magnitude) eigenvalue via power iteration, reported as
/// the signed Rayleigh quotient at the final iterate. If the operator
/// annihilates the iterate, the run restarts from a fresh random vector; after
/// three dead restarts the operator is treated as defective and reported as
/// an error.
pub fn dominant_eigenvalue<R: Rng>(
    apply: &mut LinOpFn,
    dim: usize,
    max_iters: usize,
    tol: f64,
    rng: &mut R,
) -> Result<f64> {
    if dim == 0 || max_iters == 0 {
        return Err(Error::InvalidArg {
            ctx: "power iteration",
            msg: "dimension and iteration budget must be positive".into(),
        });
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let fresh = |rng: &mut R| -> Vec<f64> {
        (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    };

    let mut restarts = 0usize;
    let mut v = fresh(rng);
    let mut n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    let mut rayleigh = f64::NAN;

    let mut iter = 0usize;
    while iter < max_iters {
        let hv = apply(&v)?;
        if hv.len() != dim {
            return Err(Error::InvalidArg {
                ctx: "power iteration",
                msg: format!("operator returned {} entries for dim {dim}", hv.len()),
            });
        }
        if hv.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                ctx: "power iteration",
            });
        }
        let new_rayleigh: f64 = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
        n = norm(&hv);
        if n == 0.0 {
            restarts += 1;
            if restarts > 3 {
                return Err(Error::InvalidArg {
                    ctx: "power iteration",
                    msg: "operator annihilated three independent random iterates".into(),
                });
            }
            v = fresh(rng);
            let fn_norm = norm(&v);
            v.iter_mut().for_each(|x| *x /= fn_norm);
            continue;
        }
        v = hv;
        v.iter_mut().for_each(|x| *x /= n);
        iter += 1;
        if rayleigh.is_finite() && (new_rayleigh - rayleigh).abs() <= tol * (1.0 + new_rayleigh.abs())
        {
            return Ok(new_rayleigh);
        }
        rayleigh = new_rayleigh;
    }
    Ok(rayleigh)
}

// ---------------------------------------------------------------------------
// Discretization gap
// ---------------------------------------------------------------------------

/// Loss change from moving `from -> to`, measured exactly and predicted by a
/// second-order Taylor expansion around `from`.
#[derive(Clone, Copy, Debug)]
pub struct GapReport {
    pub measured: f64,
    pub taylor: f64,
    pub loss_from: f64,
    pub loss_to: f64,
}

pub fn discretization_gap(
    loss_fn: &mut LossFn,
    grad_fn: &mut GradFn,
    from: &[f64],
    to: &[f64],
) -> Result<GapReport> {
    if from.len() != to.len() || from.is_empty() {
        return Err(Error::InvalidArg {
            ctx: "discretization gap",
            msg: format!("endpoint dims {} vs {}", from.len(), to.len()),
        });
    }
    let loss_from = loss_fn(from)?;
    let loss_to = loss_fn(to)?;
    let g = grad_fn(from)?;
    if g.len() != from.len() {
        return Err(Error::InvalidArg {
            ctx: "discretization gap",
            msg: "gradient length mismatch".into(),
        });
    }
    let delta: Vec<f64> = to.iter().zip(from).map(|(t, f)| t - f).collect();
    let hd = hvp(grad_fn, from, &delta)?;
    let linear: f64 = g.iter().zip(&delta).map(|(a, b)| a * b).sum();
    let quad: f64 = delta.iter().zip(&hd).map(|(a, b)| a * b).sum();
    Ok(GapReport {
        measured: loss_to - loss_from,
        taylor: linear + 0.5 * quad,
        loss_from,
        loss_to,
    })
}

/// Discretization gap of a supernet at given logits: `from` is the softmax
/// mixture, `to` the one-hot argmax selection, compared in raw mixture-weight
/// space where both points are exactly representable.
pub fn supernet_discretization_gap(
    net: &Supernet,
    logits: &ArchLogits,
    batch: &Batch,
) -> Result<GapReport> {
    let from = logits.relaxed();
    let arch = discretize_argmax(logits);
    let mut to = vec![0.0; from.len()];
    for (e, &op) in arch.0.iter().enumerate() {
        to[e * logits.num_ops() + op] = 1.0;
    }
    let mut loss_fn = |w: &[f64]| -> Result<f64> {
        let g = net.eval_raw_weights(w, batch)?;
        g.tape.forward_scalar(g.loss)
    };
    let mut grad_fn = |w: &[f64]| -> Result<Vec<f64>> {
        let mut g = net.eval_raw_weights(w, batch)?;
        g.tape.forward_scalar(g.loss)?;
        g.tape.backward(g.loss)?;
        let node = g.mixture_node.expect("raw mode sets mixture_node");
        Ok(g.tape.grad(node)?.to_vec())
    };
    discretization_gap(&mut loss_fn, &mut grad_fn, &from, &to)
}

// ---------------------------------------------------------------------------
// Expected-quadratic identity
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct IdentityCheck {
    pub mc: f64,
    pub analytic: f64,
    pub stderr: f64,
}

/// For `alpha ~ N(mu, diag(sigma2))` and diagonal `A`, the expectation of
/// `0.5 alpha^T A alpha` is `0.5 sum_i a_i (mu_i^2 + sigma2_i)`. Returns the
/// Monte Carlo estimate, the closed form, and the Monte Carlo standard error.
pub fn expected_quadratic_identity<R: Rng>(
    a_diag: &[f64],
    mu: &[f64],
    sigma2: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<IdentityCheck> {
    let d = a_diag.len();
    if d == 0 || mu.len() != d || sigma2.len() != d {
        return Err(Error::InvalidArg {
            ctx: "quadratic identity",
            msg: "dimension mismatch between A, mu, sigma2".into(),
        });
    }
    if samples < 2 {
        return Err(Error::InvalidArg {
            ctx: "quadratic identity",
            msg: "need at least 2 samples".into(),
        });
    }
    let analytic_terms: Vec<f64> = a_diag
        .iter()
        .zip(mu)
        .zip(sigma2)
        .map(|((a, m), v)| 0.5 * a * (m * m + v))
        .collect();
    let analytic = sorted_sum(&analytic_terms);

    let mut values = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut q = 0.0;
        for i in 0..d {
            let eps: f64 = rng.sample(StandardNormal);
            let alpha = mu[i] + sigma2[i].sqrt() * eps;
            q += 0.5 * a_diag[i] * alpha * alpha;
        }
        values.push(q);
    }
    let mc = sorted_mean(&values);
    let var_terms: Vec<f64> = values.iter().map(|v| (v - mc) * (v - mc)).collect();
    let var = sorted_sum(&var_terms) / (samples as f64 - 1.0);
    Ok(IdentityCheck {
        mc,
        analytic,
        stderr: (var / samples as f64).sqrt(),
    })
}
