//! Natural-gradient variational inference over architecture logits.
//!
//! The architecture distribution is a diagonal Gaussian `q = N(mu, diag(sigma^2))`
//! with prior `N(0, I/delta)`. The scale accumulator `s` ties variance to
//! curvature: `sigma_i^2 = 1 / (N * (s_i + delta_tilde))` where
//! `delta_tilde = delta / N` and `N` is the number of validation samples the
//! posterior conditions on.
//!
//! Gradient convention used throughout: closures passed to the steppers
//! return the gradient of the **mean per-datum loss** at the evaluated point.
//! The `N`-scaling that turns a mean-loss gradient into a log-likelihood
//! gradient is applied internally where the math needs it, so callers never
//! multiply by dataset size themselves.
//!
//! When a stepper averages over several Monte Carlo draws it must present the
//! same minibatch to the closure on every draw within one step; the steppers
//! call the closure once per draw and average with order-independent
//! summation.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::util::{sorted_mean, sorted_sum};

pub use crate::params::GradFn;

/// Mean per-datum loss at a parameter point.
pub type LossFn<'a> = dyn FnMut(&[f64]) -> Result<f64> + 'a;
/// Diagonal of the Hessian of the mean per-datum loss.
pub type HessDiagFn<'a> = dyn FnMut(&[f64]) -> Result<Vec<f64>> + 'a;

// ---------------------------------------------------------------------------
// Distribution
// ---------------------------------------------------------------------------

/// Diagonal Gaussian over architecture logits, parameterized by mean and the
/// curvature accumulator `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchDistribution {
    mu: Vec<f64>,
    s: Vec<f64>,
    delta: f64,
    n_data: f64,
}

impl ArchDistribution {
    /// Fresh distribution at the prior mode: `mu = 0`, `s = 0`, which gives
    /// `sigma^2 = 1/delta` (the prior variance).
    pub fn new(dim: usize, delta: f64, n_data: usize) -> Result<Self> {
        Self::with_state(vec![0.0; dim], vec![0.0; dim], delta, n_data)
    }

    pub fn with_state(mu: Vec<f64>, s: Vec<f64>, delta: f64, n_data: usize) -> Result<Self> {
        if mu.is_empty() || mu.len() != s.len() {
            return Err(Error::InvalidArg {
                ctx: "distribution",
                msg: format!("mu has {} entries, s has {}", mu.len(), s.len()),
            });
        }
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::InvalidArg {
                ctx: "distribution",
                msg: format!("prior precision delta must be finite and >= 0, got {delta}"),
            });
        }
        if n_data == 0 {
            return Err(Error::InvalidArg {
                ctx: "distribution",
                msg: "n_data must be positive".into(),
            });
        }
        if s.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArg {
                ctx: "distribution",
                msg: "scale accumulator must be finite and non-negative".into(),
            });
        }
        Ok(ArchDistribution {
            mu,
            s,
            delta,
            n_data: n_data as f64,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn delta_tilde(&self) -> f64 {
        self.delta / self.n_data
    }

    pub fn n_data(&self) -> f64 {
        self.n_data
    }

    /// Per-coordinate variance `1 / (N (s_i + delta_tilde))`.
    pub fn sigma2(&self) -> Vec<f64> {
        let dt = self.delta_tilde();
        self.s
            .iter()
            .map(|si| 1.0 / (self.n_data * (si + dt)))
            .collect()
    }

    /// One reparameterized draw `theta = mu + sigma * eps`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let sigma2 = self.sigma2();
        let mut theta = Vec::with_capacity(self.mu.len());
        for (m, v) in self.mu.iter().zip(&sigma2) {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    ctx: "sample variance",
                });
            }
            let eps: f64 = rng.sample(StandardNormal);
            theta.push(m + v.sqrt() * eps);
        }
        Ok(theta)
    }

    /// `KL(q || N(0, I/delta))`.
    pub fn kl_to_prior(&self) -> f64 {
        kl_diag_gauss(&self.mu, &self.sigma2(), self.delta)
    }
}

/// KL divergence from `N(mu, diag(sigma2))` to the isotropic prior
/// `N(0, I/delta)`: `sum_i 0.5 (delta sigma_i^2 + delta mu_i^2 - 1 - ln(delta sigma_i^2))`.
pub fn kl_diag_gauss(mu: &[f64], sigma2: &[f64], delta: f64) -> f64 {
    let terms: Vec<f64> = mu
        .iter()
        .zip(sigma2)
        .map(|(m, v)| 0.5 * (delta * v + delta * m * m - 1.0 - (delta * v).ln()))
        .collect();
    sorted_sum(&terms)
}

/// Monte Carlo negative-ELBO estimate `N * mean_m loss(theta_m) + KL`, where
/// `loss` is the mean per-datum loss.
pub fn elbo_estimate<R: Rng>(
    mu: &[f64],
    sigma2: &[f64],
    delta: f64,
    n_data: f64,
    samples: usize,
    rng: &mut R,
    loss_fn: &mut LossFn,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::InvalidArg {
            ctx: "elbo",
            msg: "need at least one sample".into(),
        });
    }
    let mut losses = Vec::with_capacity(samples);
    for _ in 0..samples {
        let theta: Vec<f64> = mu
            .iter()
            .zip(sigma2)
            .map(|(m, v)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + v.sqrt() * eps
            })
            .collect();
        losses.push(loss_fn(&theta)?);
    }
    Ok(n_data * sorted_mean(&losses) + kl_diag_gauss(mu, sigma2, delta))
}

// ---------------------------------------------------------------------------
// Shared sampling helper
// ---------------------------------------------------------------------------

fn check_hyper(ctx: &'static str, beta: f64, m_samples: usize) -> Result<()> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidArg {
            ctx,
            msg: format!("beta must lie in (0, 1], got {beta}"),
        });
    }
    if m_samples == 0 {
        return Err(Error::InvalidArg {
            ctx,
            msg: "m_samples must be positive".into(),
        });
    }
    Ok(())
}

/// Averages `f` over `m` Monte Carlo draws from the distribution (or a single
/// evaluation at the mean when sampling is off). The per-coordinate average
/// uses order-independent summation, so permuting the draws cannot change the
/// result.
fn averaged_eval<R: Rng>(
    dist: &ArchDistribution,
    sample_theta: bool,
    m: usize,
    rng: &mut R,
    ctx: &'static str,
    f: &mut GradFn,
) -> Result<Vec<f64>> {
    let dim = dist.dim();
    let draws = if sample_theta { m } else { 1 };
    let mut per_draw: Vec<Vec<f64>> = Vec::with_capacity(draws);
    for _ in 0..draws {
        let theta = if sample_theta {
            dist.sample(rng)?
        } else {
            dist.mu().to_vec()
        };
        let g = f(&theta)?;
        if g.len() != dim {
            return Err(Error::InvalidArg {
                ctx,
                msg: format!("closure returned {} entries for dim {dim}", g.len()),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { ctx });
        }
        per_draw.push(g);
    }
    if draws == 1 {
        return Ok(per_draw.pop().unwrap());
    }
    let mut avg = Vec::with_capacity(dim);
    let mut column = Vec::with_capacity(draws);
    for i in 0..dim {
        column.clear();
        column.extend(per_draw.iter().map(|g| g[i]));
        avg.push(sorted_mean(&column));
    }
    Ok(avg)
}

// ---------------------------------------------------------------------------
// VAdam
// ---------------------------------------------------------------------------

/// Adam-like natural-gradient step state: squared gradients feed the scale
/// accumulator, and a momentum term rescaled by the scale ratio carries the
/// previous mean displacement.
#[derive(Clone, Debug, PartialEq)]
pub struct VAdamState {
    pub beta: f64,
    pub gamma: f64,
    pub m_samples: usize,
    /// Evaluate gradients at sampled `theta` (true) or at the mean (false).
    pub sample_theta: bool,
    pub mu_prev: Vec<f64>,
    pub step: u64,
}

impl VAdamState {
    pub fn new(dist: &ArchDistribution, beta: f64, gamma: f64, m_samples: usize) -> Result<Self> {
        check_hyper("vadam", beta, m_samples)?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidArg {
                ctx: "vadam",
                msg: format!("gamma must lie in [0, 1), got {gamma}"),
            });
        }
        Ok(VAdamState {
            beta,
            gamma,
            m_samples,
            sample_theta: true,
            mu_prev: dist.mu().to_vec(),
            step: 0,
        })
    }
}

/// One VAdam step. Returns the averaged gradient used for the update.
///
/// With `sample_theta = false`, `gamma = 0`, `m_samples = 1`, and
/// `delta = 0`, the update collapses exactly to RMSprop on the mean:
/// `s <- (1-beta) s + beta g^2`, `mu <- mu - beta g / s`.
pub fn vadam_step<R: Rng>(
    dist: &mut ArchDistribution,
    state: &mut VAdamState,
    rng: &mut R,
    grad_fn: &mut GradFn,
) -> Result<Vec<f64>> {
    if state.mu_prev.len() != dist.dim() {
        return Err(Error::InvalidArg {
            ctx: "vadam",
            msg: format!(
                "state tracks {} coordinates, distribution has {}",
                state.mu_prev.len(),
                dist.dim()
            ),
        });
    }
    let g = averaged_eval(
        dist,
        state.sample_theta,
        state.m_samples,
        rng,
        "vadam gradient",
        grad_fn,
    )?;
    let dt = dist.delta_tilde();
    let (beta, gamma) = (state.beta, state.gamma);
    let mut new_mu = Vec::with_capacity(dist.dim());
    let mut new_s = Vec::with_capacity(dist.dim());
    for i in 0..dist.dim() {
        let s_old = dist.s[i];
        let s_new = (1.0 - beta) * s_old + beta * g[i] * g[i];
        let mut mu_new = dist.mu[i] - beta * (g[i] + dt * dist.mu[i]) / (s_new + dt);
        // gamma == 0 skips the term outright: with delta = 0 and a fresh
        // accumulator the scale ratio is 0/0, and the limit of the update as
        // gamma -> 0 has no momentum contribution at all.
        if gamma != 0.0 {
            mu_new += gamma * ((s_old + dt) / (s_new + dt)) * (dist.mu[i] - state.mu_prev[i]);
        }
        new_s.push(s_new);
        new_mu.push(mu_new);
    }
    if new_mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { ctx: "vadam mean" });
    }
    state.mu_prev = std::mem::replace(&mut dist.mu, new_mu);
    dist.s = new_s;
    state.step += 1;
    Ok(g)
}

// ---------------------------------------------------------------------------
// Vprop
// ---------------------------------------------------------------------------

/// VAdam without the momentum term.
#[derive(Clone, Debug, PartialEq)]
pub struct VpropState {
    pub beta: f64,
    pub m_samples: usize,
    pub sample_theta: bool,
    pub step: u64,
}

impl VpropState {
    pub fn new(beta: f64, m_samples: usize) -> Result<Self> {
        check_hyper("vprop", beta, m_samples)?;
        Ok(VpropState {
            beta,
            m_samples,
            sample_theta: true,
            step: 0,
        })
    }
}

pub fn vprop_step<R: Rng>(
    dist: &mut ArchDistribution,
    state: &mut VpropState,
    rng: &mut R,
    grad_fn: &mut GradFn,
) -> Result<Vec<f64>> {
    let g = averaged_eval(
        dist,
        state.sample_theta,
        state.m_samples,
        rng,
        "vprop gradient",
        grad_fn,
    )?;
    let dt = dist.delta_tilde();
    let beta = state.beta;
    for i in 0..dist.dim() {
        let s_new = (1.0 - beta) * dist.s[i] + beta * g[i] * g[i];
        dist.mu[i] -= beta * (g[i] + dt * dist.mu[i]) / (s_new + dt);
        dist.s[i] = s_new;
    }
    if dist.mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { ctx: "vprop mean" });
    }
    state.step += 1;
    Ok(g)
}

// ---------------------------------------------------------------------------
// VON
// ---------------------------------------------------------------------------

/// Natural-gradient step that feeds the exact Hessian diagonal into the scale
/// accumulator instead of squared gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct VonState {
    pub beta: f64,
    pub m_samples: usize,
    pub sample_theta: bool,
    pub step: u64,
}

/// Outcome report of one VON step.
pub struct VonReport {
    /// Averaged gradient used for the mean update.
    pub grad: Vec<f64>,
    /// Number of scale entries clamped to zero because the averaged Hessian
    /// diagonal drove them negative.
    pub clamped: usize,
}

impl VonState {
    pub fn new(beta: f64, m_samples: usize) -> Result<Self> {
        check_hyper("von", beta, m_samples)?;
        Ok(VonState {
            beta,
            m_samples,
            sample_theta: true,
            step: 0,
        })
    }
}

pub fn von_step<R: Rng>(
    dist: &mut ArchDistribution,
    state: &mut VonState,
    rng: &mut R,
    grad_fn: &mut GradFn,
    hess_diag_fn: &mut HessDiagFn,
) -> Result<VonReport> {
    // Gradient and Hessian diagonal must be evaluated at the same draws, so
    // one closure computes both and the pair is split afterwards.
    let dim = dist.dim();
    let mut paired = |theta: &[f64]| -> Result<Vec<f64>> {
        let mut g = grad_fn(theta)?;
        let h = hess_diag_fn(theta)?;
        if g.len() != dim || h.len() != dim {
            return Err(Error::InvalidArg {
                ctx: "von",
                msg: "gradient/hessian length mismatch".into(),
            });
        }
        g.extend(h);
        Ok(g)
    };
    let stacked = {
        // averaged_eval checks length against dist.dim(); do the averaging
        // manually over the stacked vector instead.
        let draws = if state.sample_theta {
            state.m_samples
        } else {
            1
        };
        let mut per_draw = Vec::with_capacity(draws);
        for _ in 0..draws {
            let theta = if state.sample_theta {
                dist.sample(rng)?
            } else {
                dist.mu().to_vec()
            };
            let v = paired(&theta)?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { ctx: "von update" });
            }
            per_draw.push(v);
        }
        if draws == 1 {
            per_draw.pop().unwrap()
        } else {
            let mut avg = Vec::with_capacity(2 * dim);
            let mut column = Vec::with_capacity(draws);
            for i in 0..2 * dim {
                column.clear();
                column.extend(per_draw.iter().map(|v| v[i]));
                avg.push(sorted_mean(&column));
            }
            avg
        }
    };
    let (g, h) = stacked.split_at(dim);

    let dt = dist.delta_tilde();
    let beta = state.beta;
    let mut clamped = 0usize;
    for i in 0..dim {
        let mut s_new = (1.0 - beta) * dist.s[i] + beta * h[i];
        if s_new < 0.0 {
            s_new = 0.0;
            clamped += 1;
        }
        dist.mu[i] -= beta * (g[i] + dt * dist.mu[i]) / (s_new + dt);
        dist.s[i] = s_new;
    }
    if dist.mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { ctx: "von mean" });
    }
    state.step += 1;
    Ok(VonReport {
        grad: g.to_vec(),
        clamped,
    })
}

// ---------------------------------------------------------------------------
// Bayes by Backprop
// ---------------------------------------------------------------------------

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean-field Gaussian posterior in the `(mu, rho)` parameterization used by
/// plain stochastic-gradient variational Bayes: `sigma = softplus(rho)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BbbPosterior {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    delta: f64,
    n_data: f64,
}

impl BbbPosterior {
    pub fn new(dim: usize, delta: f64, n_data: usize, rho0: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArg {
                ctx: "bbb",
                msg: "dimension must be positive".into(),
            });
        }
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::InvalidArg {
                ctx: "bbb",
                msg: format!("prior precision delta must be finite and > 0, got {delta}"),
            });
        }
        if n_data == 0 {
            return Err(Error::InvalidArg {
                ctx: "bbb",
                msg: "n_data must be positive".into(),
            });
        }
        Ok(BbbPosterior {
            mu: vec![0.0; dim],
            rho: vec![rho0; dim],
            delta,
            n_data: n_data as f64,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn n_data(&self) -> f64 {
        self.n_data
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|r| softplus(*r)).collect()
    }

    pub fn sigma2(&self) -> Vec<f64> {
        self.rho
            .iter()
            .map(|r| {
                let s = softplus(*r);
                s * s
            })
            .collect()
    }

    pub fn kl_to_prior(&self) -> f64 {
        kl_diag_gauss(&self.mu, &self.sigma2(), self.delta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BbbState {
    pub lr_mu: f64,
    pub lr_rho: f64,
    pub m_samples: usize,
    pub step: u64,
}

impl BbbState {
    pub fn new(lr_mu: f64, lr_rho: f64, m_samples: usize) -> Result<Self> {
        if !(lr_mu > 0.0) || !(lr_rho > 0.0) {
            return Err(Error::InvalidArg {
                ctx: "bbb",
                msg: format!("learning rates must be positive, got {lr_mu} and {lr_rho}"),
            });
        }
        if m_samples == 0 {
            return Err(Error::InvalidArg {
                ctx: "bbb",
                msg: "m_samples must be positive".into(),
            });
        }
        Ok(BbbState {
            lr_mu,
            lr_rho,
            m_samples,
            step: 0,
        })
    }
}

/// One plain SGD step on the negative ELBO in `(mu, rho)` coordinates with
/// externally supplied noise draws (one `eps` vector per sample). Exposed for
/// deterministic testing; [`bbb_step`] draws the noise.
pub fn bbb_step_with_eps(
    post: &mut BbbPosterior,
    state: &mut BbbState,
    eps_draws: &[Vec<f64>],
    grad_fn: &mut GradFn,
) -> Result<()> {
    let dim = post.dim();
    if eps_draws.is_empty() || eps_draws.iter().any(|e| e.len() != dim) {
        return Err(Error::InvalidArg {
            ctx: "bbb",
            msg: "need at least one noise draw of the posterior dimension".into(),
        });
    }
    let sigma = post.sigma();
    let n = post.n_data;
    let delta = post.delta;

    // Per-sample likelihood-term gradients, averaged order-independently.
    let draws = eps_draws.len();
    let mut mu_terms: Vec<Vec<f64>> = Vec::with_capacity(draws);
    let mut sig_terms: Vec<Vec<f64>> = Vec::with_capacity(draws);
    for eps in eps_draws {
        let theta: Vec<f64> = post
            .mu
            .iter()
            .zip(&sigma)
            .zip(eps)
            .map(|((m, s), e)| m + s * e)
            .collect();
        let g = grad_fn(&theta)?;
        if g.len() != dim {
            return Err(Error::InvalidArg {
                ctx: "bbb",
                msg: format!("closure returned {} entries for dim {dim}", g.len()),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { ctx: "bbb gradient" });
        }
        mu_terms.push(g.iter().map(|gi| n * gi).collect());
        sig_terms.push(g.iter().zip(eps).map(|(gi, e)| n * gi * e).collect());
    }
    let avg = |terms: &[Vec<f64>], i: usize| -> f64 {
        if terms.len() == 1 {
            terms[0][i]
        } else {
            let column: Vec<f64> = terms.iter().map(|t| t[i]).collect();
            sorted_mean(&column)
        }
    };

    for i in 0..dim {
        let g_mu = avg(&mu_terms, i) + delta * post.mu[i];
        let g_sigma = avg(&sig_terms, i) + (delta * sigma[i] - 1.0 / sigma[i]);
        let g_rho = g_sigma * sigmoid(post.rho[i]);
        post.mu[i] -= state.lr_mu * g_mu;
        post.rho[i] -= state.lr_rho * g_rho;
    }
    if post.mu.iter().any(|v| !v.is_finite()) || post.rho.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { ctx: "bbb update" });
    }
    state.step += 1;
    Ok(())
}

pub fn bbb_step<R: Rng>(
    post: &mut BbbPosterior,
    state: &mut BbbState,
    rng: &mut R,
    grad_fn: &mut GradFn,
) -> Result<()> {
    let eps: Vec<Vec<f64>> = (0..state.m_samples)
        .map(|_| {
            (0..post.dim())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    bbb_step_with_eps(post, state, &eps, grad_fn)
}

// ---------------------------------------------------------------------------
// RMSprop (baseline arch update)
// ---------------------------------------------------------------------------

/// Direct RMSprop step on a flat parameter vector:
/// `s <- (1-beta) s + beta g^2`, `p <- p - beta g / (s + damping)`.
pub fn rmsprop_step(param: &mut [f64], s: &mut [f64], beta: f64, damping: f64, g: &[f64]) -> Result<()> {
    if param.len() != s.len() || param.len() != g.len() {
        return Err(Error::InvalidArg {
            ctx: "rmsprop",
            msg: format!(
                "length mismatch: param {}, s {}, grad {}",
                param.len(),
                s.len(),
                g.len()
            ),
        });
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            ctx: "rmsprop gradient",
        });
    }
    for i in 0..param.len() {
        s[i] = (1.0 - beta) * s[i] + beta * g[i] * g[i];
        param[i] -= beta * g[i] / (s[i] + damping);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_dist(mu: f64, s: f64, delta: f64, n: usize) -> ArchDistribution {
        ArchDistribution::with_state(vec![mu], vec![s], delta, n).unwrap()
    }

    #[test]
    fn vadam_two_steps_match_frozen_hand_calculation() {
        // delta_tilde = 0.01 via delta = 1, N = 100.
        let mut dist = scalar_dist(1.0, 1.0, 1.0, 100);
        let mut state = VAdamState::new(&dist, 0.1, 0.9, 1).unwrap();
        state.sample_theta = false;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut grad = |_: &[f64]| Ok(vec![0.5]);

        vadam_step(&mut dist, &mut state, &mut rng, &mut grad).unwrap();
        assert!((dist.s()[0] - 0.925).abs() < 1e-15);
        assert!((dist.mu()[0] - 0.9454545454545454).abs() < 1e-14);
        assert_eq!(state.mu_prev, vec![1.0]);

        vadam_step(&mut dist, &mut state, &mut rng, &mut grad).unwrap();
        assert!((dist.s()[0] - 0.8575).abs() < 1e-15);
        assert!((dist.mu()[0] - 0.8338171338747707).abs() < 1e-13);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn vprop_scale_update_matches_hand_calculation() {
        let mut dist = scalar_dist(1.0, 1.0, 1.0, 100);
        let mut state = VpropState::new(0.1, 1).unwrap();
        state.sample_theta = false;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut grad = |_: &[f64]| Ok(vec![2.0]);
        vprop_step(&mut dist, &mut state, &mut rng, &mut grad).unwrap();
        assert!((dist.s()[0] - 1.3).abs() < 1e-15);
        // mu' = 1 - 0.1 * (2 + 0.01) / 1.31
        assert!((dist.mu()[0] - (1.0 - 0.1 * 2.01 / 1.31)).abs() < 1e-15);
    }

    #[test]
    fn vadam_without_momentum_equals_vprop() {
        let mut d1 = scalar_dist(0.7, 0.2, 2.0, 50);
        let mut d2 = d1.clone();
        let mut va = VAdamState::new(&d1, 0.3, 0.0, 1).unwrap();
        va.sample_theta = false;
        let mut vp = VpropState::new(0.3, 1).unwrap();
        vp.sample_theta = false;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut grad = |t: &[f64]| Ok(vec![1.5 * t[0]]);
        for _ in 0..5 {
            vadam_step(&mut d1, &mut va, &mut rng, &mut grad).unwrap();
            vprop_step(&mut d2, &mut vp, &mut rng, &mut grad).unwrap();
        }
        assert_eq!(d1.mu()[0].to_bits(), d2.mu()[0].to_bits());
        assert_eq!(d1.s()[0].to_bits(), d2.s()[0].to_bits());
    }

    #[test]
    fn von_newton_step_lands_exactly_on_quadratic_minimum() {
        // Mean loss (1/2) a theta^2 with a = 2; delta_tilde = 0.25 so every
        // quantity is binary-exact: mu' = mu - (a mu + dt mu)/(a + dt) = 0.
        let mut dist = scalar_dist(0.5, 0.0, 1.0, 4);
        let mut state = VonState::new(1.0, 1).unwrap();
        state.sample_theta = false;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut grad = |t: &[f64]| Ok(vec![2.0 * t[0]]);
        let mut hess = |_: &[f64]| Ok(vec![2.0]);
        let report = von_step(&mut dist, &mut state, &mut rng, &mut grad, &mut hess).unwrap();
        assert_eq!(report.clamped, 0);
        assert_eq!(dist.mu()[0], 0.0);
        assert_eq!(dist.s()[0], 2.0);
    }

    #[test]
    fn von_clamps_negative_curvature_to_zero_and_reports_it() {
        let mut dist = scalar_dist(1.0, 0.0, 1.0, 4);
        let mut state = VonState::new(0.5, 1).unwrap();
        state.sample_theta = false;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut grad = |_: &[f64]| Ok(vec![0.1]);
        let mut hess = |_: &[f64]| Ok(vec![-1.0]);
        let report = von_step(&mut dist, &mut state, &mut rng, &mut grad, &mut hess).unwrap();
        assert_eq!(report.clamped, 1);
        assert_eq!(dist.s()[0], 0.0);
        // mu' = 1 - 0.5 (0.1 + 0.25 * 1) / 0.25
        assert!((dist.mu()[0] - (1.0 - 0.5 * 0.35 / 0.25)).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_frozen_value_and_vanishes_at_prior() {
        let kl = kl_diag_gauss(&[0.0], &[0.25], 1.0);
        assert!((kl - 0.3181471805599453).abs() < 1e-15);
        assert_eq!(kl_diag_gauss(&[0.0, 0.0], &[0.5, 0.5], 2.0), 0.0);
    }

    #[test]
    fn fresh_distribution_has_prior_variance() {
        let dist = ArchDistribution::new(3, 4.0, 100).unwrap();
        for v in dist.sigma2() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert_eq!(dist.kl_to_prior(), 0.0);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let dist = ArchDistribution::new(4, 1.0, 10).unwrap();
        let a = dist.sample(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = dist.sample(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let c = dist.sample(&mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn bbb_step_matches_frozen_hand_calculation() {
        let mut post = BbbPosterior::new(1, 1.0, 10, 0.0).unwrap();
        post.mu[0] = 0.2;
        let mut state = BbbState::new(0.01, 0.02, 1).unwrap();
        let expected_theta = 0.5465735902799727;
        let mut grad = move |t: &[f64]| {
            assert!((t[0] - expected_theta).abs() < 1e-15);
            Ok(vec![0.3])
        };
        bbb_step_with_eps(&mut post, &mut state, &[vec![0.5]], &mut grad).unwrap();
        assert!((post.mu[0] - 0.168).abs() < 1e-15);
        assert!((post.rho[0] - (-0.007504521396709819)).abs() < 1e-15);
    }

    #[test]
    fn elbo_collapses_to_scaled_loss_plus_kl_when_variance_is_tiny() {
        let mu = vec![0.5, -0.25];
        let sigma2 = vec![1e-18, 1e-18];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut loss = |t: &[f64]| Ok(0.5 * t.iter().map(|v| v * v).sum::<f64>());
        let n = 20.0;
        let elbo = elbo_estimate(&mu, &sigma2, 1.0, n, 16, &mut rng, &mut loss).unwrap();
        let expected =
            n * 0.5 * (0.5f64 * 0.5 + 0.25 * 0.25) + kl_diag_gauss(&mu, &sigma2, 1.0);
        assert!((elbo - expected).abs() < 1e-6, "{elbo} vs {expected}");
    }

    #[test]
    fn mc_average_is_independent_of_draw_order() {
        // Gradients differ wildly in magnitude across draws; feeding them in
        // any order must give the same mean because summation sorts first.
        let dist = ArchDistribution::new(1, 1.0, 10).unwrap();
        let run = |values: Vec<f64>| {
            let mut idx = 0usize;
            let vals = values.clone();
            let mut grad = move |_: &[f64]| {
                let g = vals[idx];
                idx += 1;
                Ok(vec![g])
            };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            averaged_eval(&dist, true, values.len(), &mut rng, "test", &mut grad).unwrap()[0]
        };
        let a = run(vec![1e16, 1.0, -1e16, 3.0]);
        let b = run(vec![3.0, -1e16, 1.0, 1e16]);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn steppers_reject_non_finite_gradients() {
        let mut dist = scalar_dist(0.0, 0.0, 1.0, 10);
        let mut state = VAdamState::new(&dist, 0.1, 0.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bad = |_: &[f64]| Ok(vec![f64::NAN]);
        let err = vadam_step(&mut dist, &mut state, &mut rng, &mut bad).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(dist.mu(), &[0.0]);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn rmsprop_matches_vadam_reduction_for_many_steps() {
        // VAdam with sampling off, gamma = 0, M = 1, delta = 0 must track
        // direct RMSprop bit for bit.
        let dim = 4;
        let mut dist =
            ArchDistribution::with_state(vec![0.3, -0.2, 0.9, 0.0], vec![0.0; dim], 0.0, 7)
                .unwrap();
        let mut state = VAdamState::new(&dist, 0.05, 0.0, 1).unwrap();
        state.sample_theta = false;
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let mut p = vec![0.3, -0.2, 0.9, 0.0];
        let mut s = vec![0.0; dim];
        let grad_at = |t: &[f64]| -> Vec<f64> {
            t.iter()
                .enumerate()
                .map(|(i, v)| (i as f64 + 1.0) * v - 0.1)
                .collect()
        };
        for _ in 0..200 {
            let mut grad = |t: &[f64]| Ok(grad_at(t));
            vadam_step(&mut dist, &mut state, &mut rng, &mut grad).unwrap();
            let g = grad_at(&p);
            rmsprop_step(&mut p, &mut s, 0.05, 0.0, &g).unwrap();
        }
        for i in 0..dim {
            assert_eq!(dist.mu()[i].to_bits(), p[i].to_bits(), "coordinate {i}");
            assert_eq!(dist.s()[i].to_bits(), s[i].to_bits(), "scale {i}");
        }
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(
            mu in proptest::collection::vec(-5.0f64..5.0, 1..6),
            logv in proptest::collection::vec(-4.0f64..4.0, 1..6),
            delta in 0.05f64..20.0,
        ) {
            let n = mu.len().min(logv.len());
            let sigma2: Vec<f64> = logv[..n].iter().map(|v| v.exp()).collect();
            let kl = kl_diag_gauss(&mu[..n], &sigma2, delta);
            prop_assert!(kl >= -1e-12, "kl = {kl}");
        }

        #[test]
        fn scale_accumulator_stays_non_negative(
            s0 in proptest::collection::vec(0.0f64..3.0, 3),
            grads in proptest::collection::vec(-10.0f64..10.0, 3),
            beta in 0.01f64..1.0,
        ) {
            let mut dist = ArchDistribution::with_state(vec![0.0; 3], s0, 1.0, 10).unwrap();
            let mut state = VpropState::new(beta, 1).unwrap();
            state.sample_theta = false;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let g = grads.clone();
            let mut grad = move |_: &[f64]| Ok(g.clone());
            for _ in 0..4 {
                vprop_step(&mut dist, &mut state, &mut rng, &mut grad).unwrap();
            }
            prop_assert!(dist.s().iter().all(|v| *v >= 0.0));
        }
    }
}
