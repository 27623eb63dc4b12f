//! Noise schedule, forward process, analytic Gaussian-mixture prior with
//! closed-form score, and unguided ancestral sampling.
//!
//! The mixture prior stands in for a learned denoiser: its marginal at step t
//! is available in closed form, so the predicted noise, the score, and even
//! Hessian-vector products (needed by guidance backpropagation) are exact.

use crate::error::{Error, Result};
use crate::latent::LatentTensor;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// Guidance variance: either tied to the per-step posterior variance or a
/// fixed override.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum DeltaMode {
    SigmaT,
    Fixed(f64),
}

/// Linear-beta schedule with cumulative products; steps are indexed
/// t in [0, T] with alpha_bar(0) = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>, // len T+1, alpha_bars[0] = 1
    pub delta: DeltaMode,
}

impl DiffusionSchedule {
    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// beta_t for t in [1, T].
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// alpha_t = 1 - beta_t for t in [1, T].
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product for t in [0, T]; alpha_bar(0) = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Posterior variance sigma_t^2 = beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t).
    pub fn sigma_t_sq(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Guidance variance delta at step t.
    pub fn delta_at(&self, t: usize) -> f64 {
        match self.delta {
            DeltaMode::SigmaT => self.sigma_t_sq(t),
            DeltaMode::Fixed(v) => v,
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::StepOutOfRange {
                t,
                lo: 1,
                hi: self.t_max(),
            });
        }
        Ok(())
    }

    pub fn from_betas(betas: Vec<f64>, delta: DeltaMode) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidParam {
                name: "betas",
                value: "[]".into(),
                reason: "schedule needs at least one step",
            });
        }
        for &b in &betas {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidParam {
                    name: "beta",
                    value: b.to_string(),
                    reason: "every beta must lie in (0, 1)",
                });
            }
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(DiffusionSchedule {
            betas,
            alphas,
            alpha_bars,
            delta,
        })
    }
}

/// Linear interpolation of beta from `beta_start` (t = 1) to `beta_end`
/// (t = T) inclusive.
pub fn make_schedule(
    t_steps: usize,
    beta_start: f64,
    beta_end: f64,
    delta: DeltaMode,
) -> Result<DiffusionSchedule> {
    if t_steps == 0 {
        return Err(Error::InvalidParam {
            name: "T",
            value: "0".into(),
            reason: "need at least one timestep",
        });
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParam {
            name: "beta range",
            value: format!("[{beta_start}, {beta_end}]"),
            reason: "require 0 < beta_start <= beta_end < 1",
        });
    }
    let betas = (0..t_steps)
        .map(|i| {
            if t_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64
            }
        })
        .collect();
    DiffusionSchedule::from_betas(betas, delta)
}

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.
pub fn forward_noise(
    z0: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    sched: &DiffusionSchedule,
) -> Result<LatentTensor> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(z, e)| sa * z + sn * e)
        .collect();
    Ok(z0.with_data(data))
}

// ---------------------------------------------------------------------------
// Gaussian-mixture prior
// ---------------------------------------------------------------------------

/// Variance floor applied during fitting and on deserialized priors.
pub const GMM_VAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmPrior {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl GmmPrior {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty()
            || self.means.len() != self.weights.len()
            || self.variances.len() != self.weights.len()
        {
            return Err(Error::MixtureFit("inconsistent component counts".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || self.weights.iter().any(|w| *w <= 0.0) {
            return Err(Error::MixtureFit("weights must be positive and sum to 1".into()));
        }
        let d = self.dim();
        for (m, v) in self.means.iter().zip(&self.variances) {
            if m.len() != d || v.len() != d {
                return Err(Error::MixtureFit("ragged component dimensions".into()));
            }
            if v.iter().any(|x| *x < GMM_VAR_FLOOR) {
                return Err(Error::MixtureFit(format!(
                    "variance below floor {GMM_VAR_FLOOR}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GmmFitResult {
    pub prior: GmmPrior,
    /// Log-likelihood after each EM iteration; nondecreasing.
    pub log_likelihood: Vec<f64>,
}

/// Diagonal-covariance EM from k-means++ seeding. An empty component is
/// reseeded once; a second occurrence is an error.
pub fn fit_gmm(
    samples: &[Vec<f64>],
    k: usize,
    seed: u64,
    iters: usize,
    var_floor: f64,
) -> Result<GmmFitResult> {
    let n = samples.len();
    if k == 0 || n < k {
        return Err(Error::MixtureFit(format!(
            "need at least K={k} samples, got {n}"
        )));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::MixtureFit("ragged sample dimensions".into()));
    }
    let floor = var_floor.max(GMM_VAR_FLOOR);
    let mut rng = Rng::from_parts(seed, "gmm-init", 0);

    // Global per-dim variance seeds the component variances.
    let mut gmean = vec![0.0; d];
    for s in samples {
        for (g, x) in gmean.iter_mut().zip(s) {
            *g += x;
        }
    }
    for g in gmean.iter_mut() {
        *g /= n as f64;
    }
    let mut gvar = vec![0.0; d];
    for s in samples {
        for ((v, x), m) in gvar.iter_mut().zip(s).zip(&gmean) {
            *v += (x - m) * (x - m);
        }
    }
    for v in gvar.iter_mut() {
        *v = (*v / n as f64).max(floor);
    }

    // k-means++ seeding.
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
    means.push(samples[rng.below(n)].clone());
    let mut d2 = vec![0.0f64; n];
    while means.len() < k {
        let mut total = 0.0;
        for (i, s) in samples.iter().enumerate() {
            let best = means
                .iter()
                .map(|m| sq_dist(s, m))
                .fold(f64::INFINITY, f64::min);
            d2[i] = best;
            total += best;
        }
        let pick = if total <= 0.0 {
            rng.below(n)
        } else {
            let mut u = rng.uniform() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        };
        means.push(samples[pick].clone());
    }

    let mut weights = vec![1.0 / k as f64; k];
    let mut vars = vec![gvar.clone(); k];
    let mut log_likelihood = Vec::with_capacity(iters);
    let mut reseeded = false;
    let mut log_resp = vec![0.0f64; n * k];

    for _iter in 0..iters {
        // E-step.
        let mut ll = 0.0;
        for (i, s) in samples.iter().enumerate() {
            for (kk, ((w, m), v)) in weights.iter().zip(&means).zip(&vars).enumerate() {
                log_resp[i * k + kk] = w.ln() + log_diag_normal(s, m, v);
            }
            let lse = logsumexp(&log_resp[i * k..(i + 1) * k]);
            ll += lse;
            for kk in 0..k {
                log_resp[i * k + kk] -= lse;
            }
        }
        log_likelihood.push(ll);

        // M-step.
        for kk in 0..k {
            let nk: f64 = (0..n).map(|i| log_resp[i * k + kk].exp()).sum();
            if nk < 1e-10 {
                if reseeded {
                    return Err(Error::MixtureFit(format!(
                        "component {kk} collapsed twice during EM"
                    )));
                }
                reseeded = true;
                means[kk] = samples[rng.below(n)].clone();
                vars[kk] = gvar.clone();
                weights[kk] = 1.0 / n as f64;
                let total: f64 = weights.iter().sum();
                for w in weights.iter_mut() {
                    *w /= total;
                }
                continue;
            }
            let mut mean = vec![0.0; d];
            for (i, s) in samples.iter().enumerate() {
                let r = log_resp[i * k + kk].exp();
                for (mm, x) in mean.iter_mut().zip(s) {
                    *mm += r * x;
                }
            }
            for mm in mean.iter_mut() {
                *mm /= nk;
            }
            let mut var = vec![0.0; d];
            for (i, s) in samples.iter().enumerate() {
                let r = log_resp[i * k + kk].exp();
                for ((vv, x), mm) in var.iter_mut().zip(s).zip(&mean) {
                    *vv += r * (x - mm) * (x - mm);
                }
            }
            for vv in var.iter_mut() {
                *vv = (*vv / nk).max(floor);
            }
            means[kk] = mean;
            vars[kk] = var;
            weights[kk] = nk / n as f64;
        }
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
    }

    let prior = GmmPrior {
        weights,
        means,
        variances: vars,
    };
    prior.validate()?;
    Ok(GmmFitResult {
        prior,
        log_likelihood,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn log_diag_normal(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((xi, mi), vi) in x.iter().zip(mean).zip(var) {
        let d = xi - mi;
        acc += -0.5 * ((2.0 * std::f64::consts::PI * vi).ln() + d * d / vi);
    }
    acc
}

fn logsumexp(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------------------
// Score of the diffused marginal
// ---------------------------------------------------------------------------

/// Evaluation of the diffused mixture marginal at one point: log-density,
/// score, predicted noise, and enough state for exact Hessian-vector
/// products.
pub struct ScoreEval {
    pub log_density: f64,
    pub score: Vec<f64>,
    pub eps_theta: Vec<f64>,
    resp: Vec<f64>,
    comp_scores: Vec<Vec<f64>>,
    comp_vars: Vec<Vec<f64>>,
}

/// Marginal at step t: sum_k w_k N(sqrt(ab) m_k, ab C_k + (1 - ab) I).
/// Step t = 0 is allowed and evaluates the prior itself.
pub fn score_eval(
    prior: &GmmPrior,
    z: &[f64],
    t: usize,
    sched: &DiffusionSchedule,
) -> ScoreEval {
    let ab = sched.alpha_bar(t);
    let sa = ab.sqrt();
    let k = prior.k();
    let d = z.len();
    assert_eq!(d, prior.dim(), "latent/prior dimension mismatch");

    let mut log_terms = vec![0.0; k];
    let mut comp_scores = Vec::with_capacity(k);
    let mut comp_vars = Vec::with_capacity(k);
    for kk in 0..k {
        let mut lt = prior.weights[kk].ln();
        let mut g = vec![0.0; d];
        let mut vt = vec![0.0; d];
        for i in 0..d {
            let v = ab * prior.variances[kk][i] + (1.0 - ab);
            let dm = z[i] - sa * prior.means[kk][i];
            lt += -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + dm * dm / v);
            g[i] = -dm / v;
            vt[i] = v;
        }
        log_terms[kk] = lt;
        comp_scores.push(g);
        comp_vars.push(vt);
    }
    let lse = logsumexp(&log_terms);
    let resp: Vec<f64> = log_terms.iter().map(|lt| (lt - lse).exp()).collect();

    let mut score = vec![0.0; d];
    for kk in 0..k {
        for i in 0..d {
            score[i] += resp[kk] * comp_scores[kk][i];
        }
    }
    let sn = (1.0 - ab).sqrt();
    let eps_theta = score.iter().map(|s| -sn * s).collect();
    ScoreEval {
        log_density: lse,
        score,
        eps_theta,
        resp,
        comp_scores,
        comp_vars,
    }
}

impl ScoreEval {
    /// Exact Hessian-vector product of the log marginal:
    /// H v = sum_k r_k (-v / v_k + g_k (g_k . v)) - g (g . v).
    pub fn hessian_vp(&self, v: &[f64]) -> Vec<f64> {
        let d = v.len();
        let mut out = vec![0.0; d];
        let g_dot_v: f64 = self.score.iter().zip(v).map(|(a, b)| a * b).sum();
        for kk in 0..self.resp.len() {
            let r = self.resp[kk];
            if r == 0.0 {
                continue;
            }
            let gk = &self.comp_scores[kk];
            let gk_dot_v: f64 = gk.iter().zip(v).map(|(a, b)| a * b).sum();
            for i in 0..d {
                out[i] += r * (-v[i] / self.comp_vars[kk][i] + gk[i] * gk_dot_v);
            }
        }
        for i in 0..d {
            out[i] -= self.score[i] * g_dot_v;
        }
        out
    }
}

/// Convenience wrapper returning (score, eps_theta) as latent tensors.
pub fn score_and_eps(
    prior: &GmmPrior,
    z: &LatentTensor,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<(LatentTensor, LatentTensor)> {
    if t > sched.t_max() {
        return Err(Error::StepOutOfRange {
            t,
            lo: 0,
            hi: sched.t_max(),
        });
    }
    let eval = score_eval(prior, z.data(), t, sched);
    Ok((z.with_data(eval.score), z.with_data(eval.eps_theta)))
}

/// z0_hat = (z_t - sqrt(1 - alpha_bar_t) eps_theta) / sqrt(alpha_bar_t).
pub fn predict_z0(
    z_t: &LatentTensor,
    t: usize,
    eps_theta: &LatentTensor,
    sched: &DiffusionSchedule,
) -> Result<LatentTensor> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z_t
        .data()
        .iter()
        .zip(eps_theta.data())
        .map(|(z, e)| (z - sn * e) / sa)
        .collect();
    Ok(z_t.with_data(data))
}

/// Posterior mean and variance of Eq-style reverse step:
/// mu = (sqrt(ab_{t-1}) beta_t z0_hat + sqrt(alpha_t)(1 - ab_{t-1}) z_t) / (1 - ab_t),
/// sigma_t^2 = beta_t (1 - ab_{t-1}) / (1 - ab_t).
pub fn posterior_mean_var(
    z_t: &LatentTensor,
    z0_hat: &LatentTensor,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<(LatentTensor, f64)> {
    sched.check_step(t)?;
    let ab_prev = sched.alpha_bar(t - 1);
    let ab = sched.alpha_bar(t);
    let beta = sched.beta(t);
    let alpha = sched.alpha(t);
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let c1 = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let mu = z_t
        .data()
        .iter()
        .zip(z0_hat.data())
        .map(|(zt, z0)| c0 * z0 + c1 * zt)
        .collect();
    Ok((z_t.with_data(mu), sched.sigma_t_sq(t)))
}

/// Per-step record of the unguided chain.
#[derive(Debug, Clone)]
pub struct UnguidedStep {
    pub t: usize,
    pub z0_norm: f64,
}

/// Unguided reverse chain from z_T ~ N(0, I) to z_0 using the analytic
/// predicted noise. RNG consumption: the init draw, then one standard-normal
/// field per step (including t = 1, where the posterior deviation is 0).
pub fn ancestral_sample(
    prior: &GmmPrior,
    sched: &DiffusionSchedule,
    template: &LatentTensor,
    seed: u64,
) -> Result<(LatentTensor, Vec<UnguidedStep>)> {
    let mut rng = Rng::new(seed);
    let d = template.len();
    if d != prior.dim() {
        return Err(Error::MixtureFit(format!(
            "prior dimension {} does not match latent size {d}",
            prior.dim()
        )));
    }
    let mut buf = vec![0.0; d];
    rng.fill_standard_normal(&mut buf);
    let mut z = template.with_data(buf);
    let mut trace = Vec::with_capacity(sched.t_max());
    let mut noise = vec![0.0; d];
    for t in (1..=sched.t_max()).rev() {
        let eval = score_eval(prior, z.data(), t, sched);
        let eps = z.with_data(eval.eps_theta);
        let z0_hat = predict_z0(&z, t, &eps, sched)?;
        let (mu, var) = posterior_mean_var(&z, &z0_hat, t, sched)?;
        let sd = var.sqrt();
        rng.fill_standard_normal(&mut noise);
        let data = mu
            .data()
            .iter()
            .zip(&noise)
            .map(|(m, n)| m + sd * n)
            .collect();
        z = z.with_data(data);
        trace.push(UnguidedStep {
            t: t - 1,
            z0_norm: z0_hat.norm(),
        });
    }
    Ok((z, trace))
}
