//! Training objectives and the optimizer.
//!
//! `igpo_objective` returns the clipped surrogate `J` to be maximized together
//! with its exact gradient; the trainer minimizes `−J`. Advantages and
//! behaviour-policy log-probabilities are constants.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::policy::{token_logprobs, ContextFeatures, Gradient, PolicyError, PolicyParams};
use crate::reward::standardize;
use crate::traj::TokenizedView;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("non-finite value in objective or gradient")]
    NonFinite,
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Igpo,
    GrpoSparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptConfig {
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub algorithm: Algorithm,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig { clip_eps: 0.2, kl_beta: 0.0, learning_rate: 0.003, algorithm: Algorithm::Igpo }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<(), OptError> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(OptError::InvalidConfig("clip_eps must lie in (0, 1)"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(OptError::InvalidConfig("learning_rate must be positive"));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(OptError::InvalidConfig("kl_beta must be non-negative"));
        }
        Ok(())
    }
}

/// One agent token of a sampled trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub context: ContextFeatures,
    pub token: u32,
    pub old_logprob: f64,
    pub advantage: f64,
    pub turn: usize,
}

/// The agent tokens `u_i` of one trajectory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenBatch {
    pub trajectory: usize,
    pub tokens: Vec<TokenRecord>,
}

/// Masked negative log-likelihood of the agent tokens and its gradient.
pub fn sft_loss(params: &PolicyParams, view: &TokenizedView) -> Result<(f64, Gradient), OptError> {
    if view.role_mask.len() != view.tokens.len() {
        return Err(OptError::ShapeMismatch { expected: view.tokens.len(), found: view.role_mask.len() });
    }
    let mut grad = Gradient::zeros_like(params);
    let mut loss = 0.0;
    for (pos, (&tok, &agent)) in view.tokens.iter().zip(&view.role_mask).enumerate() {
        if !agent {
            continue;
        }
        if tok as usize >= params.vocab_size {
            return Err(PolicyError::UnknownToken(tok).into());
        }
        let ctx = params.featurize(&view.tokens[..pos]);
        let lp = token_logprobs(params, &ctx)?;
        loss -= lp[tok as usize];
        // d(−log p_tok)/dz = p − onehot
        let mut d: Vec<f64> = lp.iter().map(|l| libm::exp(*l)).collect();
        d[tok as usize] -= 1.0;
        params.accumulate_dlogits(&ctx, &d, 1.0, &mut grad);
    }
    if !loss.is_finite() || !grad.is_finite() {
        return Err(OptError::NonFinite);
    }
    Ok((loss, grad))
}

/// `min(ratio · A, clip(ratio, 1 − ε, 1 + ε) · A)`.
pub fn clip_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Whether the surrogate's gradient flows through this token, i.e. the
/// unclipped branch is the active one.
pub fn clip_active(ratio: f64, advantage: f64, eps: f64) -> bool {
    if (1.0 - eps..=1.0 + eps).contains(&ratio) {
        return true;
    }
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    ratio * advantage < clipped * advantage
}

/// Contribution of one trajectory, before averaging over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTerms {
    /// Per-token mean of clipped terms.
    pub surrogate: f64,
    /// Gradient of `surrogate`.
    pub gradient: Gradient,
    /// `Σ ∇KL` over this trajectory's contexts, present when `β > 0`.
    pub kl_gradient: Option<Gradient>,
    pub kl_sum: f64,
    pub contexts: usize,
    pub clipped: usize,
    pub ratio_sum: f64,
}

/// Surrogate and KL contributions of one trajectory.
pub fn trajectory_terms(
    params: &PolicyParams,
    reference: Option<&PolicyParams>,
    batch: &TokenBatch,
    cfg: &OptConfig,
) -> Result<TrajectoryTerms, OptError> {
    let reference = if cfg.kl_beta > 0.0 {
        Some(reference.ok_or(OptError::InvalidConfig("kl_beta > 0 requires a reference policy"))?)
    } else {
        None
    };
    let mut gradient = Gradient::zeros_like(params);
    let mut kl_gradient = reference.map(|_| Gradient::zeros_like(params));
    let mut surrogate = 0.0;
    let mut kl_sum = 0.0;
    let mut clipped = 0;
    let mut ratio_sum = 0.0;
    let n = batch.tokens.len();
    let inv_n = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    for rec in &batch.tokens {
        if !rec.old_logprob.is_finite() || !rec.advantage.is_finite() {
            return Err(OptError::NonFinite);
        }
        if rec.token as usize >= params.vocab_size {
            return Err(PolicyError::UnknownToken(rec.token).into());
        }
        let lp = token_logprobs(params, &rec.context)?;
        let tok = rec.token as usize;
        let ratio = libm::exp(lp[tok] - rec.old_logprob);
        ratio_sum += ratio;
        surrogate += clip_term(ratio, rec.advantage, cfg.clip_eps);
        if clip_active(ratio, rec.advantage, cfg.clip_eps) {
            // ∇(ρ A) = ρ A ∇log π
            let w = ratio * rec.advantage;
            let mut d: Vec<f64> = lp.iter().map(|l| -w * libm::exp(*l)).collect();
            d[tok] += w;
            params.accumulate_dlogits(&rec.context, &d, inv_n, &mut gradient);
        } else {
            clipped += 1;
        }
        if let (Some(r), Some(kg)) = (reference, kl_gradient.as_mut()) {
            let lq = token_logprobs(r, &rec.context)?;
            let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| libm::exp(*a) * (a - b)).sum();
            kl_sum += kl;
            // ∂KL/∂z_j = p_j (log p_j − log q_j − KL)
            let d: Vec<f64> = lp.iter().zip(&lq).map(|(a, b)| libm::exp(*a) * (a - b - kl)).collect();
            params.accumulate_dlogits(&rec.context, &d, 1.0, kg);
        }
    }
    Ok(TrajectoryTerms { surrogate: surrogate * inv_n, gradient, kl_gradient, kl_sum, contexts: n, clipped, ratio_sum })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutput {
    pub value: f64,
    pub gradient: Gradient,
    pub surrogate: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
}

/// Combines per-trajectory terms in order. Reduction order is fixed so the
/// result does not depend on how the terms were computed.
pub fn reduce_terms(params: &PolicyParams, terms: &[TrajectoryTerms], cfg: &OptConfig) -> Result<ObjectiveOutput, OptError> {
    let mut gradient = Gradient::zeros_like(params);
    if terms.is_empty() {
        return Ok(ObjectiveOutput { value: 0.0, gradient, surrogate: 0.0, kl: 0.0, clip_fraction: 0.0, mean_ratio: 1.0 });
    }
    let contexts: usize = terms.iter().map(|t| t.contexts).sum();
    let inv_b = 1.0 / terms.len() as f64;
    let inv_c = if contexts == 0 { 0.0 } else { 1.0 / contexts as f64 };
    let mut surrogate = 0.0;
    let mut kl_sum = 0.0;
    let mut clipped = 0;
    let mut ratio_sum = 0.0;
    for t in terms {
        surrogate += t.surrogate;
        kl_sum += t.kl_sum;
        clipped += t.clipped;
        ratio_sum += t.ratio_sum;
        gradient.add_scaled(&t.gradient, inv_b);
        if let Some(kg) = &t.kl_gradient {
            gradient.add_scaled(kg, -cfg.kl_beta * inv_c);
        }
    }
    let kl = kl_sum * inv_c;
    let value = surrogate * inv_b - cfg.kl_beta * kl;
    if !value.is_finite() || !gradient.is_finite() {
        return Err(OptError::NonFinite);
    }
    Ok(ObjectiveOutput {
        value,
        gradient,
        surrogate: surrogate * inv_b,
        kl,
        clip_fraction: clipped as f64 * inv_c,
        mean_ratio: if contexts == 0 { 1.0 } else { ratio_sum * inv_c },
    })
}

/// `J = (1/B) Σ_i (1/|u_i|) Σ_k min(ρ A, clip(ρ) A) − β · KL`, with its
/// gradient.
pub fn igpo_objective(
    params: &PolicyParams,
    reference: Option<&PolicyParams>,
    batch: &[TokenBatch],
    cfg: &OptConfig,
) -> Result<ObjectiveOutput, OptError> {
    let terms = batch.iter().map(|b| trajectory_terms(params, reference, b, cfg)).collect::<Result<Vec<_>, _>>()?;
    reduce_terms(params, &terms, cfg)
}

/// Outcome-only group advantages broadcast to every agent token:
/// `advantages[i]` has `token_counts[i]` copies of `(r_i − μ) / σ`.
pub fn grpo_sparse_advantages(outcomes: &[f64], token_counts: &[usize], sigma_floor: f64) -> Vec<Vec<f64>> {
    standardize(outcomes, sigma_floor).into_iter().zip(token_counts).map(|(a, &n)| vec![a; n]).collect()
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One Adam descent step on `grad` (the gradient of a loss to minimize).
pub fn adam_step(params: &mut PolicyParams, grad: &Gradient, state: &mut AdamState, lr: f64) -> Result<(), OptError> {
    let n = params.theta.len();
    for found in [grad.data.len(), state.m.len(), state.v.len()] {
        if found != n {
            return Err(OptError::ShapeMismatch { expected: n, found });
        }
    }
    if !grad.is_finite() {
        return Err(OptError::NonFinite);
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - libm::pow(state.beta1, t);
    let bc2 = 1.0 - libm::pow(state.beta2, t);
    for i in 0..n {
        let g = grad.data[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        if state.m[i] == 0.0 {
            continue;
        }
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params.theta[i] -= lr * m_hat / (libm::sqrt(v_hat) + state.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Denominator floor for relative errors of near-zero derivatives.
pub const FD_ABS_FLOOR: f64 = 1e-6;

/// Compares `analytic` with central differences of `f` on `n_probes`
/// coordinates. Half of the probes come from coordinates with a non-zero
/// analytic derivative (when there are any), the rest are uniform.
pub fn finite_diff_check<F, R>(
    f: F,
    params: &PolicyParams,
    analytic: &Gradient,
    n_probes: usize,
    step: f64,
    tol: f64,
    rng: &mut R,
) -> FdReport
where
    F: Fn(&PolicyParams) -> f64,
    R: Rng,
{
    let support: Vec<usize> = analytic.data.iter().enumerate().filter(|(_, g)| **g != 0.0).map(|(i, _)| i).collect();
    let mut work = params.clone();
    let mut probes = Vec::with_capacity(n_probes);
    for p in 0..n_probes {
        let index = if p % 2 == 0 && !support.is_empty() {
            support[rng.gen_range(0..support.len())]
        } else {
            rng.gen_range(0..params.theta.len())
        };
        let orig = work.theta[index];
        work.theta[index] = orig + step;
        let plus = f(&work);
        work.theta[index] = orig - step;
        let minus = f(&work);
        work.theta[index] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data[index];
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_ABS_FLOOR);
        probes.push(Probe { index, analytic: a, numeric, rel_error });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    FdReport { passed: max_rel_error <= tol && max_rel_error.is_finite(), probes, max_rel_error }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{grad_logprob, kl_divergence};
    use crate::rng::stream_rng;

    fn small(seed: u64) -> PolicyParams {
        let mut rng = stream_rng(seed, "params");
        PolicyParams::random(64, 9, 6, 1.0, 0.5, &mut rng).unwrap()
    }

    fn view(tokens: Vec<u32>, mask: Vec<bool>) -> TokenizedView {
        TokenizedView { tokens, role_mask: mask, turn_spans: Vec::new() }
    }

    #[test]
    fn sft_trivial_cases() {
        let p = small(1);
        let (l, g) = sft_loss(&p, &view(vec![1, 2, 3], vec![false; 3])).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data.iter().all(|x| *x == 0.0));
        let u = PolicyParams::zeros(64, 9, 6, 1.0).unwrap();
        let (l, _) = sft_loss(&u, &view(vec![1, 2, 3, 4, 5], vec![false, true, true, true, true])).unwrap();
        assert!((l - 4.0 * libm::log(9.0)).abs() < 1e-12);
    }

    #[test]
    fn sft_gradient_matches_fd() {
        let mut rng = stream_rng(2, "fd");
        for s in 0..10 {
            let p = small(100 + s);
            let v = view(vec![0, 3, 4, 8, 2, 1, 5], vec![false, true, true, false, true, true, false]);
            let (_, g) = sft_loss(&p, &v).unwrap();
            let rep = finite_diff_check(|q| sft_loss(q, &v).unwrap().0, &p, &g, 20, 1e-5, 1e-4, &mut rng);
            assert!(rep.passed, "{rep:?}");
        }
    }

    #[test]
    fn clip_term_examples() {
        assert!((clip_term(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clip_term(0.5, -1.0, 0.2) - -0.8).abs() < 1e-15);
        assert_eq!(clip_term(1.0, -0.37, 0.2), -0.37);
        assert!(!clip_active(1.5, 1.0, 0.2));
        assert!(clip_active(1.5, -1.0, 0.2));
        assert!(!clip_active(0.5, -1.0, 0.2));
        assert!(clip_active(0.5, 1.0, 0.2));
    }

    fn records(p: &PolicyParams, hist: &[&[u32]], toks: &[u32], adv: &[f64], shift: &[f64]) -> TokenBatch {
        let tokens = hist
            .iter()
            .zip(toks)
            .zip(adv)
            .zip(shift)
            .map(|(((h, &t), &a), &s)| {
                let context = p.featurize(h);
                let lp = token_logprobs(p, &context).unwrap()[t as usize];
                TokenRecord { context, token: t, old_logprob: lp - s, advantage: a, turn: 0 }
            })
            .collect();
        TokenBatch { trajectory: 0, tokens }
    }

    #[test]
    fn identity_ratio_two_token_instance() {
        let p = small(3);
        let b = records(&p, &[&[1, 2], &[1, 2, 7]], &[7, 4], &[0.5, -2.0], &[0.0, 0.0]);
        let out = igpo_objective(&p, None, core::slice::from_ref(&b), &OptConfig::default()).unwrap();
        assert_eq!(out.mean_ratio, 1.0);
        assert!((out.value - (0.5 - 2.0) / 2.0).abs() < 1e-15);
        // Hand form: (1/2)(0.5 ∇log π(7|c1) − 2 ∇log π(4|c2)).
        let mut expect = grad_logprob(&p, &b.tokens[0].context, 7).unwrap();
        expect.scale(0.5 * 0.5);
        expect.add_scaled(&grad_logprob(&p, &b.tokens[1].context, 4).unwrap(), -2.0 * 0.5);
        for (a, e) in out.gradient.data.iter().zip(&expect.data) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_advantages_zero_gradient() {
        let p = small(4);
        let b = records(&p, &[&[1], &[2, 3]], &[5, 6], &[0.0, 0.0], &[0.3, -0.4]);
        let out = igpo_objective(&p, None, &[b], &OptConfig::default()).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.gradient.data.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn clipped_token_has_no_gradient() {
        let p = small(5);
        let shift = libm::log(1.5);
        let b = records(&p, &[&[1, 2]], &[3], &[1.0], &[shift]);
        let cfg = OptConfig::default();
        let out = igpo_objective(&p, None, core::slice::from_ref(&b), &cfg).unwrap();
        assert!((out.value - 1.2).abs() < 1e-12);
        assert!(out.gradient.data.iter().all(|g| *g == 0.0));
        let mut rng = stream_rng(5, "fd");
        let f = |q: &PolicyParams| igpo_objective(q, None, core::slice::from_ref(&b), &cfg).unwrap().value;
        let rep = finite_diff_check(f, &p, &out.gradient, 30, 1e-5, 1e-4, &mut rng);
        assert!(rep.probes.iter().all(|pr| pr.numeric.abs() < 1e-6));
    }

    #[test]
    fn objective_gradient_matches_fd_with_kl() {
        let mut rng = stream_rng(6, "fd");
        for s in 0..10 {
            let p = small(200 + s);
            let r = small(300 + s);
            let b1 = records(&p, &[&[1, 2], &[3], &[4, 4]], &[0, 8, 2], &[1.0, 0.5, -2.0], &[0.0, 0.5, -0.5]);
            let b2 = records(&p, &[&[6], &[6, 1]], &[1, 1], &[-1.5, 0.7], &[0.05, -0.1]);
            let batch = [b1, b2];
            let cfg = OptConfig { kl_beta: 0.1 * s as f64, ..OptConfig::default() };
            let out = igpo_objective(&p, Some(&r), &batch, &cfg).unwrap();
            assert!(out.clip_fraction > 0.0);
            let f = |q: &PolicyParams| igpo_objective(q, Some(&r), &batch, &cfg).unwrap().value;
            let rep = finite_diff_check(f, &p, &out.gradient, 30, 1e-5, 1e-4, &mut rng);
            assert!(rep.passed, "seed {s}: {rep:?}");
        }
    }

    #[test]
    fn kl_descent_is_monotone() {
        let mut p = small(7);
        let r = small(8);
        let b = records(&p, &[&[1], &[2, 3], &[4]], &[5, 6, 0], &[0.0; 3], &[0.0; 3]);
        let cfg = OptConfig { kl_beta: 1.0, learning_rate: 0.02, ..OptConfig::default() };
        let mut state = AdamState::new(p.theta.len());
        let kl = |q: &PolicyParams| b.tokens.iter().map(|t| kl_divergence(q, &r, &t.context).unwrap()).sum::<f64>();
        let mut prev = kl(&p);
        for _ in 0..15 {
            let mut g = igpo_objective(&p, Some(&r), core::slice::from_ref(&b), &cfg).unwrap().gradient;
            g.scale(-1.0);
            adam_step(&mut p, &g, &mut state, cfg.learning_rate).unwrap();
            let now = kl(&p);
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn grpo_examples() {
        assert_eq!(grpo_sparse_advantages(&[1.0, 0.0], &[2, 1], 1e-8), vec![vec![1.0, 1.0], vec![-1.0]]);
        assert_eq!(grpo_sparse_advantages(&[1.0; 4], &[1; 4], 1e-8), vec![vec![0.0]; 4]);
        let mut o = [0.0; 8];
        o[0] = 1.0;
        let a = grpo_sparse_advantages(&o, &[1; 8], 1e-8);
        let std = libm::sqrt(1.0 / 8.0 * 7.0 / 8.0);
        assert!((a[0][0] - (1.0 - 1.0 / 8.0) / std).abs() < 1e-12);
    }

    #[test]
    fn adam_behaviour() {
        let mut p = small(9);
        let before = p.clone();
        let mut st = AdamState::new(p.theta.len());
        let zero = Gradient::zeros_like(&p);
        adam_step(&mut p, &zero, &mut st, 0.1).unwrap();
        assert_eq!(p, before);

        // With a constant gradient, m̂ = g and v̂ = g², so each step is lr·g/(|g|+eps).
        let mut g = Gradient::zeros_like(&p);
        g.data[3] = 0.25;
        let mut st = AdamState::new(p.theta.len());
        for k in 0..50 {
            let x0 = p.theta[3];
            adam_step(&mut p, &g, &mut st, 0.01).unwrap();
            let stepped = x0 - p.theta[3];
            let expect = 0.01 * 0.25 / (0.25 + 1e-8);
            assert!((stepped - expect).abs() < 1e-12, "step {k}: {stepped}");
        }
        let short = Gradient { data: vec![0.0; 3] };
        assert!(matches!(adam_step(&mut p, &short, &mut st, 0.1), Err(OptError::ShapeMismatch { .. })));

        let mut a = small(10);
        let mut b = small(10);
        let (mut sa, mut sb) = (AdamState::new(a.theta.len()), AdamState::new(b.theta.len()));
        let mut rng = stream_rng(1, "g");
        for _ in 0..5 {
            let g = Gradient { data: (0..a.theta.len()).map(|_| rng.gen_range(-1.0..1.0)).collect() };
            adam_step(&mut a, &g, &mut sa, 0.01).unwrap();
            adam_step(&mut b, &g, &mut sb, 0.01).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn fd_on_linear_objective() {
        let p = small(11);
        let w: Vec<f64> = (0..p.theta.len()).map(|i| (i % 13) as f64 - 6.0).collect();
        let f = |q: &PolicyParams| q.theta.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let g = Gradient { data: w.clone() };
        let rep = finite_diff_check(f, &p, &g, 40, 1e-5, 1e-6, &mut stream_rng(0, "lin"));
        assert!(rep.passed, "{rep:?}");
    }
}
