//! Feature-hashed linear-softmax policy over the vocabulary.
//!
//! The context of a position is the trailing `window` tokens of the
//! serialized history. Features are a bias, a unigram per token and a bigram
//! per adjacent pair; the most recent unigram and bigram hash into their own
//! namespaces so the policy can tell where it is inside a turn. Logits are
//! `φ(ctx) · θ / temperature`, so every log-probability has a closed-form
//! gradient.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::splitmix64;
use crate::traj::GroundTruth;
use crate::vocab::Vocabulary;

pub const DEFAULT_FEATURE_DIM: usize = 1024;
pub const DEFAULT_WINDOW: usize = 32;
/// Sampling stops after this many tokens if `END` has not been drawn.
pub const MAX_TURN_TOKENS: usize = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("token id {0} outside the vocabulary")]
    UnknownToken(u32),
    #[error("token `{0}` is not in the vocabulary")]
    UnknownWord(String),
    #[error("invalid policy shape: {0}")]
    InvalidShape(&'static str),
}

/// Sparse non-negative feature counts, sorted by bucket.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ContextFeatures {
    pub entries: Vec<(u32, f64)>,
}

impl ContextFeatures {
    pub fn active(&self) -> usize {
        self.entries.len()
    }
}

const NS_BIAS: u64 = 0;
const NS_UNIGRAM: u64 = 1;
const NS_BIGRAM: u64 = 2;
const NS_LAST_UNIGRAM: u64 = 3;
const NS_LAST_BIGRAM: u64 = 4;

fn bucket(ns: u64, a: u32, b: u32, dim: usize) -> u32 {
    let key = (ns << 56) ^ (u64::from(a) << 28) ^ u64::from(b);
    (splitmix64(key) % dim as u64) as u32
}

/// Hashes the trailing `window` tokens of `history` into `dim` buckets.
pub fn featurize(history: &[u32], window: usize, dim: usize) -> ContextFeatures {
    let tail = &history[history.len().saturating_sub(window)..];
    let mut raw: Vec<u32> = Vec::with_capacity(2 * tail.len() + 1);
    raw.push(bucket(NS_BIAS, 0, 0, dim));
    let n = tail.len();
    for (i, &t) in tail.iter().enumerate() {
        let ns = if i + 1 == n { NS_LAST_UNIGRAM } else { NS_UNIGRAM };
        raw.push(bucket(ns, t, 0, dim));
        if i > 0 {
            let ns = if i + 1 == n { NS_LAST_BIGRAM } else { NS_BIGRAM };
            raw.push(bucket(ns, tail[i - 1], t, dim));
        }
    }
    raw.sort_unstable();
    let mut entries: Vec<(u32, f64)> = Vec::with_capacity(raw.len());
    for b in raw {
        match entries.last_mut() {
            Some((last, c)) if *last == b => *c += 1.0,
            _ => entries.push((b, 1.0)),
        }
    }
    ContextFeatures { entries }
}

/// Dense gradient with the same layout as [`PolicyParams::theta`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub data: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Gradient { data: vec![0.0; params.theta.len()] }
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|g| g * g).sum())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|g| *g *= s);
    }

    pub fn add_scaled(&mut self, other: &Gradient, s: f64) {
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|g| g.is_finite())
    }
}

/// Parameters of the linear-softmax policy. `theta` is row-major
/// `feature_dim × vocab_size`. Cloning gives an independent snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub window: usize,
    pub temperature: f64,
    pub theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(feature_dim: usize, vocab_size: usize, window: usize, temperature: f64) -> Result<Self, PolicyError> {
        if feature_dim == 0 || vocab_size == 0 {
            return Err(PolicyError::InvalidShape("feature_dim and vocab_size must be positive"));
        }
        if window == 0 {
            return Err(PolicyError::InvalidShape("window must be positive"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(PolicyError::InvalidShape("temperature must be positive and finite"));
        }
        Ok(PolicyParams { feature_dim, vocab_size, window, temperature, theta: vec![0.0; feature_dim * vocab_size] })
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng>(
        feature_dim: usize,
        vocab_size: usize,
        window: usize,
        temperature: f64,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        let mut p = Self::zeros(feature_dim, vocab_size, window, temperature)?;
        for x in p.theta.iter_mut() {
            *x = rng.gen_range(-scale..=scale);
        }
        Ok(p)
    }

    pub fn snapshot(&self) -> PolicyParams {
        self.clone()
    }

    pub fn featurize(&self, history: &[u32]) -> ContextFeatures {
        featurize(history, self.window, self.feature_dim)
    }

    fn check_token(&self, token: u32) -> Result<(), PolicyError> {
        if (token as usize) < self.vocab_size {
            Ok(())
        } else {
            Err(PolicyError::UnknownToken(token))
        }
    }

    /// `φ(ctx) · θ / temperature`.
    pub fn logits(&self, ctx: &ContextFeatures) -> Vec<f64> {
        let v = self.vocab_size;
        let mut out = vec![0.0; v];
        for &(f, c) in &ctx.entries {
            let row = &self.theta[f as usize * v..(f as usize + 1) * v];
            for (o, w) in out.iter_mut().zip(row) {
                *o += c * w;
            }
        }
        let inv_t = 1.0 / self.temperature;
        out.iter_mut().for_each(|x| *x *= inv_t);
        out
    }

    /// Adds `scale * φ(ctx) ⊗ dlogits / temperature` to `grad`, i.e. the
    /// chain rule through the logits.
    pub fn accumulate_dlogits(&self, ctx: &ContextFeatures, dlogits: &[f64], scale: f64, grad: &mut Gradient) {
        let v = self.vocab_size;
        let s = scale / self.temperature;
        for &(f, c) in &ctx.entries {
            let row = &mut grad.data[f as usize * v..(f as usize + 1) * v];
            for (g, d) in row.iter_mut().zip(dlogits) {
                *g += s * c * d;
            }
        }
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>, PolicyError> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(PolicyError::NonFiniteLogits);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|x| libm::exp(x - max)).sum();
    let lse = max + libm::log(sum);
    Ok(logits.iter().map(|x| x - lse).collect())
}

/// Log-probabilities of every token given the context.
pub fn token_logprobs(params: &PolicyParams, ctx: &ContextFeatures) -> Result<Vec<f64>, PolicyError> {
    log_softmax(&params.logits(ctx))
}

/// Teacher-forced log-probabilities of `continuation` after `history`.
pub fn score_sequence(
    params: &PolicyParams,
    history: &[u32],
    continuation: &[u32],
) -> Result<(f64, Vec<f64>), PolicyError> {
    for &t in history.iter().chain(continuation) {
        params.check_token(t)?;
    }
    let mut buf: Vec<u32> = history.to_vec();
    let mut per_token = Vec::with_capacity(continuation.len());
    for &t in continuation {
        let lp = token_logprobs(params, &params.featurize(&buf))?;
        per_token.push(lp[t as usize]);
        buf.push(t);
    }
    Ok((per_token.iter().sum(), per_token))
}

/// Length-normalized log-probability of the ground-truth answer tokens,
/// scored inside the answer template after `history`.
pub fn gt_logprob(
    params: &PolicyParams,
    vocab: &Vocabulary,
    history: &[u32],
    ground_truth: &GroundTruth,
) -> Result<f64, PolicyError> {
    let id = |w: &str| vocab.id(w).ok_or_else(|| PolicyError::UnknownWord(w.to_string()));
    let mut context = history.to_vec();
    for w in GroundTruth::template_prefix() {
        context.push(id(w)?);
    }
    let scored = ground_truth.scored_tokens().iter().map(|w| id(w)).collect::<Result<Vec<_>, _>>()?;
    if scored.is_empty() {
        return Err(PolicyError::UnknownWord(String::new()));
    }
    let (total, _) = score_sequence(params, &context, &scored)?;
    Ok(total / scored.len() as f64)
}

/// Tokens drawn for one turn, with the behaviour-policy log-probability and
/// context of each.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampledTurn {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
    pub contexts: Vec<ContextFeatures>,
}

/// Draws tokens until `end_token` or [`MAX_TURN_TOKENS`].
pub fn sample_turn<R: Rng>(
    params: &PolicyParams,
    history: &[u32],
    end_token: u32,
    rng: &mut R,
) -> Result<SampledTurn, PolicyError> {
    let mut buf = history.to_vec();
    let mut out = SampledTurn::default();
    while out.tokens.len() < MAX_TURN_TOKENS {
        let ctx = params.featurize(&buf);
        let lp = token_logprobs(params, &ctx)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut choice = lp.len() - 1;
        for (i, l) in lp.iter().enumerate() {
            acc += libm::exp(*l);
            if u < acc {
                choice = i;
                break;
            }
        }
        out.tokens.push(choice as u32);
        out.logprobs.push(lp[choice]);
        out.contexts.push(ctx);
        buf.push(choice as u32);
        if choice as u32 == end_token {
            break;
        }
    }
    Ok(out)
}

/// Adds `scale * ∇θ log π(token | ctx)` to `grad` and returns the log-probability.
pub fn accumulate_logprob_grad(
    params: &PolicyParams,
    ctx: &ContextFeatures,
    token: u32,
    scale: f64,
    grad: &mut Gradient,
) -> Result<f64, PolicyError> {
    params.check_token(token)?;
    let lp = token_logprobs(params, ctx)?;
    let mut d: Vec<f64> = lp.iter().map(|l| -libm::exp(*l)).collect();
    d[token as usize] += 1.0;
    params.accumulate_dlogits(ctx, &d, scale, grad);
    Ok(lp[token as usize])
}

/// `∇θ log π(token | ctx)`.
pub fn grad_logprob(params: &PolicyParams, ctx: &ContextFeatures, token: u32) -> Result<Gradient, PolicyError> {
    let mut g = Gradient::zeros_like(params);
    accumulate_logprob_grad(params, ctx, token, 1.0, &mut g)?;
    if !g.is_finite() {
        return Err(PolicyError::NonFiniteGradient);
    }
    Ok(g)
}

/// Exact `KL(π_a(·|ctx) || π_b(·|ctx))`.
pub fn kl_divergence(a: &PolicyParams, b: &PolicyParams, ctx: &ContextFeatures) -> Result<f64, PolicyError> {
    if a.vocab_size != b.vocab_size {
        return Err(PolicyError::InvalidShape("vocabulary size mismatch"));
    }
    let la = token_logprobs(a, ctx)?;
    let lb = token_logprobs(b, ctx)?;
    Ok(categorical_kl(&la, &lb))
}

/// `Σ p (log p − log q)` from log-probabilities, clamped at zero.
pub fn categorical_kl(log_p: &[f64], log_q: &[f64]) -> f64 {
    let kl: f64 = log_p.iter().zip(log_q).map(|(lp, lq)| libm::exp(*lp) * (lp - lq)).sum();
    kl.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn lse(xs: &[f64]) -> f64 {
        let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + libm::log(xs.iter().map(|x| libm::exp(x - m)).sum::<f64>())
    }

    #[test]
    fn features_are_bounded_and_nonnegative() {
        let hist: Vec<u32> = (0..100).map(|i| i % 7).collect();
        for w in [1, 5, 32] {
            let f = featurize(&hist, w, 1024);
            let total: f64 = f.entries.iter().map(|e| e.1).sum();
            assert_eq!(total as usize, 2 * w);
            assert!(f.active() <= 2 * w);
            assert!(f.entries.iter().all(|e| e.1 > 0.0));
            assert!(f.entries.windows(2).all(|p| p[0].0 < p[1].0));
        }
        assert_eq!(featurize(&[], 32, 16).active(), 1);
    }

    #[test]
    fn zero_theta_is_uniform() {
        let p = PolicyParams::zeros(16, 7, 4, 1.0).unwrap();
        let lp = token_logprobs(&p, &p.featurize(&[1, 2, 3])).unwrap();
        for l in lp {
            assert!((l + libm::log(7.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_temperature_approaches_uniform() {
        let mut rng = stream_rng(1, "t");
        let p = PolicyParams::random(16, 5, 4, 1e6, 3.0, &mut rng).unwrap();
        let lp = token_logprobs(&p, &p.featurize(&[0, 1])).unwrap();
        for l in lp {
            assert!((l + libm::log(5.0)).abs() < 1e-4);
        }
    }

    #[test]
    fn matches_direct_softmax() {
        let mut rng = stream_rng(2, "t");
        let p = PolicyParams::random(8, 5, 3, 0.7, 2.0, &mut rng).unwrap();
        let ctx = p.featurize(&[4, 2, 2, 1]);
        let lp = token_logprobs(&p, &ctx).unwrap();
        // Direct: accumulate logits feature by feature, then exp / sum.
        let mut z = [0.0f64; 5];
        for &(f, c) in &ctx.entries {
            for v in 0..5 {
                z[v] += c * p.theta[f as usize * 5 + v] / 0.7;
            }
        }
        let denom: f64 = z.iter().map(|x| libm::exp(*x)).sum();
        for v in 0..5 {
            assert!((lp[v] - libm::log(libm::exp(z[v]) / denom)).abs() < 1e-12);
        }
        assert!(lse(&lp).abs() < 1e-9);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let mut p = PolicyParams::zeros(4, 3, 2, 1.0).unwrap();
        p.theta.iter_mut().for_each(|x| *x = f64::NAN);
        assert_eq!(token_logprobs(&p, &p.featurize(&[0])), Err(PolicyError::NonFiniteLogits));
    }

    #[test]
    fn score_sequence_cases() {
        let p = PolicyParams::zeros(16, 6, 4, 1.0).unwrap();
        let (total, per) = score_sequence(&p, &[0, 1], &[2, 3, 4]).unwrap();
        assert!((total + 3.0 * libm::log(6.0)).abs() < 1e-12);
        assert_eq!(per.len(), 3);
        assert!((total / 3.0 - per.iter().sum::<f64>() / 3.0).abs() < 1e-15);

        let mut rng = stream_rng(9, "t");
        let q = PolicyParams::random(16, 6, 4, 1.0, 1.0, &mut rng).unwrap();
        let (t1, _) = score_sequence(&q, &[0, 1], &[5]).unwrap();
        let lp = token_logprobs(&q, &q.featurize(&[0, 1])).unwrap();
        assert_eq!(t1, lp[5]);
        assert_eq!(score_sequence(&q, &[0], &[6]), Err(PolicyError::UnknownToken(6)));
    }

    fn gt_vocab() -> Vocabulary {
        Vocabulary::new(
            ["a", "b", "ANSWER", "END", "w:x", "w:y"].iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn gt_logprob_cases() {
        let v = gt_vocab();
        let uniform = PolicyParams::zeros(16, v.len(), 4, 1.0).unwrap();
        let gt = GroundTruth::from_text("x y").unwrap();
        for hist in [vec![], vec![0u32], vec![0, 1, 0, 1, 1]] {
            let l = gt_logprob(&uniform, &v, &hist, &gt).unwrap();
            assert!((l + libm::log(v.len() as f64)).abs() < 1e-12);
        }

        let mut rng = stream_rng(4, "t");
        let p = PolicyParams::random(16, v.len(), 4, 1.0, 1.0, &mut rng).unwrap();
        let one = GroundTruth::from_text("x").unwrap();
        let l1 = gt_logprob(&p, &v, &[0, 1], &one).unwrap();
        let direct = token_logprobs(&p, &p.featurize(&[0, 1, 2])).unwrap()[4];
        assert_eq!(l1, direct);

        // Brute-force teacher forcing: build each prefix explicitly.
        let l2 = gt_logprob(&p, &v, &[0, 1], &gt).unwrap();
        let a = token_logprobs(&p, &featurize(&[0, 1, 2], 4, 16)).unwrap()[4];
        let b = token_logprobs(&p, &featurize(&[0, 1, 2, 4], 4, 16)).unwrap()[5];
        assert!((l2 - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_degenerate_and_deterministic() {
        // Put all mass on ANSWER, then w:x, then END via the last-unigram features.
        let v = gt_vocab();
        let mut p = PolicyParams::zeros(64, v.len(), 4, 1.0).unwrap();
        let set = |p: &mut PolicyParams, hist: &[u32], tok: u32| {
            let ctx = p.featurize(hist);
            for &(f, _) in &ctx.entries {
                p.theta[f as usize * 6 + tok as usize] += 200.0;
            }
        };
        set(&mut p, &[0], 2);
        set(&mut p, &[0, 2], 4);
        set(&mut p, &[0, 2, 4], 3);
        let mut rng = stream_rng(5, "s");
        let s = sample_turn(&p, &[0], 3, &mut rng).unwrap();
        assert_eq!(v.decode(&s.tokens), "ANSWER w:x END");

        let q = PolicyParams::random(16, 6, 4, 1.0, 1.0, &mut stream_rng(1, "p")).unwrap();
        let a = sample_turn(&q, &[0], 3, &mut stream_rng(8, "s")).unwrap();
        let b = sample_turn(&q, &[0], 3, &mut stream_rng(8, "s")).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.len() <= MAX_TURN_TOKENS);
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let v = 7usize;
        let p = PolicyParams::zeros(8, v, 2, 1.0).unwrap();
        let mut rng = stream_rng(6, "freq");
        let mut counts = [0usize; 7];
        // END is never drawn, so every turn yields MAX_TURN_TOKENS uniform draws.
        let turns = 100_000 / MAX_TURN_TOKENS;
        for _ in 0..turns {
            for t in sample_turn(&p, &[0], u32::MAX, &mut rng).unwrap().tokens {
                counts[t as usize] += 1;
            }
        }
        let n = (turns * MAX_TURN_TOKENS) as f64;
        let pr = 1.0 / v as f64;
        let sigma = libm::sqrt(n * pr * (1.0 - pr));
        for c in counts {
            assert!((c as f64 - n * pr).abs() < 3.0 * sigma, "{c}");
        }
    }

    #[test]
    fn logistic_closed_form_gradient() {
        // V = 2, F = 1: every feature lands in bucket 0 and π(1) = σ((θ1 − θ0)·c / T).
        let mut p = PolicyParams::zeros(1, 2, 3, 1.5).unwrap();
        p.theta = vec![0.3, -0.4];
        let ctx = p.featurize(&[0, 1]);
        let c = ctx.entries[0].1;
        let g = grad_logprob(&p, &ctx, 1).unwrap();
        let z = (p.theta[1] - p.theta[0]) * c / 1.5;
        let sig = 1.0 / (1.0 + libm::exp(-z));
        let d1 = (1.0 - sig) * c / 1.5;
        assert!((g.data[1] - d1).abs() < 1e-12);
        assert!((g.data[0] + d1).abs() < 1e-12);
    }

    #[test]
    fn saturated_softmax_gradient_vanishes() {
        let mut p = PolicyParams::zeros(4, 3, 2, 1.0).unwrap();
        let ctx = p.featurize(&[0]);
        for &(f, _) in &ctx.entries {
            p.theta[f as usize * 3 + 2] = 60.0;
        }
        let g = grad_logprob(&p, &ctx, 2).unwrap();
        assert!(g.data.iter().all(|x| x.abs() < 1e-6));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = stream_rng(10, "fd");
        for inst in 0..20 {
            let p = PolicyParams::random(6, 5, 3, 0.9, 1.0, &mut rng).unwrap();
            let hist: Vec<u32> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            let tok = rng.gen_range(0..5);
            let ctx = p.featurize(&hist);
            let g = grad_logprob(&p, &ctx, tok).unwrap();
            let h = 1e-5;
            for i in 0..p.theta.len() {
                let mut a = p.clone();
                a.theta[i] += h;
                let mut b = p.clone();
                b.theta[i] -= h;
                let fa = token_logprobs(&a, &ctx).unwrap()[tok as usize];
                let fb = token_logprobs(&b, &ctx).unwrap()[tok as usize];
                let num = (fa - fb) / (2.0 * h);
                let rel = (num - g.data[i]).abs() / num.abs().max(g.data[i].abs()).max(1e-6);
                assert!(rel < 1e-4, "instance {inst} coord {i}: {num} vs {}", g.data[i]);
            }
        }
    }

    #[test]
    fn kl_cases() {
        let mut rng = stream_rng(11, "kl");
        let a = PolicyParams::random(8, 5, 3, 1.0, 1.0, &mut rng).unwrap();
        let b = PolicyParams::random(8, 5, 3, 1.0, 1.0, &mut rng).unwrap();
        let ctx = a.featurize(&[1, 2]);
        assert_eq!(kl_divergence(&a, &a, &ctx).unwrap(), 0.0);
        let u = PolicyParams::zeros(8, 5, 3, 1.0).unwrap();
        assert_eq!(kl_divergence(&u, &u.snapshot(), &ctx).unwrap(), 0.0);
        let la = token_logprobs(&a, &ctx).unwrap();
        let lb = token_logprobs(&b, &ctx).unwrap();
        let oracle: f64 = (0..5)
            .map(|i| {
                let p = libm::exp(la[i]);
                let q = libm::exp(lb[i]);
                p * libm::log(p / q)
            })
            .sum();
        let kl = kl_divergence(&a, &b, &ctx).unwrap();
        assert!((kl - oracle).abs() < 1e-12);
        assert!(kl > 0.0);
    }
}
