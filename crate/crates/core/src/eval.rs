//! Pass@K estimation, browse-ratio analysis and evaluation runs.

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::policy::PolicyParams;
use crate::rng::stream_rng;
use crate::train::{rollout_episode, CheckpointMode, Executor, TaskInstance, TrainError};
use crate::traj::ActionKind;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("invalid pass@k arguments: n={n}, c={c}, k={k}")]
    InvalidArgs { n: usize, c: usize, k: usize },
}

/// Unbiased `1 − C(n−c, k) / C(n, k)`, as a product to avoid large binomials.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64, EvalError> {
    if k == 0 || k > n || c > n {
        return Err(EvalError::InvalidArgs { n, c, k });
    }
    if n - c < k {
        return Ok(1.0);
    }
    let mut miss = 1.0;
    for i in (n - c + 1)..=n {
        miss *= 1.0 - k as f64 / i as f64;
    }
    Ok(1.0 - miss)
}

/// Samples of one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task_id: usize,
    pub n: usize,
    pub c: usize,
    pub searches: Vec<usize>,
    pub browses: Vec<usize>,
    pub turns: Vec<usize>,
    pub correct: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Correct,
    Wrong,
    Overall,
}

/// `Σ browses / Σ (browses + searches)` over `(searches, browses)` pairs;
/// `None` when there are no tool calls.
pub fn browse_ratio_pooled(counts: &[(usize, usize)]) -> Option<f64> {
    let (s, b) = counts.iter().fold((0, 0), |(s, b), &(x, y)| (s + x, b + y));
    (s + b > 0).then(|| b as f64 / (s + b) as f64)
}

/// Pooled browse ratio of the samples in `partition`.
pub fn browse_ratio(records: &[EvalRecord], partition: Partition) -> Option<f64> {
    let counts: Vec<(usize, usize)> = records
        .iter()
        .flat_map(|r| (0..r.correct.len()).map(move |i| (r, i)))
        .filter(|(r, i)| match partition {
            Partition::Correct => r.correct[*i],
            Partition::Wrong => !r.correct[*i],
            Partition::Overall => true,
        })
        .map(|(r, i)| (r.searches[i], r.browses[i]))
        .collect();
    browse_ratio_pooled(&counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrowseRatios {
    pub correct: Option<f64>,
    pub wrong: Option<f64>,
    pub overall: Option<f64>,
    /// Whether correct trajectories browse relatively more than wrong ones;
    /// absent when either partition is.
    pub correct_exceeds_wrong: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub seed: u64,
    pub n_samples: usize,
    pub tasks: usize,
    pub success_rate: f64,
    /// `(k, mean Pass@k over tasks)`.
    pub pass_at_k: Vec<(usize, f64)>,
    pub browse_ratio: BrowseRatios,
    pub mean_turns: f64,
}

pub fn summarize(records: &[EvalRecord], ks: &[usize], seed: u64) -> Result<EvalSummary, EvalError> {
    let n_samples = records.first().map_or(0, |r| r.n);
    let mut pass = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut sum = 0.0;
        for r in records {
            sum += pass_at_k(r.n, r.c, k)?;
        }
        pass.push((k, if records.is_empty() { 0.0 } else { sum / records.len() as f64 }));
    }
    let total: usize = records.iter().map(|r| r.n).sum();
    let correct: usize = records.iter().map(|r| r.c).sum();
    let turns: usize = records.iter().flat_map(|r| r.turns.iter()).sum();
    let correct_r = browse_ratio(records, Partition::Correct);
    let wrong_r = browse_ratio(records, Partition::Wrong);
    let denom = total.max(1) as f64;
    Ok(EvalSummary {
        seed,
        n_samples,
        tasks: records.len(),
        success_rate: correct as f64 / denom,
        pass_at_k: pass,
        browse_ratio: BrowseRatios {
            correct: correct_r,
            wrong: wrong_r,
            overall: browse_ratio(records, Partition::Overall),
            correct_exceeds_wrong: correct_r.zip(wrong_r).map(|(c, w)| c > w),
        },
        mean_turns: turns as f64 / denom,
    })
}

/// Samples `n_samples` episodes per task on the `eval:{task}:{sample}` streams.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<E: Executor>(
    params: &PolicyParams,
    vocab: &Vocabulary,
    pool: &[TaskInstance],
    n_samples: usize,
    ks: &[usize],
    seed: u64,
    budget: usize,
    exec: &E,
) -> Result<(Vec<EvalRecord>, EvalSummary), TrainError> {
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n_samples) {
        return Err(TrainError::InvalidConfig(format!("k = {k} needs 1 <= k <= n_samples = {n_samples}")));
    }
    let jobs: Vec<(usize, usize)> = (0..pool.len()).flat_map(|t| (0..n_samples).map(move |i| (t, i))).collect();
    let results = exec.map(&jobs, |&(t, i)| {
        let mut rng = stream_rng(seed, &format!("eval:{t}:{i}"));
        rollout_episode(params, vocab, &pool[t], budget, CheckpointMode::None, &mut rng)
    });
    let mut it = results.into_iter();
    let mut records = Vec::with_capacity(pool.len());
    for task_id in 0..pool.len() {
        let mut rec = EvalRecord { task_id, n: n_samples, c: 0, searches: Vec::new(), browses: Vec::new(), turns: Vec::new(), correct: Vec::new() };
        for r in it.by_ref().take(n_samples) {
            let r = r?;
            let ok = r.correct();
            rec.c += usize::from(ok);
            rec.correct.push(ok);
            rec.searches.push(r.trajectory.count_kind(ActionKind::Search));
            rec.browses.push(r.trajectory.count_kind(ActionKind::Browse));
            rec.turns.push(r.trajectory.turns.len());
        }
        records.push(rec);
    }
    let summary = summarize(&records, ks, seed).map_err(|e| TrainError::InvalidConfig(format!("{e}")))?;
    Ok((records, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn binom(n: usize, k: usize) -> f64 {
        if k > n {
            return 0.0;
        }
        let mut r = 1.0;
        for i in 0..k {
            r = r * (n - i) as f64 / (i + 1) as f64;
        }
        r
    }

    #[test]
    fn pass_at_k_examples() {
        assert!((pass_at_k(4, 2, 2).unwrap() - (1.0 - 1.0 / binom(4, 2))).abs() < 1e-15);
        assert!((pass_at_k(4, 2, 2).unwrap() - 0.833333).abs() < 1e-6);
        assert_eq!(pass_at_k(10, 0, 3).unwrap(), 0.0);
        assert_eq!(pass_at_k(10, 10, 3).unwrap(), 1.0);
        assert_eq!(pass_at_k(5, 1, 5).unwrap(), 1.0);
        assert_eq!(pass_at_k(5, 0, 5).unwrap(), 0.0);
        assert!(pass_at_k(3, 1, 4).is_err());
        assert!(pass_at_k(3, 1, 0).is_err());
        assert!(pass_at_k(3, 4, 1).is_err());
    }

    #[test]
    fn pass_at_k_matches_binomials() {
        for n in 1..=20 {
            for c in 0..=n {
                for k in 1..=n {
                    let direct = 1.0 - binom(n - c, k) / binom(n, k);
                    assert!((pass_at_k(n, c, k).unwrap() - direct).abs() < 1e-12, "{n} {c} {k}");
                }
            }
        }
    }

    fn rec(searches: Vec<usize>, browses: Vec<usize>, correct: Vec<bool>) -> EvalRecord {
        let n = correct.len();
        EvalRecord {
            task_id: 0,
            n,
            c: correct.iter().filter(|c| **c).count(),
            turns: vec![1; n],
            searches,
            browses,
            correct,
        }
    }

    #[test]
    fn browse_ratio_examples() {
        let r = [rec(vec![3], vec![1], vec![true])];
        assert_eq!(browse_ratio(&r, Partition::Overall), Some(0.25));
        assert_eq!(browse_ratio(&r, Partition::Wrong), None);
        let r = [rec(vec![3, 1], vec![1, 3], vec![true, false]), rec(vec![0], vec![0], vec![false])];
        assert_eq!(browse_ratio(&r, Partition::Correct), Some(0.25));
        assert_eq!(browse_ratio(&r, Partition::Wrong), Some(0.75));
        assert_eq!(browse_ratio(&r, Partition::Overall), Some(0.5));
        let s = summarize(&r, &[1], 0).unwrap();
        assert_eq!(s.browse_ratio.correct_exceeds_wrong, Some(false));
    }

    #[test]
    fn single_sample_pass1_is_success_rate() {
        let r = [rec(vec![1], vec![1], vec![true]), rec(vec![1], vec![0], vec![false]), rec(vec![2], vec![2], vec![true])];
        let s = summarize(&r, &[1], 7).unwrap();
        assert!((s.pass_at_k[0].1 - s.success_rate).abs() < 1e-15);
    }
}
