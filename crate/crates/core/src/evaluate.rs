//! Sampled-negative ranking evaluation.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{pad_truncate, sample_negatives, Dataset, SplitExample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::RngState;
use crate::tensor::Real;

pub const DEFAULT_NEGATIVES: usize = 100;
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Scores candidate items for one left-padded history.
pub trait Scorer: Sync {
    fn max_len(&self) -> usize;
    fn score(&self, items: &[usize], candidates: &[usize]) -> Result<Vec<f64>>;
}

impl<T: Real> Scorer for Model<T> {
    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn score(&self, items: &[usize], candidates: &[usize]) -> Result<Vec<f64>> {
        let logits = self.logits(items)?;
        candidates
            .iter()
            .map(|&c| {
                logits
                    .get(c.wrapping_sub(1))
                    .map(|v| v.as_f64())
                    .ok_or_else(|| Error::Evaluation(format!("candidate {c} outside catalog")))
            })
            .collect()
    }
}

/// `1 +` the number of negatives scoring at least as high as the target.
pub fn rank_ground_truth(target_score: f64, negative_scores: &[f64]) -> Result<usize> {
    if !target_score.is_finite() || negative_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Evaluation("non-finite score".into()));
    }
    Ok(1 + negative_scores.iter().filter(|&&s| s >= target_score).count())
}

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub num_negatives: usize,
    pub ks: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_negatives: DEFAULT_NEGATIVES,
            ks: DEFAULT_KS.to_vec(),
            seed: 2024,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_negatives == 0 {
            problems.push("eval.num_negatives must be positive".to_string());
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            problems.push("eval.ks must be a nonempty list of positive cutoffs".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedResult {
    pub user: usize,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub num_users: usize,
    pub num_negatives: usize,
    pub seed: u64,
    pub ks: Vec<usize>,
    /// Mean Recall@K, aligned with `ks`.
    pub recall: Vec<f64>,
    /// Mean NDCG@K, aligned with `ks`.
    pub ndcg: Vec<f64>,
}

impl MetricsReport {
    pub fn from_ranks(split: &str, ranks: &[RankedResult], ks: &[usize], num_negatives: usize, seed: u64) -> Self {
        let n = ranks.len().max(1) as f64;
        let mean = |f: fn(usize, usize) -> f64, k: usize| ranks.iter().map(|r| f(r.rank, k)).sum::<f64>() / n;
        Self {
            split: split.to_string(),
            num_users: ranks.len(),
            num_negatives,
            seed,
            ks: ks.to_vec(),
            recall: ks.iter().map(|&k| mean(recall_at_k, k)).collect(),
            ndcg: ks.iter().map(|&k| mean(ndcg_at_k, k)).collect(),
        }
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }

    /// `(name, value)` for every metric: recalls first, then NDCGs.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let r = self.ks.iter().zip(&self.recall).map(|(k, v)| (format!("recall@{k}"), *v));
        let g = self.ks.iter().zip(&self.ndcg).map(|(k, v)| (format!("ndcg@{k}"), *v));
        r.chain(g).collect()
    }

    pub fn csv_header(&self) -> String {
        let names: Vec<String> = self.metrics().into_iter().map(|(n, _)| n).collect();
        format!("split,num_users,{}", names.join(","))
    }

    pub fn csv_row(&self) -> String {
        let vals: Vec<String> = self.metrics().into_iter().map(|(_, v)| format!("{v:.6}")).collect();
        format!("{},{},{}", self.split, self.num_users, vals.join(","))
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", self.csv_header(), self.csv_row())
    }
}

/// Ranks every example's target against freshly sampled negatives.
///
/// Negatives are drawn sequentially from `cfg.seed` in example order and
/// exclude the user's whole sequence; scoring then runs in parallel.
pub fn rank_split<S: Scorer>(
    scorer: &S,
    examples: &[SplitExample],
    dataset: &Dataset,
    cfg: &EvalConfig,
) -> Result<Vec<RankedResult>> {
    cfg.validate()?;
    let mut rng = RngState::new(cfg.seed);
    let candidates = examples
        .iter()
        .map(|ex| {
            let history: HashSet<usize> = dataset.sequences[ex.user].iter().copied().collect();
            let mut c = vec![ex.target];
            c.extend(sample_negatives(&history, ex.target, dataset.num_items(), cfg.num_negatives, &mut rng)?);
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    examples
        .par_iter()
        .zip(&candidates)
        .map(|(ex, cand)| {
            let (items, _) = pad_truncate(&ex.input, scorer.max_len())?;
            let scores = scorer.score(&items, cand)?;
            Ok(RankedResult {
                user: ex.user,
                rank: rank_ground_truth(scores[0], &scores[1..])?,
            })
        })
        .collect()
}

pub fn evaluate_split<S: Scorer>(
    scorer: &S,
    split: &str,
    examples: &[SplitExample],
    dataset: &Dataset,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::Evaluation(format!("split {split} has no examples")));
    }
    let ranks = rank_split(scorer, examples, dataset, cfg)?;
    Ok(MetricsReport::from_ranks(split, &ranks, &cfg.ks, cfg.num_negatives, cfg.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_ground_truth(0.9, &[0.1; 100]).unwrap(), 1);
        let mut neg = vec![0.1; 100];
        neg[3] = 0.95;
        neg[7] = 0.5;
        assert_eq!(rank_ground_truth(0.9, &neg).unwrap(), 2);
        neg[3] = 0.9;
        assert_eq!(rank_ground_truth(0.9, &neg).unwrap(), 2);
        neg[0] = f64::NAN;
        assert!(rank_ground_truth(0.9, &neg).is_err());
    }

    #[test]
    fn cutoff_examples() {
        assert_eq!(recall_at_k(1, 1), 1.0);
        assert_eq!(recall_at_k(2, 1), 0.0);
        assert_eq!(recall_at_k(10, 10), 1.0);
        assert_eq!(ndcg_at_k(1, 10), 1.0);
        assert_eq!(ndcg_at_k(3, 10), 0.5);
        assert_eq!(ndcg_at_k(11, 10), 0.0);
    }
}
