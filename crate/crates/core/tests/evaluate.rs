use adamct::data::{Dataset, SplitExample, Role};
use adamct::evaluate::*;
use adamct::{Error, Result, RngState};
use proptest::prelude::*;
use rand::Rng;

/// Sorts all candidates by descending score, placing the target after any
/// negative it ties with, and returns the target's 1-based position.
fn oracle_rank(target: f64, negatives: &[f64]) -> usize {
    let mut all: Vec<(f64, bool)> = negatives.iter().map(|&s| (s, false)).collect();
    all.push((target, true));
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    all.iter().position(|x| x.1).unwrap() + 1
}

/// Builds the ranked relevance list and scans its top `k`.
fn oracle_metrics(rank: usize, k: usize) -> (f64, f64) {
    let relevance: Vec<f64> = (1..=101).map(|p| if p == rank { 1.0 } else { 0.0 }).collect();
    let top = &relevance[..k.min(relevance.len())];
    let hit = top.iter().sum::<f64>();
    let dcg = top
        .iter()
        .enumerate()
        .map(|(i, r)| if *r > 0.0 { r / ((i + 2) as f64).log2() } else { 0.0 })
        .sum::<f64>();
    (hit, dcg)
}

#[test]
fn metrics_match_oracle_for_every_rank() {
    for rank in 1..=101 {
        for k in DEFAULT_KS {
            let (r, n) = oracle_metrics(rank, k);
            assert_eq!(recall_at_k(rank, k), r, "recall rank {rank} k {k}");
            assert_eq!(ndcg_at_k(rank, k), n, "ndcg rank {rank} k {k}");
        }
    }
    assert_eq!(ndcg_at_k(3, 10), 0.5);
}

#[test]
fn aggregate_matches_sort_and_scan() {
    let mut rng = RngState::new(17);
    let mut ranks = Vec::new();
    let mut oracle_ranks = Vec::new();
    for user in 0..1000 {
        // Coarse scores make ties common.
        let neg: Vec<f64> = (0..100).map(|_| rng.below(40) as f64).collect();
        let target = rng.below(40) as f64;
        ranks.push(RankedResult {
            user,
            rank: rank_ground_truth(target, &neg).unwrap(),
        });
        oracle_ranks.push(oracle_rank(target, &neg));
    }
    assert!(ranks.iter().zip(&oracle_ranks).all(|(a, b)| a.rank == *b));
    let report = MetricsReport::from_ranks("test", &ranks, &DEFAULT_KS, 100, 17);
    for (i, k) in DEFAULT_KS.iter().enumerate() {
        let mut hits = 0.0;
        let mut gain = 0.0;
        for &r in &oracle_ranks {
            let (h, g) = oracle_metrics(r, *k);
            hits += h;
            gain += g;
        }
        assert_eq!(report.recall[i], hits / 1000.0);
        assert_eq!(report.ndcg[i], gain / 1000.0);
    }
    assert_eq!(report.recall_at(1), report.ndcg_at(1));
}

proptest! {
    #[test]
    fn rank_invariant_under_monotone_transform(
        scores in proptest::collection::vec(-50.0f64..50.0, 101),
        shift in -5.0f64..5.0,
        scale in 0.1f64..10.0,
    ) {
        let r = rank_ground_truth(scores[0], &scores[1..]).unwrap();
        let t: Vec<f64> = scores.iter().map(|s| (scale * s + shift).exp().ln_1p()).collect();
        // Skip the rare case where the transform collapses distinct values.
        let collapsed = scores.iter().zip(&t).any(|(a, ta)| scores.iter().zip(&t).any(|(b, tb)| a < b && ta >= tb));
        prop_assume!(!collapsed);
        prop_assert_eq!(rank_ground_truth(t[0], &t[1..]).unwrap(), r);
    }

    #[test]
    fn metric_orderings(rank in 1usize..=101) {
        for (i, &k) in DEFAULT_KS.iter().enumerate() {
            prop_assert!(ndcg_at_k(rank, k) <= recall_at_k(rank, k));
            prop_assert!(recall_at_k(rank + 1, k) <= recall_at_k(rank, k));
            prop_assert!(ndcg_at_k(rank + 1, k) <= ndcg_at_k(rank, k));
            if i > 0 {
                let prev = DEFAULT_KS[i - 1];
                prop_assert!(recall_at_k(rank, prev) <= recall_at_k(rank, k));
                prop_assert!(ndcg_at_k(rank, prev) <= ndcg_at_k(rank, k));
            }
        }
        prop_assert_eq!(recall_at_k(rank, 1), ndcg_at_k(rank, 1));
    }
}

/// Gives the target a fixed score and every other item another.
struct Fixed {
    targets: Vec<usize>,
    target_score: f64,
    other: f64,
}

impl Scorer for Fixed {
    fn max_len(&self) -> usize {
        6
    }

    fn score(&self, items: &[usize], candidates: &[usize]) -> Result<Vec<f64>> {
        assert_eq!(items.len(), 6);
        let target = self.targets[items[5]];
        Ok(candidates
            .iter()
            .map(|&c| if c == target { self.target_score } else { self.other })
            .collect())
    }
}

fn toy() -> (Dataset, Vec<SplitExample>, Vec<usize>) {
    let v = 300;
    let sequences: Vec<Vec<usize>> = (0..40).map(|u| (1..=6).map(|t| (u * 7 + t) % v + 1).collect()).collect();
    let examples = sequences
        .iter()
        .enumerate()
        .map(|(user, s)| SplitExample {
            user,
            input: s[..5].to_vec(),
            target: s[5],
            role: Role::Test,
        })
        .collect();
    // The last input item determines the target.
    let mut targets = vec![0; v + 1];
    for s in &sequences {
        targets[s[4]] = s[5];
    }
    let ds = Dataset {
        user_ids: (0..40).map(|u| u.to_string()).collect(),
        item_ids: (1..=v).map(|i| i.to_string()).collect(),
        sequences,
    };
    (ds, examples, targets)
}

#[test]
fn oracle_and_anti_oracle() {
    let (ds, ex, targets) = toy();
    let cfg = EvalConfig::default();
    let best = Fixed {
        targets: targets.clone(),
        target_score: 1e9,
        other: 0.0,
    };
    let r = evaluate_split(&best, "test", &ex, &ds, &cfg).unwrap();
    assert_eq!(r.num_users, 40);
    assert!(r.recall.iter().chain(&r.ndcg).all(|&m| m == 1.0));
    let worst = Fixed {
        targets: targets.clone(),
        target_score: -1.0,
        other: 0.0,
    };
    let r = evaluate_split(&worst, "test", &ex, &ds, &cfg).unwrap();
    assert!(r.recall.iter().chain(&r.ndcg).all(|&m| m == 0.0));
    let tied = Fixed {
        targets,
        target_score: 0.0,
        other: 0.0,
    };
    let ranks = rank_split(&tied, &ex, &ds, &cfg).unwrap();
    assert!(ranks.iter().all(|r| r.rank == 101));
}

#[test]
fn report_shape_and_reproducibility() {
    let (ds, ex, _) = toy();
    let mut rng = RngState::new(3);
    struct Noisy(Vec<f64>);
    impl Scorer for Noisy {
        fn max_len(&self) -> usize {
            6
        }
        fn score(&self, _: &[usize], c: &[usize]) -> Result<Vec<f64>> {
            Ok(c.iter().map(|&i| self.0[i]).collect())
        }
    }
    let scorer = Noisy((0..=300).map(|_| rng.random::<f64>()).collect());
    let cfg = EvalConfig::default();
    let a = evaluate_split(&scorer, "valid", &ex, &ds, &cfg).unwrap();
    let b = evaluate_split(&scorer, "valid", &ex, &ds, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.metrics().len(), 6);
    assert_eq!(
        a.csv_header(),
        "split,num_users,recall@1,recall@5,recall@10,ndcg@1,ndcg@5,ndcg@10"
    );
    let other = evaluate_split(&scorer, "valid", &ex, &ds, &EvalConfig { seed: 9, ..cfg.clone() }).unwrap();
    assert_ne!(a, other);
    let json = serde_json::to_string(&a).unwrap();
    assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), a);
}

#[test]
fn negatives_avoid_history() {
    let (ds, ex, _) = toy();
    struct Spy(Vec<Vec<usize>>);
    impl Scorer for Spy {
        fn max_len(&self) -> usize {
            6
        }
        fn score(&self, items: &[usize], c: &[usize]) -> Result<Vec<f64>> {
            let user = self.0.iter().position(|s| s[..5] == items[1..]).unwrap();
            let seq = &self.0[user];
            assert_eq!(c[0], seq[5]);
            assert_eq!(c.len(), 101);
            for n in &c[1..] {
                assert!(*n >= 1 && !seq.contains(n));
            }
            let set: std::collections::HashSet<_> = c.iter().collect();
            assert_eq!(set.len(), 101);
            Ok(vec![0.0; c.len()])
        }
    }
    rank_split(&Spy(ds.sequences.clone()), &ex, &ds, &EvalConfig::default()).unwrap();
}

#[test]
fn rejects_bad_config_and_empty_split() {
    let (ds, ex, targets) = toy();
    let s = Fixed {
        targets,
        target_score: 1.0,
        other: 0.0,
    };
    let bad = EvalConfig {
        ks: vec![0],
        ..Default::default()
    };
    assert!(matches!(rank_split(&s, &ex, &ds, &bad), Err(Error::Config(_))));
    assert!(matches!(
        evaluate_split(&s, "test", &[], &ds, &EvalConfig::default()),
        Err(Error::Evaluation(_))
    ));
}
