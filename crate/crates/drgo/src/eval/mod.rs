//! Ranking metrics and full-ranking evaluation.

pub mod experiments;

use std::collections::{BTreeMap, BTreeSet};

use crate::graph::{Edge, InteractionGraph};
use crate::matrix::Matrix;

/// Top-K hit coverage: `|top-K intersect positives| / |positives|`.
/// Returns `None` when the user has no positives (user is skipped).
pub fn recall_at_k(ranked: &[u32], positives: &BTreeSet<u32>, k: usize) -> Option<f64> {
    if positives.is_empty() {
        return None;
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|i| positives.contains(i))
        .count();
    Some(hits as f64 / positives.len() as f64)
}

/// Position-discounted ranking quality with gains 1/log2(rank + 1),
/// normalized by the ideal ordering of min(|positives|, K) hits.
pub fn ndcg_at_k(ranked: &[u32], positives: &BTreeSet<u32>, k: usize) -> Option<f64> {
    if positives.is_empty() {
        return None;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| positives.contains(i))
        .map(|(rank0, _)| 1.0 / ((rank0 + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..positives.len().min(k))
        .map(|rank0| 1.0 / ((rank0 + 2) as f64).log2())
        .sum();
    Some(dcg / ideal)
}

/// Metrics for one evaluable user, aligned with the report's K list.
#[derive(Debug, Clone)]
pub struct UserEval {
    pub user: u32,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

/// Metric summary over all evaluable users.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub per_user: Vec<UserEval>,
    pub evaluable_users: usize,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> f64 {
        *self.recall.get(&k).unwrap_or(&f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        *self.ndcg.get(&k).unwrap_or(&f64::NAN)
    }
}

/// Evaluates a full score matrix (`n_users x n_items`): for every user with
/// at least one test positive, ranks all items the user has not interacted
/// with in training (ties break toward the lower item index) and averages
/// the metrics.
pub fn evaluate_matrix(
    scores: &Matrix,
    train: &InteractionGraph,
    test: &[Edge],
    ks: &[usize],
) -> EvalReport {
    assert_eq!(scores.rows(), train.n_users());
    assert_eq!(scores.cols(), train.n_items());
    let mut positives: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for e in test {
        positives.entry(e.user).or_default().insert(e.item);
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let mut per_user = Vec::new();
    for (&user, pos) in &positives {
        let train_items: BTreeSet<u32> = train
            .user_edges(user)
            .iter()
            .map(|e| e.item)
            .collect();
        let mut candidates: Vec<(f64, u32)> = (0..train.n_items() as u32)
            .filter(|i| !train_items.contains(i))
            .map(|i| (scores.get(user as usize, i as usize), i))
            .collect();
        // rank needs only the top max_k, fully ordered and tie-stable
        let cmp = |a: &(f64, u32), b: &(f64, u32)| {
            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
        };
        let top = max_k.min(candidates.len());
        if top > 0 && top < candidates.len() {
            candidates.select_nth_unstable_by(top - 1, cmp);
            candidates.truncate(top);
        }
        candidates.sort_by(cmp);
        let ranked: Vec<u32> = candidates.into_iter().map(|(_, i)| i).collect();
        let recall: Vec<f64> = ks
            .iter()
            .map(|&k| recall_at_k(&ranked, pos, k).unwrap())
            .collect();
        let ndcg: Vec<f64> = ks
            .iter()
            .map(|&k| ndcg_at_k(&ranked, pos, k).unwrap())
            .collect();
        per_user.push(UserEval { user, recall, ndcg });
    }
    let evaluable = per_user.len();
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for (ki, &k) in ks.iter().enumerate() {
        let r = per_user.iter().map(|u| u.recall[ki]).sum::<f64>() / evaluable.max(1) as f64;
        let n = per_user.iter().map(|u| u.ndcg[ki]).sum::<f64>() / evaluable.max(1) as f64;
        recall.insert(k, r);
        ndcg.insert(k, n);
    }
    EvalReport {
        ks: ks.to_vec(),
        recall,
        ndcg,
        per_user,
        evaluable_users: evaluable,
    }
}

/// Evaluates propagated node embeddings by inner-product scoring.
pub fn evaluate_embeddings(
    final_nodes: &Matrix,
    train: &InteractionGraph,
    test: &[Edge],
    ks: &[usize],
) -> EvalReport {
    let n_users = train.n_users();
    let n_items = train.n_items();
    let users = final_nodes.slice_rows(0, n_users);
    let items = final_nodes.slice_rows(n_users, n_users + n_items);
    let scores = users.matmul(&items.transpose());
    evaluate_matrix(&scores, train, test, ks)
}
