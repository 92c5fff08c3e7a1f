//! Top-K ranking evaluation: Recall@K and NDCG@K macro-averaged over users
//! with held-out interactions. Full ranking over all non-masked bundles; ties
//! break by ascending bundle id.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{InteractionMatrix, SplitDataset};
use crate::model::{predict_all, ForwardOutputs};

/// |top-k ∩ relevant| / |relevant|.
pub fn recall_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    debug_assert!(!relevant.is_empty());
    let hits = ranked.iter().take(k).filter(|b| relevant.contains(b)).count();
    hits as f64 / relevant.len() as f64
}

/// Binary-relevance NDCG with the ideal DCG over min(k, |relevant|) hits.
pub fn ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    debug_assert!(!relevant.is_empty());
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, b)| relevant.contains(b))
        .map(|(p, _)| 1.0 / ((p + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(relevant.len())).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    dcg / idcg
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserRanking {
    pub user: usize,
    pub top: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingReport {
    /// K -> mean Recall@K over evaluated users.
    pub recall: BTreeMap<usize, f64>,
    /// K -> mean NDCG@K.
    pub ndcg: BTreeMap<usize, f64>,
    pub evaluated_users: usize,
    /// Per-user top-maxK lists.
    pub rankings: Vec<UserRanking>,
}

impl RankingReport {
    /// One CSV row per (dataset, config, K, metric).
    pub fn to_csv(&self, dataset: &str, config: &str) -> String {
        let mut out = String::from("dataset,config,k,metric,value\n");
        for (k, v) in &self.recall {
            out.push_str(&format!("{dataset},{config},{k},recall,{v}\n"));
        }
        for (k, v) in &self.ndcg {
            out.push_str(&format!("{dataset},{config},{k},ndcg,{v}\n"));
        }
        out
    }
}

/// Rank every bundle for each user with at least one relevant bundle,
/// masking the `mask` interactions, and macro-average the metrics.
pub fn evaluate_split(
    out: &ForwardOutputs,
    mask: &InteractionMatrix,
    relevant: &InteractionMatrix,
    ks: &[usize],
) -> RankingReport {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let max_k = ks.last().copied().unwrap_or(0);

    let per_user: Vec<Option<(usize, Vec<usize>, Vec<f64>, Vec<f64>)>> = (0..mask.n_rows())
        .into_par_iter()
        .map(|user| {
            let rel: Vec<usize> = relevant.row(user).collect();
            if rel.is_empty() {
                return None;
            }
            let scores = predict_all(out, user, mask);
            let top = top_k_indices(&scores, max_k);
            let recalls: Vec<f64> = ks.iter().map(|&k| recall_at_k(&top, &rel, k)).collect();
            let ndcgs: Vec<f64> = ks.iter().map(|&k| ndcg_at_k(&top, &rel, k)).collect();
            Some((user, top, recalls, ndcgs))
        })
        .collect();

    let mut recall_sum = vec![0.0; ks.len()];
    let mut ndcg_sum = vec![0.0; ks.len()];
    let mut rankings = Vec::new();
    let mut evaluated_users = 0usize;
    for entry in per_user.into_iter().flatten() {
        let (user, top, recalls, ndcgs) = entry;
        evaluated_users += 1;
        for (i, r) in recalls.iter().enumerate() {
            recall_sum[i] += r;
        }
        for (i, n) in ndcgs.iter().enumerate() {
            ndcg_sum[i] += n;
        }
        rankings.push(UserRanking { user, top });
    }

    let denom = evaluated_users.max(1) as f64;
    RankingReport {
        recall: ks.iter().cloned().zip(recall_sum.into_iter().map(|s| s / denom)).collect(),
        ndcg: ks.iter().cloned().zip(ndcg_sum.into_iter().map(|s| s / denom)).collect(),
        evaluated_users,
        rankings,
    }
}

/// Test-split evaluation with train interactions masked.
pub fn evaluate(out: &ForwardOutputs, split: &SplitDataset, ks: &[usize]) -> RankingReport {
    evaluate_split(out, &split.train, &split.test, ks)
}

fn rank_cmp(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .expect("scores must not be NaN")
        .then(a.cmp(&b))
}

/// Indices of the k best scores, ordered by descending score with ascending
/// index as the tie-break.
fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_cmp(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_cmp(scores, a, b));
    idx
}
