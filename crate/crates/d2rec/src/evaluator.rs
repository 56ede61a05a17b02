//! Rating and ranking metrics over popularity-debiased test subsets.
//!
//! The ranking protocol scores each user's held-out positives against
//! sampled unseen candidates (99 per positive by default), ranks by
//! predicted rating with ties broken by ascending item index, and reports
//! HR@K and NDCG@K alongside MAE/MSE.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::TestSubset;
use crate::derive_seed;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric inputs are empty")]
    EmptyInput,
    #[error("metric inputs have mismatched lengths: {y} vs {yhat}")]
    LengthMismatch { y: usize, yhat: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Candidate-ranking protocol. Candidates are drawn uniformly from the
/// items the user has seen in neither train nor test.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RankingProtocol {
    pub k: usize,
    pub candidates_per_positive: usize,
    pub seed: u64,
}

impl Default for RankingProtocol {
    fn default() -> Self {
        Self { k: 10, candidates_per_positive: 99, seed: 42 }
    }
}

/// Anything that can score a (user, item) pair; higher means more
/// recommended.
pub trait Scorer {
    fn score_many(&self, pairs: &[(u32, u32)]) -> Vec<f64>;
}

impl<F: Fn(u32, u32) -> f64> Scorer for F {
    fn score_many(&self, pairs: &[(u32, u32)]) -> Vec<f64> {
        pairs.iter().map(|&(u, i)| self(u, i)).collect()
    }
}

impl Scorer for crate::model::RatingPredictor<'_> {
    fn score_many(&self, pairs: &[(u32, u32)]) -> Vec<f64> {
        self.predict_many(pairs)
    }
}

/// Per-subset metric row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subset_popularity: usize,
    pub mae: f64,
    pub mse: f64,
    pub hr_at_k: f64,
    pub ndcg_at_k: f64,
    pub n_ratings: usize,
    pub n_users: usize,
}

/// `MAE = mean |y - yhat|`, `MSE = mean (y - yhat)^2`.
pub fn mae_mse(y: &[f64], yhat: &[f64]) -> Result<(f64, f64), EvalError> {
    if y.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if y.len() != yhat.len() {
        return Err(EvalError::LengthMismatch { y: y.len(), yhat: yhat.len() });
    }
    let n = y.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (a, b) in y.iter().zip(yhat) {
        let d = a - b;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, sq / n))
}

/// Fraction of users whose top-k ranked list contains any held-out
/// positive. Users with no positives are excluded from both counts.
pub fn hit_ratio_at_k(ranked_lists: &[Vec<u32>], positives: &[Vec<u32>], k: usize) -> f64 {
    let mut users = 0usize;
    let mut hits = 0usize;
    for (ranked, pos) in ranked_lists.iter().zip(positives) {
        if pos.is_empty() {
            continue;
        }
        users += 1;
        if ranked.iter().take(k).any(|item| pos.contains(item)) {
            hits += 1;
        }
    }
    if users == 0 {
        0.0
    } else {
        hits as f64 / users as f64
    }
}

/// DCG over the first k entries of a relevance-in-ranked-order list, with
/// gain `2^y - 1` and discount `log2(1 + rank)`.
pub fn dcg_at_k(truths_ranked: &[f64], k: usize) -> f64 {
    truths_ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(idx, &y)| (2f64.powf(y) - 1.0) / ((idx + 2) as f64).log2())
        .sum()
}

/// Per-user NDCG@k: DCG of the ranked truths over the DCG of their ideal
/// (descending) ordering. `None` when the ideal DCG is zero.
pub fn ndcg_user(truths_ranked: &[f64], k: usize) -> Option<f64> {
    let dcg = dcg_at_k(truths_ranked, k);
    let mut ideal = truths_ranked.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let idcg = dcg_at_k(&ideal, k);
    if idcg > 0.0 {
        Some(dcg / idcg)
    } else {
        None
    }
}

/// Mean NDCG@k over users; users with a zero ideal DCG are excluded.
pub fn ndcg_at_k(truths_per_user: &[Vec<f64>], k: usize) -> f64 {
    let vals: Vec<f64> = truths_per_user.iter().filter_map(|t| ndcg_user(t, k)).collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Items already seen per user (train plus test), used to restrict the
/// candidate pool. Lists must be sorted.
#[derive(Debug, Clone, Default)]
pub struct SeenItems {
    pub per_user: Vec<Vec<u32>>,
}

impl SeenItems {
    fn seen(&self, user: u32, item: u32) -> bool {
        self.per_user
            .get(user as usize)
            .map(|s| s.binary_search(&item).is_ok())
            .unwrap_or(false)
    }
}

/// Evaluate a frozen model on one subset: MAE/MSE over all subset rows,
/// HR@K and NDCG@K per user over (positives + sampled candidates) scored by
/// predicted rating, ties broken by ascending item index.
pub fn evaluate(
    model: &dyn Scorer,
    subset: &TestSubset,
    protocol: &RankingProtocol,
    seen: &SeenItems,
    n_items: usize,
) -> Result<MetricsReport, EvalError> {
    if subset.rows.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let pairs: Vec<(u32, u32)> = subset.rows.iter().map(|r| (r.user, r.item)).collect();
    let truth: Vec<f64> = subset.rows.iter().map(|r| r.value).collect();
    let yhat = model.score_many(&pairs);
    let (mae, mse) = mae_mse(&truth, &yhat)?;

    // Group positives by user, deterministically ordered.
    let mut by_user: BTreeMap<u32, Vec<(u32, f64)>> = BTreeMap::new();
    for r in &subset.rows {
        by_user.entry(r.user).or_default().push((r.item, r.value));
    }

    let mut ranked_lists = Vec::with_capacity(by_user.len());
    let mut positives_per_user = Vec::with_capacity(by_user.len());
    let mut truths_per_user = Vec::with_capacity(by_user.len());
    for (&user, positives) in &by_user {
        let pos_items: Vec<u32> = positives.iter().map(|&(i, _)| i).collect();
        let want = protocol.candidates_per_positive * positives.len();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(protocol.seed, user as u64));
        let mut pool: Vec<u32> = (0..n_items as u32)
            .filter(|&i| !seen.seen(user, i) && !pos_items.contains(&i))
            .collect();
        let take = want.min(pool.len());
        for k in 0..take {
            let j = rng.random_range(k..pool.len());
            pool.swap(k, j);
        }

        let mut candidates: Vec<(u32, f64)> = positives.clone();
        candidates.extend(pool.iter().take(take).map(|&i| (i, 0.0)));
        let cand_pairs: Vec<(u32, u32)> = candidates.iter().map(|&(i, _)| (user, i)).collect();
        let scores = model.score_many(&cand_pairs);

        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then_with(|| candidates[a].0.cmp(&candidates[b].0))
        });
        ranked_lists.push(order.iter().map(|&idx| candidates[idx].0).collect::<Vec<u32>>());
        truths_per_user.push(order.iter().map(|&idx| candidates[idx].1).collect::<Vec<f64>>());
        positives_per_user.push(pos_items);
    }

    Ok(MetricsReport {
        subset_popularity: subset.n_per_item,
        mae,
        mse,
        hr_at_k: hit_ratio_at_k(&ranked_lists, &positives_per_user, protocol.k),
        ndcg_at_k: ndcg_at_k(&truths_per_user, protocol.k),
        n_ratings: subset.rows.len(),
        n_users: by_user.len(),
    })
}

/// Report CSV, one row per subset:
/// `subset_popularity,mae,mse,hr@k,ndcg@k,n_ratings,n_users`.
pub fn write_metrics_csv(path: &Path, reports: &[MetricsReport]) -> Result<(), EvalError> {
    let file = File::create(path)
        .map_err(|e| EvalError::Io { path: path.display().to_string(), source: e })?;
    let mut w = BufWriter::new(file);
    let mut emit = |s: String| {
        w.write_all(s.as_bytes())
            .map_err(|e| EvalError::Io { path: path.display().to_string(), source: e })
    };
    emit("subset_popularity,mae,mse,hr@k,ndcg@k,n_ratings,n_users\n".to_string())?;
    for r in reports {
        emit(format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            r.subset_popularity, r.mae, r.mse, r.hr_at_k, r.ndcg_at_k, r.n_ratings, r.n_users
        ))?;
    }
    w.flush().map_err(|e| EvalError::Io { path: path.display().to_string(), source: e })
}
