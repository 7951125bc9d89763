//! Full-ranking top-K metrics, popularity-group recall and the uniformity measure.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{InteractionDataset, PopularityGroups, UserItems, NUM_POPULARITY_GROUPS};
use crate::dense::{dot, DenseMatrix};
use crate::error::{Error, Result};
use crate::model::l2_normalize;

pub const DEFAULT_TOP_K: usize = 20;

/// Higher score first, then lower item index.
#[inline]
fn rank_order(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Top-`k` items for `user` by inner product, skipping `exclusions` (each sorted ascending).
pub fn rank_items(
    final_repr: &DenseMatrix,
    num_users: usize,
    user: usize,
    exclusions: &[&[u32]],
    k: usize,
) -> Vec<u32> {
    let num_items = final_repr.rows() - num_users;
    let eu = final_repr.row(user);
    let mut scored: Vec<(f64, u32)> = (0..num_items as u32)
        .filter(|i| exclusions.iter().all(|ex| ex.binary_search(i).is_err()))
        .map(|i| (dot(eu, final_repr.row(num_users + i as usize)), i))
        .collect();
    let k = k.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Recall@K and NDCG@K averaged over users that have at least one target item.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RankingMetrics {
    pub recall: f64,
    pub ndcg: f64,
    pub num_users: usize,
}

/// Per-user outcome for one ranked list.
fn user_metrics(top: &[u32], targets: &[u32], k: usize) -> (f64, f64, usize) {
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (rank, item) in top.iter().enumerate() {
        if targets.binary_search(item).is_ok() {
            hits += 1;
            dcg += 1.0 / ((rank + 2) as f64).log2();
        }
    }
    let ideal: f64 = (0..targets.len().min(k))
        .map(|r| 1.0 / ((r + 2) as f64).log2())
        .sum();
    (hits as f64 / targets.len() as f64, dcg / ideal, hits)
}

/// Ranks every user with targets and scores the lists against them.
pub fn ranking_metrics(
    final_repr: &DenseMatrix,
    num_users: usize,
    targets: &UserItems,
    exclusions: &[&UserItems],
    k: usize,
) -> RankingMetrics {
    let per_user: Vec<(f64, f64)> = (0..num_users)
        .into_par_iter()
        .filter(|&u| !targets.items(u).is_empty())
        .map(|u| {
            let ex: Vec<&[u32]> = exclusions.iter().map(|e| e.items(u)).collect();
            let top = rank_items(final_repr, num_users, u, &ex, k);
            let (r, n, _) = user_metrics(&top, targets.items(u), k);
            (r, n)
        })
        .collect();
    let count = per_user.len();
    if count == 0 {
        return RankingMetrics::default();
    }
    let (r, n) = per_user
        .iter()
        .fold((0.0, 0.0), |acc, &(r, n)| (acc.0 + r, acc.1 + n));
    RankingMetrics {
        recall: r / count as f64,
        ndcg: n / count as f64,
        num_users: count,
    }
}

/// Test-set Recall@K / NDCG@K, excluding each user's train and validation items.
pub fn recall_ndcg(dataset: &InteractionDataset, final_repr: &DenseMatrix, k: usize) -> RankingMetrics {
    let (train, valid, test) = (
        dataset.train_index(),
        dataset.validation_index(),
        dataset.test_index(),
    );
    ranking_metrics(final_repr, dataset.num_users, &test, &[&train, &valid], k)
}

/// Validation-set metrics, excluding train items only.
pub fn validation_metrics(
    dataset: &InteractionDataset,
    final_repr: &DenseMatrix,
    k: usize,
) -> RankingMetrics {
    let (train, valid) = (dataset.train_index(), dataset.validation_index());
    ranking_metrics(final_repr, dataset.num_users, &valid, &[&train], k)
}

/// Recall per popularity group, counting only test items in that group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRecall {
    /// `None` when no user has test items in the group.
    pub recall: [Option<f64>; NUM_POPULARITY_GROUPS],
    pub hits: [usize; NUM_POPULARITY_GROUPS],
    pub total_hits: usize,
}

impl GroupRecall {
    /// Sum of recall over the given 1-based groups, absent groups counting 0.
    pub fn summed(&self, groups: std::ops::RangeInclusive<usize>) -> f64 {
        groups.map(|g| self.recall[g - 1].unwrap_or(0.0)).sum()
    }
}

pub fn group_recall(
    dataset: &InteractionDataset,
    final_repr: &DenseMatrix,
    groups: &PopularityGroups,
    k: usize,
) -> GroupRecall {
    let (train, valid, test) = (
        dataset.train_index(),
        dataset.validation_index(),
        dataset.test_index(),
    );
    type PerUser = ([f64; NUM_POPULARITY_GROUPS], [usize; NUM_POPULARITY_GROUPS], [usize; NUM_POPULARITY_GROUPS], usize);
    let per_user: Vec<PerUser> = (0..dataset.num_users)
        .into_par_iter()
        .filter(|&u| !test.items(u).is_empty())
        .map(|u| {
            let top = rank_items(final_repr, dataset.num_users, u, &[train.items(u), valid.items(u)], k);
            let targets = test.items(u);
            let mut in_group = [0usize; NUM_POPULARITY_GROUPS];
            for &i in targets {
                in_group[groups.group(i) as usize - 1] += 1;
            }
            let mut hits = [0usize; NUM_POPULARITY_GROUPS];
            let mut total = 0;
            for i in &top {
                if targets.binary_search(i).is_ok() {
                    hits[groups.group(*i) as usize - 1] += 1;
                    total += 1;
                }
            }
            let mut recall = [0.0; NUM_POPULARITY_GROUPS];
            for g in 0..NUM_POPULARITY_GROUPS {
                if in_group[g] > 0 {
                    recall[g] = hits[g] as f64 / in_group[g] as f64;
                }
            }
            (recall, hits, in_group, total)
        })
        .collect();

    let mut sums = [0.0; NUM_POPULARITY_GROUPS];
    let mut users = [0usize; NUM_POPULARITY_GROUPS];
    let mut hits = [0usize; NUM_POPULARITY_GROUPS];
    let mut total_hits = 0;
    for (recall, h, in_group, total) in &per_user {
        for g in 0..NUM_POPULARITY_GROUPS {
            if in_group[g] > 0 {
                sums[g] += recall[g];
                users[g] += 1;
            }
            hits[g] += h[g];
        }
        total_hits += total;
    }
    let mut recall = [None; NUM_POPULARITY_GROUPS];
    for g in 0..NUM_POPULARITY_GROUPS {
        if users[g] > 0 {
            recall[g] = Some(sums[g] / users[g] as f64);
        }
    }
    GroupRecall {
        recall,
        hits,
        total_hits,
    }
}

pub const DEFAULT_PAIR_CAP: usize = 1_000_000;

/// `log mean exp(-2 ||z_u - z_v||²)` over distinct pairs of the L2-normalized rows in
/// `nodes`. All pairs are used when there are at most `pair_cap`; otherwise `pair_cap`
/// pairs are drawn i.i.d. with replacement.
pub fn uniformity(embeddings: &DenseMatrix, nodes: &[usize], pair_cap: usize, seed: u64) -> Result<f64> {
    let (z, valid) = l2_normalize(&embeddings.gather(nodes));
    let keep: Vec<usize> = (0..z.rows()).filter(|&r| valid[r]).collect();
    let m = keep.len();
    if m < 2 {
        return Err(Error::Data(format!(
            "uniformity needs at least 2 nonzero rows, got {m}"
        )));
    }
    let potential = |a: usize, b: usize| {
        let (za, zb) = (z.row(keep[a]), z.row(keep[b]));
        let sq: f64 = za.iter().zip(zb).map(|(x, y)| (x - y) * (x - y)).sum();
        (-2.0 * sq).exp()
    };
    let all_pairs = m * (m - 1) / 2;
    let mean = if all_pairs <= pair_cap.max(1) {
        let sum: f64 = (0..m)
            .into_par_iter()
            .map(|a| ((a + 1)..m).map(|b| potential(a, b)).sum::<f64>())
            .collect::<Vec<_>>()
            .iter()
            .sum();
        sum / all_pairs as f64
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sum = 0.0;
        for _ in 0..pair_cap {
            let a = rng.random_range(0..m);
            let mut b = rng.random_range(0..m - 1);
            if b >= a {
                b += 1;
            }
            sum += potential(a, b);
        }
        sum / pair_cap as f64
    };
    Ok(mean.ln())
}

/// Which nodes the uniformity measurement samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformitySample {
    /// Items with strictly more training interactions than this are included.
    pub item_min_interactions: u32,
    /// Users sampled uniformly without replacement.
    pub num_users: usize,
    pub pair_cap: usize,
    pub seed: u64,
}

impl Default for UniformitySample {
    fn default() -> Self {
        Self {
            item_min_interactions: 200,
            num_users: 5000,
            pair_cap: DEFAULT_PAIR_CAP,
            seed: 0,
        }
    }
}

impl UniformitySample {
    pub fn nodes(&self, dataset: &InteractionDataset) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let users = rand::seq::index::sample(
            &mut rng,
            dataset.num_users,
            self.num_users.min(dataset.num_users),
        );
        let mut nodes: Vec<usize> = users.into_iter().collect();
        nodes.sort_unstable();
        nodes.extend(
            (0..dataset.num_items)
                .filter(|&i| dataset.item_popularity[i] > self.item_min_interactions)
                .map(|i| dataset.num_users + i),
        );
        nodes
    }

    pub fn measure(&self, dataset: &InteractionDataset, final_repr: &DenseMatrix) -> Result<f64> {
        uniformity(final_repr, &self.nodes(dataset), self.pair_cap, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub per_group_recall: [Option<f64>; NUM_POPULARITY_GROUPS],
    pub uniformity: Option<f64>,
    pub num_eval_users: usize,
}

/// Test metrics, per-group recall (when groups can be built) and uniformity.
pub fn evaluate(
    dataset: &InteractionDataset,
    final_repr: &DenseMatrix,
    k: usize,
    sample: &UniformitySample,
) -> Result<EvalReport> {
    if final_repr.rows() != dataset.num_nodes() {
        return Err(Error::Dimension(format!(
            "embeddings have {} rows, dataset has {} nodes",
            final_repr.rows(),
            dataset.num_nodes()
        )));
    }
    let overall = recall_ndcg(dataset, final_repr, k);
    let per_group_recall = match crate::data::build_popularity_groups(dataset) {
        Ok(groups) => group_recall(dataset, final_repr, &groups, k).recall,
        Err(_) => [None; NUM_POPULARITY_GROUPS],
    };
    Ok(EvalReport {
        k,
        recall: overall.recall,
        ndcg: overall.ndcg,
        per_group_recall,
        uniformity: sample.measure(dataset, final_repr).ok(),
        num_eval_users: overall.num_users,
    })
}
