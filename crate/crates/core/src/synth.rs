//! Deterministic synthetic interaction logs with long-tailed item popularity and latent
//! taste clusters, for tests and benchmarks when no public dataset is at hand.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::RawInteractions;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    /// Target number of distinct interactions; the result lands close to it.
    pub num_interactions: usize,
    /// Smallest per-user history.
    pub min_per_user: usize,
    pub num_clusters: usize,
    /// Exponent of the Zipf law behind item popularity.
    pub zipf_exponent: f64,
    /// Probability that an interaction follows the user's tastes rather than global popularity.
    pub affinity: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Shaped like MovieLens-100k: 943 users, 1682 items, about 100k interactions.
    pub fn movielens_100k_like(seed: u64) -> Self {
        Self {
            num_users: 943,
            num_items: 1682,
            num_interactions: 100_000,
            min_per_user: 20,
            num_clusters: 16,
            zipf_exponent: 0.9,
            affinity: 0.75,
            seed,
        }
    }

    /// A small graph with roughly `edges` interactions, used for timing.
    pub fn with_edges(edges: usize, seed: u64) -> Self {
        let users = (edges / 10).max(2);
        Self {
            num_users: users,
            num_items: users,
            num_interactions: edges,
            min_per_user: 2,
            num_clusters: 8,
            zipf_exponent: 0.9,
            affinity: 0.75,
            seed,
        }
    }
}

/// Generates an interaction log. Each item belongs to one cluster and has a Zipf weight;
/// each user mixes a primary and a secondary cluster and draws items without replacement.
pub fn generate(config: &SynthConfig) -> Result<RawInteractions> {
    let SynthConfig {
        num_users,
        num_items,
        num_interactions,
        min_per_user,
        num_clusters,
        zipf_exponent,
        affinity,
        seed,
    } = *config;
    if num_users == 0 || num_items == 0 || num_clusters == 0 {
        return Err(Error::Config("synthetic data needs users, items and clusters".into()));
    }
    if !(0.0..=1.0).contains(&affinity) {
        return Err(Error::Config(format!("affinity must lie in [0, 1], got {affinity}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut rank: Vec<usize> = (0..num_items).collect();
    rank.shuffle(&mut rng);
    let weight: Vec<f64> = rank
        .iter()
        .map(|&r| 1.0 / ((r + 1) as f64).powf(zipf_exponent))
        .collect();
    let cluster_of: Vec<usize> = (0..num_items).map(|_| rng.random_range(0..num_clusters)).collect();

    let global = WeightedIndex::new(&weight).map_err(|e| Error::Config(e.to_string()))?;
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); num_clusters];
    for (i, &c) in cluster_of.iter().enumerate() {
        members[c].push(i as u32);
    }
    let per_cluster: Vec<Option<WeightedIndex<f64>>> = members
        .iter()
        .map(|m| WeightedIndex::new(m.iter().map(|&i| weight[i as usize])).ok())
        .collect();

    // log-normal activity, rescaled so the mean hits the target
    let raw_activity: Vec<f64> = (0..num_users)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (0.8 * z).exp()
        })
        .collect();
    let mean_activity = raw_activity.iter().sum::<f64>() / num_users as f64;
    let per_user_mean = num_interactions as f64 / num_users as f64;
    let cap = (num_items / 2).max(1);

    let mut pairs = Vec::with_capacity(num_interactions);
    for (u, &a) in raw_activity.iter().enumerate() {
        let count = ((a / mean_activity * per_user_mean).round() as usize).clamp(min_per_user.min(cap), cap);
        let primary = rng.random_range(0..num_clusters);
        let secondary = rng.random_range(0..num_clusters);
        let mut chosen = HashSet::with_capacity(count);
        let mut attempts = 0;
        while chosen.len() < count && attempts < 50 * count {
            attempts += 1;
            let item = if rng.random::<f64>() < affinity {
                let c = if rng.random::<f64>() < 0.7 { primary } else { secondary };
                match &per_cluster[c] {
                    Some(dist) => members[c][dist.sample(&mut rng)],
                    None => global.sample(&mut rng) as u32,
                }
            } else {
                global.sample(&mut rng) as u32
            };
            if chosen.insert(item) {
                pairs.push((u as u32, item));
            }
        }
    }
    Ok(RawInteractions::from_indices(num_users, num_items, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn movielens_shape() {
        let raw = generate(&SynthConfig::movielens_100k_like(0)).unwrap();
        assert_eq!(raw.num_users(), 943);
        assert_eq!(raw.num_items(), 1682);
        let n = raw.pairs.len();
        assert!((90_000..=110_000).contains(&n), "{n} interactions");
        let unique: HashSet<_> = raw.pairs.iter().collect();
        assert_eq!(unique.len(), n);
    }

    #[test]
    fn deterministic_per_seed() {
        let c = SynthConfig::with_edges(2000, 4);
        assert_eq!(generate(&c).unwrap().pairs, generate(&c).unwrap().pairs);
        let other = SynthConfig { seed: 5, ..c };
        assert_ne!(generate(&c).unwrap().pairs, generate(&other).unwrap().pairs);
    }

    #[test]
    fn popularity_is_long_tailed() {
        let raw = generate(&SynthConfig::movielens_100k_like(1)).unwrap();
        let mut pop = vec![0usize; raw.num_items()];
        raw.pairs.iter().for_each(|&(_, i)| pop[i as usize] += 1);
        pop.sort_unstable_by(|a, b| b.cmp(a));
        let head: usize = pop[..raw.num_items() / 10].iter().sum();
        // top 10% of items hold well over 10% of interactions
        assert!(head as f64 > 0.3 * raw.pairs.len() as f64);
    }

    #[test]
    fn edge_target_is_met() {
        let raw = generate(&SynthConfig::with_edges(10_000, 0)).unwrap();
        assert!((9_000..=11_000).contains(&raw.pairs.len()));
    }
}
