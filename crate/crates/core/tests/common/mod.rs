//! Test-side oracles, written independently of the library's fast paths.
//!
//! Each oracle favours the most literal formulation: dense matrices instead of CSR,
//! full sorts instead of partial selection, and finite differences instead of
//! hand-derived gradients.

#![allow(dead_code)]

use std::collections::BTreeSet;

use gclrec::config::{Method, TrainConfig};
use gclrec::data::InteractionDataset;
use gclrec::graph::SparseAdjacency;
use gclrec::loss::{
    bpr_loss_and_grad, infonce_loss_and_grad, joint_loss_lightgcn, joint_loss_sgl, joint_loss_simgcl,
    joint_loss_xsimgcl, sgl_wa_loss_and_grad, Batch, ContrastAnchor, ContrastSettings, SglViews,
};
use gclrec::model::{NoiseKind, NoiseSpec};
use gclrec::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

/// Entries whose magnitude is below this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(f: &dyn Fn(&DenseMatrix) -> f64, x: &DenseMatrix) -> DenseMatrix {
    let mut grad = DenseMatrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let orig = x.get(r, c);
            probe.set(r, c, orig + FD_STEP);
            let up = f(&probe);
            probe.set(r, c, orig - FD_STEP);
            let down = f(&probe);
            probe.set(r, c, orig);
            grad.set(r, c, (up - down) / (2.0 * FD_STEP));
        }
    }
    grad
}

/// Largest entrywise `|a - n| / max(|a|, |n|, FD_FLOOR)`.
pub fn max_relative_error(analytic: &DenseMatrix, numeric: &DenseMatrix) -> f64 {
    assert!(analytic.same_shape(numeric));
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR))
        .fold(0.0, f64::max)
}

/// A small random bipartite graph, embedding table and batch.
pub struct Instance {
    pub adj: SparseAdjacency,
    pub e0: DenseMatrix,
    pub batch: Batch,
    pub num_users: usize,
    pub num_items: usize,
}

pub fn uniform_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    DenseMatrix::from_vec(rows, cols, data).unwrap()
}

/// At most 8 nodes and `d <= 4`; every user has a positive and a negative item.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_users = rng.random_range(2..=4);
    let num_items = rng.random_range(3..=8 - num_users);
    let d = rng.random_range(2..=4);
    let mut edges = Vec::new();
    for u in 0..num_users as u32 {
        // each user misses at least one item so negatives exist
        let skip = rng.random_range(0..num_items as u32);
        let mut own: Vec<u32> = (0..num_items as u32)
            .filter(|&i| i != skip && rng.random_bool(0.5))
            .collect();
        if own.is_empty() {
            own.push((skip + 1) % num_items as u32);
        }
        edges.extend(own.into_iter().map(|i| (u, i)));
    }
    let adj = SparseAdjacency::from_edges(num_users, num_items, &edges).unwrap();
    let mut triples = Vec::new();
    for _ in 0..rng.random_range(2..=5) {
        let (u, i) = edges[rng.random_range(0..edges.len())];
        let negatives: Vec<u32> = (0..num_items as u32)
            .filter(|j| !edges.contains(&(u, *j)))
            .collect();
        let j = negatives[rng.random_range(0..negatives.len())];
        triples.push((u, i, j));
    }
    Instance {
        adj,
        e0: uniform_matrix(num_users + num_items, d, &mut rng),
        batch: Batch::new(triples, num_users),
        num_users,
        num_items,
    }
}

pub fn settings(layers: usize) -> ContrastSettings {
    ContrastSettings {
        layers,
        lambda: 0.7,
        tau: 0.2,
        reg: 1e-2,
    }
}

/// Loss operations covered by the gradient oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientCase {
    Bpr,
    InfoNceFirstView,
    InfoNceSecondView,
    SglWa,
    XSimGcl,
    XSimGclLayerAnchor,
    SimGcl,
    LightGcn,
    SglEdgeDropout,
}

impl GradientCase {
    pub const ALL: [GradientCase; 9] = [
        GradientCase::Bpr,
        GradientCase::InfoNceFirstView,
        GradientCase::InfoNceSecondView,
        GradientCase::SglWa,
        GradientCase::XSimGcl,
        GradientCase::XSimGclLayerAnchor,
        GradientCase::SimGcl,
        GradientCase::LightGcn,
        GradientCase::SglEdgeDropout,
    ];
}

/// Max relative error between the analytic and finite-difference gradient of `case`
/// on the instance drawn from `seed`. Noise is replayed from a fixed seed on every
/// evaluation, so the objective is a smooth function of `E0`.
pub fn gradient_error(case: GradientCase, seed: u64) -> f64 {
    let inst = random_instance(seed);
    let noise = NoiseSpec::new(0.1, NoiseKind::SignedUniform);
    let noise_seed = seed.wrapping_mul(31).wrapping_add(7);
    let all_nodes: Vec<usize> = (0..inst.e0.rows()).collect();
    let dropped_a = gclrec::graph::edge_dropout(&inst.adj, 0.7, seed + 1).unwrap();
    let dropped_b = gclrec::graph::edge_dropout(&inst.adj, 0.7, seed + 2).unwrap();
    let mut other_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let other_view = uniform_matrix(inst.e0.rows(), inst.e0.cols(), &mut other_rng);

    let eval = |e0: &DenseMatrix| -> (f64, DenseMatrix) {
        let (n, d) = (e0.rows(), e0.cols());
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        match case {
            GradientCase::Bpr => {
                let (loss, g) = bpr_loss_and_grad(e0, &inst.batch);
                (loss, g.to_dense(n, d))
            }
            GradientCase::InfoNceFirstView => {
                let out = infonce_loss_and_grad(e0, &other_view, &all_nodes, 0.2).unwrap();
                (out.loss, out.grad_a.to_dense(n, d))
            }
            GradientCase::InfoNceSecondView => {
                let out = infonce_loss_and_grad(&other_view, e0, &all_nodes, 0.2).unwrap();
                (out.loss, out.grad_b.to_dense(n, d))
            }
            GradientCase::SglWa => {
                let (loss, g) = sgl_wa_loss_and_grad(e0, &all_nodes, 0.2).unwrap();
                (loss, g.to_dense(n, d))
            }
            GradientCase::XSimGcl => {
                let o = joint_loss_xsimgcl(
                    e0,
                    &inst.adj,
                    &inst.batch,
                    &settings(2),
                    noise,
                    ContrastAnchor::Final,
                    1,
                    &mut rng,
                )
                .unwrap();
                (o.report.total, o.grad)
            }
            GradientCase::XSimGclLayerAnchor => {
                let o = joint_loss_xsimgcl(
                    e0,
                    &inst.adj,
                    &inst.batch,
                    &settings(3),
                    noise,
                    ContrastAnchor::Layer(2),
                    1,
                    &mut rng,
                )
                .unwrap();
                (o.report.total, o.grad)
            }
            GradientCase::SimGcl => {
                let o = joint_loss_simgcl(e0, &inst.adj, &inst.batch, &settings(2), noise, &mut rng).unwrap();
                (o.report.total, o.grad)
            }
            GradientCase::LightGcn => {
                let o = joint_loss_lightgcn(e0, &inst.adj, 2, &inst.batch, 1e-2).unwrap();
                (o.report.total, o.grad)
            }
            GradientCase::SglEdgeDropout => {
                let views = SglViews::Augmented {
                    first: vec![&dropped_a, &dropped_a],
                    second: vec![&dropped_b, &dropped_b],
                };
                let o = joint_loss_sgl(e0, &inst.adj, &views, &inst.batch, &settings(2)).unwrap();
                (o.report.total, o.grad)
            }
        }
    };
    let (_, analytic) = eval(&inst.e0);
    let numeric = numeric_gradient(&|x| eval(x).0, &inst.e0);
    max_relative_error(&analytic, &numeric)
}

/// Dense symmetric-normalized adjacency built straight from the definition.
pub fn dense_adjacency(num_users: usize, num_items: usize, edges: &[(u32, u32)]) -> Vec<Vec<f64>> {
    let n = num_users + num_items;
    let mut r = vec![vec![0.0; n]; n];
    for &(u, i) in edges {
        let (a, b) = (u as usize, num_users + i as usize);
        r[a][b] = 1.0;
        r[b][a] = 1.0;
    }
    let deg: Vec<f64> = r.iter().map(|row| row.iter().sum()).collect();
    for a in 0..n {
        for b in 0..n {
            if r[a][b] != 0.0 {
                r[a][b] /= (deg[a] * deg[b]).sqrt();
            }
        }
    }
    r
}

pub fn dense_matmul(a: &[Vec<f64>], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = x.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|c| row.iter().zip(x).map(|(w, xr)| w * xr[c]).sum())
                .collect()
        })
        .collect()
}

/// `Σ_{l=0..L} A^l E0 / (L + 1)` by repeated dense products.
pub fn dense_propagation(adj: &[Vec<f64>], e0: &[Vec<f64>], layers: usize) -> Vec<Vec<f64>> {
    let mut acc = e0.to_vec();
    let mut power = e0.to_vec();
    for _ in 0..layers {
        power = dense_matmul(adj, &power);
        for (a, p) in acc.iter_mut().zip(&power) {
            a.iter_mut().zip(p).for_each(|(x, y)| *x += y);
        }
    }
    let w = 1.0 / (layers + 1) as f64;
    acc.iter_mut().for_each(|r| r.iter_mut().for_each(|x| *x *= w));
    acc
}

/// Full sort of all non-excluded items by (score desc, index asc), truncated to `k`.
pub fn full_sort_top_k(scores: &[f64], excluded: &BTreeSet<u32>, k: usize) -> Vec<u32> {
    let mut items: Vec<u32> = (0..scores.len() as u32)
        .filter(|i| !excluded.contains(i))
        .collect();
    items.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    items.truncate(k);
    items
}

/// Recall@K and NDCG@K computed user by user with plain loops over the test split.
pub fn brute_force_metrics(dataset: &InteractionDataset, final_repr: &DenseMatrix, k: usize) -> (f64, f64) {
    let mut recall_sum = 0.0;
    let mut ndcg_sum = 0.0;
    let mut users = 0usize;
    for u in 0..dataset.num_users as u32 {
        let targets: BTreeSet<u32> = dataset.test.iter().filter(|p| p.0 == u).map(|p| p.1).collect();
        if targets.is_empty() {
            continue;
        }
        let excluded: BTreeSet<u32> = dataset
            .train
            .iter()
            .chain(&dataset.validation)
            .filter(|p| p.0 == u)
            .map(|p| p.1)
            .collect();
        let scores: Vec<f64> = (0..dataset.num_items)
            .map(|i| {
                let eu = final_repr.row(u as usize);
                let ei = final_repr.row(dataset.num_users + i);
                eu.iter().zip(ei).map(|(a, b)| a * b).sum()
            })
            .collect();
        let top = full_sort_top_k(&scores, &excluded, k);
        let mut dcg = 0.0;
        let mut hits = 0usize;
        for (rank, item) in top.iter().enumerate() {
            if targets.contains(item) {
                hits += 1;
                dcg += 1.0 / ((rank + 2) as f64).log2();
            }
        }
        let idcg: f64 = (0..targets.len().min(k)).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
        recall_sum += hits as f64 / targets.len() as f64;
        ndcg_sum += dcg / idcg;
        users += 1;
    }
    (recall_sum / users as f64, ndcg_sum / users as f64)
}

/// Exact `log mean exp(-2 ||z_a - z_b||²)` over all distinct pairs of normalized rows.
pub fn exact_uniformity(rows: &[Vec<f64>]) -> f64 {
    let z: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for a in 0..z.len() {
        for b in a + 1..z.len() {
            let d2: f64 = z[a].iter().zip(&z[b]).map(|(x, y)| (x - y) * (x - y)).sum();
            sum += (-2.0 * d2).exp();
            count += 1;
        }
    }
    (sum / count as f64).ln()
}

pub fn to_rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Training settings for the desk-scale comparisons.
/// Defaults with a tenfold learning rate: a MovieLens-100k-sized corpus gives about 35
/// batches per epoch, so the default rate needs hundreds of epochs to converge.
pub fn desk_config(method: Method, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        seed,
        lr: 0.01,
        ..TrainConfig::default()
    }
}

/// `count` points uniform on the unit sphere in `dim` dimensions.
pub fn uniform_sphere(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let mut data = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / n));
    }
    DenseMatrix::from_vec(count, dim, data).unwrap()
}

/// `count` von Mises-Fisher samples on the 2-sphere around the north pole, by inverting
/// the closed-form CDF of the cosine to the mean direction.
pub fn von_mises_fisher_3d(count: usize, kappa: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let mut data = Vec::with_capacity(count * 3);
    for _ in 0..count {
        let u: f64 = rng.random();
        let w = 1.0 + (u + (1.0 - u) * (-2.0 * kappa).exp()).ln() / kappa;
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let r = (1.0 - w * w).max(0.0).sqrt();
        data.extend([r * phi.cos(), r * phi.sin(), w]);
    }
    DenseMatrix::from_vec(count, 3, data).unwrap()
}

/// `log((1/2π) ∫ exp(-4 (1 - cos θ)) dθ)` by composite Simpson's rule.
pub fn circle_uniformity_quadrature() -> f64 {
    let n = 20_000;
    let h = std::f64::consts::TAU / n as f64;
    let f = |t: f64| (-4.0 * (1.0 - t.cos())).exp();
    let mut sum = f(0.0) + f(std::f64::consts::TAU);
    for k in 1..n {
        sum += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    (sum * h / 3.0 / std::f64::consts::TAU).ln()
}
