//! Mini-batch sampling, sparse Adam, the epoch loop with early stopping, and sweeps.

use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ContrastLayer, Method, TrainConfig};
use crate::data::{InteractionDataset, UserItems};
use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::eval::{recall_ndcg, validation_metrics, RankingMetrics};
use crate::graph::{build_adjacency, edge_dropout, node_dropout, SparseAdjacency};
use crate::loss::{
    joint_loss_lightgcn, joint_loss_sgl, joint_loss_simgcl, joint_loss_xsimgcl, Batch,
    ContrastAnchor, ContrastSettings, LossReport, Objective, SglViews,
};
use crate::model::{init_embeddings, propagate, Aggregation};

/// Shuffles the training pairs for `epoch` and cuts them into batches of `batch_size`
/// triples, each with a fresh uniformly drawn negative the user has not interacted with.
pub fn sample_batches(
    train: &[(u32, u32)],
    train_index: &UserItems,
    num_items: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<(u32, u32)> = train.to_vec();
    order.shuffle(&mut rng);

    let num_users = train_index.num_users();
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let triples = chunk
                .iter()
                .filter_map(|&(u, i)| {
                    let seen = train_index.items(u as usize);
                    if seen.len() >= num_items {
                        warn!("user {u} interacted with every item; no negative exists");
                        return None;
                    }
                    loop {
                        let j = rng.random_range(0..num_items as u32);
                        if seen.binary_search(&j).is_err() {
                            return Some((u, i, j));
                        }
                    }
                })
                .collect();
            Batch::new(triples, num_users)
        })
        .collect()
}

/// Seed of the noise stream used by batch `batch` of `epoch`, so any step can be replayed.
pub fn batch_noise_seed(seed: u64, epoch: u64, batch: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x006e_6f69_7365_u64);
    rng.set_stream(epoch.wrapping_mul(1 << 20).wrapping_add(batch));
    rng.random()
}

/// Adam with bias correction, updating only rows whose gradient is nonzero.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: DenseMatrix,
    second: DenseMatrix,
    t: u64,
}

impl Adam {
    pub fn new(rows: usize, cols: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: DenseMatrix::zeros(rows, cols),
            second: DenseMatrix::zeros(rows, cols),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut DenseMatrix, grads: &DenseMatrix) -> Result<()> {
        if !params.same_shape(grads) || !params.same_shape(&self.first) {
            return Err(Error::Dimension("Adam parameter/gradient shapes differ".into()));
        }
        if !grads.is_finite() {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for r in 0..params.rows() {
            let g = grads.row(r);
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let m = self.first.row_mut(r);
            for (mk, &gk) in m.iter_mut().zip(g) {
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
            }
            let v = self.second.row_mut(r);
            for (vk, &gk) in v.iter_mut().zip(g) {
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
            }
            let (m, v) = (self.first.row(r), self.second.row(r));
            for ((p, &mk), &vk) in params.row_mut(r).iter_mut().zip(m).zip(v) {
                *p -= self.lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Per-epoch corrupted adjacencies for the graph-augmented variants.
#[derive(Debug, Clone)]
pub struct Augmentation {
    first: Vec<SparseAdjacency>,
    second: Vec<SparseAdjacency>,
}

impl Augmentation {
    /// One adjacency per view (edge/node dropout) or one per view per layer (random walk).
    pub fn build(method: Method, adj: &SparseAdjacency, layers: usize, keep_rate: f64, seed: u64) -> Result<Option<Self>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut view = |count: usize| -> Result<Vec<SparseAdjacency>> {
            (0..count)
                .map(|_| match method {
                    Method::SglNd => node_dropout(adj, keep_rate, rng.random()),
                    _ => edge_dropout(adj, keep_rate, rng.random()),
                })
                .collect()
        };
        Ok(match method {
            Method::SglEd | Method::SglNd => Some(Self {
                first: view(1)?,
                second: view(1)?,
            }),
            Method::SglRw => Some(Self {
                first: view(layers)?,
                second: view(layers)?,
            }),
            _ => None,
        })
    }

    fn layer_refs(view: &[SparseAdjacency], layers: usize) -> Vec<&SparseAdjacency> {
        (0..layers).map(|l| &view[l % view.len()]).collect()
    }

    pub fn views(&self, layers: usize) -> SglViews<'_> {
        SglViews::Augmented {
            first: Self::layer_refs(&self.first, layers),
            second: Self::layer_refs(&self.second, layers),
        }
    }
}

/// The method's loss and gradient for one batch.
pub fn batch_objective(
    config: &TrainConfig,
    e0: &DenseMatrix,
    adj: &SparseAdjacency,
    augmentation: Option<&Augmentation>,
    batch: &Batch,
    contrast_layer: usize,
    noise_seed: u64,
) -> Result<Objective> {
    let settings = ContrastSettings {
        layers: config.layers,
        lambda: config.lambda,
        tau: config.tau,
        reg: config.reg,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    match config.method {
        Method::LightGcn => joint_loss_lightgcn(e0, adj, config.layers, batch, config.reg),
        Method::XSimGcl => joint_loss_xsimgcl(
            e0,
            adj,
            batch,
            &settings,
            config.noise_spec(),
            config.contrast_anchor,
            contrast_layer,
            &mut rng,
        ),
        Method::SimGcl => joint_loss_simgcl(e0, adj, batch, &settings, config.noise_spec(), &mut rng),
        Method::SglWa => joint_loss_sgl(e0, adj, &SglViews::WithoutAugmentation, batch, &settings),
        Method::SglEd | Method::SglNd | Method::SglRw => {
            let aug = augmentation
                .ok_or_else(|| Error::Config(format!("{} needs graph augmentations", config.method)))?;
            joint_loss_sgl(e0, adj, &aug.views(config.layers), batch, &settings)
        }
    }
}

/// Noise-free representation used for ranking.
pub fn inference_embeddings(
    method: Method,
    e0: &DenseMatrix,
    adj: &SparseAdjacency,
    layers: usize,
) -> Result<DenseMatrix> {
    let aggregation = if method.skips_input_layer() {
        Aggregation::SkipInput
    } else {
        Aggregation::IncludeInput
    };
    Ok(propagate(e0, &vec![adj; layers], aggregation, None)?.final_repr)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Loss components summed over the epoch's batches.
    pub losses: LossReport,
    /// `None` on epochs without validation.
    pub validation: Option<RankingMetrics>,
    pub uniformity: Option<f64>,
    pub mean_batch_seconds: f64,
    pub augmentation_seconds: f64,
    pub epoch_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainTrace {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|r| r.epoch == self.best_epoch)
    }

    pub fn total_seconds(&self) -> f64 {
        self.epochs.iter().map(|r| r.epoch_seconds).sum()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Learned table from the best epoch.
    pub e0: DenseMatrix,
    /// Inference representation of `e0`.
    pub final_repr: DenseMatrix,
    pub trace: TrainTrace,
}

pub fn train(config: &TrainConfig, dataset: &InteractionDataset) -> Result<TrainOutcome> {
    train_with_observer(config, dataset, &mut |_| {})
}

/// Trains, calling `observer` after every epoch (e.g. to stream the trace to disk).
///
/// With validation data, training stops once `patience` consecutive evaluations fail to
/// improve validation Recall@K and the best epoch's parameters are returned. With
/// `merge_validation` the model trains on train ∪ validation for `max_epochs` epochs.
pub fn train_with_observer(
    config: &TrainConfig,
    dataset: &InteractionDataset,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let merged;
    let dataset = if config.merge_validation {
        merged = dataset.merge_validation();
        &merged
    } else {
        dataset
    };
    let adj = build_adjacency(dataset)?;
    let train_index = dataset.train_index();
    let validate = !dataset.validation.is_empty();

    let mut e0 = init_embeddings(dataset.num_nodes(), config.dim, config.seed);
    let mut adam = Adam::new(e0.rows(), e0.cols(), config.lr);
    let mut layer_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x006c_6179_6572);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0061_7567);

    let mut trace = TrainTrace::default();
    let mut best: Option<(f64, DenseMatrix)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=config.max_epochs {
        let epoch_start = Instant::now();
        let aug_start = Instant::now();
        let augmentation = Augmentation::build(
            config.method,
            &adj,
            config.layers,
            config.keep_rate,
            aug_rng.random(),
        )?;
        let augmentation_seconds = if augmentation.is_some() {
            aug_start.elapsed().as_secs_f64()
        } else {
            0.0
        };

        let batches = sample_batches(
            &dataset.train,
            &train_index,
            dataset.num_items,
            config.batch_size,
            config.seed,
            epoch as u64,
        );
        let mut losses = LossReport::default();
        let mut batch_seconds = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let contrast_layer = match config.contrast_layer {
                ContrastLayer::Fixed(l) => l,
                ContrastLayer::Random => layer_rng.random_range(1..=config.layers),
            };
            let noise_seed = batch_noise_seed(config.seed, epoch as u64, b as u64);
            let start = Instant::now();
            let objective = batch_objective(
                config,
                &e0,
                &adj,
                augmentation.as_ref(),
                batch,
                contrast_layer,
                noise_seed,
            )?;
            if !objective.report.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss diverged at epoch {epoch}, batch {b}: {:?}",
                    objective.report
                )));
            }
            adam.step(&mut e0, &objective.grad)
                .map_err(|e| Error::Numerical(format!("epoch {epoch}, batch {b}: {e}")))?;
            batch_seconds += start.elapsed().as_secs_f64();
            losses.rec_loss += objective.report.rec_loss;
            losses.cl_loss += objective.report.cl_loss;
            losses.reg_loss += objective.report.reg_loss;
            losses.total += objective.report.total;
        }

        let evaluate_now = validate && (epoch % config.eval_interval == 0 || epoch == config.max_epochs);
        let mut record = EpochRecord {
            epoch,
            losses,
            validation: None,
            uniformity: None,
            mean_batch_seconds: batch_seconds / batches.len().max(1) as f64,
            augmentation_seconds,
            epoch_seconds: 0.0,
        };
        let mut stop = false;
        if evaluate_now || !validate {
            let final_repr = inference_embeddings(config.method, &e0, &adj, config.layers)?;
            record.uniformity = config.uniformity.measure(dataset, &final_repr).ok();
            if evaluate_now {
                let metrics = validation_metrics(dataset, &final_repr, config.top_k);
                record.validation = Some(metrics);
                let improved = best.as_ref().is_none_or(|(r, _)| metrics.recall > *r);
                if improved {
                    best = Some((metrics.recall, e0.clone()));
                    trace.best_epoch = epoch;
                    since_best = 0;
                } else {
                    since_best += 1;
                    stop = since_best > config.patience;
                }
            } else {
                trace.best_epoch = epoch;
            }
        }
        record.epoch_seconds = epoch_start.elapsed().as_secs_f64();
        info!(
            "{} epoch {epoch}: loss {:.4} (rec {:.4}, cl {:.4}) val {:?}",
            config.method, record.losses.total, record.losses.rec_loss, record.losses.cl_loss,
            record.validation.map(|m| m.recall)
        );
        observer(&record);
        trace.epochs.push(record);
        if stop {
            break;
        }
    }

    let e0 = match best {
        Some((_, params)) if validate => params,
        _ => e0,
    };
    let final_repr = inference_embeddings(config.method, &e0, &adj, config.layers)?;
    Ok(TrainOutcome {
        e0,
        final_repr,
        trace,
    })
}

/// The cells a sweep trains.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepGrid {
    /// Every `(lambda, epsilon)` combination.
    LambdaEpsilon { lambdas: Vec<f64>, epsilons: Vec<f64> },
    /// Every anchor/layer pair with `layer <= anchor` for `layers` layers, where anchor
    /// `layers` is the aggregated representation, plus one row with a random layer.
    LayerPairs { layers: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub lambda: f64,
    pub epsilon: f64,
    pub anchor: ContrastAnchor,
    pub contrast_layer: ContrastLayer,
}

impl SweepCell {
    /// Stable identifier used for resuming.
    pub fn key(&self) -> String {
        let anchor = match self.anchor {
            ContrastAnchor::Final => "final".to_string(),
            ContrastAnchor::Layer(a) => a.to_string(),
        };
        format!("lambda={};epsilon={};anchor={anchor};layer={}", self.lambda, self.epsilon, self.contrast_layer)
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.lambda = self.lambda;
        c.epsilon = self.epsilon;
        c.contrast_anchor = self.anchor;
        c.contrast_layer = self.contrast_layer;
        c
    }
}

impl SweepGrid {
    /// The λ and ε values of the sensitivity study.
    pub fn standard_lambda_epsilon() -> Self {
        SweepGrid::LambdaEpsilon {
            lambdas: vec![0.01, 0.05, 0.1, 0.2, 0.5, 1.0],
            epsilons: vec![0.0, 0.01, 0.05, 0.1, 0.2, 0.5],
        }
    }

    pub fn cells(&self, base: &TrainConfig) -> Vec<SweepCell> {
        match self {
            SweepGrid::LambdaEpsilon { lambdas, epsilons } => lambdas
                .iter()
                .flat_map(|&lambda| {
                    epsilons.iter().map(move |&epsilon| SweepCell {
                        lambda,
                        epsilon,
                        anchor: base.contrast_anchor,
                        contrast_layer: base.contrast_layer,
                    })
                })
                .collect(),
            SweepGrid::LayerPairs { layers } => {
                let mut cells = Vec::new();
                for a in 1..=*layers {
                    let anchor = if a == *layers {
                        ContrastAnchor::Final
                    } else {
                        ContrastAnchor::Layer(a)
                    };
                    for b in 1..=a {
                        cells.push(SweepCell {
                            lambda: base.lambda,
                            epsilon: base.epsilon,
                            anchor,
                            contrast_layer: ContrastLayer::Fixed(b),
                        });
                    }
                }
                cells.push(SweepCell {
                    lambda: base.lambda,
                    epsilon: base.epsilon,
                    anchor: ContrastAnchor::Final,
                    contrast_layer: ContrastLayer::Random,
                });
                cells
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub outcome: std::result::Result<SweepMetrics, String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepMetrics {
    pub best_epoch: usize,
    pub validation: RankingMetrics,
    pub test: RankingMetrics,
    pub uniformity: Option<f64>,
}

/// Trains one model per cell not rejected by `skip`, reporting each row as it finishes.
/// A failing cell is recorded and the sweep moves on.
pub fn sweep(
    base: &TrainConfig,
    dataset: &InteractionDataset,
    grid: &SweepGrid,
    skip: &dyn Fn(&SweepCell) -> bool,
    on_row: &mut dyn FnMut(&SweepRow),
) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for cell in grid.cells(base) {
        if skip(&cell) {
            continue;
        }
        let config = cell.apply(base);
        let outcome = config
            .validate()
            .and_then(|_| train(&config, dataset))
            .map(|out| {
                let best = out.trace.best();
                SweepMetrics {
                    best_epoch: out.trace.best_epoch,
                    validation: best.and_then(|r| r.validation).unwrap_or_default(),
                    test: recall_ndcg(dataset, &out.final_repr, config.top_k),
                    uniformity: config.uniformity.measure(dataset, &out.final_repr).ok(),
                }
            })
            .map_err(|e| e.to_string());
        if let Err(msg) = &outcome {
            warn!("sweep cell {} failed: {msg}", cell.key());
        }
        let row = SweepRow { cell, outcome };
        on_row(&row);
        rows.push(row);
    }
    rows
}
