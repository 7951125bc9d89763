//! Wall-clock comparison of per-batch training cost across methods on identical batches.

use std::time::Instant;

use crate::config::{ContrastLayer, Method, TrainConfig};
use crate::data::InteractionDataset;
use crate::error::Result;
use crate::graph::build_adjacency;
use crate::model::init_embeddings;
use crate::train::{batch_noise_seed, batch_objective, sample_batches, Augmentation};

/// Timed batches preceded by this many untimed ones.
pub const WARMUP_BATCHES: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: Method,
    pub layers: usize,
    pub batches: usize,
    /// Forward plus backward time per batch, seconds.
    pub mean_batch_seconds: f64,
    pub stdev_batch_seconds: f64,
    /// Time to rebuild the corrupted graphs once (zero for methods without them).
    pub augmentation_seconds: f64,
    pub batches_per_epoch: usize,
}

impl BenchRow {
    /// Per-batch cost with the per-epoch augmentation rebuild spread over the epoch.
    pub fn amortized_batch_seconds(&self) -> f64 {
        self.mean_batch_seconds + self.augmentation_seconds / self.batches_per_epoch.max(1) as f64
    }
}

/// Times `batches` forward+backward passes per method after [`WARMUP_BATCHES`] warm-up
/// passes. Every method sees the same embedding table and the same batch sequence; the
/// table is not updated, so the work per batch is identical across repetitions.
pub fn bench_methods(
    base: &TrainConfig,
    dataset: &InteractionDataset,
    methods: &[Method],
    batches: usize,
) -> Result<Vec<BenchRow>> {
    base.validate()?;
    let adj = build_adjacency(dataset)?;
    let e0 = init_embeddings(dataset.num_nodes(), base.dim, base.seed);
    let stream = sample_batches(
        &dataset.train,
        &dataset.train_index(),
        dataset.num_items,
        base.batch_size,
        base.seed,
        1,
    );
    let batches_per_epoch = stream.len();
    if batches == 0 || stream.is_empty() {
        return Ok(Vec::new());
    }

    let mut rows = Vec::with_capacity(methods.len());
    for &method in methods {
        let config = TrainConfig {
            method,
            ..base.clone()
        };
        let contrast_layer = match config.contrast_layer {
            ContrastLayer::Fixed(l) => l,
            ContrastLayer::Random => config.layers,
        };

        let mut augmentation_seconds = 0.0;
        let mut augmentation = None;
        if method.uses_graph_augmentation() {
            // a few rebuilds, keep the mean
            let reps = 3;
            for r in 0..reps {
                let start = Instant::now();
                augmentation = Augmentation::build(method, &adj, config.layers, config.keep_rate, config.seed + r)?;
                augmentation_seconds += start.elapsed().as_secs_f64();
            }
            augmentation_seconds /= reps as f64;
        }

        let mut samples = Vec::with_capacity(batches);
        for k in 0..WARMUP_BATCHES + batches {
            let b = k % stream.len();
            let start = Instant::now();
            let objective = batch_objective(
                &config,
                &e0,
                &adj,
                augmentation.as_ref(),
                &stream[b],
                contrast_layer,
                batch_noise_seed(config.seed, 1, b as u64),
            )?;
            let elapsed = start.elapsed().as_secs_f64();
            std::hint::black_box(&objective);
            if k >= WARMUP_BATCHES {
                samples.push(elapsed);
            }
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = if samples.len() > 1 {
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64
        } else {
            0.0
        };
        rows.push(BenchRow {
            method,
            layers: config.layers,
            batches,
            mean_batch_seconds: mean,
            stdev_batch_seconds: var.sqrt(),
            augmentation_seconds,
            batches_per_epoch,
        });
    }
    Ok(rows)
}
