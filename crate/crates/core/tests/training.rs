mod common;

use common::desk_config;
use gclrec::config::Method;
use gclrec::data::split_dataset;
use gclrec::eval::{recall_ndcg, validation_metrics};
use gclrec::graph::build_adjacency;
use gclrec::synth::{generate, SynthConfig};
use gclrec::train::{batch_noise_seed, batch_objective, inference_embeddings, sample_batches, train, Augmentation};
use gclrec::{DenseMatrix, InteractionDataset, SplitRatio, TrainConfig};

fn small_dataset(seed: u64) -> InteractionDataset {
    let raw = generate(&SynthConfig {
        num_users: 100,
        num_items: 200,
        num_interactions: 3000,
        ..SynthConfig::movielens_100k_like(seed)
    })
    .unwrap();
    split_dataset(&raw, SplitRatio::default(), seed)
}

fn small_config(method: Method) -> TrainConfig {
    TrainConfig {
        batch_size: 256,
        max_epochs: 30,
        ..desk_config(method, 4)
    }
}

/// Scores every item by its training popularity, identically for every user.
fn popularity_table(dataset: &InteractionDataset) -> DenseMatrix {
    let mut rows = vec![vec![1.0]; dataset.num_users];
    rows.extend(dataset.item_popularity.iter().map(|&p| vec![p as f64]));
    DenseMatrix::from_rows(&rows).unwrap()
}

#[test]
fn lightgcn_beats_popularity_on_a_small_corpus() {
    let dataset = small_dataset(1);
    let out = train(&small_config(Method::LightGcn), &dataset).unwrap();
    let epochs = &out.trace.epochs;
    assert!(epochs.iter().all(|r| r.losses.rec_loss > 0.0 && r.losses.total > 0.0));
    let first = epochs[0].validation.unwrap().recall;
    let best = out.trace.best().unwrap().validation.unwrap().recall;
    assert!(best > first, "validation {first} -> {best}");

    let model = recall_ndcg(&dataset, &out.final_repr, 20).recall;
    let popular = recall_ndcg(&dataset, &popularity_table(&dataset), 20).recall;
    assert!(model > popular, "model {model} vs popularity {popular}");
}

#[test]
fn patience_zero_stops_after_first_miss_and_keeps_best() {
    let dataset = small_dataset(2);
    let config = TrainConfig {
        patience: 0,
        ..small_config(Method::XSimGcl)
    };
    let out = train(&config, &dataset).unwrap();
    let trace = &out.trace;
    let recalls: Vec<f64> = trace.epochs.iter().map(|r| r.validation.unwrap().recall).collect();
    if trace.epochs.len() < config.max_epochs {
        // every epoch before the last improved on its predecessor
        assert!(recalls.windows(2).take(recalls.len() - 2).all(|w| w[1] > w[0]), "{recalls:?}");
        assert!(recalls[recalls.len() - 1] <= recalls[recalls.len() - 2]);
        assert_eq!(trace.best_epoch + 1, trace.epochs.len());
    }

    // the returned parameters are the best epoch's
    let again = inference_embeddings(config.method, &out.e0, &build_adjacency(&dataset).unwrap(), config.layers).unwrap();
    assert_eq!(again.max_abs_diff(&out.final_repr), 0.0);
    let val = validation_metrics(&dataset, &out.final_repr, config.top_k).recall;
    assert_eq!(val, trace.best().unwrap().validation.unwrap().recall);
}

#[test]
fn training_is_deterministic() {
    let dataset = small_dataset(3);
    for method in [Method::XSimGcl, Method::SglEd] {
        let config = TrainConfig {
            max_epochs: 3,
            ..small_config(method)
        };
        let a = train(&config, &dataset).unwrap();
        let b = train(&config, &dataset).unwrap();
        assert_eq!(a.e0, b.e0, "{method}");
        let losses = |o: &gclrec::TrainOutcome| o.trace.epochs.iter().map(|r| r.losses).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
    }
}

#[test]
fn a_small_step_against_the_gradient_lowers_every_objective() {
    let dataset = small_dataset(5);
    let adj = build_adjacency(&dataset).unwrap();
    let e0 = gclrec::model::init_embeddings(dataset.num_nodes(), 16, 5);
    let batches = sample_batches(&dataset.train, &dataset.train_index(), dataset.num_items, 128, 5, 1);
    for method in Method::ALL {
        let config = TrainConfig {
            dim: 16,
            ..small_config(method)
        };
        let aug = Augmentation::build(method, &adj, config.layers, config.keep_rate, 9).unwrap();
        let noise = batch_noise_seed(5, 1, 0);
        let at = |e: &DenseMatrix| batch_objective(&config, e, &adj, aug.as_ref(), &batches[0], 1, noise).unwrap();
        let here = at(&e0);
        let norm2: f64 = here.grad.as_slice().iter().map(|g| g * g).sum();
        let mut moved = e0.clone();
        // small enough that no anchor entry changes sign, which would redraw the noise octant
        let step = 1e-6 / norm2.sqrt();
        moved.add_scaled(&here.grad, -step);
        let there = at(&moved).report.total;
        assert!(there < here.report.total, "{method}: {} -> {there}", here.report.total);
        // first-order prediction
        let predicted = here.report.total - step * norm2;
        assert!((there - predicted).abs() < 0.1 * (here.report.total - predicted), "{method}");
    }
}
