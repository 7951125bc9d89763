//! Graph collaborative filtering with contrastive objectives.
//!
//! The crate covers the whole pipeline: ingesting and splitting interaction logs
//! ([`data`]), the normalized user-item adjacency ([`graph`]), embedding propagation and
//! noise augmentation ([`model`]), losses with analytic gradients ([`loss`]), training
//! and sweeps ([`train`]), and full-ranking evaluation ([`eval`]).

pub mod config;
pub mod data;
pub mod dense;
pub mod error;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod model;
pub mod synth;
pub mod timing;
pub mod train;

pub use config::{ContrastLayer, Method, TrainConfig};
pub use data::{InteractionDataset, PopularityGroups, RawInteractions, SplitRatio, UserItems};
pub use dense::DenseMatrix;
pub use error::{Error, Result};
pub use eval::{EvalReport, RankingMetrics, UniformitySample};
pub use graph::SparseAdjacency;
pub use loss::{Batch, ContrastAnchor, LossReport};
pub use model::{NoiseKind, NoiseSpec};
pub use train::{TrainOutcome, TrainTrace};
