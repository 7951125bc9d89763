//! Benchmark fixtures shared by the criterion targets in `benches/`.

use gclrec::data::split_dataset;
use gclrec::synth::{generate, SynthConfig};
use gclrec::{InteractionDataset, SplitRatio};

/// A synthetic corpus with roughly `edges` interactions, split 7:1:2.
pub fn corpus(edges: usize) -> InteractionDataset {
    let raw = generate(&SynthConfig::with_edges(edges, 0)).expect("valid synthetic config");
    split_dataset(&raw, SplitRatio::default(), 0)
}
