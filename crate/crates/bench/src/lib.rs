//! Shared fixtures for the benches in `benches/`.

use s2h_core::data::{gen_synthetic, Batch, SyntheticKind};
use s2h_core::{ModelGraph, ModelSpec, PruneRunConfig};

/// A 2 -> width -> width -> 3 MLP, one blobs batch of `batch` rows, and the
/// default run config at `T = 0.35`.
pub fn fixture(width: usize, batch: usize) -> (ModelGraph, Batch, PruneRunConfig) {
    let mut g = ModelGraph::new(ModelSpec::mlp(2, &[width, width], 3), 0).expect("valid mlp");
    g.refresh_masks();
    let data = gen_synthetic(SyntheticKind::Blobs, batch.max(16) * 2, 3, 0.6, 0).expect("blobs");
    let idx: Vec<usize> = (0..batch.min(data.train.len())).collect();
    let cfg = PruneRunConfig {
        target: 0.35,
        ..Default::default()
    };
    (g, data.train.select(&idx), cfg)
}
