//! Interaction logs, modality embeddings, filtering, splitting and
//! batching.

pub mod batches;
pub mod embeddings;
pub mod interactions;

pub use batches::{make_batches, Batch};
pub use embeddings::{
    load_modality_embeddings, write_embeddings, EmbeddingTable, ItemFeatures, ItemRecord,
};
pub use interactions::{
    five_core_filter, leave_one_out_split, load_interactions, parse_interactions,
    split_manifest_json, write_interactions, InteractionDataset, SplitView, UserSplit,
};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::numerics::layers::normal;
use crate::numerics::Tensor;
use crate::seed::{self, Stream};

fn with_features(ds: InteractionDataset, rng: &mut impl Rng) -> (InteractionDataset, ItemFeatures) {
    let n = ds.num_items();
    let mut image: Tensor<f32> = normal(n + 1, 6, 1.0, rng);
    let mut text: Tensor<f32> = normal(n + 1, 4, 1.0, rng);
    image.row_mut(0).fill(0.0);
    text.row_mut(0).fill(0.0);
    (ds, ItemFeatures { image, text })
}

/// Every user walks the same random cycle through all `items` items
/// from a random start, so each next item is fixed by the current one.
pub fn memorizable_dataset(users: usize, items: usize, len: usize, seed: u64) -> (InteractionDataset, ItemFeatures) {
    let mut rng = seed::rng(seed, Stream::Synthetic, 1);
    let mut cycle: Vec<u64> = (1..=items as u64).collect();
    cycle.shuffle(&mut rng);
    let mut raw = BTreeMap::new();
    for u in 0..users {
        let start = rng.gen_range(0..items);
        let seq = (0..len).map(|t| cycle[(start + t) % items]).collect();
        raw.insert(format!("u{u:03}"), seq);
    }
    with_features(InteractionDataset::from_raw(raw), &mut rng)
}

/// Uniformly random sequences over `items` items with Gaussian 6-d image
/// and 4-d text features. Users are `u000…`.
pub fn random_dataset(users: usize, items: usize, len: usize, seed: u64) -> (InteractionDataset, ItemFeatures) {
    let mut rng = seed::rng(seed, Stream::Synthetic, 0);
    let mut raw = BTreeMap::new();
    for u in 0..users {
        let seq: Vec<u64> = (0..len).map(|_| rng.gen_range(1..=items as u64)).collect();
        raw.insert(format!("u{u:03}"), seq);
    }
    with_features(InteractionDataset::from_raw(raw), &mut rng)
}
