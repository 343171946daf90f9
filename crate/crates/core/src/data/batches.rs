use rand::seq::SliceRandom;
use rand::Rng;

use super::interactions::SplitView;
use crate::error::{Error, Result};
use crate::seed::{self, Stream};

/// Left-padded sequences flattened row-major to `users.len() × len`.
///
/// `positions[r]` indexes the positional table: real items of a row are
/// numbered `0..n` from the oldest kept item; padding rows hold 0 in
/// every id field.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub users: Vec<usize>,
    pub len: usize,
    pub items: Vec<usize>,
    pub positions: Vec<usize>,
    pub valid: Vec<bool>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.users.len()
    }

    pub fn rows(&self) -> usize {
        self.items.len()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Batch of evaluation contexts: each truncated to its most recent
    /// `max_len` items, no targets.
    pub fn contexts(users: &[usize], contexts: &[&[usize]], max_len: usize) -> Self {
        let seqs: Vec<&[usize]> = contexts
            .iter()
            .map(|c| &c[c.len().saturating_sub(max_len)..])
            .collect();
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
        let mut b = Self::empty(users.to_vec(), len);
        for (row, s) in seqs.iter().enumerate() {
            let pad = len - s.len();
            for (t, &item) in s.iter().enumerate() {
                let r = row * len + pad + t;
                b.items[r] = item;
                b.positions[r] = t;
                b.valid[r] = true;
            }
        }
        b
    }

    fn empty(users: Vec<usize>, len: usize) -> Self {
        let n = users.len() * len;
        Self {
            users,
            len,
            items: vec![0; n],
            positions: vec![0; n],
            valid: vec![false; n],
            positives: vec![0; n],
            negatives: vec![0; n],
        }
    }
}

/// Training batches for one epoch.
///
/// Each user's training prefix is truncated to its most recent `max_len`
/// items; position `t` predicts the item at `t + 1` against one negative
/// drawn uniformly from the catalog, redrawn while it equals the positive.
/// User order is a permutation drawn from `(seed, epoch)`, so the stream
/// is a pure function of its arguments.
pub fn make_batches(
    split: &SplitView,
    max_len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    if max_len < 2 {
        return Err(Error::config("max_len must be at least 2"));
    }
    if split.num_items < 2 {
        return Err(Error::config("negative sampling needs at least 2 items"));
    }
    let mut rng = seed::rng(seed, Stream::Batching, epoch);
    let mut order: Vec<usize> = (0..split.users.len())
        .filter(|&i| split.users[i].train.len() >= 2)
        .collect();
    order.shuffle(&mut rng);

    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let windows: Vec<&[usize]> = chunk
            .iter()
            .map(|&i| {
                let tr = &split.users[i].train;
                &tr[tr.len().saturating_sub(max_len)..]
            })
            .collect();
        let len = windows.iter().map(|w| w.len() - 1).max().unwrap();
        let users = chunk.iter().map(|&i| split.users[i].user).collect();
        let mut b = Batch::empty(users, len);
        for (row, w) in windows.iter().enumerate() {
            let n = w.len() - 1;
            let pad = len - n;
            for t in 0..n {
                let r = row * len + pad + t;
                b.items[r] = w[t];
                b.positions[r] = t;
                b.valid[r] = true;
                b.positives[r] = w[t + 1];
                b.negatives[r] = sample_negative(&mut rng, split.num_items, w[t + 1]);
            }
        }
        batches.push(b);
    }
    Ok(batches)
}

fn sample_negative<R: Rng>(rng: &mut R, num_items: usize, positive: usize) -> usize {
    loop {
        let c = rng.gen_range(1..=num_items);
        if c != positive {
            return c;
        }
    }
}
