use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, ItemFeatures, SplitView};
use crate::error::Result;
use crate::model::PrismModel;
use crate::numerics::AdamState;
use crate::training::{train_epoch, TrainConfig};

/// Per-epoch training cost of a configuration against a baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    /// Median over the timed epochs.
    pub seconds_per_epoch: f64,
    pub baseline_seconds_per_epoch: f64,
    /// `seconds_per_epoch / baseline_seconds_per_epoch`.
    pub ratio: f64,
    pub peak_rss_bytes: u64,
    pub baseline_peak_rss_bytes: u64,
    pub expert_passes_per_step: f64,
    pub timed_epochs: usize,
}

/// `VmHWM` of this process.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Resets the high-water mark where the kernel allows it.
pub fn reset_peak_rss() {
    let _ = std::fs::write("/proc/self/clear_refs", "5");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

struct Cost {
    seconds: f64,
    peak: u64,
    passes_per_step: f64,
}

fn cost(cfg: &TrainConfig, split: &SplitView, features: &ItemFeatures, timed_epochs: usize) -> Result<Cost> {
    let seed = cfg.train.seeds.first().copied().unwrap_or(0);
    let mut model = PrismModel::<f32>::new(cfg.model.clone(), cfg.prism.clone(), features, seed)?;
    let mut opt = AdamState::new(&model.store, cfg.train.adam());
    reset_peak_rss();
    let mut times = Vec::new();
    let mut steps = 0usize;
    for epoch in 0..=timed_epochs {
        let batches = make_batches(split, cfg.model.max_len, cfg.train.batch_size, seed, epoch as u64)?;
        if epoch == 1 {
            model.net.reset_expert_passes();
        }
        let start = Instant::now();
        train_epoch(&mut model, &batches, &mut opt, cfg, seed, epoch)?;
        // epoch 0 is the warm-up
        if epoch > 0 {
            times.push(start.elapsed().as_secs_f64());
            steps += batches.len();
        }
    }
    Ok(Cost {
        seconds: median(times),
        peak: peak_rss_bytes().unwrap_or(0),
        passes_per_step: model.expert_passes() as f64 / steps.max(1) as f64,
    })
}

/// Times `timed_epochs` epochs (at least 3) of `cfg` and of `baseline`
/// after one warm-up epoch each.
pub fn measure_complexity(
    cfg: &TrainConfig,
    baseline: &TrainConfig,
    split: &SplitView,
    features: &ItemFeatures,
    timed_epochs: usize,
) -> Result<ComplexityReport> {
    let timed_epochs = timed_epochs.max(3);
    let base = cost(baseline, split, features, timed_epochs)?;
    let on = cost(cfg, split, features, timed_epochs)?;
    Ok(ComplexityReport {
        seconds_per_epoch: on.seconds,
        baseline_seconds_per_epoch: base.seconds,
        ratio: on.seconds / base.seconds.max(1e-12),
        peak_rss_bytes: on.peak,
        baseline_peak_rss_bytes: base.peak,
        expert_passes_per_step: on.passes_per_step,
        timed_epochs,
    })
}
