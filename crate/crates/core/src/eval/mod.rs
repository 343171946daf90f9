//! Leave-one-out ranking evaluation and cost measurement.

mod complexity;

use std::collections::{BTreeMap, HashSet};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, SplitView};
use crate::error::{Error, Result};
use crate::model::PrismModel;
use crate::numerics::Real;

pub use complexity::{measure_complexity, peak_rss_bytes, reset_peak_rss, ComplexityReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Drop items already in the context from the candidates (the
    /// ground truth always stays).
    pub exclude_seen: bool,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![10, 20],
            exclude_seen: false,
            batch_size: 256,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::config("eval.ks must be a non-empty list of positive cutoffs"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("eval.batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankResult {
    pub user: usize,
    pub truth: usize,
    /// 1-based.
    pub rank: usize,
}

/// 1 + #items scored strictly higher + #items tied with a smaller id.
pub fn rank_items<T: PartialOrd + Copy>(scores: impl IntoIterator<Item = (u64, T)>, truth: u64) -> Result<usize> {
    let scores: Vec<(u64, T)> = scores.into_iter().collect();
    let Some(&(_, t)) = scores.iter().find(|&&(id, _)| id == truth) else {
        return Err(Error::Eval(format!("ground-truth item {truth} has no score")));
    };
    let ahead = scores
        .iter()
        .filter(|&&(id, s)| s > t || (s == t && id < truth))
        .count();
    Ok(1 + ahead)
}

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Valid,
    Test,
}

/// Metric name → value, named like `R@10` and `N@20`.
pub type Metrics = BTreeMap<String, f64>;

pub fn metric_name(kind: char, k: usize) -> String {
    format!("{kind}@{k}")
}

/// Mean R@K and N@K over a set of ranks.
pub fn summarize(ranks: &[RankResult], ks: &[usize]) -> Metrics {
    let n = ranks.len().max(1) as f64;
    let mut out = Metrics::new();
    for &k in ks {
        let r: f64 = ranks.iter().map(|x| recall_at_k(x.rank, k)).sum();
        let d: f64 = ranks.iter().map(|x| ndcg_at_k(x.rank, k)).sum();
        out.insert(metric_name('R', k), r / n);
        out.insert(metric_name('N', k), d / n);
    }
    out
}

/// Ranks the held-out item of every user against the full catalog.
pub fn evaluate<T: Real>(model: &PrismModel<T>, split: &SplitView, stage: Stage, cfg: &EvalConfig) -> Result<Vec<RankResult>> {
    let max_len = model.config().max_len;
    let mut ranks = Vec::with_capacity(split.users.len());
    for chunk in split.users.chunks(cfg.batch_size.max(1)) {
        let contexts: Vec<Vec<usize>> = chunk
            .iter()
            .map(|u| match stage {
                Stage::Valid => u.valid_context().to_vec(),
                Stage::Test => u.test_context(),
            })
            .collect();
        let refs: Vec<&[usize]> = contexts.iter().map(|c| c.as_slice()).collect();
        let users: Vec<usize> = chunk.iter().map(|u| u.user).collect();
        let batch = Batch::contexts(&users, &refs, max_len);
        let scores = model.score_batch(&batch)?;
        for (b, u) in chunk.iter().enumerate() {
            let truth = match stage {
                Stage::Valid => u.valid,
                Stage::Test => u.test,
            };
            let row = scores.row(b);
            let seen: HashSet<usize> = if cfg.exclude_seen {
                contexts[b].iter().copied().filter(|&i| i != truth).collect()
            } else {
                HashSet::new()
            };
            let t = row[truth];
            if !t.is_finite() {
                return Err(Error::Eval(format!("non-finite score for user {}", u.user)));
            }
            let ahead = (1..row.len())
                .filter(|i| !seen.contains(i))
                .filter(|&i| row[i] > t || (row[i] == t && i < truth))
                .count();
            ranks.push(RankResult {
                user: u.user,
                truth,
                rank: ahead + 1,
            });
        }
    }
    Ok(ranks)
}

/// Mean and sample standard deviation per metric over seeds.
pub fn aggregate(per_seed: &[Metrics]) -> (Metrics, Metrics) {
    let mut mean = Metrics::new();
    let mut std = Metrics::new();
    let n = per_seed.len();
    if n == 0 {
        return (mean, std);
    }
    for key in per_seed[0].keys() {
        let vals: Vec<f64> = per_seed.iter().map(|m| m[key]).collect();
        let mu = vals.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        mean.insert(key.clone(), mu);
        std.insert(key.clone(), var.sqrt());
    }
    (mean, std)
}

/// `metric,K,mean,std,n_seeds` with recall rows before NDCG rows.
pub fn metrics_csv(per_seed: &[Metrics], ks: &[usize]) -> String {
    let (mean, std) = aggregate(per_seed);
    let mut out = String::from("metric,K,mean,std,n_seeds\n");
    for kind in ['R', 'N'] {
        for &k in ks {
            let key = metric_name(kind, k);
            let (m, s) = (mean.get(&key).copied().unwrap_or(0.0), std.get(&key).copied().unwrap_or(0.0));
            out.push_str(&format!("{kind},{k},{m:.6},{s:.6},{}\n", per_seed.len()));
        }
    }
    out
}
