use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::backbone::RecLoss;
use crate::data::{five_core_filter, load_interactions, load_modality_embeddings, InteractionDataset, ItemFeatures};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::{ModelConfig, PrismConfig};
use crate::numerics::AdamConfig;
use crate::prism::ExpertKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub rec_loss: RecLoss,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Epochs without a validation N@10 improvement before stopping;
    /// `null` trains for all epochs.
    pub patience: Option<usize>,
    /// Validate every this many epochs (and always after the last).
    pub eval_every: usize,
    pub seeds: Vec<u64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            rec_loss: RecLoss::Bce,
            batch_size: 128,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            epochs: 200,
            patience: Some(10),
            eval_every: 1,
            seeds: vec![0],
        }
    }
}

impl TrainSettings {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Everything that shapes a training run except the input files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub prism: PrismConfig,
    pub train: TrainSettings,
    pub eval: EvalConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.prism.validate()?;
        self.eval.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if t.epochs == 0 {
            return Err(Error::config("train.epochs must be positive"));
        }
        if t.eval_every == 0 {
            return Err(Error::config("train.eval_every must be positive"));
        }
        if t.seeds.is_empty() {
            return Err(Error::config("train.seeds must list at least one seed"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::config(format!("train.lr = {} must be positive", t.lr)));
        }
        for (name, b) in [("train.beta1", t.beta1), ("train.beta2", t.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} = {b} is outside [0, 1)")));
            }
        }
        if t.adam_eps <= 0.0 {
            return Err(Error::config("train.adam_eps must be positive"));
        }
        if !self.eval.ks.contains(&10) {
            return Err(Error::config("eval.ks must include 10 (model selection uses N@10)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub interactions: PathBuf,
    pub image_embeddings: PathBuf,
    pub text_embeddings: PathBuf,
    #[serde(default = "yes")]
    pub five_core: bool,
}

fn yes() -> bool {
    true
}

impl DataConfig {
    /// `interactions.tsv`, `image.prem` and `text.prem` inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            interactions: dir.join("interactions.tsv"),
            image_embeddings: dir.join("image.prem"),
            text_embeddings: dir.join("text.prem"),
            five_core: true,
        }
    }

    /// Reads the three files and applies the 5-core filter when enabled.
    pub fn load(&self) -> Result<(InteractionDataset, ItemFeatures)> {
        let mut ds = load_interactions(&self.interactions)?;
        if self.five_core {
            ds = five_core_filter(&ds)?;
        }
        let image = load_modality_embeddings(&self.image_embeddings, None)?;
        let text = load_modality_embeddings(&self.text_embeddings, None)?;
        let features = ItemFeatures::build(&ds, &image, &text)?;
        Ok((ds, features))
    }

    /// Relative paths are taken against `base`.
    pub fn resolve(&self, base: &Path) -> Self {
        let r = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        Self {
            interactions: r(&self.interactions),
            image_embeddings: r(&self.image_embeddings),
            text_embeddings: r(&self.text_embeddings),
            five_core: self.five_core,
        }
    }
}

/// The config file of `prism train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub prism: PrismConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Parses and validates; errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().to_string();
            Error::Config(field_message(&path, &inner))
        })?;
        cfg.training().validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data = cfg.data.resolve(base);
        Ok(cfg)
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            prism: self.prism.clone(),
            train: self.train.clone(),
            eval: self.eval.clone(),
        }
    }
}

fn field_message(path: &str, inner: &str) -> String {
    let prefix = if path == "." { String::new() } else { format!("{path}.") };
    if let Some(rest) = inner.strip_prefix("missing field `") {
        let field = rest.split('`').next().unwrap_or(rest);
        return format!("missing required field {prefix}{field}");
    }
    if let Some(rest) = inner.strip_prefix("unknown field `") {
        let field = rest.split('`').next().unwrap_or(rest);
        return format!("unknown field {prefix}{field}: {inner}");
    }
    if path == "." {
        inner.to_string()
    } else {
        format!("{path}: {inner}")
    }
}

/// Coefficient values tried per λ when tuning.
pub const LAMBDA_GRID: [f64; 6] = [0.01, 0.05, 0.1, 0.2, 0.5, 1.0];

/// One-at-a-time sweep: each λ walks the grid while the others keep
/// their values in `base`.
pub fn lambda_sweep(base: &TrainConfig) -> Vec<(ExpertKind, f64, TrainConfig)> {
    let mut out = Vec::new();
    for kind in ExpertKind::ALL {
        for v in LAMBDA_GRID {
            let mut cfg = base.clone();
            cfg.prism.lambdas.set(kind, v);
            out.push((kind, v, cfg));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"data": {"interactions": "a.tsv", "image_embeddings": "i.prem", "text_embeddings": "t.prem"}}"#;

    fn err(text: &str) -> String {
        ExperimentConfig::from_json(text).unwrap_err().to_string()
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.training(), TrainConfig::default());
        assert!(cfg.data.five_core);
        assert_eq!(cfg.prism.lambdas.rdn, 0.5);
    }

    #[test]
    fn missing_field_is_named() {
        let e = err(r#"{"data": {"image_embeddings": "i", "text_embeddings": "t"}}"#);
        assert!(e.contains("data.interactions"), "{e}");
        assert!(err("{}").contains("missing required field data"));
    }

    #[test]
    fn typo_in_lambda_is_rejected() {
        let text = MINIMAL.replace("}}", r#"}, "prism": {"lambdas": {"synn": 0.1}}}"#);
        let e = err(&text);
        assert!(e.contains("prism.lambdas.synn"), "{e}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        let bad_lambda = MINIMAL.replace("}}", r#"}, "prism": {"lambdas": {"syn": 1.5}}}"#);
        assert!(err(&bad_lambda).contains("syn"));
        let all_dropped = MINIMAL.replace(
            "}}",
            r#"}, "prism": {"ablation": {"drop_uni_i": true, "drop_uni_t": true, "drop_syn": true, "drop_rdn": true}}}"#,
        );
        assert!(err(&all_dropped).contains("drops all four"));
        let no_seeds = MINIMAL.replace("}}", r#"}, "train": {"seeds": []}}"#);
        assert!(err(&no_seeds).contains("seeds"));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let d = cfg.data.resolve(Path::new("/x/y"));
        assert_eq!(d.interactions, PathBuf::from("/x/y/a.tsv"));
    }

    #[test]
    fn sweep_varies_one_coefficient() {
        let base = TrainConfig::default();
        let sweep = lambda_sweep(&base);
        assert_eq!(sweep.len(), 24);
        for (kind, v, cfg) in sweep {
            for other in ExpertKind::ALL {
                let expect = if other == kind { v } else { base.prism.lambdas.get(other) };
                assert_eq!(cfg.prism.lambdas.get(other), expect);
            }
        }
    }
}
