//! Interaction Expert Layer and Adaptive Fusion Layer.
//!
//! Four MLP experts fuse (image, text) item embeddings. Each is pushed
//! toward one interaction type by comparing its full-input prediction
//! `y` with the text-masked `y_img` and image-masked `y_txt` predictions:
//!
//! | expert | loss |
//! |--------|------|
//! | image-unique | `triplet(y, y_img, y_txt)` |
//! | text-unique  | `triplet(y, y_txt, y_img)` |
//! | synergy      | `½·[cos(y, y_img) + cos(y, y_txt)]` |
//! | redundancy   | `1 − ½·[cos(y, y_img) + cos(y, y_txt)]` |
//!
//! with `triplet(a, p, n) = max(0, m + d(a, p) − d(a, n))` and
//! `d = 1 − cos`. A reweighting MLP turns the four expert vectors plus
//! the item-ID embedding into softmax weights and fuses the experts.

mod experts;
mod fusion;
mod losses;
mod masking;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use experts::{Expert, ExpertBank};
pub use fusion::{adaptive_fusion, fuse_values, mean_fusion, ReweightNet};
pub use losses::{
    interaction_loss, interaction_loss_value, redundancy_loss, redundancy_value, synergy_loss,
    synergy_value, triplet_value, uniqueness_loss, InteractionLosses,
};
pub use masking::{mask_modality, MaskStrategy};

/// The four interaction types, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    UniI,
    UniT,
    Syn,
    Rdn,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 4] = [ExpertKind::UniI, ExpertKind::UniT, ExpertKind::Syn, ExpertKind::Rdn];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpertKind::UniI => "uni_i",
            ExpertKind::UniT => "uni_t",
            ExpertKind::Syn => "syn",
            ExpertKind::Rdn => "rdn",
        }
    }
}

impl std::fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-type weights of the interaction loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct LambdaWeights {
    pub uni_i: f64,
    pub uni_t: f64,
    pub syn: f64,
    pub rdn: f64,
}

impl Default for LambdaWeights {
    fn default() -> Self {
        Self {
            uni_i: 0.2,
            uni_t: 0.05,
            syn: 0.2,
            rdn: 0.5,
        }
    }
}

impl LambdaWeights {
    pub fn uniform(v: f64) -> Self {
        Self {
            uni_i: v,
            uni_t: v,
            syn: v,
            rdn: v,
        }
    }

    pub fn get(&self, kind: ExpertKind) -> f64 {
        match kind {
            ExpertKind::UniI => self.uni_i,
            ExpertKind::UniT => self.uni_t,
            ExpertKind::Syn => self.syn,
            ExpertKind::Rdn => self.rdn,
        }
    }

    pub fn set(&mut self, kind: ExpertKind, v: f64) {
        match kind {
            ExpertKind::UniI => self.uni_i = v,
            ExpertKind::UniT => self.uni_t = v,
            ExpertKind::Syn => self.syn = v,
            ExpertKind::Rdn => self.rdn = v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kind in ExpertKind::ALL {
            let v = self.get(kind);
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!(
                    "prism.lambdas.{kind} = {v} is outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Triplet margin `m > 0`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct TripletMargin(f64);

impl TripletMargin {
    pub const DEFAULT: Self = Self(1.0);

    pub fn new(m: f64) -> Result<Self> {
        if m > 0.0 && m.is_finite() {
            Ok(Self(m))
        } else {
            Err(Error::config(format!("triplet margin must be > 0, got {m}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for TripletMargin {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<f64> for TripletMargin {
    type Error = Error;
    fn try_from(m: f64) -> Result<Self> {
        Self::new(m)
    }
}

impl JsonSchema for TripletMargin {
    fn schema_name() -> String {
        "TripletMargin".into()
    }

    fn json_schema(_: &mut schemars::gen::SchemaGenerator) -> schemars::schema::Schema {
        let mut s = schemars::schema::SchemaObject {
            instance_type: Some(schemars::schema::InstanceType::Number.into()),
            ..Default::default()
        };
        s.number().exclusive_minimum = Some(0.0);
        s.into()
    }
}

impl From<TripletMargin> for f64 {
    fn from(m: TripletMargin) -> f64 {
        m.0
    }
}
