//! Datasets whose next-item signal is carried by one modality, both, or
//! only their combination, plus an MI oracle to certify them.
//!
//! Every item has one latent bit per modality, assigned so that all bit
//! combinations are equally frequent, and belongs to the class given by
//! its own signal. Its content is a fixed Gaussian codeword per bit value
//! plus noise. After an item, the next item is drawn uniformly from the
//! class given by the item's signal (flipped with probability ε), so
//! sequences mostly stay inside one class:
//!
//! | variant | signal |
//! |---------|--------|
//! | `unique_img` | `b_img` |
//! | `unique_txt` | `b_txt` |
//! | `redundant` | `b_img` (= `b_txt`) |
//! | `synergy_xor` | `b_img ⊕ b_txt` |

mod mi;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_embeddings, write_interactions, EmbeddingTable, InteractionDataset, ItemFeatures};
use crate::error::{Error, Result};
use crate::prism::ExpertKind;
use crate::seed::{self, Stream};
use crate::training::SeedReport;

pub use mi::{classify_interaction, discrete_mi, InteractionType, MiEstimate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PidVariant {
    UniqueImg,
    UniqueTxt,
    Redundant,
    SynergyXor,
}

impl PidVariant {
    pub const ALL: [PidVariant; 4] = [
        PidVariant::UniqueImg,
        PidVariant::UniqueTxt,
        PidVariant::Redundant,
        PidVariant::SynergyXor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PidVariant::UniqueImg => "unique_img",
            PidVariant::UniqueTxt => "unique_txt",
            PidVariant::Redundant => "redundant",
            PidVariant::SynergyXor => "synergy_xor",
        }
    }

    pub fn signal(self, b_img: u8, b_txt: u8) -> u8 {
        match self {
            PidVariant::UniqueImg | PidVariant::Redundant => b_img,
            PidVariant::UniqueTxt => b_txt,
            PidVariant::SynergyXor => b_img ^ b_txt,
        }
    }

    /// MI signature the variant should produce.
    pub fn expected_type(self) -> InteractionType {
        match self {
            PidVariant::UniqueImg => InteractionType::UniqueX1,
            PidVariant::UniqueTxt => InteractionType::UniqueX2,
            PidVariant::Redundant => InteractionType::Redundant,
            PidVariant::SynergyXor => InteractionType::Synergy,
        }
    }

    /// Expert kind that should dominate the fusion weights.
    pub fn expected_expert(self) -> ExpertKind {
        match self {
            PidVariant::UniqueImg => ExpertKind::UniI,
            PidVariant::UniqueTxt => ExpertKind::UniT,
            PidVariant::Redundant => ExpertKind::Rdn,
            PidVariant::SynergyXor => ExpertKind::Syn,
        }
    }
}

impl fmt::Display for PidVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PidVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown scenario {s:?}; expected one of unique_img, unique_txt, redundant, synergy_xor")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidScenario {
    pub variant: PidVariant,
    pub num_users: usize,
    pub num_items: usize,
    pub seq_len: usize,
    /// Extra label-independent bits per modality mixed into the content
    /// on top of the signal bit.
    pub catalog_bits: usize,
    /// Probability of flipping the next-item class.
    pub noise: f64,
    pub embedding_dim: usize,
    pub embedding_noise: f64,
    pub seed: u64,
}

impl PidScenario {
    pub fn new(variant: PidVariant, seed: u64) -> Self {
        Self {
            variant,
            num_users: 5000,
            num_items: 200,
            seq_len: 20,
            catalog_bits: 0,
            noise: 0.05,
            embedding_dim: 16,
            embedding_noise: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::config(format!("scenario noise {} must lie in [0, 0.5)", self.noise)));
        }
        if self.num_items < 4 || self.num_users == 0 || self.seq_len < 3 || self.embedding_dim == 0 {
            return Err(Error::config("scenario needs ≥ 4 items, ≥ 1 user, sequences of ≥ 3 and a positive embedding dim"));
        }
        if self.catalog_bits > 16 {
            return Err(Error::config("catalog_bits must be at most 16"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemTruth {
    pub item_id: u64,
    pub b_img: u8,
    pub b_txt: u8,
    pub class: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scenario: PidScenario,
    pub items: Vec<ItemTruth>,
}

impl GroundTruth {
    fn by_id(&self) -> BTreeMap<u64, ItemTruth> {
        self.items.iter().map(|t| (t.item_id, *t)).collect()
    }

    /// `(class of next item, b_img, b_txt of current item)` for every
    /// consecutive pair of every sequence.
    pub fn transitions(&self, ds: &InteractionDataset) -> Vec<(u32, u32, u32)> {
        let by_id = self.by_id();
        let mut out = Vec::new();
        for seq in &ds.sequences {
            for w in seq.windows(2) {
                let cur = by_id[&ds.raw_item(w[0])];
                let next = by_id[&ds.raw_item(w[1])];
                out.push((next.class as u32, cur.b_img as u32, cur.b_txt as u32));
            }
        }
        out
    }

    /// Share of transitions whose next class equals the current signal.
    pub fn transition_accuracy(&self, ds: &InteractionDataset) -> f64 {
        let t = self.transitions(ds);
        let v = self.scenario.variant;
        let hits = t.iter().filter(|&&(c, a, b)| c as u8 == v.signal(a as u8, b as u8)).count();
        hits as f64 / t.len().max(1) as f64
    }
}

pub struct SyntheticDataset {
    pub dataset: InteractionDataset,
    pub image: EmbeddingTable,
    pub text: EmbeddingTable,
    pub truth: GroundTruth,
}

impl SyntheticDataset {
    pub fn features(&self) -> Result<ItemFeatures> {
        ItemFeatures::build(&self.dataset, &self.image, &self.text)
    }

    pub fn mi(&self) -> MiEstimate {
        discrete_mi(&self.truth.transitions(&self.dataset))
    }

    /// `interactions.tsv`, `image.prem`, `text.prem` and `truth.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_interactions(&self.dataset, &dir.join("interactions.tsv"))?;
        write_embeddings(&self.image, &dir.join("image.prem"))?;
        write_embeddings(&self.text, &dir.join("text.prem"))?;
        let truth = dir.join("truth.json");
        std::fs::write(&truth, serde_json::to_string_pretty(&self.truth)?).map_err(|e| Error::io(truth, e))
    }
}

fn codeword<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Content vector: the signal codeword, plus one codeword per catalog
/// bit, plus Gaussian noise.
fn content<R: Rng>(words: &[[Vec<f64>; 2]], bits: &[u8], noise: f64, rng: &mut R) -> Vec<f32> {
    let dim = words[0][0].len();
    (0..dim)
        .map(|d| {
            let mut v: f64 = words.iter().zip(bits).map(|(w, &b)| w[b as usize][d]).sum();
            let n: f64 = StandardNormal.sample(rng);
            v += noise * n;
            v as f32
        })
        .collect()
}

/// Deterministic in `s`; item ids are `1..=num_items`, users `u0000…`.
pub fn generate_pid_dataset(s: &PidScenario) -> Result<SyntheticDataset> {
    s.validate()?;
    let mut rng = seed::rng(s.seed, Stream::Synthetic, 0);
    let n = s.num_items;

    let combos: usize = if s.variant == PidVariant::Redundant { 2 } else { 4 };
    let mut bits: Vec<(u8, u8)> = (0..n)
        .map(|i| {
            let k = i % combos;
            if combos == 2 {
                (k as u8, k as u8)
            } else {
                ((k & 1) as u8, (k >> 1) as u8)
            }
        })
        .collect();
    bits.shuffle(&mut rng);
    let items: Vec<ItemTruth> = bits
        .iter()
        .enumerate()
        .map(|(i, &(b_img, b_txt))| ItemTruth {
            item_id: i as u64 + 1,
            b_img,
            b_txt,
            class: s.variant.signal(b_img, b_txt),
        })
        .collect();

    let words = |rng: &mut _| -> Vec<[Vec<f64>; 2]> {
        (0..=s.catalog_bits)
            .map(|_| [codeword(s.embedding_dim, rng), codeword(s.embedding_dim, rng)])
            .collect()
    };
    let (img_words, txt_words) = (words(&mut rng), words(&mut rng));
    let mut image = EmbeddingTable::new(s.embedding_dim);
    let mut text = EmbeddingTable::new(s.embedding_dim);
    for t in &items {
        let extra = |rng: &mut _| -> Vec<u8> { (0..s.catalog_bits).map(|_| Rng::gen_range(rng, 0..2)).collect() };
        let mut ib = vec![t.b_img];
        ib.extend(extra(&mut rng));
        let mut tb = vec![t.b_txt];
        tb.extend(extra(&mut rng));
        image.insert(t.item_id, content(&img_words, &ib, s.embedding_noise, &mut rng))?;
        text.insert(t.item_id, content(&txt_words, &tb, s.embedding_noise, &mut rng))?;
    }

    let by_class: [Vec<usize>; 2] = [0, 1].map(|c| (0..n).filter(|&i| items[i].class == c).collect());
    let mut raw = BTreeMap::new();
    for u in 0..s.num_users {
        let mut seq = Vec::with_capacity(s.seq_len);
        let mut cur = rng.gen_range(0..n);
        seq.push(items[cur].item_id);
        for _ in 1..s.seq_len {
            let mut c = s.variant.signal(items[cur].b_img, items[cur].b_txt);
            if rng.gen::<f64>() < s.noise {
                c ^= 1;
            }
            cur = *by_class[c as usize].choose(&mut rng).unwrap();
            seq.push(items[cur].item_id);
        }
        raw.insert(format!("u{u:05}"), seq);
    }
    let dataset = InteractionDataset::from_raw(raw);
    // every item must be reachable for the content tables to line up
    let missing: Vec<u64> = items
        .iter()
        .map(|t| t.item_id)
        .filter(|id| dataset.item_raw.binary_search(id).is_err())
        .collect();
    if !missing.is_empty() {
        return Err(Error::DatasetExhausted(format!(
            "{} items never sampled; raise num_users or seq_len",
            missing.len()
        )));
    }
    Ok(SyntheticDataset {
        dataset,
        image,
        text,
        truth: GroundTruth {
            scenario: s.clone(),
            items,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpecialization {
    pub variant: PidVariant,
    /// Mean fusion weights over seeds, `uni_i, uni_t, syn, rdn` order.
    pub mean_weights: [f64; 4],
    pub argmax: ExpertKind,
    /// Argmax expert of each seed.
    pub seed_argmax: Vec<ExpertKind>,
    /// Interaction losses of the last trained epoch, averaged over seeds.
    pub mean_losses: [f64; 4],
}

impl ScenarioSpecialization {
    /// Seeds whose argmax is the expert the variant calls for.
    pub fn hits(&self) -> usize {
        let want = self.variant.expected_expert();
        self.seed_argmax.iter().filter(|&&k| k == want).count()
    }
}

pub fn argmax_expert(w: &[f64; 4]) -> ExpertKind {
    let mut best = 0;
    for k in 1..4 {
        if w[k] > w[best] {
            best = k;
        }
    }
    ExpertKind::ALL[best]
}

/// Per scenario: fusion weights averaged over the test contexts of each
/// seed's model, and the argmax expert.
pub fn expert_specialization_report(runs: &[(PidVariant, Vec<SeedReport>)]) -> Vec<ScenarioSpecialization> {
    runs.iter()
        .map(|(variant, seeds)| {
            let n = seeds.len().max(1) as f64;
            let mut mean_weights = [0.0; 4];
            let mut mean_losses = [0.0; 4];
            for s in seeds {
                for k in 0..4 {
                    mean_weights[k] += s.fusion_weights[k] / n;
                    if let Some(last) = s.losses.last() {
                        mean_losses[k] += last.term(ExpertKind::ALL[k]) / n;
                    }
                }
            }
            ScenarioSpecialization {
                variant: *variant,
                mean_weights,
                argmax: argmax_expert(&mean_weights),
                seed_argmax: seeds.iter().map(|s| argmax_expert(&s.fusion_weights)).collect(),
                mean_losses,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: PidVariant, noise: f64) -> PidScenario {
        PidScenario {
            num_users: 400,
            num_items: 40,
            noise,
            ..PidScenario::new(variant, 3)
        }
    }

    #[test]
    fn redundant_items_share_bits() {
        let d = generate_pid_dataset(&small(PidVariant::Redundant, 0.05)).unwrap();
        assert!(d.truth.items.iter().all(|t| t.b_img == t.b_txt));
    }

    #[test]
    fn noiseless_transitions_follow_the_signal() {
        for v in PidVariant::ALL {
            let d = generate_pid_dataset(&small(v, 0.0)).unwrap();
            assert_eq!(d.truth.transition_accuracy(&d.dataset), 1.0, "{v}");
        }
        let noisy = generate_pid_dataset(&small(PidVariant::SynergyXor, 0.2)).unwrap();
        let acc = noisy.truth.transition_accuracy(&noisy.dataset);
        assert!((acc - 0.8).abs() < 0.03, "{acc}");
    }

    #[test]
    fn generation_is_deterministic() {
        let s = small(PidVariant::SynergyXor, 0.05);
        let (a, b) = (generate_pid_dataset(&s).unwrap(), generate_pid_dataset(&s).unwrap());
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.image.encode(), b.image.encode());
        assert_eq!(a.text.encode(), b.text.encode());
        let c = generate_pid_dataset(&PidScenario { seed: 4, ..s }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn classes_are_balanced_and_content_separates_bits() {
        let d = generate_pid_dataset(&small(PidVariant::UniqueImg, 0.05)).unwrap();
        let ones = d.truth.items.iter().filter(|t| t.class == 1).count();
        assert_eq!(ones, 20);
        assert!(d.truth.items.iter().all(|t| t.class == t.b_img));
        // same image bit ⇒ image vectors within noise of each other
        let t = &d.truth.items;
        let j = (1..t.len()).find(|&j| t[j].b_img == t[0].b_img).unwrap();
        let k = (1..t.len()).find(|&k| t[k].b_img != t[0].b_img).unwrap();
        let dist = |a: u64, b: u64| -> f32 {
            let (x, y) = (&d.image.vectors[&a], &d.image.vectors[&b]);
            x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f32>().sqrt()
        };
        assert!(dist(t[0].item_id, t[j].item_id) < 1.5);
        assert!(dist(t[0].item_id, t[k].item_id) > dist(t[0].item_id, t[j].item_id));
    }

    #[test]
    fn unknown_names_and_bad_noise_are_rejected() {
        assert!("synergy".parse::<PidVariant>().is_err());
        assert_eq!("synergy_xor".parse::<PidVariant>().unwrap(), PidVariant::SynergyXor);
        assert!(generate_pid_dataset(&small(PidVariant::UniqueImg, 0.5)).is_err());
    }

    #[test]
    fn files_round_trip() {
        let d = generate_pid_dataset(&small(PidVariant::UniqueTxt, 0.05)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path()).unwrap();
        let ds = crate::data::load_interactions(&dir.path().join("interactions.tsv")).unwrap();
        assert_eq!(ds, d.dataset);
        let img = crate::data::load_modality_embeddings(&dir.path().join("image.prem"), Some(16)).unwrap();
        assert_eq!(img, d.image);
        let truth: GroundTruth =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("truth.json")).unwrap()).unwrap();
        assert_eq!(truth, d.truth);
    }

    #[test]
    fn argmax_picks_first_maximum() {
        assert_eq!(argmax_expert(&[0.1, 0.2, 0.4, 0.3]), ExpertKind::Syn);
        assert_eq!(argmax_expert(&[0.25; 4]), ExpertKind::UniI);
    }
}
