//! The backbone with PRISM plugged in. Per step: item features go through
//! every active expert, each expert is re-run with either modality masked
//! to produce the prediction triple for its interaction loss, and the
//! adaptive fusion of the full-input expert outputs is added to the
//! item-ID and positional embeddings before the sequence encoder.

use std::collections::{BTreeMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::backbone::{layout_of, rec_loss, score_rows, AttentionEncoder, BackboneKind, EmbeddingTables, RecLoss, SequenceEncoder};
use crate::data::{Batch, ItemFeatures};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Real, SeqLayout, Tensor, Var};
use crate::prism::{
    adaptive_fusion, interaction_loss, mask_modality, mean_fusion, redundancy_loss, synergy_loss, uniqueness_loss,
    ExpertBank, ExpertKind, LambdaWeights, MaskStrategy, ReweightNet, TripletMargin,
};
use crate::seed::{self, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub dim: usize,
    pub expert_hidden: usize,
    pub reweight_hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Separate sequence encoder per expert for the masked prediction
    /// passes instead of the shared one.
    pub per_expert_encoders: bool,
    /// Copies of each expert kind; 1 in normal use.
    pub expert_replicas: usize,
    /// Start every expert from the same parameters.
    pub identical_expert_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Attention,
            dim: 64,
            expert_hidden: 128,
            reweight_hidden: 64,
            blocks: 2,
            heads: 2,
            max_len: 50,
            dropout: 0.2,
            per_expert_encoders: false,
            expert_replicas: 1,
            identical_expert_init: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.dim", self.dim),
            ("model.expert_hidden", self.expert_hidden),
            ("model.reweight_hidden", self.reweight_hidden),
            ("model.expert_replicas", self.expert_replicas),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.max_len < 2 {
            return Err(Error::config("model.max_len must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("model.dropout = {} is outside [0, 1)", self.dropout)));
        }
        if self.backbone == BackboneKind::Attention {
            if self.blocks == 0 || self.heads == 0 {
                return Err(Error::config("model.blocks and model.heads must be positive"));
            }
            if !self.dim.is_multiple_of(self.heads) {
                return Err(Error::config(format!(
                    "model.dim = {} is not divisible by model.heads = {}",
                    self.dim, self.heads
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub drop_uni_i: bool,
    pub drop_uni_t: bool,
    pub drop_syn: bool,
    pub drop_rdn: bool,
    /// Uniform mean of the active experts instead of learned weights.
    pub drop_afl: bool,
}

impl Ablation {
    pub fn dropped(&self, kind: ExpertKind) -> bool {
        match kind {
            ExpertKind::UniI => self.drop_uni_i,
            ExpertKind::UniT => self.drop_uni_t,
            ExpertKind::Syn => self.drop_syn,
            ExpertKind::Rdn => self.drop_rdn,
        }
    }

    pub fn drop(mut self, kind: ExpertKind) -> Self {
        match kind {
            ExpertKind::UniI => self.drop_uni_i = true,
            ExpertKind::UniT => self.drop_uni_t = true,
            ExpertKind::Syn => self.drop_syn = true,
            ExpertKind::Rdn => self.drop_rdn = true,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if ExpertKind::ALL.iter().all(|&k| self.dropped(k)) {
            return Err(Error::config("prism.ablation drops all four experts; at most three may be dropped"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PrismConfig {
    /// `false` runs the bare backbone.
    pub enabled: bool,
    pub lambdas: LambdaWeights,
    pub margin: TripletMargin,
    pub mask_strategy: MaskStrategy,
    pub ablation: Ablation,
    /// Route interaction-loss gradients to expert parameters only.
    pub staged_updates: bool,
}

impl Default for PrismConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lambdas: LambdaWeights::default(),
            margin: TripletMargin::default(),
            mask_strategy: MaskStrategy::Random,
            ablation: Ablation::default(),
            staged_updates: false,
        }
    }
}

impl PrismConfig {
    pub fn validate(&self) -> Result<()> {
        self.lambdas.validate()?;
        self.ablation.validate()
    }
}

/// Graph handles of one training step.
#[derive(Clone, Debug)]
pub struct StepGraph {
    pub rec: Var,
    /// Interaction loss of every active expert, in bank order.
    pub terms: Vec<(ExpertKind, Var)>,
    pub exp: Var,
    pub total: Var,
}

/// Distinct valid items of a batch and, per row, the index of its item in
/// that list (0 for padding rows, which are masked out downstream).
struct ItemIndex {
    items: Vec<usize>,
    row_map: Vec<usize>,
    occurrences: Vec<f64>,
}

impl ItemIndex {
    fn of(batch: &Batch) -> Self {
        let mut pos: BTreeMap<usize, usize> = BTreeMap::new();
        for (&it, &v) in batch.items.iter().zip(&batch.valid) {
            if v {
                *pos.entry(it).or_insert(0) += 1;
            }
        }
        let items: Vec<usize> = pos.keys().copied().collect();
        let occurrences = pos.values().map(|&c| c as f64).collect();
        let index: BTreeMap<usize, usize> = items.iter().enumerate().map(|(i, &it)| (it, i)).collect();
        let row_map = batch
            .items
            .iter()
            .zip(&batch.valid)
            .map(|(it, &v)| if v { index[it] } else { 0 })
            .collect();
        Self {
            items,
            row_map,
            occurrences,
        }
    }
}

/// Architecture of the model: parameter handles, item features and the
/// expert-pass counter. Parameter values live in a separate store so
/// the same net can be evaluated against perturbed copies.
pub struct PrismNet<T> {
    pub config: ModelConfig,
    pub prism: PrismConfig,
    pub tables: EmbeddingTables,
    pub encoder: SequenceEncoder,
    pub expert_encoders: Vec<SequenceEncoder>,
    pub experts: ExpertBank,
    pub reweight: ReweightNet,
    image: Tensor<T>,
    text: Tensor<T>,
    expert_passes: AtomicU64,
}

/// Per-expert prediction triple `(y, y_img, y_txt)`, each `[B × |C|]`
/// logits over the candidate items `C` of the batch.
#[derive(Clone, Copy, Debug)]
pub struct Predictions {
    pub y: Var,
    pub y_img: Var,
    pub y_txt: Var,
}

fn build_encoder<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, prefix: &str, rng: &mut ChaCha8Rng) -> SequenceEncoder {
    match cfg.backbone {
        BackboneKind::MeanPool => SequenceEncoder::MeanPool,
        BackboneKind::Attention => SequenceEncoder::Attention(AttentionEncoder::new(
            store,
            prefix,
            cfg.dim,
            cfg.blocks,
            cfg.heads,
            cfg.dropout,
            rng,
        )),
    }
}

fn concat_rows<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, da, db) = (a.rows(), a.cols(), b.cols());
    let mut data = Vec::with_capacity(n * (da + db));
    for r in 0..n {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Tensor::new(&[n, da + db], data).unwrap()
}

fn select_rows<T: Real>(t: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let mut data = Vec::with_capacity(rows.len() * t.cols());
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(&[rows.len(), t.cols()], data).unwrap()
}

/// Sorted distinct item ids among the valid positives and negatives.
fn candidates(batch: &Batch) -> Vec<usize> {
    let mut c: Vec<usize> = batch
        .positives
        .iter()
        .zip(&batch.negatives)
        .zip(&batch.valid)
        .filter(|&(_, &v)| v)
        .flat_map(|((&p, &n), _)| [p, n])
        .collect();
    c.sort_unstable();
    c.dedup();
    c
}

impl<T: Real> PrismNet<T> {
    pub fn cast<U: Real>(&self) -> PrismNet<U> {
        PrismNet {
            config: self.config.clone(),
            prism: self.prism.clone(),
            tables: self.tables.clone(),
            encoder: self.encoder.clone(),
            expert_encoders: self.expert_encoders.clone(),
            experts: self.experts.clone(),
            reweight: self.reweight.clone(),
            image: self.image.cast(),
            text: self.text.cast(),
            expert_passes: AtomicU64::new(0),
        }
    }

    pub fn num_items(&self) -> usize {
        self.tables.num_items
    }

    /// Expert forward invocations since construction or the last reset.
    pub fn expert_passes(&self) -> u64 {
        self.expert_passes.load(Ordering::Relaxed)
    }

    pub fn reset_expert_passes(&self) {
        self.expert_passes.store(0, Ordering::Relaxed);
    }

    /// Bank indices of the experts that are not ablated.
    pub fn active_experts(&self) -> Vec<usize> {
        if !self.prism.enabled {
            return Vec::new();
        }
        (0..self.experts.len())
            .filter(|&k| !self.prism.ablation.dropped(self.experts.experts[k].kind))
            .collect()
    }

    pub fn expert_params(&self) -> HashSet<ParamId> {
        self.experts.params().into_iter().collect()
    }

    fn encoder_for(&self, k: usize) -> &SequenceEncoder {
        self.expert_encoders.get(k).unwrap_or(&self.encoder)
    }

    fn run_expert(&self, g: &mut Graph<T>, store: &ParamStore<T>, k: usize, input: Var) -> Var {
        self.expert_passes.fetch_add(1, Ordering::Relaxed);
        self.experts.experts[k].forward(g, store, input)
    }

    /// Full-input outputs of the active experts for `items`, indexed by
    /// bank position, plus the raw modality rows.
    fn expert_outputs(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        items: &[usize],
    ) -> (Tensor<T>, Tensor<T>, Vec<Option<Var>>) {
        let img = select_rows(&self.image, items);
        let txt = select_rows(&self.text, items);
        let full = g.constant(concat_rows(&img, &txt));
        let mut outs = vec![None; self.experts.len()];
        for k in self.active_experts() {
            outs[k] = Some(self.run_expert(g, store, k, full));
        }
        (img, txt, outs)
    }

    /// Fused vector per item and, unless the fusion layer is ablated,
    /// the softmax weights over the active experts.
    fn fuse(&self, g: &mut Graph<T>, store: &ParamStore<T>, items: &[usize], outs: &[Option<Var>]) -> (Option<Var>, Var) {
        if self.prism.ablation.drop_afl {
            let active: Vec<Var> = outs.iter().flatten().copied().collect();
            return (None, mean_fusion(g, &active));
        }
        let table = g.param(store, self.tables.item);
        let id = g.gather(table, items);
        let (w, f) = adaptive_fusion(g, store, &self.reweight, outs, id);
        (Some(w), f)
    }

    fn embed(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch,
        index: &ItemIndex,
        fused_items: Option<Var>,
    ) -> Result<Var> {
        let fused = fused_items.map(|f| g.gather(f, &index.row_map));
        self.tables.embed_positions(g, store, batch, fused)
    }

    /// Sequence-mean logits over `candidates` with the expert output `e`
    /// as the fused input.
    #[allow(clippy::too_many_arguments)]
    fn predict(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch,
        layout: &Rc<SeqLayout>,
        index: &ItemIndex,
        encoder: &SequenceEncoder,
        e: Var,
        candidates: Var,
    ) -> Result<Var> {
        let x = self.embed(g, store, batch, index, Some(e))?;
        let s = encoder.summarize::<T, ChaCha8Rng>(g, store, x, layout, None);
        Ok(g.matmul_nt(s, candidates))
    }

    #[allow(clippy::too_many_arguments)]
    fn predictions_for<R: Rng>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch,
        index: &ItemIndex,
        modalities: (&Tensor<T>, &Tensor<T>),
        full: Var,
        k: usize,
        cand: Var,
        mask_rng: &mut R,
    ) -> Result<Predictions> {
        let (img, txt) = modalities;
        let occ: Vec<T> = index.occurrences.iter().map(|&c| T::of(c)).collect();
        let strategy = self.prism.mask_strategy;
        let r_txt = mask_modality(txt, &occ, strategy, mask_rng);
        let r_img = mask_modality(img, &occ, strategy, mask_rng);
        let text_masked = g.constant(concat_rows(img, &r_txt));
        let image_masked = g.constant(concat_rows(&r_img, txt));
        let e_img = self.run_expert(g, store, k, text_masked);
        let e_txt = self.run_expert(g, store, k, image_masked);
        let layout = layout_of(batch);
        let enc = self.encoder_for(k);
        Ok(Predictions {
            y: self.predict(g, store, batch, &layout, index, enc, full, cand)?,
            y_img: self.predict(g, store, batch, &layout, index, enc, e_img, cand)?,
            y_txt: self.predict(g, store, batch, &layout, index, enc, e_txt, cand)?,
        })
    }

    /// The prediction triple of bank expert `k` on `batch`, over the
    /// candidate ids returned alongside.
    pub fn expert_predictions<R: Rng>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch,
        k: usize,
        mask_rng: &mut R,
    ) -> Result<(Vec<usize>, Predictions)> {
        let index = ItemIndex::of(batch);
        let img = select_rows(&self.image, &index.items);
        let txt = select_rows(&self.text, &index.items);
        let input = g.constant(concat_rows(&img, &txt));
        let full = self.run_expert(g, store, k, input);
        let cands = candidates(batch);
        let table = g.param(store, self.tables.item);
        let cand = g.gather(table, &cands);
        let p = self.predictions_for(g, store, batch, &index, (&img, &txt), full, k, cand, mask_rng)?;
        Ok((cands, p))
    }

    /// Builds the loss of one step. Masks are drawn from `mask_rng`;
    /// dropout is applied to the recommendation pass when `dropout_rng`
    /// is given.
    pub fn forward_train<R1: Rng, R2: Rng>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch,
        kind: RecLoss,
        mask_rng: &mut R1,
        dropout_rng: Option<&mut R2>,
    ) -> Result<StepGraph> {
        let layout = layout_of(batch);
        let index = ItemIndex::of(batch);
        let mut terms = Vec::new();
        let fused = if self.prism.enabled {
            let (img, txt, outs) = self.expert_outputs(g, store, &index.items);
            let table = g.param(store, self.tables.item);
            let cand = g.gather(table, &candidates(batch));
            let m = self.prism.margin;
            for k in self.active_experts() {
                let full = outs[k].unwrap();
                let p = self.predictions_for(g, store, batch, &index, (&img, &txt), full, k, cand, mask_rng)?;
                let expert = self.experts.experts[k].kind;
                let loss = match expert {
                    ExpertKind::UniI => uniqueness_loss(g, p.y, p.y_img, p.y_txt, m),
                    ExpertKind::UniT => uniqueness_loss(g, p.y, p.y_txt, p.y_img, m),
                    ExpertKind::Syn => synergy_loss(g, p.y, p.y_img, p.y_txt),
                    ExpertKind::Rdn => redundancy_loss(g, p.y, p.y_img, p.y_txt),
                };
                terms.push((expert, loss));
            }
            Some(self.fuse(g, store, &index.items, &outs).1)
        } else {
            None
        };
        let x = self.embed(g, store, batch, &index, fused)?;
        let h = self.encoder.encode(g, store, x, &layout, dropout_rng);
        let pos = score_rows(g, store, &self.tables, h, &batch.positives);
        let neg = score_rows(g, store, &self.tables, h, &batch.negatives);
        let rec = rec_loss(kind, g, pos, neg, &batch.valid);
        let exp = interaction_loss(g, &terms, &self.prism.lambdas);
        let total = g.add(rec, exp);
        Ok(StepGraph { rec, terms, exp, total })
    }

    /// Hidden state at the last (most recent) position of each sequence.
    pub fn hidden_last(&self, g: &mut Graph<T>, store: &ParamStore<T>, batch: &Batch) -> Result<Var> {
        let layout = layout_of(batch);
        let index = ItemIndex::of(batch);
        let fused = if self.prism.enabled {
            let (_, _, outs) = self.expert_outputs(g, store, &index.items);
            Some(self.fuse(g, store, &index.items, &outs).1)
        } else {
            None
        };
        let x = self.embed(g, store, batch, &index, fused)?;
        let h = self.encoder.encode::<T, ChaCha8Rng>(g, store, x, &layout, None);
        let last: Vec<usize> = (0..batch.size()).map(|b| (b + 1) * batch.len - 1).collect();
        Ok(g.gather(h, &last))
    }

    /// Fusion weights `[items × 4]` per expert kind (replicas summed,
    /// dropped experts 0). Uniform over active experts when the fusion
    /// layer is ablated; all zero when PRISM is off.
    pub fn fusion_weights(&self, store: &ParamStore<T>, items: &[usize]) -> Tensor<T> {
        let mut out = Tensor::zeros(&[items.len(), 4]);
        let active = self.active_experts();
        if items.is_empty() || active.is_empty() {
            return out;
        }
        let mut g = Graph::new();
        let (_, _, outs) = self.expert_outputs(&mut g, store, items);
        let weights = match self.fuse(&mut g, store, items, &outs).0 {
            Some(w) => g.value(w).clone(),
            None => Tensor::full(&[items.len(), active.len()], T::one() / T::of(active.len() as f64)),
        };
        for r in 0..items.len() {
            for (c, &k) in active.iter().enumerate() {
                let kind = self.experts.experts[k].kind.index();
                out.row_mut(r)[kind] += weights.at(r, c);
            }
        }
        out
    }
}

/// A [`PrismNet`] together with its parameter values.
pub struct PrismModel<T> {
    pub net: PrismNet<T>,
    pub store: ParamStore<T>,
}

impl<T: Real> PrismModel<T> {
    /// Fresh model; every parameter is drawn from the `Init` streams of
    /// `seed`.
    pub fn new(config: ModelConfig, prism: PrismConfig, features: &ItemFeatures, seed: u64) -> Result<Self> {
        config.validate()?;
        prism.validate()?;
        let mut store = ParamStore::new();
        let tables = EmbeddingTables::new(
            &mut store,
            features.num_items(),
            config.dim,
            config.max_len,
            &mut seed::rng(seed, Stream::Init, 0),
        );
        let encoder = build_encoder(&mut store, &config, "encoder", &mut seed::rng(seed, Stream::Init, 1));
        let in_dim = features.image_dim() + features.text_dim();
        let identical = config.identical_expert_init;
        let experts = ExpertBank::new(
            &mut store,
            in_dim,
            config.expert_hidden,
            config.dim,
            config.expert_replicas,
            |k| seed::rng(seed, Stream::Init, if identical { 100 } else { 100 + k as u64 }),
        );
        let reweight = ReweightNet::new(
            &mut store,
            experts.len(),
            config.dim,
            config.reweight_hidden,
            &mut seed::rng(seed, Stream::Init, 2),
        );
        let expert_encoders = if config.per_expert_encoders && config.backbone == BackboneKind::Attention {
            (0..experts.len())
                .map(|k| {
                    build_encoder(
                        &mut store,
                        &config,
                        &format!("expert_encoder{k}"),
                        &mut seed::rng(seed, Stream::Init, 200 + k as u64),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let net = PrismNet {
            config,
            prism,
            tables,
            encoder,
            expert_encoders,
            experts,
            reweight,
            image: features.image.cast(),
            text: features.text.cast(),
            expert_passes: AtomicU64::new(0),
        };
        Ok(Self { net, store })
    }

    pub fn cast<U: Real>(&self) -> PrismModel<U> {
        PrismModel {
            net: self.net.cast(),
            store: self.store.cast(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn expert_passes(&self) -> u64 {
        self.net.expert_passes()
    }

    pub fn forward_train<R1: Rng, R2: Rng>(
        &self,
        g: &mut Graph<T>,
        batch: &Batch,
        kind: RecLoss,
        mask_rng: &mut R1,
        dropout_rng: Option<&mut R2>,
    ) -> Result<StepGraph> {
        self.net.forward_train(g, &self.store, batch, kind, mask_rng, dropout_rng)
    }

    /// Scores `[B × (n + 1)]` of every item for every sequence of
    /// `batch`; column 0 is the padding id.
    pub fn score_batch(&self, batch: &Batch) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let h = self.net.hidden_last(&mut g, &self.store, batch)?;
        let table = g.param(&self.store, self.net.tables.item);
        let s = g.matmul_nt(h, table);
        Ok(g.value(s).clone())
    }

    pub fn fusion_weights(&self, items: &[usize]) -> Tensor<T> {
        self.net.fusion_weights(&self.store, items)
    }
}
