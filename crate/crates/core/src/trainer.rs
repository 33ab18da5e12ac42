//! Training: MLP -> aggregation -> selection on both branches, triplet loss
//! on the batch, hand-written backward, SGD or Adam.
//!
//! Training is a pure function of `(dataset, config)`. Every random choice
//! (batch order, aggregation shuffles, mixup coefficients, initialization)
//! comes from an RNG derived from `config.seed` and the position of the
//! choice, so runs reproduce bit-for-bit.

use alloc::vec;
use core::ops::ControlFlow;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate, aggregate_backward, max_k, MergeTrace};
use crate::enhance::{Activation, ForwardCache, MlpGradients, MlpParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate, rank_all, GroundTruth, RetrievalReport};
use crate::features::{Modality, PairedDataset, Split};
use crate::loss::{harder_triplet_loss, harder_triplet_loss_with_selection, HardNegativeSelection, LossConfig, MiniBatch};
use crate::numerics::{round_to_f32, Matrix, Rng};
use crate::select::{select, select_backward, EmbeddingVector, SelectionMode};

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_AGGREGATE: u64 = 3;
const STREAM_MIXUP: u64 = 4;
const STREAM_EVAL: u64 = 5;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    #[default]
    Harder,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub embed_dim: usize,
    /// Hidden width; 0 means `2 * embed_dim`.
    pub hidden_dim: usize,
    pub activation: Activation,
    pub k: usize,
    /// Seed of the frozen aggregation shuffles used at evaluation.
    pub aggregation_seed: u64,
    pub disable_aggregation: bool,
    pub selection: SelectionMode,
    pub loss_mode: LossMode,
    pub loss: LossConfig,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 10,
            learning_rate: 5e-4,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            embed_dim: 1024,
            hidden_dim: 0,
            activation: Activation::Relu,
            k: 2,
            aggregation_seed: 0,
            disable_aggregation: false,
            selection: SelectionMode::Max,
            loss_mode: LossMode::Harder,
            loss: LossConfig::default(),
            clip_norm: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive");
        }
        if !self.disable_aggregation && self.k == 0 {
            return bad("k must be at least 1 unless aggregation is disabled");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative");
        }
        self.loss.validate()
    }

    pub fn hidden_width(&self) -> usize {
        if self.hidden_dim == 0 {
            2 * self.embed_dim
        } else {
            self.hidden_dim
        }
    }

    /// The loss actually optimized, after applying `loss_mode`.
    pub fn effective_loss(&self) -> LossConfig {
        LossConfig { enable_harder_terms: self.loss_mode == LossMode::Harder, ..self.loss }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            k: self.k,
            aggregation_seed: self.aggregation_seed,
            disable_aggregation: self.disable_aggregation,
            selection: self.selection,
        }
    }
}

/// Everything about the forward pass that is not a learned parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub k: usize,
    pub aggregation_seed: u64,
    pub disable_aggregation: bool,
    pub selection: SelectionMode,
}

/// Intermediate state of one item's forward pass.
#[derive(Debug, Clone)]
pub struct ItemForward {
    cache: ForwardCache,
    pub trace: Option<MergeTrace>,
    pub embedding: EmbeddingVector,
}

/// How aggregation chooses its merges for one item.
#[derive(Debug)]
pub enum ItemRouting<'a> {
    Sample(&'a mut Rng),
    Replay(Option<&'a MergeTrace>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub visual: MlpParams,
    pub textual: MlpParams,
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub visual: MlpGradients,
    pub textual: MlpGradients,
}

impl ModelGradients {
    pub fn zeros_like(model: &Model) -> Self {
        ModelGradients { visual: MlpGradients::zeros_like(&model.visual), textual: MlpGradients::zeros_like(&model.textual) }
    }

    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.visual.sq_norm() + self.textual.sq_norm())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.visual.values.iter_mut().chain(self.textual.values.iter_mut()) {
            *g *= factor;
        }
    }

    fn get_mut(&mut self, modality: Modality) -> &mut MlpGradients {
        match modality {
            Modality::Visual => &mut self.visual,
            Modality::Textual => &mut self.textual,
        }
    }
}

impl Model {
    pub fn init(input_dim: usize, cfg: &TrainConfig) -> Result<Self> {
        let mut rng = Rng::derive(cfg.seed, &[STREAM_INIT]);
        let widths = [input_dim, cfg.hidden_width(), cfg.embed_dim];
        Ok(Model {
            visual: MlpParams::init(&widths, cfg.activation, &mut rng)?,
            textual: MlpParams::init(&widths, cfg.activation, &mut rng)?,
            pipeline: cfg.pipeline(),
        })
    }

    pub fn mlp(&self, modality: Modality) -> &MlpParams {
        match modality {
            Modality::Visual => &self.visual,
            Modality::Textual => &self.textual,
        }
    }

    /// Parameters rounded to `f32`, i.e. exactly what a checkpoint stores.
    pub fn quantized(&self) -> Model {
        let mut m = self.clone();
        for p in m.visual.values_mut().iter_mut().chain(m.textual.values_mut().iter_mut()) {
            *p = round_to_f32(*p);
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.visual.is_finite() && self.textual.is_finite()
    }

    /// `k` for a set of `count` vectors: the configured value clamped to
    /// `floor(count / 2)`, or `None` when aggregation is off.
    pub fn effective_k(&self, count: usize) -> Option<usize> {
        if self.pipeline.disable_aggregation {
            return None;
        }
        let k = self.pipeline.k.min(max_k(count));
        if k < self.pipeline.k {
            log::debug!("clamping k from {} to {k} for a set of {count}", self.pipeline.k);
        }
        (k > 0).then_some(k)
    }

    pub fn forward_item(&self, modality: Modality, features: &Matrix, routing: ItemRouting<'_>) -> Result<ItemForward> {
        let (enhanced, cache) = self.mlp(modality).forward(features)?;
        let (reduced, trace) = match routing {
            ItemRouting::Sample(rng) => match self.effective_k(enhanced.rows()) {
                Some(k) => {
                    let (out, trace) = aggregate(&enhanced, k, rng)?;
                    (out, Some(trace))
                }
                None => (enhanced, None),
            },
            ItemRouting::Replay(Some(trace)) => (trace.replay(&enhanced)?, Some(trace.clone())),
            ItemRouting::Replay(None) => (enhanced, None),
        };
        let embedding = select(&reduced, self.pipeline.selection)?;
        Ok(ItemForward { cache, trace, embedding })
    }

    /// Parameter gradients of one item given the gradient on its normalized
    /// embedding.
    pub fn backward_item(&self, modality: Modality, item: &ItemForward, upstream: &[f64]) -> Result<MlpGradients> {
        let mut g = select_backward(&item.embedding, upstream)?;
        if let Some(trace) = &item.trace {
            g = aggregate_backward(trace, &g)?;
        }
        let (grads, _) = self.mlp(modality).backward(&item.cache, &g)?;
        Ok(grads)
    }

    /// Evaluation-time embedding of dataset item `index`: aggregation uses a
    /// shuffle fixed by the pipeline's aggregation seed and the item index.
    pub fn embed(&self, modality: Modality, index: usize, features: &Matrix) -> Result<Vec<f64>> {
        let mut rng = Rng::derive(self.pipeline.aggregation_seed, &[STREAM_EVAL, modality.stream(), index as u64]);
        let item = self.forward_item(modality, features, ItemRouting::Sample(&mut rng))?;
        Ok(item.embedding.values.into_inner())
    }

    /// Similarity matrix and ground truth for one split.
    pub fn split_similarity(&self, ds: &PairedDataset, split: Split) -> Result<(Matrix, GroundTruth)> {
        let images = ds.splits.get(split);
        if images.is_empty() {
            return Err(Error::EmptySplit(split.name()));
        }
        let mut local = vec![usize::MAX; ds.images.len()];
        for (p, &i) in images.iter().enumerate() {
            local[i] = p;
        }
        let captions: Vec<usize> = (0..ds.captions.len()).filter(|&j| local[ds.captions[j].image] != usize::MAX).collect();
        let vis = images
            .iter()
            .map(|&i| self.embed(Modality::Visual, i, &ds.images[i].features))
            .collect::<Result<Vec<_>>>()?;
        let txt = captions
            .iter()
            .map(|&j| self.embed(Modality::Textual, j, &ds.captions[j].features.features))
            .collect::<Result<Vec<_>>>()?;
        let gt = GroundTruth::new(images.len(), captions.iter().map(|&j| local[ds.captions[j].image]).collect())?;
        Ok((rank_all(&vis, &txt)?, gt))
    }

    pub fn evaluate_split(&self, ds: &PairedDataset, split: Split) -> Result<RetrievalReport> {
        let (sim, gt) = self.split_similarity(ds, split)?;
        evaluate(&sim, &gt)
    }
}

/// Routing decisions of one batch, replayable for finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRouting {
    pub visual: Vec<Option<MergeTrace>>,
    pub textual: Vec<Option<MergeTrace>>,
    pub selection: HardNegativeSelection,
}

#[derive(Debug)]
pub enum Routing<'a> {
    /// Fresh aggregation shuffles from per-item streams of `seed`.
    Sample { seed: u64 },
    Frozen(&'a BatchRouting),
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub loss: f64,
    pub grads: ModelGradients,
    pub routing: BatchRouting,
}

/// Loss and parameter gradients for one batch of aligned pairs.
pub fn batch_loss(
    model: &Model,
    images: &[&Matrix],
    captions: &[&Matrix],
    lambdas: Option<&[(f64, f64)]>,
    loss: &LossConfig,
    routing: Routing<'_>,
) -> Result<BatchOutcome> {
    if images.len() != captions.len() {
        return Err(Error::ShapeMismatch("one caption per image in a batch"));
    }
    let b = images.len();
    if b < 2 {
        return Err(Error::BatchTooSmall { size: b });
    }
    let forward = |modality: Modality, sets: &[&Matrix]| -> Result<Vec<ItemForward>> {
        sets.iter()
            .enumerate()
            .map(|(p, m)| match &routing {
                Routing::Sample { seed } => {
                    let mut rng = Rng::derive(*seed, &[modality.stream(), p as u64]);
                    model.forward_item(modality, m, ItemRouting::Sample(&mut rng))
                }
                Routing::Frozen(r) => {
                    let traces = match modality {
                        Modality::Visual => &r.visual,
                        Modality::Textual => &r.textual,
                    };
                    let trace = traces.get(p).ok_or(Error::TraceMismatch)?;
                    model.forward_item(modality, m, ItemRouting::Replay(trace.as_ref()))
                }
            })
            .collect()
    };
    let vis = forward(Modality::Visual, images)?;
    let txt = forward(Modality::Textual, captions)?;

    let stack = |items: &[ItemForward]| Matrix::from_rows(&items.iter().map(|f| f.embedding.values.as_slice()).collect::<Vec<_>>());
    let mut batch = MiniBatch::new(stack(&vis)?, stack(&txt)?)?;
    if let Some(l) = lambdas {
        batch = batch.with_lambdas(l.to_vec(), loss.renormalize_mixed)?;
    }
    let out = match &routing {
        Routing::Frozen(r) => harder_triplet_loss_with_selection(&batch, loss, &r.selection)?,
        Routing::Sample { .. } => harder_triplet_loss(&batch, loss)?,
    };

    let mut grads = ModelGradients::zeros_like(model);
    for (modality, items, g) in [(Modality::Visual, &vis, &out.grad_vis), (Modality::Textual, &txt, &out.grad_txt)] {
        for (p, item) in items.iter().enumerate() {
            let upstream = g.row(p);
            if upstream.iter().all(|&x| x == 0.0) {
                continue;
            }
            grads.get_mut(modality).add_assign(&model.backward_item(modality, item, upstream)?)?;
        }
    }
    let routing = BatchRouting {
        visual: vis.into_iter().map(|f| f.trace).collect(),
        textual: txt.into_iter().map(|f| f.trace).collect(),
        selection: out.selection,
    };
    Ok(BatchOutcome { loss: out.loss, grads, routing })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub model: Model,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_rsum: f64,
}

impl ModelState {
    pub fn new(model: Model) -> Self {
        let n = model.visual.len() + model.textual.len();
        ModelState {
            model,
            optimizer: OptimizerState { step: 0, m: vec![0.0; n], v: vec![0.0; n] },
            epoch: 0,
            best_val_rsum: f64::NEG_INFINITY,
        }
    }
}

/// One optimizer step. SGD: `p -= lr * g`. Adam: the usual bias-corrected
/// moment recurrences with `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
pub fn apply_gradients(state: &mut ModelState, grads: &ModelGradients, cfg: &TrainConfig) -> Result<()> {
    let model = &mut state.model;
    if grads.visual.values.len() != model.visual.len() || grads.textual.values.len() != model.textual.len() {
        return Err(Error::ShapeMismatch("gradients do not match model parameters"));
    }
    let opt = &mut state.optimizer;
    opt.step += 1;
    let lr = cfg.learning_rate;
    let params = model.visual.values_mut().iter_mut().chain(model.textual.values_mut().iter_mut());
    let g = grads.visual.values.iter().chain(&grads.textual.values);
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            for (p, g) in params.zip(g) {
                *p -= lr * g;
            }
        }
        OptimizerKind::Adam => {
            let t = opt.step as f64;
            let c1 = 1.0 - libm::pow(ADAM_BETA1, t);
            let c2 = 1.0 - libm::pow(ADAM_BETA2, t);
            for (((p, g), m), v) in params.zip(g).zip(opt.m.iter_mut()).zip(opt.v.iter_mut()) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p -= lr * (*m / c1) / (libm::sqrt(*v / c2) + ADAM_EPS);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Mean loss per positive pair.
    pub train_loss: f64,
    pub val: RetrievalReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State with the highest validation rSum.
    pub best: ModelState,
    pub last: ModelState,
    pub log: Vec<EpochMetrics>,
}

/// Batches of an epoch. Each image contributes each of its training captions
/// once per epoch; a batch never holds two pairs of the same image, so no
/// positive caption is ever mined as a negative. Batches shorter than two
/// pairs are dropped.
pub fn epoch_batches(ds: &PairedDataset, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<(usize, usize)>> {
    let mut rng = Rng::derive(seed, &[STREAM_SHUFFLE, epoch as u64]);
    let mut per_image: Vec<(usize, Vec<usize>)> = ds.splits.train.iter().map(|&i| (i, ds.captions_of(i).collect())).collect();
    for (_, caps) in per_image.iter_mut() {
        rng.shuffle(caps);
    }
    let rounds = per_image.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    let mut batches = Vec::new();
    for r in 0..rounds {
        let mut pairs: Vec<(usize, usize)> = per_image.iter().filter_map(|(i, c)| c.get(r).map(|&j| (*i, j))).collect();
        rng.shuffle(&mut pairs);
        batches.extend(pairs.chunks(batch_size).filter(|c| c.len() >= 2).map(<[_]>::to_vec));
    }
    batches
}

pub fn train(ds: &PairedDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(ds, cfg, |_| ControlFlow::Continue(()))
}

/// [`train`] with a callback after every epoch; `Break` ends training early.
pub fn train_with(
    ds: &PairedDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.validate()?;
    if ds.splits.train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if ds.splits.val.is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    if !cfg.disable_aggregation {
        let l_seq = ds.min_count(Modality::Visual).min(ds.min_count(Modality::Textual));
        if cfg.k > max_k(l_seq) {
            log::warn!("k = {} exceeds floor(L_seq / 2) = {} for the shortest items; clamping per item", cfg.k, max_k(l_seq));
        }
    }
    let loss_cfg = cfg.effective_loss();
    let mut state = ModelState::new(Model::init(ds.dim, cfg)?);
    let mut best = state.clone();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut pairs = 0usize;
        for (bi, batch) in epoch_batches(ds, cfg.batch_size, cfg.seed, epoch).iter().enumerate() {
            let images: Vec<&Matrix> = batch.iter().map(|&(i, _)| &ds.images[i].features).collect();
            let captions: Vec<&Matrix> = batch.iter().map(|&(_, j)| &ds.captions[j].features.features).collect();
            let lambdas = if loss_cfg.enable_harder_terms {
                let mut rng = Rng::derive(cfg.seed, &[STREAM_MIXUP, epoch as u64, bi as u64]);
                Some(MiniBatch::sample_lambdas(batch.len(), loss_cfg.beta_t, &mut rng)?)
            } else {
                None
            };
            let agg_seed = Rng::derive(cfg.seed, &[STREAM_AGGREGATE, epoch as u64, bi as u64]).next_u64();
            let mut out = batch_loss(
                &state.model,
                &images,
                &captions,
                lambdas.as_deref(),
                &loss_cfg,
                Routing::Sample { seed: agg_seed },
            )?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi, loss: out.loss });
            }
            let gnorm = out.grads.global_norm();
            if cfg.clip_norm > 0.0 && gnorm > cfg.clip_norm {
                out.grads.scale(cfg.clip_norm / gnorm);
            }
            apply_gradients(&mut state, &out.grads, cfg)?;
            if !state.model.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi, loss: f64::NAN });
            }
            total += out.loss;
            pairs += batch.len();
        }
        state.epoch = epoch + 1;
        let val = state.model.quantized().evaluate_split(ds, Split::Val)?;
        let metrics = EpochMetrics { epoch: epoch + 1, train_loss: if pairs > 0 { total / pairs as f64 } else { 0.0 }, val };
        log::info!(
            "epoch {:>3}  loss {:.5}  val R@1 {:.3}/{:.3}  rsum {:.1}",
            metrics.epoch,
            metrics.train_loss,
            val.i2t[0],
            val.t2i[0],
            val.rsum()
        );
        let flow = on_epoch(&metrics);
        log.push(metrics);
        if val.rsum() > state.best_val_rsum {
            state.best_val_rsum = val.rsum();
            best = state.clone();
        }
        if flow.is_break() {
            break;
        }
    }
    best.best_val_rsum = state.best_val_rsum;
    Ok(TrainOutcome { best, last: state, log })
}
