//! Contrastive training of the shared encoder.
//!
//! Each query is scored against its positive document and a set of negatives
//! (the other positives of the batch plus every hard negative in the batch).
//! The per-query loss is the negative log-likelihood of the positive under a
//! softmax over those scores; the batch loss is the mean.
//!
//! # Gradient
//!
//! With `u = W·x` (query) and `v = W·y` (document), `s = uᵀv = xᵀWᵀWy` and
//!
//! ```text
//! ∂s/∂W = u·yᵀ + v·xᵀ
//! ∂L/∂s_j = p_j − [j is the positive]      (p = softmax over the query's scores)
//! ```
//!
//! so for one query `∂L/∂W = (Σ_j c_j v_j)·xᵀ + Σ_j c_j·u·y_jᵀ` with
//! `c_j = (p_j − δ_j)/B`. Only columns of buckets present in some `x` or `y`
//! receive gradient.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CompositionPolicy, DocumentRecord};
use crate::dense::{document_tokens, featurize, DenseRetriever, EncoderParams, FeatureVector};
use crate::lexical::{Bm25Index, TokenSeq};
use crate::preprocess::{build_query, truncate, CutMode, ProcessedQuestion, Query};
use crate::PostId;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("non-finite loss or score in batch {batch}")]
    NonFinite { batch: usize },
    #[error("positive document {0} appears twice in one batch")]
    DuplicatePositive(PostId),
    #[error("document {0} is referenced by a training example but not provided")]
    UnknownDocument(PostId),
    #[error("no training examples")]
    NoExamples,
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query: Query,
    pub positive_doc_id: PostId,
    #[serde(default)]
    pub hard_negative_doc_ids: Vec<PostId>,
}

impl TrainingExample {
    pub fn new(query: Query, positive_doc_id: PostId) -> Self {
        Self {
            query,
            positive_doc_id,
            hard_negative_doc_ids: Vec::new(),
        }
    }
}

/// Flat training configuration; every field has a default so partial config
/// files work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub batch_size: usize,
    /// Micro-batches per optimizer step; their gradients are averaged.
    pub accumulation_steps: usize,
    pub max_query_len: usize,
    pub max_doc_len: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub composition_policy: CompositionPolicy,
    pub cut_mode: CutMode,
    pub in_batch_negatives: bool,
    /// Random crop applied to training documents (0 disables).
    pub crop_fraction: f64,
    /// Per-token deletion probability for training documents (0 disables).
    pub delete_prob: f64,
    /// Documents retrieved per query when mining hard negatives.
    pub mining_k: usize,
    /// Cap on hard negatives kept per query; all mined ones when unset.
    pub hard_negatives_per_query: Option<usize>,
    /// Train rounds in the self-training loop; round r > 1 mines with round r − 1's model.
    pub self_training_rounds: usize,
    pub embedding_dim: usize,
    pub feature_buckets: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            warmup_steps: 3500,
            clip_norm: 2.0,
            batch_size: 12,
            accumulation_steps: 1,
            max_query_len: 512,
            max_doc_len: 512,
            epochs: 1,
            max_steps: None,
            seed: 0,
            composition_policy: CompositionPolicy::TrainNoBody,
            cut_mode: CutMode::Middle,
            in_batch_negatives: true,
            crop_fraction: 0.0,
            delete_prob: 0.0,
            mining_k: 10,
            hard_negatives_per_query: None,
            self_training_rounds: 2,
            embedding_dim: crate::dense::DEFAULT_DIM,
            feature_buckets: crate::dense::DEFAULT_BUCKETS,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_owned()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if self.batch_size == 0 || self.accumulation_steps == 0 || self.epochs == 0 {
            return bad("batch_size, accumulation_steps and epochs must be positive");
        }
        if self.in_batch_negatives && self.batch_size < 2 {
            return bad("in-batch negatives need batch_size >= 2");
        }
        if self.max_query_len < 2 || self.max_doc_len == 0 {
            return bad("max_query_len must be >= 2 and max_doc_len positive");
        }
        if !(0.0..1.0).contains(&self.crop_fraction) || !(0.0..1.0).contains(&self.delete_prob) {
            return bad("crop_fraction and delete_prob must be in [0, 1)");
        }
        if self.mining_k == 0 || self.self_training_rounds == 0 {
            return bad("mining_k and self_training_rounds must be positive");
        }
        Ok(())
    }

    fn augments(&self) -> bool {
        self.crop_fraction > 0.0 || self.delete_prob > 0.0
    }
}

/// `−log(e^{s⁺} / (Σ_j e^{s⁻_j} + e^{s⁺}))`, computed as
/// `(m − s⁺) + ln(1 + Σ_{j ≠ argmax} e^{s_j − m})` with `m` the max score, so
/// it neither overflows nor rounds a confident positive to exactly zero.
pub fn contrastive_loss(pos_score: f64, neg_scores: &[f64]) -> f64 {
    let scores = || std::iter::once(pos_score).chain(neg_scores.iter().copied());
    let (argmax, max) = scores().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |best, (i, s)| if s > best.1 { (i, s) } else { best },
    );
    let rest: f64 = scores()
        .enumerate()
        .filter(|&(i, _)| i != argmax)
        .map(|(_, s)| (s - max).exp())
        .sum();
    (max - pos_score) + rest.ln_1p()
}

/// Negatives for each query: the other queries' positives, then every hard
/// negative in the batch, minus the query's own positive, without repeats.
pub fn assemble_batch_negatives(batch: &[TrainingExample]) -> Result<Vec<Vec<PostId>>, TrainError> {
    let mut positives = HashSet::with_capacity(batch.len());
    for ex in batch {
        if !positives.insert(ex.positive_doc_id) {
            return Err(TrainError::DuplicatePositive(ex.positive_doc_id));
        }
    }
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut seen = HashSet::new();
            seen.insert(ex.positive_doc_id);
            let others = batch
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, o)| o.positive_doc_id);
            let hard = batch.iter().flat_map(|o| o.hard_negative_doc_ids.iter().copied());
            others.chain(hard).filter(|d| seen.insert(*d)).collect()
        })
        .collect())
}

/// Each query's own hard negatives only, for training without in-batch negatives.
fn own_negatives(batch: &[TrainingExample]) -> Vec<Vec<PostId>> {
    batch
        .iter()
        .map(|ex| {
            let mut seen = HashSet::new();
            seen.insert(ex.positive_doc_id);
            ex.hard_negative_doc_ids
                .iter()
                .copied()
                .filter(|d| seen.insert(*d))
                .collect()
        })
        .collect()
}

/// Dense gradient shaped like [`EncoderParams::weights`] (bucket-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    dim: usize,
    values: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self {
            dim: params.dim(),
            values: vec![0.0; params.weights().len()],
        }
    }

    pub fn from_values(dim: usize, values: Vec<f64>) -> Self {
        Self { dim, values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `∂L/∂W[row, bucket]`
    pub fn get(&self, row: usize, bucket: usize) -> f64 {
        self.values[bucket * self.dim + row]
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.par_iter_mut().for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        self.values
            .par_iter_mut()
            .zip(other.values.par_iter())
            .for_each(|(a, b)| *a += b);
    }

    fn axpy_column(&mut self, bucket: u32, alpha: f64, v: &[f64]) {
        let col = &mut self.values[bucket as usize * self.dim..(bucket as usize + 1) * self.dim];
        for (g, x) in col.iter_mut().zip(v) {
            *g += alpha * x;
        }
    }
}

/// Scales the gradient down to `clip_norm` when its L2 norm exceeds it.
pub fn clip_gradients(grad: &mut Gradient, clip_norm: f64) -> f64 {
    let norm = grad.norm();
    if norm > clip_norm {
        grad.scale(clip_norm / norm);
    }
    norm
}

/// Mean contrastive loss over the batch and its exact gradient w.r.t. `W`.
///
/// `docs` must hold features for every positive and negative in the batch.
pub fn loss_and_gradients(
    params: &EncoderParams,
    batch: &[TrainingExample],
    docs: &HashMap<PostId, FeatureVector>,
    in_batch_negatives: bool,
    batch_id: usize,
) -> Result<(f64, Gradient), TrainError> {
    let negatives = if in_batch_negatives {
        assemble_batch_negatives(batch)?
    } else {
        own_negatives(batch)
    };
    let needed: BTreeSet<PostId> = batch
        .iter()
        .map(|e| e.positive_doc_id)
        .chain(negatives.iter().flatten().copied())
        .collect();
    let needed: Vec<PostId> = needed.into_iter().collect();
    let doc_features: Vec<&FeatureVector> = needed
        .iter()
        .map(|id| docs.get(id).ok_or(TrainError::UnknownDocument(*id)))
        .collect::<Result<_, _>>()?;
    let doc_emb: Vec<Vec<f64>> = doc_features
        .par_iter()
        .map(|fv| params.encode(fv).expect("doc features share the encoder's buckets").0)
        .collect();
    let slot: HashMap<PostId, usize> = needed.iter().enumerate().map(|(i, &d)| (d, i)).collect();

    let query_features: Vec<FeatureVector> = batch
        .par_iter()
        .map(|e| featurize(&e.query.tokens, params.buckets()))
        .collect();
    let query_emb: Vec<Vec<f64>> = query_features
        .par_iter()
        .map(|fv| params.encode(fv).expect("query features share the encoder's buckets").0)
        .collect();

    let batch_len = batch.len() as f64;
    let dim = params.dim();
    // Per query: (loss, [(doc slot, coefficient)]) with the positive first.
    let per_query: Vec<(f64, Vec<(usize, f64)>)> = batch
        .par_iter()
        .zip(negatives.par_iter())
        .zip(query_emb.par_iter())
        .map(|((ex, negs), q)| {
            let slots: Vec<usize> = std::iter::once(ex.positive_doc_id)
                .chain(negs.iter().copied())
                .map(|d| slot[&d])
                .collect();
            let scores: Vec<f64> = slots.iter().map(|&s| crate::dense::dot(q, &doc_emb[s])).collect();
            let loss = contrastive_loss(scores[0], &scores[1..]);
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            let coeffs = slots
                .iter()
                .zip(&exp)
                .enumerate()
                .map(|(j, (&s, e))| {
                    let target = if j == 0 { 1.0 } else { 0.0 };
                    (s, (e / z - target) / batch_len)
                })
                .collect();
            (loss, coeffs)
        })
        .collect();

    let mut total_loss = 0.0;
    let mut grad = Gradient::zeros_like(params);
    // Accumulated Σ_i c_ij·u_i for every document slot j.
    let mut doc_pull = vec![vec![0.0; dim]; needed.len()];
    for (i, (loss, coeffs)) in per_query.iter().enumerate() {
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { batch: batch_id });
        }
        total_loss += loss;
        let q = &query_emb[i];
        let mut query_pull = vec![0.0; dim];
        for &(s, c) in coeffs {
            for (acc, v) in query_pull.iter_mut().zip(&doc_emb[s]) {
                *acc += c * v;
            }
            for (acc, u) in doc_pull[s].iter_mut().zip(q) {
                *acc += c * u;
            }
        }
        for &(b, x) in query_features[i].entries() {
            grad.axpy_column(b, x, &query_pull);
        }
    }
    for (s, fv) in doc_features.iter().enumerate() {
        for &(b, y) in fv.entries() {
            grad.axpy_column(b, y, &doc_pull[s]);
        }
    }
    let loss = total_loss / batch_len;
    if !loss.is_finite() || grad.values.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFinite { batch: batch_id });
    }
    Ok((loss, grad))
}

/// Linear warmup from 0 to the configured rate, then constant.
pub fn lr_schedule(step: u64, config: &TrainerConfig) -> f64 {
    if config.warmup_steps == 0 || step >= config.warmup_steps {
        config.learning_rate
    } else {
        config.learning_rate * step as f64 / config.warmup_steps as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64], lr: f64) {
    assert_eq!(params.len(), grad.len(), "parameter/gradient shape mismatch");
    assert_eq!(params.len(), state.m.len(), "parameter/state shape mismatch");
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    params
        .par_iter_mut()
        .zip(grad.par_iter())
        .zip(state.m.par_iter_mut().zip(state.v.par_iter_mut()))
        .for_each(|((p, &g), (m, v))| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
}

/// Removes a contiguous span of `⌊crop_fraction·len⌋` tokens at a random
/// start, then drops each remaining token with probability `delete_prob`.
pub fn corrupt_document<R: Rng>(tokens: &TokenSeq, rng: &mut R, crop_fraction: f64, delete_prob: f64) -> TokenSeq {
    let toks = tokens.as_slice();
    let crop = (crop_fraction * toks.len() as f64).floor() as usize;
    let start = if crop > 0 {
        rng.gen_range(0..=toks.len() - crop)
    } else {
        0
    };
    toks[..start]
        .iter()
        .chain(&toks[start + crop..])
        .filter(|_| delete_prob == 0.0 || !rng.gen_bool(delete_prob))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub steps: Vec<StepRecord>,
    /// Mean micro-batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Groups shuffled examples into batches whose positives are distinct. An
/// example whose positive is already in the open batch waits for the next one.
fn form_batches(order: &[usize], examples: &[TrainingExample], size: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::with_capacity(size);
    let mut in_current: HashSet<PostId> = HashSet::new();
    let mut waiting: Vec<usize> = Vec::new();
    let mut queue = order.iter().copied();
    loop {
        let next = if current.len() < size {
            // Waiting examples get first claim on a fresh batch.
            match waiting
                .iter()
                .position(|&i| !in_current.contains(&examples[i].positive_doc_id))
            {
                Some(pos) => Some(waiting.remove(pos)),
                None => queue.next(),
            }
        } else {
            None
        };
        match next {
            Some(i) if in_current.insert(examples[i].positive_doc_id) => current.push(i),
            Some(i) => waiting.push(i),
            None => {
                if current.is_empty() {
                    break;
                }
                batches.push(std::mem::take(&mut current));
                in_current.clear();
            }
        }
    }
    batches
}

struct PreparedDocs {
    tokens: HashMap<PostId, TokenSeq>,
    features: HashMap<PostId, FeatureVector>,
}

fn prepare_docs(docs: &[DocumentRecord], config: &TrainerConfig) -> PreparedDocs {
    let tokens: HashMap<PostId, TokenSeq> = docs
        .par_iter()
        .map(|d| (d.doc_id, document_tokens(&d.text, Some(config.max_doc_len))))
        .collect();
    let features = tokens
        .par_iter()
        .map(|(&id, t)| (id, featurize(t, config.feature_buckets)))
        .collect();
    PreparedDocs { tokens, features }
}

/// Runs the configured number of epochs (or `max_steps`) of Adam over
/// shuffled batches, starting from `params`.
pub fn train(
    params: EncoderParams,
    examples: &[TrainingExample],
    docs: &[DocumentRecord],
    config: &TrainerConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(TrainError::NoExamples);
    }
    if params.buckets() != config.feature_buckets {
        return Err(TrainError::InvalidConfig(format!(
            "encoder has {} buckets, config says {}",
            params.buckets(),
            config.feature_buckets
        )));
    }
    let prepared = prepare_docs(docs, config);
    for ex in examples {
        for id in std::iter::once(&ex.positive_doc_id).chain(&ex.hard_negative_doc_ids) {
            if !prepared.features.contains_key(id) {
                return Err(TrainError::UnknownDocument(*id));
            }
        }
    }
    let examples: Vec<TrainingExample> = examples
        .iter()
        .map(|ex| {
            let mut ex = ex.clone();
            ex.query.tokens =
                truncate(ex.query.tokens, config.max_query_len, config.cut_mode).expect("max_query_len validated");
            if let Some(cap) = config.hard_negatives_per_query {
                ex.hard_negative_doc_ids.truncate(cap);
            }
            ex
        })
        .collect();

    let mut params = params;
    let mut adam = AdamState::new(params.weights().len());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut augment_rng = ChaCha8Rng::seed_from_u64(config.seed);
    augment_rng.set_stream(1);

    let mut steps = Vec::new();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut micro_batch_id = 0usize;
    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let batches: Vec<Vec<TrainingExample>> = form_batches(&order, &examples, config.batch_size)
            .into_iter()
            .map(|b| b.into_iter().map(|i| examples[i].clone()).collect())
            .filter(|b: &Vec<TrainingExample>| {
                // a lone query without hard negatives has nothing to contrast with
                b.len() > 1 || !b[0].hard_negative_doc_ids.is_empty()
            })
            .collect();

        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for window in batches.chunks(config.accumulation_steps) {
            let mut acc: Option<Gradient> = None;
            let mut window_loss = 0.0;
            for batch in window {
                let augmented;
                let features = if config.augments() {
                    augmented = augmented_features(batch, &prepared, config, &mut augment_rng);
                    &augmented
                } else {
                    &prepared.features
                };
                let (loss, grad) =
                    loss_and_gradients(&params, batch, features, config.in_batch_negatives, micro_batch_id)?;
                micro_batch_id += 1;
                window_loss += loss;
                match acc.as_mut() {
                    Some(a) => a.add_assign(&grad),
                    None => acc = Some(grad),
                }
            }
            let mut grad = acc.expect("window is non-empty");
            let n = window.len() as f64;
            if window.len() > 1 {
                grad.scale(1.0 / n);
            }
            let grad_norm = clip_gradients(&mut grad, config.clip_norm);
            let lr = lr_schedule(adam.step + 1, config);
            adam_step(&mut adam, params.weights_mut(), grad.values(), lr);
            steps.push(StepRecord {
                step: adam.step,
                epoch,
                loss: window_loss / n,
                grad_norm,
                lr,
            });
            epoch_loss += window_loss;
            epoch_batches += window.len();
            if config.max_steps.is_some_and(|max| adam.step >= max) {
                epoch_losses.push(epoch_loss / epoch_batches as f64);
                break 'epochs;
            }
        }
        epoch_losses.push(if epoch_batches == 0 {
            0.0
        } else {
            epoch_loss / epoch_batches as f64
        });
    }
    Ok(TrainOutcome {
        params,
        steps,
        epoch_losses,
    })
}

fn augmented_features(
    batch: &[TrainingExample],
    prepared: &PreparedDocs,
    config: &TrainerConfig,
    rng: &mut ChaCha8Rng,
) -> HashMap<PostId, FeatureVector> {
    let ids: BTreeSet<PostId> = batch
        .iter()
        .flat_map(|e| std::iter::once(e.positive_doc_id).chain(e.hard_negative_doc_ids.iter().copied()))
        .collect();
    ids.into_iter()
        .map(|id| {
            let corrupted = corrupt_document(&prepared.tokens[&id], rng, config.crop_fraction, config.delete_prob);
            (id, featurize(&corrupted, config.feature_buckets))
        })
        .collect()
}

/// Source of hard negatives for self-training. The dense retriever is the
/// default; any ranked retriever can stand in.
pub trait NegativeMiner: Sync {
    fn top_k(&self, query: &TokenSeq, k: usize) -> Vec<PostId>;
}

impl NegativeMiner for DenseRetriever {
    fn top_k(&self, query: &TokenSeq, k: usize) -> Vec<PostId> {
        self.search(query, k).into_iter().map(|(d, _)| d).collect()
    }
}

impl NegativeMiner for Bm25Index {
    fn top_k(&self, query: &TokenSeq, k: usize) -> Vec<PostId> {
        self.search(query, k).into_iter().map(|(d, _)| d).collect()
    }
}

/// Top-k retrieved documents per query, minus the gold one, become that
/// query's hard negatives.
pub fn mine_hard_negatives<M: NegativeMiner + ?Sized>(
    miner: &M,
    queries_with_gold: &[(Query, PostId)],
    k: usize,
) -> Vec<TrainingExample> {
    assert!(k >= 1, "mining needs k >= 1");
    queries_with_gold
        .par_iter()
        .map(|(query, gold)| TrainingExample {
            query: query.clone(),
            positive_doc_id: *gold,
            hard_negative_doc_ids: miner
                .top_k(&query.tokens, k)
                .into_iter()
                .filter(|d| d != gold)
                .collect(),
        })
        .collect()
}

/// (own query, own document) pairs for answered questions with a snippet.
pub fn examples_from_questions<'a>(
    questions: impl IntoIterator<Item = &'a ProcessedQuestion>,
    config: &TrainerConfig,
) -> Vec<TrainingExample> {
    questions
        .into_iter()
        .filter(|q| q.best_answer.is_some())
        .filter_map(|q| build_query(q, config.max_query_len, config.cut_mode).ok())
        .map(|query| {
            let id = query.source_question;
            TrainingExample::new(query, id)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTrainOutcome {
    pub params: EncoderParams,
    /// One entry per round; round 1 uses in-batch negatives only.
    pub rounds: Vec<TrainOutcome>,
}

/// Train, then repeatedly mine hard negatives over `docs` with the current
/// model and continue training on the mined examples.
pub fn self_train(
    params: EncoderParams,
    examples: &[TrainingExample],
    docs: &[DocumentRecord],
    config: &TrainerConfig,
) -> Result<SelfTrainOutcome, TrainError> {
    let mut rounds = Vec::with_capacity(config.self_training_rounds);
    let mut params = params;
    let mut current: Vec<TrainingExample> = examples.to_vec();
    for round in 0..config.self_training_rounds {
        if round > 0 {
            let retriever = DenseRetriever::build(params.clone(), docs, Some(config.max_doc_len))
                .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
            let queries: Vec<(Query, PostId)> = examples.iter().map(|e| (e.query.clone(), e.positive_doc_id)).collect();
            current = mine_hard_negatives(&retriever, &queries, config.mining_k);
        }
        let outcome = train(params, &current, docs, config)?;
        params = outcome.params.clone();
        rounds.push(outcome);
    }
    Ok(SelfTrainOutcome { params, rounds })
}
