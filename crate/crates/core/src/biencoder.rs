//! Bi-encoder: context encoder θm, candidate encoder θr, in-batch contrastive
//! and overlap-alignment losses, and the variant-configured training loop.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplit, MentionRecord, OverlapPair, UnifiedCatalog};
use crate::crossencoder::CrossEncoderModel;
use crate::encoder::{accumulate_backward, dot, encode, init_params, EncoderGrad, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate_linking, EvalStage, LinkOptions};
use crate::index::build_index;
use crate::tokenizer::{encode_candidate, encode_context, TokenSeq, Vocab, DEFAULT_MAX_LEN};

/// Learning rate used by the original fine-tuning setup with a pretrained encoder.
pub const PAPER_LEARNING_RATE: f64 = 3e-5;
/// Learning rate that moves the small randomly initialized encoder within a few epochs.
pub const TOY_LEARNING_RATE: f64 = 40.0;
/// Overlap-stage step for the toy encoder; one step per epoch on a handful of pairs.
pub const TOY_OVERLAP_LEARNING_RATE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiEncoderModel {
    pub context: EncoderParams,
    pub candidate: EncoderParams,
}

impl BiEncoderModel {
    /// Both encoders start from the same weights, as two copies of one pretrained encoder would.
    pub fn new(vocab_size: usize, d: usize, seed: u64) -> Result<Self> {
        let p = init_params(vocab_size, d, seed)?;
        Ok(Self {
            context: p.clone(),
            candidate: p,
        })
    }

    pub fn from_parts(context: EncoderParams, candidate: EncoderParams) -> Result<Self> {
        if context.vocab_size != candidate.vocab_size || context.d != candidate.d {
            return Err(Error::Shape(format!(
                "context encoder ({}, {}) and candidate encoder ({}, {}) disagree",
                context.vocab_size, context.d, candidate.vocab_size, candidate.d
            )));
        }
        Ok(Self { context, candidate })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    C,
    CO,
    CA,
    COA,
    D,
    DA,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::C, Variant::CO, Variant::CA, Variant::COA, Variant::D, Variant::DA];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected one of C, CO, CA, COA, D, DA")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub name: Variant,
    pub train_context: bool,
    pub train_candidate: bool,
    pub overlap_stage: bool,
    pub augmentation: bool,
    pub lambda_mse: f64,
}

impl VariantConfig {
    pub fn new(name: Variant) -> Self {
        use Variant::*;
        Self {
            name,
            train_context: !matches!(name, D | DA),
            train_candidate: true,
            overlap_stage: matches!(name, CO | COA),
            augmentation: matches!(name, CA | COA | DA),
            lambda_mse: 0.0,
        }
    }

    pub fn with_lambda(mut self, lambda_mse: f64) -> Self {
        self.lambda_mse = lambda_mse;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if *self != VariantConfig::new(self.name).with_lambda(self.lambda_mse) {
            return Err(Error::Config(format!("flags are inconsistent with variant {}", self.name)));
        }
        check_lambda(self.lambda_mse)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda_mse must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Which entities the log-sum-exp normalizer runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalizer {
    /// Softmax cross-entropy: the gold entity is part of the normalizer (loss ≥ 0).
    #[default]
    IncludeGold,
    /// Sum over the in-batch negatives only; the loss may go negative.
    NegativesOnly,
}

impl FromStr for Normalizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "include_gold" => Ok(Normalizer::IncludeGold),
            "negatives_only" => Ok(Normalizer::NegativesOnly),
            _ => Err(Error::Config(format!("unknown normalizer {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub top_k: usize,
    pub normalizer: Normalizer,
    pub context_max_len: usize,
    pub candidate_max_len: usize,
    /// Step size for the overlap stage; `None` reuses `learning_rate`.
    #[serde(default)]
    pub overlap_learning_rate: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: TOY_LEARNING_RATE,
            epochs: 5,
            seed: 7,
            top_k: 10,
            normalizer: Normalizer::IncludeGold,
            context_max_len: DEFAULT_MAX_LEN,
            candidate_max_len: DEFAULT_MAX_LEN,
            overlap_learning_rate: Some(TOY_OVERLAP_LEARNING_RATE),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for in-batch negatives, got {}",
                self.batch_size
            )));
        }
        for lr in std::iter::once(self.learning_rate).chain(self.overlap_learning_rate) {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::Config(format!("invalid learning rate {lr}")));
            }
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Loss value plus gradients with respect to the two row sets it was given.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_left: Vec<Vec<f64>>,
    pub grad_right: Vec<Vec<f64>>,
}

fn check_rows(left: &[Vec<f64>], right: &[Vec<f64>]) -> Result<usize> {
    if left.len() != right.len() {
        return Err(Error::LengthMismatch {
            left: left.len(),
            right: right.len(),
        });
    }
    if left.len() < 2 {
        return Err(Error::Config(format!("batch needs at least 2 rows, got {}", left.len())));
    }
    let d = left[0].len();
    for row in left.iter().chain(right) {
        if row.len() != d {
            return Err(Error::Shape(format!("row of dimension {} in a batch of dimension {d}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("loss input".into()));
        }
    }
    Ok(d)
}

/// Softmax weights and log-sum-exp over `scores`, skipping index `skip` when given.
fn softmax_lse(scores: &[f64], skip: Option<usize>) -> (Vec<f64>, f64) {
    let included = |j: usize| Some(j) != skip;
    let max = scores
        .iter()
        .enumerate()
        .filter(|(j, _)| included(*j))
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(j, &s)| if included(j) { (s - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = exps.iter().sum();
    (exps.iter().map(|e| e / z).collect(), max + z.ln())
}

fn scatter(weights: &[Vec<f64>], rows: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
    weights
        .iter()
        .map(|w| {
            let mut acc = vec![0.0; d];
            for (wj, row) in w.iter().zip(rows) {
                for (a, r) in acc.iter_mut().zip(row) {
                    *a += wj * r;
                }
            }
            acc
        })
        .collect()
}

fn transpose(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.first().map_or(0, Vec::len);
    (0..n).map(|j| m.iter().map(|row| row[j]).collect()).collect()
}

/// Batch mean of `−c_i·r_i + log Σ_j exp(c_i·r_j)`; row `i` of `candidate` is the gold of row `i` of `context`.
pub fn inbatch_contrastive_loss(
    context: &[Vec<f64>],
    candidate: &[Vec<f64>],
    normalizer: Normalizer,
) -> Result<LossOutput> {
    let d = check_rows(context, candidate)?;
    let b = context.len();
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    // g[i][j] = ∂loss/∂(c_i·r_j)
    let mut g = vec![vec![0.0; b]; b];
    for i in 0..b {
        let scores: Vec<f64> = candidate.iter().map(|r| dot(&context[i], r)).collect();
        let skip = (normalizer == Normalizer::NegativesOnly).then_some(i);
        let (p, lse) = softmax_lse(&scores, skip);
        loss += -scores[i] + lse;
        for j in 0..b {
            g[i][j] = (p[j] - if i == j { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    Ok(LossOutput {
        loss: loss * inv_b,
        grad_left: scatter(&g, candidate, d),
        grad_right: scatter(&transpose(&g), context, d),
    })
}

/// Batch mean of `−a_i·b_i + log Σ_j exp(a_i·b_j) + log Σ_j exp(b_i·a_j) + λ|a_i − b_i|²`.
pub fn overlap_alignment_loss(
    o1: &[Vec<f64>],
    o2: &[Vec<f64>],
    lambda_mse: f64,
    normalizer: Normalizer,
) -> Result<LossOutput> {
    check_lambda(lambda_mse)?;
    let d = check_rows(o1, o2)?;
    let b = o1.len();
    let inv_b = 1.0 / b as f64;
    let s: Vec<Vec<f64>> = o1.iter().map(|a| o2.iter().map(|x| dot(a, x)).collect()).collect();
    let mut g = vec![vec![0.0; b]; b];
    let mut loss = 0.0;
    for i in 0..b {
        let skip = (normalizer == Normalizer::NegativesOnly).then_some(i);
        let (p, lse_row) = softmax_lse(&s[i], skip);
        let col: Vec<f64> = (0..b).map(|j| s[j][i]).collect();
        let (q, lse_col) = softmax_lse(&col, skip);
        let sq: f64 = o1[i].iter().zip(&o2[i]).map(|(x, y)| (x - y) * (x - y)).sum();
        loss += -s[i][i] + lse_row + lse_col + lambda_mse * sq;
        g[i][i] -= inv_b;
        for j in 0..b {
            g[i][j] += p[j] * inv_b;
            g[j][i] += q[j] * inv_b;
        }
    }
    let mut grad_left = scatter(&g, o2, d);
    let mut grad_right = scatter(&transpose(&g), o1, d);
    if lambda_mse != 0.0 {
        for i in 0..b {
            for k in 0..d {
                let diff = 2.0 * lambda_mse * (o1[i][k] - o2[i][k]) * inv_b;
                grad_left[i][k] += diff;
                grad_right[i][k] -= diff;
            }
        }
    }
    Ok(LossOutput {
        loss: loss * inv_b,
        grad_left,
        grad_right,
    })
}

/// `p ← p − lr·g`
pub fn sgd_step(params: &mut EncoderParams, grad: &EncoderGrad, learning_rate: f64) -> Result<()> {
    if !grad.matches(params) {
        return Err(Error::Shape("gradient does not match parameters".into()));
    }
    for (p, g) in params
        .embedding
        .iter_mut()
        .zip(&grad.embedding)
        .chain(params.proj_weight.iter_mut().zip(&grad.proj_weight))
        .chain(params.proj_bias.iter_mut().zip(&grad.proj_bias))
    {
        *p -= learning_rate * g;
    }
    Ok(())
}

fn encode_rows(params: &EncoderParams, seqs: &[&TokenSeq]) -> Result<Vec<Vec<f64>>> {
    seqs.iter().map(|s| Ok(encode(params, s)?.0)).collect()
}

fn backprop_rows(params: &EncoderParams, seqs: &[&TokenSeq], upstream: &[Vec<f64>], grad: &mut EncoderGrad) -> Result<()> {
    for (s, u) in seqs.iter().zip(upstream) {
        accumulate_backward(params, s, u, grad)?;
    }
    Ok(())
}

/// Contrastive loss of a mention batch with gradients for θm and θr.
pub fn mention_batch_loss(
    model: &BiEncoderModel,
    contexts: &[&TokenSeq],
    candidates: &[&TokenSeq],
    normalizer: Normalizer,
) -> Result<(f64, EncoderGrad, EncoderGrad)> {
    let c = encode_rows(&model.context, contexts)?;
    let r = encode_rows(&model.candidate, candidates)?;
    let out = inbatch_contrastive_loss(&c, &r, normalizer)?;
    let mut gc = EncoderGrad::zeros_like(&model.context);
    let mut gr = EncoderGrad::zeros_like(&model.candidate);
    backprop_rows(&model.context, contexts, &out.grad_left, &mut gc)?;
    backprop_rows(&model.candidate, candidates, &out.grad_right, &mut gr)?;
    Ok((out.loss, gc, gr))
}

/// Alignment loss of an overlap batch; both sides are entities, so only θr is involved.
pub fn overlap_batch_loss(
    candidate: &EncoderParams,
    first: &[&TokenSeq],
    second: &[&TokenSeq],
    lambda_mse: f64,
    normalizer: Normalizer,
) -> Result<(f64, EncoderGrad)> {
    let a = encode_rows(candidate, first)?;
    let b = encode_rows(candidate, second)?;
    let out = overlap_alignment_loss(&a, &b, lambda_mse, normalizer)?;
    let mut g = EncoderGrad::zeros_like(candidate);
    backprop_rows(candidate, first, &out.grad_left, &mut g)?;
    backprop_rows(candidate, second, &out.grad_right, &mut g)?;
    Ok((out.loss, g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ap1: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation AP@1 of the model handed to training.
    pub initial_valid_ap1: f64,
    pub stage1: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stage2: Vec<EpochRecord>,
    pub best_stage2_epoch: Option<usize>,
}

/// Drops a trailing batch of one row, which would have no in-batch negative.
fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size).filter(|c| c.len() >= 2)
}

fn validation_ap1(
    model: &BiEncoderModel,
    valid: &[MentionRecord],
    catalog: &UnifiedCatalog,
    vocab: &Vocab,
    tcfg: &TrainConfig,
) -> Result<f64> {
    if valid.is_empty() {
        return Ok(0.0);
    }
    let index = build_index(model, catalog, vocab, tcfg.candidate_max_len)?;
    let opts = LinkOptions {
        k: tcfg.top_k,
        stage: EvalStage::BiEncoder,
        context_max_len: tcfg.context_max_len,
        cross_max_len: 2 * tcfg.context_max_len,
    };
    Ok(evaluate_linking(model, &index, valid, catalog, vocab, &opts, None)?.ap_at_1)
}

/// Runs one stage of epochs, keeping the checkpoint with the best validation AP@1.
fn run_stage(
    model: &mut BiEncoderModel,
    n_items: usize,
    tcfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut step: impl FnMut(&mut BiEncoderModel, &[usize]) -> Result<f64>,
    validate: impl Fn(&BiEncoderModel) -> Result<f64>,
) -> Result<(Vec<EpochRecord>, Option<usize>)> {
    let mut records = Vec::with_capacity(tcfg.epochs);
    let mut best: Option<(usize, f64, BiEncoderModel)> = None;
    let mut order: Vec<usize> = (0..n_items).collect();
    for epoch in 0..tcfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in batches(&order, tcfg.batch_size) {
            total += step(model, batch)?;
            count += 1;
        }
        if !model.context.is_finite() || !model.candidate.is_finite() {
            return Err(Error::NonFinite(format!("parameters diverged in epoch {epoch}")));
        }
        let valid_ap1 = validate(model)?;
        records.push(EpochRecord {
            epoch,
            train_loss: if count > 0 { total / count as f64 } else { 0.0 },
            valid_ap1,
        });
        if best.as_ref().is_none_or(|(_, s, _)| valid_ap1 > *s) {
            best = Some((epoch, valid_ap1, model.clone()));
        }
    }
    Ok(match best {
        Some((epoch, _, m)) => {
            *model = m;
            (records, Some(epoch))
        }
        None => (records, None),
    })
}

/// Fine-tunes `model` according to `variant`.
///
/// Stage 1 trains on specific-domain train mentions (plus general-domain ones
/// when augmenting), shuffled together each epoch. Stage 2, for overlap
/// variants, starts from the stage-1 best checkpoint and trains θr on overlap
/// pairs. Each stage keeps its own best epoch by validation AP@1 on the
/// specific-domain validation split.
#[allow(clippy::too_many_arguments)]
pub fn train_variant(
    model: &BiEncoderModel,
    specific: &DatasetSplit,
    general: Option<&DatasetSplit>,
    overlap_pairs: Option<&[OverlapPair]>,
    variant: &VariantConfig,
    tcfg: &TrainConfig,
    catalog: &UnifiedCatalog,
    vocab: &Vocab,
) -> Result<(BiEncoderModel, TrainHistory)> {
    variant.validate()?;
    tcfg.validate()?;
    if variant.augmentation && general.is_none() {
        return Err(Error::Config(format!(
            "variant {} needs a general-domain mention split",
            variant.name
        )));
    }
    let pairs = match (variant.overlap_stage, overlap_pairs) {
        (true, None) => {
            return Err(Error::Config(format!("variant {} needs overlap pairs", variant.name)));
        }
        (true, Some(p)) => p,
        (false, _) => &[],
    };
    if model.context.vocab_size != vocab.len() {
        return Err(Error::Shape(format!(
            "model vocabulary {} vs vocab file {}",
            model.context.vocab_size,
            vocab.len()
        )));
    }

    let mut pool: Vec<&MentionRecord> = specific.train.iter().collect();
    if variant.augmentation {
        pool.extend(general.into_iter().flat_map(|g| g.train.iter()));
    }
    let contexts = pool
        .iter()
        .map(|m| encode_context(m, vocab, tcfg.context_max_len))
        .collect::<Result<Vec<_>>>()?;
    let golds = pool
        .iter()
        .map(|m| catalog.gold_ordinal(m))
        .collect::<Result<Vec<_>>>()?;
    let entity_seqs = catalog
        .entities()
        .iter()
        .map(|e| encode_candidate(e, vocab, tcfg.candidate_max_len))
        .collect::<Result<Vec<_>>>()?;
    catalog.resolve_all(&specific.valid)?;

    let validate = |m: &BiEncoderModel| validation_ap1(m, &specific.valid, catalog, vocab, tcfg);
    let mut history = TrainHistory {
        initial_valid_ap1: validate(model)?,
        ..Default::default()
    };
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);

    if tcfg.epochs > 0 && pool.len() < 2 {
        return Err(Error::Config("fewer than 2 training mentions".into()));
    }
    let (records, best) = run_stage(
        &mut model,
        pool.len(),
        tcfg,
        &mut rng,
        |m, batch| {
            let ctx: Vec<&TokenSeq> = batch.iter().map(|&i| &contexts[i]).collect();
            let cand: Vec<&TokenSeq> = batch.iter().map(|&i| &entity_seqs[golds[i]]).collect();
            let (loss, gc, gr) = mention_batch_loss(m, &ctx, &cand, tcfg.normalizer)?;
            if variant.train_context {
                sgd_step(&mut m.context, &gc, tcfg.learning_rate)?;
            }
            if variant.train_candidate {
                sgd_step(&mut m.candidate, &gr, tcfg.learning_rate)?;
            }
            Ok(loss)
        },
        validate,
    )?;
    history.stage1 = records;
    history.best_epoch = best;

    if variant.overlap_stage {
        for p in pairs {
            catalog.get(p.general_ordinal)?;
            catalog.get(p.specific_ordinal)?;
        }
        if tcfg.epochs > 0 && pairs.len() < 2 {
            return Err(Error::Config("fewer than 2 overlap pairs".into()));
        }
        let overlap_lr = tcfg.overlap_learning_rate.unwrap_or(tcfg.learning_rate);
        let (records, best) = run_stage(
            &mut model,
            pairs.len(),
            tcfg,
            &mut rng,
            |m, batch| {
                let a: Vec<&TokenSeq> = batch.iter().map(|&i| &entity_seqs[pairs[i].general_ordinal]).collect();
                let b: Vec<&TokenSeq> = batch.iter().map(|&i| &entity_seqs[pairs[i].specific_ordinal]).collect();
                let (loss, g) = overlap_batch_loss(&m.candidate, &a, &b, variant.lambda_mse, tcfg.normalizer)?;
                sgd_step(&mut m.candidate, &g, overlap_lr)?;
                Ok(loss)
            },
            validate,
        )?;
        history.stage2 = records;
        history.best_stage2_epoch = best;
    }
    Ok((model, history))
}

/// Everything needed to restore a trained run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub variant: VariantConfig,
    pub train: TrainConfig,
    pub context: EncoderParams,
    pub candidate: EncoderParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross: Option<CrossEncoderModel>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<BiEncoderModel> {
        BiEncoderModel::from_parts(self.context.clone(), self.candidate.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(self).expect("serializable")).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}
