//! Cross-encoder: one encoder over the concatenated mention + entity sequence and a linear scorer.

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::biencoder::{sgd_step, BiEncoderModel};
use crate::corpus::{MentionRecord, UnifiedCatalog};
use crate::encoder::{accumulate_backward, dot, encode, init_params, EncoderGrad, EncoderParams, INIT_RANGE};
use crate::error::{Error, Result};
use crate::eval::{link_mention, EvalStage, LinkOptions};
use crate::index::{EntityIndex, Ranking, ScoredEntity};
use crate::tokenizer::{encode_cross, TokenSeq, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEncoderModel {
    pub encoder: EncoderParams,
    /// Classification weights applied to the pooled pair embedding.
    pub w: Vec<f64>,
}

impl CrossEncoderModel {
    pub fn new(vocab_size: usize, d: usize, seed: u64) -> Result<Self> {
        let encoder = init_params(vocab_size, d, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c055);
        let dist = Uniform::new_inclusive(-INIT_RANGE, INIT_RANGE);
        let w = (0..d).map(|_| dist.sample(&mut rng)).collect();
        Ok(Self { encoder, w })
    }
}

pub fn score_pair(model: &CrossEncoderModel, pair: &TokenSeq) -> Result<f64> {
    if model.w.len() != model.encoder.d {
        return Err(Error::Shape(format!(
            "scorer has {} weights, encoder dimension is {}",
            model.w.len(),
            model.encoder.d
        )));
    }
    Ok(dot(encode(&model.encoder, pair)?.as_slice(), &model.w))
}

/// `−logit[gold] + log Σ_j exp(logit[j])` and its gradient.
pub fn rank_loss(logits: &[f64], gold: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::Config(format!("need at least 2 candidates, got {}", logits.len())));
    }
    if gold >= logits.len() {
        return Err(Error::Config(format!("gold index {gold} out of range for {} candidates", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = -logits[gold] + max + z.ln();
    let grad = exps
        .iter()
        .enumerate()
        .map(|(j, e)| e / z - if j == gold { 1.0 } else { 0.0 })
        .collect();
    Ok((loss, grad))
}

pub fn rerank(
    model: &CrossEncoderModel,
    mention: &MentionRecord,
    candidates: &[usize],
    catalog: &UnifiedCatalog,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Ranking> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    let scored = candidates
        .iter()
        .map(|&ordinal| {
            let seq = encode_cross(mention, catalog.get(ordinal)?, vocab, max_len)?;
            Ok(ScoredEntity {
                ordinal,
                score: score_pair(model, &seq)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ranking::from_scores(scored))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub top_k: usize,
    pub context_max_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for CrossTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            learning_rate: 0.5,
            top_k: 10,
            context_max_len: 128,
            max_len: 256,
            seed: 7,
        }
    }
}

/// Loss and gradients for one mention's candidate list.
pub fn candidate_list_loss(
    model: &CrossEncoderModel,
    pairs: &[TokenSeq],
    gold: usize,
) -> Result<(f64, EncoderGrad, Vec<f64>)> {
    let embeddings = pairs
        .iter()
        .map(|s| Ok(encode(&model.encoder, s)?.0))
        .collect::<Result<Vec<_>>>()?;
    let logits: Vec<f64> = embeddings.iter().map(|v| dot(v, &model.w)).collect();
    let (loss, g) = rank_loss(&logits, gold)?;
    let mut grad = EncoderGrad::zeros_like(&model.encoder);
    let mut grad_w = vec![0.0; model.w.len()];
    for ((seq, v), gj) in pairs.iter().zip(&embeddings).zip(&g) {
        for (gw, x) in grad_w.iter_mut().zip(v) {
            *gw += gj * x;
        }
        let upstream: Vec<f64> = model.w.iter().map(|w| gj * w).collect();
        accumulate_backward(&model.encoder, seq, &upstream, &mut grad)?;
    }
    Ok((loss, grad, grad_w))
}

/// Trains the cross-encoder on bi-encoder top-k candidate lists. When the gold
/// entity is not retrieved it replaces the last candidate. Returns mean loss per epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_cross_encoder(
    model: &CrossEncoderModel,
    bi: &BiEncoderModel,
    index: &EntityIndex,
    mentions: &[MentionRecord],
    catalog: &UnifiedCatalog,
    vocab: &Vocab,
    cfg: &CrossTrainConfig,
) -> Result<(CrossEncoderModel, Vec<f64>)> {
    if cfg.top_k < 2 {
        return Err(Error::Config("cross-encoder training needs top_k ≥ 2".into()));
    }
    let opts = LinkOptions {
        k: cfg.top_k,
        stage: EvalStage::BiEncoder,
        context_max_len: cfg.context_max_len,
        cross_max_len: cfg.max_len,
    };
    let mut lists = Vec::with_capacity(mentions.len());
    for m in mentions {
        let gold = catalog.gold_ordinal(m)?;
        let mut cands: Vec<usize> = link_mention(bi, index, m, catalog, vocab, &opts, None)?
            .ordinals()
            .collect();
        if cands.len() < 2 {
            continue;
        }
        let gold_pos = match cands.iter().position(|&c| c == gold) {
            Some(p) => p,
            None => {
                let last = cands.len() - 1;
                cands[last] = gold;
                last
            }
        };
        let seqs = cands
            .iter()
            .map(|&c| encode_cross(m, catalog.get(c)?, vocab, cfg.max_len))
            .collect::<Result<Vec<_>>>()?;
        lists.push((seqs, gold_pos));
    }

    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..lists.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (seqs, gold) = &lists[i];
            let (loss, grad, grad_w) = candidate_list_loss(&model, seqs, *gold)?;
            sgd_step(&mut model.encoder, &grad, cfg.learning_rate)?;
            for (w, g) in model.w.iter_mut().zip(&grad_w) {
                *w -= cfg.learning_rate * g;
            }
            total += loss;
        }
        if !model.encoder.is_finite() {
            return Err(Error::NonFinite("cross-encoder parameters diverged".into()));
        }
        losses.push(if lists.is_empty() { 0.0 } else { total / lists.len() as f64 });
    }
    Ok((model, losses))
}
