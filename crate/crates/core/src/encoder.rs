//! Mean-pool → affine → tanh text encoder with exact backprop.
//!
//! `v = tanh(W · mean(E[t] for non-PAD t) + b)`

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenSeq, PAD, RESERVED};

pub const DEFAULT_DIM: usize = 64;
pub const INIT_RANGE: f64 = 0.05;

/// Trainable encoder weights. Matrices are row-major `Vec<f64>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub vocab_size: usize,
    pub d: usize,
    pub init_seed: u64,
    /// `vocab_size × d`
    pub embedding: Vec<f64>,
    /// `d × d`, row `i` produces output coordinate `i`
    pub proj_weight: Vec<f64>,
    pub proj_bias: Vec<f64>,
}

/// Gradient buffer with the same layout as [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrad {
    pub vocab_size: usize,
    pub d: usize,
    pub embedding: Vec<f64>,
    pub proj_weight: Vec<f64>,
    pub proj_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVec(pub Vec<f64>);

impl EmbeddingVec {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; zero when either side has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

pub fn init_params(vocab_size: usize, d: usize, seed: u64) -> Result<EncoderParams> {
    if vocab_size < RESERVED.len() {
        return Err(Error::Shape(format!(
            "vocab_size must be at least {}, got {vocab_size}",
            RESERVED.len()
        )));
    }
    if d < 2 {
        return Err(Error::Shape(format!("dimension must be at least 2, got {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-INIT_RANGE, INIT_RANGE);
    let embedding = (0..vocab_size * d).map(|_| dist.sample(&mut rng)).collect();
    let proj_weight = (0..d * d).map(|_| dist.sample(&mut rng)).collect();
    Ok(EncoderParams {
        vocab_size,
        d,
        init_seed: seed,
        embedding,
        proj_weight,
        proj_bias: vec![0.0; d],
    })
}

impl EncoderParams {
    pub fn param_count(&self) -> usize {
        self.embedding.len() + self.proj_weight.len() + self.proj_bias.len()
    }

    /// Flat view over every scalar, in embedding / weight / bias order.
    pub fn get(&self, i: usize) -> f64 {
        let (e, w) = (self.embedding.len(), self.proj_weight.len());
        if i < e {
            self.embedding[i]
        } else if i < e + w {
            self.proj_weight[i - e]
        } else {
            self.proj_bias[i - e - w]
        }
    }

    pub fn set(&mut self, i: usize, v: f64) {
        let (e, w) = (self.embedding.len(), self.proj_weight.len());
        if i < e {
            self.embedding[i] = v
        } else if i < e + w {
            self.proj_weight[i - e] = v
        } else {
            self.proj_bias[i - e - w] = v
        }
    }

    pub fn is_finite(&self) -> bool {
        self.embedding
            .iter()
            .chain(&self.proj_weight)
            .chain(&self.proj_bias)
            .all(|v| v.is_finite())
    }

    fn check_shapes(&self) -> Result<()> {
        if self.embedding.len() != self.vocab_size * self.d
            || self.proj_weight.len() != self.d * self.d
            || self.proj_bias.len() != self.d
        {
            return Err(Error::Shape(format!(
                "parameter buffers do not match vocab_size={} d={}",
                self.vocab_size, self.d
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).expect("serializable");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        params.check_shapes()?;
        Ok(params)
    }
}

impl EncoderGrad {
    pub fn zeros_like(p: &EncoderParams) -> Self {
        Self {
            vocab_size: p.vocab_size,
            d: p.d,
            embedding: vec![0.0; p.embedding.len()],
            proj_weight: vec![0.0; p.proj_weight.len()],
            proj_bias: vec![0.0; p.proj_bias.len()],
        }
    }

    pub fn get(&self, i: usize) -> f64 {
        let (e, w) = (self.embedding.len(), self.proj_weight.len());
        if i < e {
            self.embedding[i]
        } else if i < e + w {
            self.proj_weight[i - e]
        } else {
            self.proj_bias[i - e - w]
        }
    }

    pub fn matches(&self, p: &EncoderParams) -> bool {
        self.vocab_size == p.vocab_size
            && self.d == p.d
            && self.embedding.len() == p.embedding.len()
            && self.proj_weight.len() == p.proj_weight.len()
            && self.proj_bias.len() == p.proj_bias.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.embedding
            .iter()
            .chain(&self.proj_weight)
            .chain(&self.proj_bias)
    }
}

/// Forward pass intermediates needed by the backward pass.
struct Forward {
    pooled: Vec<f64>,
    out: Vec<f64>,
    n_tokens: usize,
}

fn forward(params: &EncoderParams, seq: &TokenSeq) -> Result<Forward> {
    let d = params.d;
    let mut pooled = vec![0.0; d];
    let mut n_tokens = 0usize;
    for &id in &seq.ids {
        if id as usize >= params.vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: params.vocab_size,
            });
        }
        if id == PAD {
            continue;
        }
        n_tokens += 1;
        let row = &params.embedding[id as usize * d..(id as usize + 1) * d];
        for (p, r) in pooled.iter_mut().zip(row) {
            *p += r;
        }
    }
    if n_tokens > 0 {
        let inv = 1.0 / n_tokens as f64;
        pooled.iter_mut().for_each(|p| *p *= inv);
    }
    let out = (0..d)
        .map(|i| (dot(&params.proj_weight[i * d..(i + 1) * d], &pooled) + params.proj_bias[i]).tanh())
        .collect();
    Ok(Forward {
        pooled,
        out,
        n_tokens,
    })
}

pub fn encode(params: &EncoderParams, seq: &TokenSeq) -> Result<EmbeddingVec> {
    Ok(EmbeddingVec(forward(params, seq)?.out))
}

/// Adds the gradient of `upstream · encode(params, seq)` into `grad`.
pub fn accumulate_backward(
    params: &EncoderParams,
    seq: &TokenSeq,
    upstream: &[f64],
    grad: &mut EncoderGrad,
) -> Result<()> {
    let d = params.d;
    if upstream.len() != d || !grad.matches(params) {
        return Err(Error::Shape(format!(
            "upstream has {} entries, encoder dimension is {d}",
            upstream.len()
        )));
    }
    let fwd = forward(params, seq)?;
    // δ = u ⊙ (1 − v²)
    let delta: Vec<f64> = upstream
        .iter()
        .zip(&fwd.out)
        .map(|(u, v)| u * (1.0 - v * v))
        .collect();
    for i in 0..d {
        grad.proj_bias[i] += delta[i];
        let row = &mut grad.proj_weight[i * d..(i + 1) * d];
        for (g, p) in row.iter_mut().zip(&fwd.pooled) {
            *g += delta[i] * p;
        }
    }
    if fwd.n_tokens == 0 {
        return Ok(());
    }
    let inv = 1.0 / fwd.n_tokens as f64;
    let mut d_pooled = vec![0.0; d];
    for i in 0..d {
        let w = &params.proj_weight[i * d..(i + 1) * d];
        for (dp, wij) in d_pooled.iter_mut().zip(w) {
            *dp += wij * delta[i];
        }
    }
    d_pooled.iter_mut().for_each(|v| *v *= inv);
    for &id in seq.ids.iter().filter(|&&id| id != PAD) {
        let row = &mut grad.embedding[id as usize * d..(id as usize + 1) * d];
        for (g, v) in row.iter_mut().zip(&d_pooled) {
            *g += v;
        }
    }
    Ok(())
}

pub fn encode_backward(params: &EncoderParams, seq: &TokenSeq, upstream: &[f64]) -> Result<EncoderGrad> {
    let mut grad = EncoderGrad::zeros_like(params);
    accumulate_backward(params, seq, upstream, &mut grad)?;
    Ok(grad)
}

/// Relative error floor: coordinates whose true gradient is below this are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Coordinates to probe: all of them up to 10,000, otherwise a seeded sample of 1,000.
pub fn grad_check_coordinates(param_count: usize, seed: u64) -> Vec<usize> {
    if param_count <= 10_000 {
        (0..param_count).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, param_count, 1000).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Max relative error between [`encode_backward`] and central differences of
/// `upstream · encode(params, seq)`.
pub fn grad_check(params: &EncoderParams, seq: &TokenSeq, upstream: &[f64], eps: f64) -> Result<f64> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let analytic = encode_backward(params, seq, upstream)?;
    let mut probe = params.clone();
    let f = |p: &EncoderParams| -> Result<f64> { Ok(dot(upstream, encode(p, seq)?.as_slice())) };
    let mut worst = 0.0f64;
    for i in grad_check_coordinates(params.param_count(), params.init_seed) {
        let orig = probe.get(i);
        probe.set(i, orig + eps);
        let plus = f(&probe)?;
        probe.set(i, orig - eps);
        let minus = f(&probe)?;
        probe.set(i, orig);
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.get(i), numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn seq(ids: &[u32]) -> TokenSeq {
        TokenSeq {
            ids: ids.to_vec(),
            max_len: 128,
        }
    }

    /// Straight-line recomputation of the forward formula with explicit loops.
    fn reference_encode(p: &EncoderParams, ids: &[u32]) -> Vec<f64> {
        let d = p.d;
        let kept: Vec<u32> = ids.iter().copied().filter(|&t| t != PAD).collect();
        let mut out = vec![0.0; d];
        for i in 0..d {
            let mut acc = p.proj_bias[i];
            for j in 0..d {
                let mut mean = 0.0;
                for &t in &kept {
                    mean += p.embedding[t as usize * d + j];
                }
                if !kept.is_empty() {
                    mean /= kept.len() as f64;
                }
                acc += p.proj_weight[i * d + j] * mean;
            }
            out[i] = acc.tanh();
        }
        out
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = init_params(50, 8, 11).unwrap();
        let b = init_params(50, 8, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.proj_bias.iter().all(|&b| b == 0.0));
        assert!(a.embedding.iter().all(|v| v.abs() <= INIT_RANGE));
        assert_ne!(a, init_params(50, 8, 12).unwrap());
    }

    #[test]
    fn init_rejects_bad_shapes() {
        assert!(matches!(init_params(50, 1, 0), Err(Error::Shape(_))));
        assert!(matches!(init_params(6, 4, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_params_give_zero_output() {
        let mut p = init_params(20, 4, 0).unwrap();
        p.embedding.iter_mut().for_each(|v| *v = 0.0);
        p.proj_weight.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(encode(&p, &seq(&[2, 9, 3])).unwrap().0, vec![0.0; 4]);
    }

    #[test]
    fn mean_pooling_ignores_duplicates_and_pad() {
        let p = init_params(20, 6, 3).unwrap();
        let a = encode(&p, &seq(&[10, 10])).unwrap();
        let b = encode(&p, &seq(&[10, PAD, PAD])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn matches_reference_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = init_params(40, 8, 9).unwrap();
        p.proj_bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
        let ids: Vec<u32> = (0..17).map(|_| rng.gen_range(0..40)).collect();
        let got = encode(&p, &seq(&ids)).unwrap();
        for (g, r) in got.0.iter().zip(reference_encode(&p, &ids)) {
            assert!((g - r).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_token() {
        let p = init_params(10, 4, 0).unwrap();
        assert!(matches!(
            encode(&p, &seq(&[2, 10])),
            Err(Error::TokenOutOfRange { id: 10, .. })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grad() {
        let p = init_params(30, 5, 1).unwrap();
        let g = encode_backward(&p, &seq(&[2, 11, 12, 3]), &[0.0; 5]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn absent_tokens_have_zero_row_grad() {
        let p = init_params(30, 5, 1).unwrap();
        let g = encode_backward(&p, &seq(&[2, 11, 3]), &[1.0, -2.0, 0.5, 0.1, 3.0]).unwrap();
        for t in 0..30u32 {
            let row = &g.embedding[t as usize * 5..(t as usize + 1) * 5];
            if ![2, 11, 3].contains(&t) {
                assert!(row.iter().all(|&v| v == 0.0), "row {t}");
            } else {
                assert!(row.iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn backward_shape_mismatch() {
        let p = init_params(30, 5, 1).unwrap();
        assert!(matches!(
            encode_backward(&p, &seq(&[2]), &[1.0; 4]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn grad_check_small_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = init_params(50, 8, 4).unwrap();
        let ids: Vec<u32> = (0..12).map(|_| rng.gen_range(0..50)).collect();
        let u: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert!(grad_check(&p, &seq(&ids), &u, 1e-4).unwrap() < 1e-4);
    }

    #[test]
    fn grad_check_bias_path_is_tight() {
        // All-zero weights: output is tanh(b), and the check only sees the bias path.
        let mut p = init_params(10, 3, 0).unwrap();
        p.embedding.iter_mut().for_each(|v| *v = 0.0);
        p.proj_weight.iter_mut().for_each(|v| *v = 0.0);
        let err = grad_check(&p, &seq(&[2, 3]), &[1.0, 1.0, 1.0], 1e-4).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_rejects_nonpositive_eps() {
        let p = init_params(10, 3, 0).unwrap();
        assert!(grad_check(&p, &seq(&[2]), &[1.0; 3], 0.0).is_err());
    }

    #[test]
    fn large_models_are_sampled() {
        assert_eq!(grad_check_coordinates(500, 0).len(), 500);
        let c = grad_check_coordinates(20_000, 0);
        assert_eq!(c.len(), 1000);
        assert_eq!(c, grad_check_coordinates(20_000, 0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = init_params(25, 6, 77).unwrap();
        p.proj_bias[0] = 1.0 / 3.0;
        p.proj_bias[1] = -f64::MIN_POSITIVE;
        let path = dir.path().join("enc.json");
        p.save(&path).unwrap();
        let q = EncoderParams::load(&path).unwrap();
        let bits = |p: &EncoderParams| -> Vec<u64> {
            p.embedding
                .iter()
                .chain(&p.proj_weight)
                .chain(&p.proj_bias)
                .map(|v| v.to_bits())
                .collect()
        };
        assert_eq!(bits(&p), bits(&q));
    }

    proptest! {
        #[test]
        fn output_in_tanh_range_and_order_free(seed in any::<u64>(), ids in proptest::collection::vec(0u32..30, 1..20)) {
            let p = init_params(30, 6, seed).unwrap();
            let v = encode(&p, &seq(&ids)).unwrap();
            prop_assert!(v.0.iter().all(|x| x.abs() < 1.0));
            let mut rev = ids.clone();
            rev.reverse();
            let w = encode(&p, &seq(&rev)).unwrap();
            for (a, b) in v.0.iter().zip(&w.0) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }
    }
}
