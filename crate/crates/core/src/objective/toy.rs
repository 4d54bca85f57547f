//! A minimal autoregressive scorer for exercising the objective at desk
//! scale: mean-pooled context embedding plus previous-token embedding,
//! projected to vocabulary logits. Small enough that every gradient is
//! checkable by finite differences, normalized so scores are true
//! log-probabilities.

use crate::objective::ObjectiveError;
use crate::seed;
use crate::types::{ModelTag, ScoreRecord};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Parameter layout: token embeddings (vocab_size x embed_dim) followed by
/// the output projection (embed_dim x vocab_size), flat and row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyScorer {
    vocab_size: usize,
    embed_dim: usize,
    params: Vec<f64>,
    seed: u64,
}

impl ToyScorer {
    pub fn zeros(vocab_size: usize, embed_dim: usize) -> Self {
        assert!(vocab_size >= 1 && embed_dim >= 1);
        ToyScorer {
            vocab_size,
            embed_dim,
            params: vec![0.0; 2 * vocab_size * embed_dim],
            seed: 0,
        }
    }

    /// Uniform init in [-scale, scale], reproducible from the seed.
    pub fn seeded(vocab_size: usize, embed_dim: usize, seed: u64, scale: f64) -> Self {
        let mut scorer = ToyScorer::zeros(vocab_size, embed_dim);
        scorer.seed = seed;
        let mut rng = seed::rng(seed);
        for p in &mut scorer.params {
            *p = rng.random_range(-scale..scale);
        }
        scorer
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, i: usize) -> f64 {
        self.params[i]
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        self.params[i] = v;
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Flat index of embedding component (token, dim).
    pub fn embed_index(&self, token: usize, dim: usize) -> usize {
        token * self.embed_dim + dim
    }

    /// Flat index of projection component (dim, vocab).
    pub fn proj_index(&self, dim: usize, vocab: usize) -> usize {
        self.vocab_size * self.embed_dim + dim * self.vocab_size + vocab
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), ObjectiveError> {
        for &t in tokens {
            if t >= self.vocab_size {
                return Err(ObjectiveError::TokenOutOfRange {
                    token: t,
                    vocab_size: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn context_mean(&self, context: &[usize]) -> Vec<f64> {
        let mut h = vec![0.0; self.embed_dim];
        if context.is_empty() {
            return h;
        }
        for &c in context {
            for (d, hd) in h.iter_mut().enumerate() {
                *hd += self.params[self.embed_index(c, d)];
            }
        }
        let inv = 1.0 / context.len() as f64;
        for v in &mut h {
            *v *= inv;
        }
        h
    }

    fn hidden(&self, ctx_mean: &[f64], prev: Option<usize>) -> Vec<f64> {
        let mut h = ctx_mean.to_vec();
        if let Some(p) = prev {
            for (d, hd) in h.iter_mut().enumerate() {
                *hd += self.params[self.embed_index(p, d)];
            }
        }
        h
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.vocab_size];
        for (d, &hd) in h.iter().enumerate() {
            if hd == 0.0 {
                continue;
            }
            let row = self.vocab_size * self.embed_dim + d * self.vocab_size;
            for (v, zv) in z.iter_mut().enumerate() {
                *zv += hd * self.params[row + v];
            }
        }
        z
    }

    /// Per-position log-distribution over the vocabulary.
    pub fn log_distribution(&self, context: &[usize], prev: Option<usize>) -> Vec<f64> {
        let ctx_mean = self.context_mean(context);
        let h = self.hidden(&ctx_mean, prev);
        let z = self.logits(&h);
        let lse = log_sum_exp(&z);
        z.iter().map(|zi| zi - lse).collect()
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|zi| (zi - m).exp()).sum::<f64>().ln()
}

fn fnv1a_tokens(tokens: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &t in tokens {
        for b in (t as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Hash-maps whitespace-separated words onto token ids below `vocab_size`.
pub fn tokenize(text: &str, vocab_size: usize) -> Vec<usize> {
    text.split_whitespace()
        .map(|w| {
            let mut h: u64 = 0xcbf29ce484222325;
            for b in w.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            (h % vocab_size as u64) as usize
        })
        .collect()
}

/// Scores `response` autoregressively given `context`. Deterministic for
/// fixed parameters; `context_frames` is zero because the toy model scores
/// token sequences, not frame contexts.
pub fn toy_score(
    scorer: &ToyScorer,
    context: &[usize],
    response: &[usize],
    tag: ModelTag,
) -> Result<ScoreRecord, ObjectiveError> {
    if response.is_empty() {
        return Err(ObjectiveError::EmptyResponse);
    }
    scorer.check_tokens(context)?;
    scorer.check_tokens(response)?;

    let ctx_mean = scorer.context_mean(context);
    let mut token_logprobs = Vec::with_capacity(response.len());
    for (t, &tok) in response.iter().enumerate() {
        let prev = if t == 0 { None } else { Some(response[t - 1]) };
        let h = scorer.hidden(&ctx_mean, prev);
        let z = scorer.logits(&h);
        let lse = log_sum_exp(&z);
        token_logprobs.push(z[tok] - lse);
    }
    let sum_logprob = token_logprobs.iter().sum();
    Ok(ScoreRecord {
        model_tag: tag,
        context_id: format!("toks-{:016x}", fnv1a_tokens(context)),
        response_id: format!("toks-{:016x}", fnv1a_tokens(response)),
        sum_logprob,
        token_count: response.len() as u64,
        token_logprobs,
        context_frames: 0,
    })
}

/// Gradient of `sum_logprob` with respect to every parameter, in the same
/// flat layout as `ToyScorer::params`.
pub fn toy_score_grad(
    scorer: &ToyScorer,
    context: &[usize],
    response: &[usize],
) -> Result<Vec<f64>, ObjectiveError> {
    if response.is_empty() {
        return Err(ObjectiveError::EmptyResponse);
    }
    scorer.check_tokens(context)?;
    scorer.check_tokens(response)?;

    let v_count = scorer.vocab_size;
    let d_count = scorer.embed_dim;
    let mut grad = vec![0.0; scorer.param_count()];
    let ctx_mean = scorer.context_mean(context);
    let ctx_weight = if context.is_empty() {
        0.0
    } else {
        1.0 / context.len() as f64
    };

    for (t, &tok) in response.iter().enumerate() {
        let prev = if t == 0 { None } else { Some(response[t - 1]) };
        let h = scorer.hidden(&ctx_mean, prev);
        let z = scorer.logits(&h);
        let lse = log_sum_exp(&z);
        // d logprob / d z_v = onehot(tok) - softmax(z)_v
        let dz: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(v, zi)| {
                let p = (zi - lse).exp();
                if v == tok {
                    1.0 - p
                } else {
                    -p
                }
            })
            .collect();
        // Projection gradient: dW[d][v] += h[d] * dz[v].
        for (d, &hd) in h.iter().enumerate() {
            if hd != 0.0 {
                let row = v_count * d_count + d * v_count;
                for (v, &dzv) in dz.iter().enumerate() {
                    grad[row + v] += hd * dzv;
                }
            }
        }
        // Hidden-state gradient: dh[d] = sum_v W[d][v] * dz[v].
        let mut dh = vec![0.0; d_count];
        for (d, dhd) in dh.iter_mut().enumerate() {
            let row = v_count * d_count + d * v_count;
            let mut acc = 0.0;
            for (v, &dzv) in dz.iter().enumerate() {
                acc += scorer.params[row + v] * dzv;
            }
            *dhd = acc;
        }
        // The hidden state is ctx_mean + prev embedding.
        for &c in context {
            for (d, &dhd) in dh.iter().enumerate() {
                grad[scorer.embed_index(c, d)] += dhd * ctx_weight;
            }
        }
        if let Some(p) = prev {
            for (d, &dhd) in dh.iter().enumerate() {
                grad[scorer.embed_index(p, d)] += dhd;
            }
        }
    }
    Ok(grad)
}

#[derive(Serialize, Deserialize)]
struct ScorerRepr {
    vocab_size: usize,
    embed_dim: usize,
    seed: u64,
    params_hex: String,
}

impl Serialize for ToyScorer {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut bytes = Vec::with_capacity(self.params.len() * 8);
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        ScorerRepr {
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
            seed: self.seed,
            params_hex: hex::encode(bytes),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ToyScorer {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let repr = ScorerRepr::deserialize(deserializer)?;
        let bytes = hex::decode(&repr.params_hex).map_err(D::Error::custom)?;
        if bytes.len() % 8 != 0 {
            return Err(D::Error::custom("params_hex length not a multiple of 8"));
        }
        let params: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.len() != 2 * repr.vocab_size * repr.embed_dim {
            return Err(D::Error::custom("params length does not match dimensions"));
        }
        Ok(ToyScorer {
            vocab_size: repr.vocab_size,
            embed_dim: repr.embed_dim,
            params,
            seed: repr.seed,
        })
    }
}
