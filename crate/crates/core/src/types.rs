//! Shared domain types: clips, composites, triples, scenes, scores, config.
//!
//! Everything here is immutable after construction and safe to share across
//! worker threads. Validation helpers return violation lists rather than
//! mutating or failing fast, so callers can report every problem at once.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use thiserror::Error;

/// Tolerance for the unit-norm check on stored embeddings.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum TypeError {
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding norm {norm} is not within {UNIT_NORM_TOLERANCE} of 1.0")]
    NotUnitNorm { norm: f64 },
    #[error("embedding contains a non-finite component")]
    NonFiniteEmbedding,
    #[error("embedding has zero norm and cannot be normalized")]
    ZeroNorm,
    #[error("embedding is empty")]
    EmptyEmbedding,
    #[error("clip {clip_id}: {reason}")]
    InvalidClip { clip_id: String, reason: String },
    #[error("score record {context_id}/{response_id}: {reason}")]
    InvalidScore {
        context_id: String,
        response_id: String,
        reason: String,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Unit-norm embedding vector, stored as 32-bit floats.
///
/// Serializes as a base-16 string of little-endian float bytes so records
/// stay single-line and round-trip bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Accepts a vector already normalized to unit length within tolerance.
    pub fn from_unit(values: Vec<f32>) -> Result<Self, TypeError> {
        if values.is_empty() {
            return Err(TypeError::EmptyEmbedding);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TypeError::NonFiniteEmbedding);
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(TypeError::NotUnitNorm { norm });
        }
        Ok(Embedding(values))
    }

    /// Normalizes an arbitrary nonzero vector; the ingestion path for
    /// manifests whose embeddings are not yet unit length.
    pub fn normalized(values: Vec<f64>) -> Result<Self, TypeError> {
        if values.is_empty() {
            return Err(TypeError::EmptyEmbedding);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TypeError::NonFiniteEmbedding);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(TypeError::ZeroNorm);
        }
        Ok(Embedding(
            values.iter().map(|v| (v / norm) as f32).collect(),
        ))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        let mut bytes = Vec::with_capacity(self.0.len() * 4);
        for v in &self.0 {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        hex::encode(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self, TypeError> {
        let bytes = hex::decode(s)
            .map_err(|_| TypeError::NonFiniteEmbedding)
            .and_then(|b| {
                if b.len() % 4 == 0 {
                    Ok(b)
                } else {
                    Err(TypeError::NonFiniteEmbedding)
                }
            })?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Embedding::from_unit(values)
    }
}

fn l2_norm(values: &[f32]) -> f64 {
    values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

impl Serialize for Embedding {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Embedding {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Embedding::from_hex(&s).map_err(|e| D::Error::custom(format!("bad embedding: {e}")))
    }
}

/// Cosine similarity between two unit vectors, computed as a dot product.
///
/// The reduction runs in index order with f64 accumulation so independent
/// implementations over the same data agree bit-for-bit.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64, TypeError> {
    if a.dim() != b.dim() {
        return Err(TypeError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    for e in [a, b] {
        let norm = l2_norm(e.as_slice());
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(TypeError::NotUnitNorm { norm });
        }
    }
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| (x as f64) * (y as f64))
        .sum())
}

/// A short video segment: opaque frame references plus precomputed metadata.
/// The pipeline never decodes pixels; frame refs are paths or URIs resolved
/// by whatever serves the frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub clip_id: String,
    pub frame_refs: Vec<String>,
    pub frame_count: u64,
    pub fps: f64,
    pub caption: String,
    pub embedding: Option<Embedding>,
}

impl Clip {
    pub fn validate(&self) -> Result<(), TypeError> {
        let fail = |reason: &str| {
            Err(TypeError::InvalidClip {
                clip_id: self.clip_id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.clip_id.is_empty() {
            return fail("empty clip_id");
        }
        if self.frame_count == 0 {
            return fail("frame_count must be >= 1");
        }
        if self.frame_count as usize != self.frame_refs.len() {
            return fail("frame_count does not match frame_refs length");
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return fail("fps must be positive and finite");
        }
        if let Some(e) = &self.embedding {
            let norm = l2_norm(e.as_slice());
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return fail("embedding is not unit norm");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Stage1 => write!(f, "stage1"),
            Stage::Stage2 => write!(f, "stage2"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispreferredStrategy {
    TemporalMisalignment,
    PartialEvidence,
    IrrelevantScenes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    Policy,
    Reference,
}

/// Which context the preferred response is generated and scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferredContext {
    RelevantScenesOnly,
    FullVideo,
}

/// Pseudo-long video built by concatenating short clips, one of which is the
/// anchor that carries the answer to the sample's query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeSequence {
    pub composite_id: String,
    pub clips: Vec<Clip>,
    pub anchor_index: usize,
    pub total_frames: u64,
    pub seed: u64,
}

impl CompositeSequence {
    pub fn anchor(&self) -> &Clip {
        &self.clips[self.anchor_index]
    }

    pub fn distractors(&self) -> impl Iterator<Item = &Clip> {
        let anchor = self.anchor_index;
        self.clips
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != anchor)
            .map(|(_, c)| c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompositeViolation {
    EmptyClips,
    AnchorIndexOutOfRange { anchor_index: usize, clip_count: usize },
    TotalFramesMismatch { recorded: u64, computed: u64 },
    ClipInvalid { clip_id: String, reason: String },
    MissingEmbedding { clip_id: String },
    SimilarityViolation { clip_id: String, cosine: f64, threshold: f64 },
    SimilarityUncomputable { clip_id: String, reason: String },
}

impl fmt::Display for CompositeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompositeViolation::EmptyClips => write!(f, "composite has no clips"),
            CompositeViolation::AnchorIndexOutOfRange {
                anchor_index,
                clip_count,
            } => write!(
                f,
                "anchor_index out of range: {anchor_index} not in 0..{clip_count}"
            ),
            CompositeViolation::TotalFramesMismatch { recorded, computed } => write!(
                f,
                "total_frames mismatch: recorded {recorded}, computed {computed}"
            ),
            CompositeViolation::ClipInvalid { clip_id, reason } => {
                write!(f, "clip {clip_id} invalid: {reason}")
            }
            CompositeViolation::MissingEmbedding { clip_id } => {
                write!(f, "clip {clip_id} has no embedding")
            }
            CompositeViolation::SimilarityViolation {
                clip_id,
                cosine,
                threshold,
            } => write!(
                f,
                "similarity violation: clip {clip_id} cosine {cosine:.6} >= threshold {threshold}"
            ),
            CompositeViolation::SimilarityUncomputable { clip_id, reason } => {
                write!(f, "similarity uncomputable for clip {clip_id}: {reason}")
            }
        }
    }
}

/// Checks every structural and similarity invariant of a composite against
/// the configured threshold. Violations are data, not errors.
pub fn validate_composite(seq: &CompositeSequence, cfg: &DpoConfig) -> Vec<CompositeViolation> {
    let mut violations = Vec::new();
    if seq.clips.is_empty() {
        violations.push(CompositeViolation::EmptyClips);
        return violations;
    }
    if seq.anchor_index >= seq.clips.len() {
        violations.push(CompositeViolation::AnchorIndexOutOfRange {
            anchor_index: seq.anchor_index,
            clip_count: seq.clips.len(),
        });
    }
    let computed: u64 = seq.clips.iter().map(|c| c.frame_count).sum();
    if computed != seq.total_frames {
        violations.push(CompositeViolation::TotalFramesMismatch {
            recorded: seq.total_frames,
            computed,
        });
    }
    for clip in &seq.clips {
        if let Err(e) = clip.validate() {
            violations.push(CompositeViolation::ClipInvalid {
                clip_id: clip.clip_id.clone(),
                reason: e.to_string(),
            });
        }
    }
    if seq.anchor_index < seq.clips.len() {
        let anchor = seq.anchor();
        match &anchor.embedding {
            None => violations.push(CompositeViolation::MissingEmbedding {
                clip_id: anchor.clip_id.clone(),
            }),
            Some(anchor_emb) => {
                for clip in seq.distractors() {
                    match &clip.embedding {
                        None => violations.push(CompositeViolation::MissingEmbedding {
                            clip_id: clip.clip_id.clone(),
                        }),
                        Some(emb) => match cosine_similarity(emb, anchor_emb) {
                            Ok(cos) if cos >= cfg.similarity_threshold => {
                                violations.push(CompositeViolation::SimilarityViolation {
                                    clip_id: clip.clip_id.clone(),
                                    cosine: cos,
                                    threshold: cfg.similarity_threshold,
                                });
                            }
                            Ok(_) => {}
                            Err(e) => violations.push(CompositeViolation::SimilarityUncomputable {
                                clip_id: clip.clip_id.clone(),
                                reason: e.to_string(),
                            }),
                        },
                    }
                }
            }
        }
    }
    violations
}

/// Collapses whitespace runs to single spaces and trims; the normal form
/// used when comparing preferred and dispreferred responses.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Where a triple's contexts came from, in enough detail that a validator
/// can re-check the construction rules from the serialized record alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TripleProvenance {
    Composite {
        clip_ids: Vec<String>,
        anchor_index: usize,
        similarity_threshold: f64,
        total_frames: u64,
        dispreferred_clip_ids: Vec<String>,
    },
    Scenes {
        video_id: String,
        n_scenes: u32,
        chain_scene_ids: Vec<u32>,
        preferred_scene_ids: Vec<u32>,
        dispreferred_scene_ids: Vec<u32>,
        preferred_mode: PreferredContext,
        partial_fallback: bool,
    },
}

/// One preference training example: a query with a preferred and a
/// dispreferred response, plus the provenance needed to audit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub triple_id: String,
    pub query: String,
    pub preferred: String,
    pub dispreferred: String,
    pub stage: Stage,
    pub dispreferred_strategy: DispreferredStrategy,
    pub context_ref: String,
    pub anchor_ref: String,
    pub generation_seed: u64,
    pub provenance: TripleProvenance,
}

impl PreferenceTriple {
    /// Structural violations checkable without the corpus manifest.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.query.is_empty() {
            v.push("empty query".to_string());
        }
        if self.preferred.is_empty() {
            v.push("empty preferred response".to_string());
        }
        if self.dispreferred.is_empty() {
            v.push("empty dispreferred response".to_string());
        }
        if !self.preferred.is_empty()
            && normalize_whitespace(&self.preferred) == normalize_whitespace(&self.dispreferred)
        {
            v.push("preferred equals dispreferred after whitespace normalization".to_string());
        }
        let strategy_ok = match self.stage {
            Stage::Stage1 => {
                self.dispreferred_strategy == DispreferredStrategy::TemporalMisalignment
            }
            Stage::Stage2 => matches!(
                self.dispreferred_strategy,
                DispreferredStrategy::PartialEvidence | DispreferredStrategy::IrrelevantScenes
            ),
        };
        if !strategy_ok {
            v.push(format!(
                "strategy {:?} not valid for {}",
                self.dispreferred_strategy, self.stage
            ));
        }
        let provenance_ok = matches!(
            (&self.provenance, self.stage),
            (TripleProvenance::Composite { .. }, Stage::Stage1)
                | (TripleProvenance::Scenes { .. }, Stage::Stage2)
        );
        if !provenance_ok {
            v.push(format!("provenance kind does not match {}", self.stage));
        }
        v
    }
}

/// One captioned scene of a long video. `caption_context_len` records how
/// many earlier captions the captioner was conditioned on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: u32,
    pub clip: Clip,
    pub caption: String,
    pub caption_context_len: u32,
}

/// Checks that a per-video scene list is contiguous 1..N with context
/// lengths matching the recursive-captioning contract.
pub fn validate_scene_records(records: &[SceneRecord]) -> Result<(), String> {
    if records.is_empty() {
        return Err("empty scene record list".to_string());
    }
    for (i, rec) in records.iter().enumerate() {
        let expected = (i + 1) as u32;
        if rec.scene_id != expected {
            return Err(format!(
                "scene_id {} at position {} (expected {})",
                rec.scene_id, i, expected
            ));
        }
        if rec.caption_context_len != rec.scene_id - 1 {
            return Err(format!(
                "scene {} caption_context_len {} != scene_id - 1",
                rec.scene_id, rec.caption_context_len
            ));
        }
    }
    Ok(())
}

/// A query, its reasoning trace, and the scene ids the trace cites, in
/// first-occurrence order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceChain {
    pub query: String,
    pub trace: String,
    pub relevant_scene_ids: Vec<u32>,
}

impl RelevanceChain {
    pub fn validate(&self, n_scenes: u32) -> Result<(), String> {
        if self.relevant_scene_ids.is_empty() {
            return Err("chain cites no scenes".to_string());
        }
        let citation = regex::Regex::new(r"(?i)scene\s*#\s*([0-9]+)").expect("fixed pattern");
        let cited: std::collections::HashSet<u32> = citation
            .captures_iter(&self.trace)
            .filter_map(|c| c[1].parse().ok())
            .collect();
        let mut seen = std::collections::HashSet::new();
        for &id in &self.relevant_scene_ids {
            if id < 1 || id > n_scenes {
                return Err(format!("cited scene {id} outside 1..={n_scenes}"));
            }
            if !seen.insert(id) {
                return Err(format!("scene {id} cited twice in relevant_scene_ids"));
            }
            if !cited.contains(&id) {
                return Err(format!("scene {id} not cited in trace"));
            }
        }
        Ok(())
    }
}

/// Objective hyperparameters shared across synthesis, training, and
/// validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    /// Preference-margin strength.
    pub beta: f64,
    /// Weight of the length-normalized likelihood term on the preferred
    /// response.
    pub alpha: f64,
    /// Distractors with cosine similarity at or above this are rejected.
    pub similarity_threshold: f64,
    /// Maximum frames in one composite sequence.
    pub frame_budget: u64,
    /// Replacement draws allowed per distractor slot before the sample is
    /// discarded.
    pub max_filter_retries: u32,
    /// How many self-training rounds the second stage runs.
    pub stage2_iterations: u32,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: 0.01,
            alpha: 1.0,
            similarity_threshold: 0.6,
            frame_budget: 256,
            max_filter_retries: 10,
            stage2_iterations: 1,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), TypeError> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(TypeError::InvalidConfig("beta must be > 0".into()));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(TypeError::InvalidConfig("alpha must be >= 0".into()));
        }
        if !(self.similarity_threshold.is_finite()
            && (-1.0..=1.0).contains(&self.similarity_threshold))
        {
            return Err(TypeError::InvalidConfig(
                "similarity_threshold must lie in [-1, 1]".into(),
            ));
        }
        if self.frame_budget == 0 {
            return Err(TypeError::InvalidConfig("frame_budget must be >= 1".into()));
        }
        if self.stage2_iterations == 0 {
            return Err(TypeError::InvalidConfig(
                "stage2_iterations must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-token log-probabilities of one response under one model and context.
/// `context_frames` counts the frame items in the scored context so the
/// anchor-only reference contract stays auditable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub model_tag: ModelTag,
    pub context_id: String,
    pub response_id: String,
    pub token_logprobs: Vec<f64>,
    pub sum_logprob: f64,
    pub token_count: u64,
    pub context_frames: u64,
}

impl ScoreRecord {
    pub fn validate(&self) -> Result<(), TypeError> {
        let fail = |reason: String| {
            Err(TypeError::InvalidScore {
                context_id: self.context_id.clone(),
                response_id: self.response_id.clone(),
                reason,
            })
        };
        if self.token_count == 0 {
            return fail("token_count must be >= 1".into());
        }
        if self.token_count as usize != self.token_logprobs.len() {
            return fail(format!(
                "token_count {} does not match {} logprobs",
                self.token_count,
                self.token_logprobs.len()
            ));
        }
        for (i, lp) in self.token_logprobs.iter().enumerate() {
            if !lp.is_finite() || *lp > 0.0 {
                return fail(format!("token_logprobs[{i}] = {lp} must be finite and <= 0"));
            }
        }
        let sum: f64 = self.token_logprobs.iter().sum();
        if (sum - self.sum_logprob).abs() > 1e-9 {
            return fail(format!(
                "sum_logprob {} differs from token sum {} by more than 1e-9",
                self.sum_logprob, sum
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(values: &[f32]) -> Embedding {
        Embedding::from_unit(values.to_vec()).unwrap()
    }

    fn clip(id: &str, frames: u64, embedding: Option<Embedding>) -> Clip {
        Clip {
            clip_id: id.to_string(),
            frame_refs: (0..frames).map(|i| format!("{id}#f{i}")).collect(),
            frame_count: frames,
            fps: 1.0,
            caption: format!("caption for {id}"),
            embedding,
        }
    }

    #[test]
    fn cosine_matches_analytic_values() {
        let x = unit(&[1.0, 0.0]);
        let y = unit(&[0.0, 1.0]);
        assert_eq!(cosine_similarity(&x, &y).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&x, &x).unwrap(), 1.0);
        let d = std::f32::consts::FRAC_1_SQRT_2;
        let diag = unit(&[d, d]);
        let got = cosine_similarity(&diag, &x).unwrap();
        assert!((got - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
    }

    #[test]
    fn cosine_rejects_bad_inputs() {
        let x = unit(&[1.0, 0.0]);
        let y = unit(&[1.0, 0.0, 0.0]);
        assert!(matches!(
            cosine_similarity(&x, &y),
            Err(TypeError::DimensionMismatch { .. })
        ));
        let long = Embedding(vec![2.0, 0.0]);
        assert!(matches!(
            cosine_similarity(&x, &long),
            Err(TypeError::NotUnitNorm { .. })
        ));
    }

    #[test]
    fn normalized_produces_unit_vectors() {
        let e = Embedding::normalized(vec![3.0, 4.0]).unwrap();
        let norm: f64 = e
            .as_slice()
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        assert!((norm - 1.0).abs() <= UNIT_NORM_TOLERANCE);
        assert!(matches!(
            Embedding::normalized(vec![0.0, 0.0]),
            Err(TypeError::ZeroNorm)
        ));
    }

    #[test]
    fn embedding_hex_round_trip_is_bit_exact() {
        let e = Embedding::normalized(vec![0.123, -0.987, 0.5, 0.001]).unwrap();
        let back = Embedding::from_hex(&e.to_hex()).unwrap();
        assert_eq!(e, back);
    }

    #[test]
    fn valid_single_clip_composite_has_empty_report() {
        let seq = CompositeSequence {
            composite_id: "c".into(),
            clips: vec![clip("a", 4, Some(unit(&[1.0, 0.0])))],
            anchor_index: 0,
            total_frames: 4,
            seed: 1,
        };
        assert!(validate_composite(&seq, &DpoConfig::default()).is_empty());
    }

    #[test]
    fn anchor_index_at_clip_count_is_reported() {
        let seq = CompositeSequence {
            composite_id: "c".into(),
            clips: vec![clip("a", 4, Some(unit(&[1.0, 0.0])))],
            anchor_index: 1,
            total_frames: 4,
            seed: 1,
        };
        let report = validate_composite(&seq, &DpoConfig::default());
        assert!(report
            .iter()
            .any(|v| v.to_string().contains("anchor_index out of range")));
    }

    #[test]
    fn similar_distractor_is_reported() {
        // cos(a, b) computed below by a direct dot-product loop, independent
        // of cosine_similarity, to fix the expected violation.
        let a = [1.0f32, 0.0];
        let b = [0.95f32, (1.0 - 0.95f32 * 0.95).sqrt()];
        let dot: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x as f64) * (y as f64))
            .sum();
        assert!(dot > 0.6);
        let seq = CompositeSequence {
            composite_id: "c".into(),
            clips: vec![
                clip("anchor", 4, Some(unit(&a))),
                clip("near", 4, Some(unit(&b))),
            ],
            anchor_index: 0,
            total_frames: 8,
            seed: 1,
        };
        let report = validate_composite(&seq, &DpoConfig::default());
        assert_eq!(report.len(), 1);
        assert!(report[0].to_string().contains("similarity violation"));
    }

    #[test]
    fn triple_invariants_catch_planted_defects() {
        let good = PreferenceTriple {
            triple_id: "t0".into(),
            query: "q".into(),
            preferred: "yes  indeed".into(),
            dispreferred: "no".into(),
            stage: Stage::Stage1,
            dispreferred_strategy: DispreferredStrategy::TemporalMisalignment,
            context_ref: "ctx".into(),
            anchor_ref: "a".into(),
            generation_seed: 0,
            provenance: TripleProvenance::Composite {
                clip_ids: vec!["a".into()],
                anchor_index: 0,
                similarity_threshold: 0.6,
                total_frames: 4,
                dispreferred_clip_ids: vec![],
            },
        };
        assert!(good.violations().is_empty());

        let mut equal = good.clone();
        equal.dispreferred = " yes indeed ".into();
        assert_eq!(equal.violations().len(), 1);

        let mut wrong_strategy = good.clone();
        wrong_strategy.dispreferred_strategy = DispreferredStrategy::PartialEvidence;
        assert_eq!(wrong_strategy.violations().len(), 1);
    }

    #[test]
    fn scene_records_must_be_contiguous() {
        let recs: Vec<SceneRecord> = (1..=3)
            .map(|i| SceneRecord {
                scene_id: i,
                clip: clip(&format!("s{i}"), 2, None),
                caption: "c".into(),
                caption_context_len: i - 1,
            })
            .collect();
        assert!(validate_scene_records(&recs).is_ok());

        let mut gap = recs.clone();
        gap[2].scene_id = 4;
        assert!(validate_scene_records(&gap).is_err());

        let mut bad_ctx = recs;
        bad_ctx[1].caption_context_len = 5;
        assert!(validate_scene_records(&bad_ctx).is_err());
    }

    #[test]
    fn score_record_validation() {
        let good = ScoreRecord {
            model_tag: ModelTag::Policy,
            context_id: "c".into(),
            response_id: "r".into(),
            token_logprobs: vec![-0.5, -0.25],
            sum_logprob: -0.75,
            token_count: 2,
            context_frames: 0,
        };
        assert!(good.validate().is_ok());

        let mut positive = good.clone();
        positive.token_logprobs[0] = 0.5;
        assert!(positive.validate().is_err());

        let mut drift = good;
        drift.sum_logprob = -0.75 + 1e-6;
        assert!(drift.validate().is_err());
    }

    #[test]
    fn config_defaults_validate() {
        let cfg = DpoConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.beta, 0.01);
        assert_eq!(cfg.alpha, 1.0);
        assert_eq!(cfg.similarity_threshold, 0.6);
        let mut bad = cfg;
        bad.beta = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn serde_round_trips_triples() {
        let triple = PreferenceTriple {
            triple_id: "t1".into(),
            query: "what happens".into(),
            preferred: "a".into(),
            dispreferred: "b".into(),
            stage: Stage::Stage2,
            dispreferred_strategy: DispreferredStrategy::IrrelevantScenes,
            context_ref: "v1".into(),
            anchor_ref: "scenes:2,5".into(),
            generation_seed: 9,
            provenance: TripleProvenance::Scenes {
                video_id: "v1".into(),
                n_scenes: 8,
                chain_scene_ids: vec![2, 5],
                preferred_scene_ids: vec![2, 5],
                dispreferred_scene_ids: vec![1, 3, 4, 6, 7, 8],
                preferred_mode: PreferredContext::RelevantScenesOnly,
                partial_fallback: false,
            },
        };
        let json = serde_json::to_string(&triple).unwrap();
        let back: PreferenceTriple = serde_json::from_str(&json).unwrap();
        assert_eq!(triple, back);
    }
}
