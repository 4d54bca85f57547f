//! First-stage triple synthesis over composited short clips.
//!
//! One clip is chosen as the anchor, dissimilar distractors are drawn around
//! it, and the result is concatenated into a composite with the anchor at a
//! random position. The preferred answer is grounded in the anchor; the
//! dispreferred answer is generated from the distractors alone, so it reads
//! like a temporally misplaced response.

use crate::dataset::CorpusManifest;
use crate::gateway::{ContextItem, Gateway, GatewayError, GenerateRequest, ScoreRequest};
use crate::prompts::{PromptError, PromptSet};
use crate::seed;
use crate::types::{
    cosine_similarity, validate_composite, Clip, CompositeSequence, DispreferredStrategy,
    DpoConfig, ModelTag, PreferenceTriple, Stage, TripleProvenance, TypeError,
};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Stage1Error {
    #[error("distractor pool is empty")]
    EmptyPool,
    #[error("corpus has {found} usable clips, need at least 2")]
    CorpusTooSmall { found: usize },
    #[error("anchor '{clip_id}' has {frames} frames, over the budget of {budget}")]
    AnchorExceedsBudget {
        clip_id: String,
        frames: u64,
        budget: u64,
    },
    #[error("clip '{clip_id}' needs a caption")]
    EmptyCaption { clip_id: String },
    #[error("no distractors to answer from")]
    EmptyDistractors,
    #[error("reference score request contains non-anchor frame '{payload}'")]
    RefContextViolation { payload: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub frame_budget: u64,
    pub similarity_threshold: f64,
    /// Replacement draws allowed per distractor slot beyond the first.
    pub max_filter_retries: u32,
    pub specificity_check: bool,
    /// Clips longer than this are not eligible as anchors or distractors.
    pub per_clip_frame_cap: u64,
    pub seed: u64,
    /// Samples to attempt. Defaults to one pass over the eligible clips.
    pub target_count: Option<usize>,
    /// Also consult the verifier against every distractor caption; any
    /// negative verdict rejects the question. Off by default, which keeps
    /// verification anchor-only.
    pub specificity_cross_check: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            frame_budget: 256,
            similarity_threshold: 0.6,
            max_filter_retries: 10,
            specificity_check: true,
            per_clip_frame_cap: 64,
            seed: 0,
            target_count: None,
            specificity_cross_check: false,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<(), Stage1Error> {
        if !(self.frame_budget >= self.per_clip_frame_cap && self.per_clip_frame_cap >= 1) {
            return Err(Stage1Error::InvalidConfig(format!(
                "frame_budget ({}) must be >= per_clip_frame_cap ({}) >= 1",
                self.frame_budget, self.per_clip_frame_cap
            )));
        }
        if !self.similarity_threshold.is_finite() {
            return Err(Stage1Error::InvalidConfig(
                "similarity_threshold must be finite".into(),
            ));
        }
        Ok(())
    }

    /// The rules `validate_composite` needs, carried over from this config.
    fn composite_rules(&self) -> DpoConfig {
        DpoConfig {
            similarity_threshold: self.similarity_threshold,
            frame_budget: self.frame_budget,
            ..DpoConfig::default()
        }
    }
}

/// Outcome of drawing distractors for one anchor. `rejected` keeps every
/// candidate that failed the similarity test, so a brute-force pass can
/// audit the decisions.
#[derive(Debug, Clone)]
pub enum FilterOutcome {
    Accepted {
        accepted: Vec<Clip>,
        rejected: Vec<Clip>,
    },
    /// A slot saw at least one rejection and could not be filled before the
    /// retry budget (or the pool) ran out.
    Discarded { rejected: Vec<Clip> },
}

/// Draws distractor clips for `anchor` until their frames, plus the
/// anchor's, reach the frame budget or the pool runs dry. Every draw is
/// uniform without replacement. A candidate is accepted iff its cosine
/// against the anchor is strictly below the threshold; a slot that sees a
/// rejection and then cannot be filled discards the whole sample.
pub fn filter_distractors(
    anchor: &Clip,
    pool: &[Clip],
    cfg: &Stage1Config,
    rng: &mut impl Rng,
) -> Result<FilterOutcome, Stage1Error> {
    if pool.is_empty() {
        return Err(Stage1Error::EmptyPool);
    }
    let anchor_emb = anchor
        .embedding
        .as_ref()
        .ok_or_else(|| Stage1Error::InvalidConfig(format!("anchor '{}' has no embedding", anchor.clip_id)))?;

    let mut remaining: Vec<usize> = (0..pool.len()).collect();
    let mut accepted: Vec<Clip> = Vec::new();
    let mut rejected: Vec<Clip> = Vec::new();
    let mut frames = anchor.frame_count;

    while frames < cfg.frame_budget && !remaining.is_empty() {
        // One slot: the first draw plus up to max_filter_retries replacements.
        let mut slot_filled = false;
        let mut slot_rejections = 0u32;
        while slot_rejections <= cfg.max_filter_retries {
            let Some(candidate) = draw(&mut remaining, rng) else {
                break;
            };
            let clip = &pool[candidate];
            let emb = clip.embedding.as_ref().ok_or_else(|| {
                Stage1Error::InvalidConfig(format!("pool clip '{}' has no embedding", clip.clip_id))
            })?;
            let cos = cosine_similarity(anchor_emb, emb)?;
            if cos < cfg.similarity_threshold {
                frames += clip.frame_count;
                accepted.push(clip.clone());
                slot_filled = true;
                break;
            }
            rejected.push(clip.clone());
            slot_rejections += 1;
        }
        if !slot_filled && slot_rejections > 0 {
            return Ok(FilterOutcome::Discarded { rejected });
        }
        if !slot_filled {
            break;
        }
    }
    Ok(FilterOutcome::Accepted { accepted, rejected })
}

fn draw(remaining: &mut Vec<usize>, rng: &mut impl Rng) -> Option<usize> {
    if remaining.is_empty() {
        return None;
    }
    let i = rng.random_range(0..remaining.len());
    Some(remaining.swap_remove(i))
}

/// Concatenates accepted distractors around the anchor. Clips are appended
/// in their given order until the next one would push the total over the
/// frame budget; the anchor goes to a uniformly random position among the
/// kept clips.
pub fn assemble_composite(
    anchor: &Clip,
    accepted: &[Clip],
    cfg: &Stage1Config,
    composite_id: String,
    sample_seed: u64,
    rng: &mut impl Rng,
) -> Result<CompositeSequence, Stage1Error> {
    if anchor.frame_count > cfg.frame_budget {
        return Err(Stage1Error::AnchorExceedsBudget {
            clip_id: anchor.clip_id.clone(),
            frames: anchor.frame_count,
            budget: cfg.frame_budget,
        });
    }
    let mut kept: Vec<Clip> = Vec::new();
    let mut total = anchor.frame_count;
    for clip in accepted {
        if total + clip.frame_count > cfg.frame_budget {
            break;
        }
        total += clip.frame_count;
        kept.push(clip.clone());
    }
    let anchor_index = rng.random_range(0..=kept.len());
    kept.insert(anchor_index, anchor.clone());
    Ok(CompositeSequence {
        composite_id,
        clips: kept,
        anchor_index,
        total_frames: total,
        seed: sample_seed,
    })
}

fn context_items_for_clips(clips: &[&Clip]) -> Vec<ContextItem> {
    let mut items = Vec::new();
    for clip in clips {
        for frame in &clip.frame_refs {
            items.push(ContextItem::frame(frame.clone()));
        }
        if !clip.caption.is_empty() {
            items.push(ContextItem::caption(clip.caption.clone()));
        }
    }
    items
}

/// Asks the gateway for an anchor-specific question and its grounded answer.
pub fn generate_anchor_qa(
    gateway: &dyn Gateway,
    prompts: &PromptSet,
    anchor: &Clip,
    seed: u64,
) -> Result<(String, String), Stage1Error> {
    if anchor.caption.trim().is_empty() {
        return Err(Stage1Error::EmptyCaption {
            clip_id: anchor.clip_id.clone(),
        });
    }
    let req = GenerateRequest {
        prompt: prompts.get("anchor_qa")?.to_string(),
        context_items: context_items_for_clips(&[anchor]),
        max_tokens: 128,
        seed,
    };
    let text = gateway.generate(&req)?;
    parse_qa(&text).ok_or(GatewayError::Protocol(format!(
        "anchor_qa output missing QUESTION/ANSWER lines: {text:?}"
    )))
    .map_err(Stage1Error::from)
}

fn parse_qa(text: &str) -> Option<(String, String)> {
    let mut query = None;
    let mut answer = None;
    for line in text.lines() {
        if let Some(q) = line.trim().strip_prefix("QUESTION:") {
            query.get_or_insert_with(|| q.trim().to_string());
        } else if let Some(a) = line.trim().strip_prefix("ANSWER:") {
            answer.get_or_insert_with(|| a.trim().to_string());
        }
    }
    match (query, answer) {
        (Some(q), Some(a)) if !q.is_empty() && !a.is_empty() => Some((q, a)),
        _ => None,
    }
}

/// Verifier pass over (question, clip caption). The verdict is `true` when
/// the question is judged answerable only by watching that clip.
pub fn check_question_specificity(
    gateway: &dyn Gateway,
    prompts: &PromptSet,
    query: &str,
    clip: &Clip,
    seed: u64,
) -> Result<bool, Stage1Error> {
    let mut items = context_items_for_clips(&[clip]);
    items.push(ContextItem::caption(query.to_string()));
    let req = GenerateRequest {
        prompt: prompts.get("specificity")?.to_string(),
        context_items: items,
        max_tokens: 4,
        seed,
    };
    let verdict = gateway.generate(&req)?;
    Ok(verdict.trim().eq_ignore_ascii_case("yes"))
}

/// Generates the dispreferred answer. The request context holds only the
/// distractor clips; the anchor never appears in it.
pub fn generate_dispreferred_stage1(
    gateway: &dyn Gateway,
    prompts: &PromptSet,
    query: &str,
    distractors: &[&Clip],
    seed: u64,
) -> Result<String, Stage1Error> {
    if distractors.is_empty() {
        return Err(Stage1Error::EmptyDistractors);
    }
    if query.trim().is_empty() {
        return Err(Stage1Error::InvalidConfig("query is empty".into()));
    }
    let req = GenerateRequest {
        prompt: format!("{}\nQUESTION: {query}", prompts.get("dispreferred_s1")?.trim_end()),
        context_items: context_items_for_clips(distractors),
        max_tokens: 128,
        seed,
    };
    let text = gateway.generate(&req)?;
    if text.trim().is_empty() {
        return Err(GatewayError::Protocol("empty dispreferred answer".into()).into());
    }
    Ok(text)
}

/// Builds the request that scores `response` against the given clips under
/// `tag`. The query rides along as the leading caption item.
pub fn build_score_request(
    query: &str,
    response: &str,
    clips: &[&Clip],
    tag: ModelTag,
) -> ScoreRequest {
    let mut items = vec![ContextItem::caption(query.to_string())];
    for clip in clips {
        for frame in &clip.frame_refs {
            items.push(ContextItem::frame(frame.clone()));
        }
    }
    ScoreRequest {
        context_items: items,
        response: response.to_string(),
        model_tag: tag,
    }
}

/// Guard run before dispatching any stage-1 reference score request: every
/// frame in a reference context must belong to the anchor clip.
pub fn check_stage1_score_request(
    req: &ScoreRequest,
    anchor_id: &str,
) -> Result<(), Stage1Error> {
    if req.model_tag != ModelTag::Reference {
        return Ok(());
    }
    let prefix = format!("{anchor_id}#");
    for item in &req.context_items {
        if item.kind == crate::gateway::ContextItemKind::FrameRef
            && !item.payload.starts_with(&prefix)
        {
            return Err(Stage1Error::RefContextViolation {
                payload: item.payload.clone(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub attempted: usize,
    pub emitted: usize,
    pub discarded_similarity: usize,
    pub discarded_specificity: usize,
    pub failed_gateway: usize,
}

pub struct Stage1Output {
    pub triples: Vec<PreferenceTriple>,
    pub report: Stage1Report,
}

/// What one sample attempt produced.
pub enum SampleOutcome {
    Emitted(Box<PreferenceTriple>),
    DiscardedSimilarity,
    DiscardedSpecificity,
    Failed(String),
}

impl SampleOutcome {
    /// Report counter this outcome belongs to.
    pub fn counter(&self) -> &'static str {
        match self {
            SampleOutcome::Emitted(_) => "emitted",
            SampleOutcome::DiscardedSimilarity => "discarded_similarity",
            SampleOutcome::DiscardedSpecificity => "discarded_specificity",
            SampleOutcome::Failed(_) => "failed_gateway",
        }
    }
}

const PERMUTATION_STREAM: u64 = 0x51;
const QA_STREAM: u64 = 1;
const SPECIFICITY_STREAM: u64 = 2;
const DISPREFERRED_STREAM: u64 = 3;

/// Sample-indexed access to the stage-1 pipeline. Each index is an
/// independent attempt whose seed derives from the config seed and the
/// index alone, so indices can run in any order, in parallel, or across
/// separate resumed processes without changing the output.
pub struct Stage1Runner<'a> {
    manifest: &'a CorpusManifest,
    cfg: &'a Stage1Config,
    gateway: &'a dyn Gateway,
    prompts: &'a PromptSet,
    eligible: Vec<&'a Clip>,
    order: Vec<usize>,
}

impl<'a> Stage1Runner<'a> {
    pub fn new(
        manifest: &'a CorpusManifest,
        cfg: &'a Stage1Config,
        gateway: &'a dyn Gateway,
        prompts: &'a PromptSet,
    ) -> Result<Self, Stage1Error> {
        cfg.validate()?;
        let eligible: Vec<&Clip> = manifest
            .clips
            .iter()
            .filter(|c| {
                c.embedding.is_some()
                    && !c.caption.trim().is_empty()
                    && c.frame_count <= cfg.per_clip_frame_cap
            })
            .collect();
        if eligible.len() < 2 {
            return Err(Stage1Error::CorpusTooSmall {
                found: eligible.len(),
            });
        }
        let mut order: Vec<usize> = (0..eligible.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive_path(
            cfg.seed,
            &[PERMUTATION_STREAM],
        )));
        Ok(Stage1Runner {
            manifest,
            cfg,
            gateway,
            prompts,
            eligible,
            order,
        })
    }

    /// Number of sample attempts a full run makes.
    pub fn attempts(&self) -> usize {
        self.cfg.target_count.unwrap_or(self.eligible.len())
    }

    /// Attempts sample `index`. Gateway failures come back as
    /// [`SampleOutcome::Failed`]; anything in `Err` means the run itself is
    /// misconfigured and should stop.
    pub fn sample(&self, index: usize) -> Result<SampleOutcome, Stage1Error> {
        let anchor = self.eligible[self.order[index % self.order.len()]];
        synthesize_one(
            self.manifest,
            self.cfg,
            self.gateway,
            self.prompts,
            anchor,
            index,
        )
    }
}

/// Runs the full stage-1 pipeline over the manifest corpus. Samples are
/// synthesized concurrently but emitted in sample-index order.
pub fn synthesize_stage1(
    manifest: &CorpusManifest,
    cfg: &Stage1Config,
    gateway: &dyn Gateway,
    prompts: &PromptSet,
) -> Result<Stage1Output, Stage1Error> {
    let runner = Stage1Runner::new(manifest, cfg, gateway, prompts)?;
    let attempts = runner.attempts();
    use rayon::prelude::*;
    let outcomes: Vec<SampleOutcome> = (0..attempts)
        .into_par_iter()
        .map(|i| runner.sample(i))
        .collect::<Result<_, _>>()?;

    let mut report = Stage1Report {
        attempted: attempts,
        ..Stage1Report::default()
    };
    let mut triples = Vec::new();
    for outcome in outcomes {
        match outcome {
            SampleOutcome::Emitted(t) => {
                report.emitted += 1;
                triples.push(*t);
            }
            SampleOutcome::DiscardedSimilarity => report.discarded_similarity += 1,
            SampleOutcome::DiscardedSpecificity => report.discarded_specificity += 1,
            SampleOutcome::Failed(_) => report.failed_gateway += 1,
        }
    }
    Ok(Stage1Output { triples, report })
}

fn synthesize_one(
    manifest: &CorpusManifest,
    cfg: &Stage1Config,
    gateway: &dyn Gateway,
    prompts: &PromptSet,
    anchor: &Clip,
    index: usize,
) -> Result<SampleOutcome, Stage1Error> {
    let sample_seed = seed::derive(cfg.seed, index as u64);
    let mut rng = seed::rng(sample_seed);

    let pool: Vec<Clip> = manifest
        .clips
        .iter()
        .filter(|c| {
            c.clip_id != anchor.clip_id
                && c.embedding.is_some()
                && c.frame_count <= cfg.per_clip_frame_cap
        })
        .cloned()
        .collect();

    let accepted = match filter_distractors(anchor, &pool, cfg, &mut rng)? {
        FilterOutcome::Accepted { accepted, .. } => accepted,
        FilterOutcome::Discarded { .. } => return Ok(SampleOutcome::DiscardedSimilarity),
    };

    let composite = assemble_composite(
        anchor,
        &accepted,
        cfg,
        format!("comp-{index:06}"),
        sample_seed,
        &mut rng,
    )?;

    let (query, preferred) = match generate_anchor_qa(
        gateway,
        prompts,
        anchor,
        seed::derive_path(sample_seed, &[QA_STREAM]),
    ) {
        Ok(pair) => pair,
        Err(Stage1Error::Gateway(e)) => return Ok(SampleOutcome::Failed(e.to_string())),
        Err(e) => return Err(e),
    };

    if cfg.specificity_check {
        let mut verdict = match check_question_specificity(
            gateway,
            prompts,
            &query,
            anchor,
            seed::derive_path(sample_seed, &[SPECIFICITY_STREAM, 0]),
        ) {
            Ok(v) => v,
            Err(Stage1Error::Gateway(e)) => return Ok(SampleOutcome::Failed(e.to_string())),
            Err(e) => return Err(e),
        };
        if verdict && cfg.specificity_cross_check {
            for (d, clip) in composite.distractors().enumerate() {
                let cross = match check_question_specificity(
                    gateway,
                    prompts,
                    &query,
                    clip,
                    seed::derive_path(sample_seed, &[SPECIFICITY_STREAM, 1 + d as u64]),
                ) {
                    Ok(v) => v,
                    Err(Stage1Error::Gateway(e)) => {
                        return Ok(SampleOutcome::Failed(e.to_string()))
                    }
                    Err(e) => return Err(e),
                };
                if !cross {
                    verdict = false;
                    break;
                }
            }
        }
        if !verdict {
            return Ok(SampleOutcome::DiscardedSpecificity);
        }
    }

    let distractors: Vec<&Clip> = composite.distractors().collect();
    let dispreferred = if distractors.is_empty() {
        // A single-clip composite has nothing to mislead with; skip it the
        // same way an unfillable slot is skipped.
        return Ok(SampleOutcome::DiscardedSimilarity);
    } else {
        match generate_dispreferred_stage1(
            gateway,
            prompts,
            &query,
            &distractors,
            seed::derive_path(sample_seed, &[DISPREFERRED_STREAM]),
        ) {
            Ok(text) => text,
            Err(Stage1Error::Gateway(e)) => return Ok(SampleOutcome::Failed(e.to_string())),
            Err(e) => return Err(e),
        }
    };

    let triple = PreferenceTriple {
        triple_id: format!("s1-{index:06}"),
        query,
        preferred,
        dispreferred,
        stage: Stage::Stage1,
        dispreferred_strategy: DispreferredStrategy::TemporalMisalignment,
        context_ref: composite.composite_id.clone(),
        anchor_ref: anchor.clip_id.clone(),
        generation_seed: sample_seed,
        provenance: TripleProvenance::Composite {
            clip_ids: composite.clips.iter().map(|c| c.clip_id.clone()).collect(),
            anchor_index: composite.anchor_index,
            similarity_threshold: cfg.similarity_threshold,
            total_frames: composite.total_frames,
            dispreferred_clip_ids: distractors.iter().map(|c| c.clip_id.clone()).collect(),
        },
    };

    let composite_problems = validate_composite(&composite, &cfg.composite_rules());
    let triple_problems = triple.violations();
    if !composite_problems.is_empty() || !triple_problems.is_empty() {
        return Err(Stage1Error::InvalidConfig(format!(
            "internal invariant breach on sample {index}: {composite_problems:?} {triple_problems:?}"
        )));
    }
    Ok(SampleOutcome::Emitted(Box::new(triple)))
}
