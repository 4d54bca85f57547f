//! Second-stage triple synthesis over scene-segmented long videos.
//!
//! Each video is captioned scene by scene, with every caption conditioned on
//! the ones before it. A language model then writes a multi-scene question
//! together with a reasoning trace that cites scenes by id; the cited set is
//! the relevance chain. The preferred answer is generated from the relevant
//! scenes (or the whole video, by configuration) and the dispreferred answer
//! from a degraded context: a proper subset of the relevant scenes, or only
//! the irrelevant ones.

use crate::dataset::CorpusManifest;
use crate::gateway::{ContextItem, Gateway, GatewayError, GenerateRequest};
use crate::prompts::{PromptError, PromptSet};
use crate::seed;
use crate::types::{
    Clip, DispreferredStrategy, PreferenceTriple, PreferredContext, RelevanceChain, SceneRecord,
    Stage, TripleProvenance, TypeError,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Stage2Error {
    #[error("manifest lists no videos with at least 3 scenes")]
    NoQualifyingVideos,
    #[error("video '{video_id}' references unknown clip '{clip_id}'")]
    UnknownClip { video_id: String, clip_id: String },
    #[error("scene list is empty")]
    EmptyScenes,
    #[error("every scene is cited as relevant; no degraded context exists")]
    AllScenesRelevant,
    #[error("no valid relevance chain after {attempts} attempts")]
    ChainRetriesExhausted { attempts: u32 },
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
pub struct Stage2Config {
    /// Minimum cited scenes required before PartialEvidence may drop some.
    pub partial_min_relevant: u32,
    /// Probability that a sample degrades by PartialEvidence rather than
    /// IrrelevantScenes.
    pub strategy_mix: f64,
    pub preferred_context: PreferredContext,
    pub seed: u64,
    /// Regenerations allowed when a trace cites no valid scene.
    pub max_chain_retries: u32,
    /// Samples to attempt. Defaults to queries-per-video over every
    /// qualifying video.
    pub target_count: Option<usize>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            partial_min_relevant: 2,
            strategy_mix: 0.5,
            preferred_context: PreferredContext::RelevantScenesOnly,
            seed: 0,
            max_chain_retries: 3,
            target_count: None,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<(), Stage2Error> {
        if !(0.0..=1.0).contains(&self.strategy_mix) || !self.strategy_mix.is_finite() {
            return Err(Stage2Error::InvalidConfig(format!(
                "strategy_mix {} outside [0, 1]",
                self.strategy_mix
            )));
        }
        if self.partial_min_relevant < 2 {
            return Err(Stage2Error::InvalidConfig(
                "partial_min_relevant must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// Captions `scenes` in order. Scene t's request context carries the frames
/// of scene t plus the captions of scenes 1..t-1, so the gateway is invoked
/// exactly once per scene, sequentially.
pub fn recursive_caption(
    gateway: &dyn Gateway,
    prompts: &PromptSet,
    scenes: &[Clip],
    base_seed: u64,
) -> Result<Vec<SceneRecord>, Stage2Error> {
    if scenes.is_empty() {
        return Err(Stage2Error::EmptyScenes);
    }
    let mut records: Vec<SceneRecord> = Vec::with_capacity(scenes.len());
    for (t, clip) in scenes.iter().enumerate() {
        let mut items: Vec<ContextItem> = clip
            .frame_refs
            .iter()
            .map(|f| ContextItem::frame(f.clone()))
            .collect();
        for earlier in &records {
            items.push(ContextItem::caption(earlier.caption.clone()));
        }
        let caption = gateway.generate(&GenerateRequest {
            prompt: prompts.get("caption")?.to_string(),
            context_items: items,
            max_tokens: 96,
            seed: seed::derive_path(base_seed, &[t as u64]),
        })?;
        records.push(SceneRecord {
            scene_id: (t + 1) as u32,
            clip: clip.clone(),
            caption,
            caption_context_len: t as u32,
        });
    }
    Ok(records)
}

/// Extracts every distinct in-range scene citation from a trace, in
/// first-occurrence order. The citation grammar is `Scene #<n>`,
/// case-insensitive with optional whitespace around the `#`.
pub fn parse_relevance_chain(trace: &str, n_scenes: u32) -> Vec<u32> {
    let citation = regex::Regex::new(r"(?i)scene\s*#\s*([0-9]+)").expect("fixed pattern");
    let mut seen = BTreeSet::new();
    let mut ids = Vec::new();
    for cap in citation.captures_iter(trace) {
        let Ok(id) = cap[1].parse::<u32>() else {
            continue;
        };
        if (1..=n_scenes).contains(&id) && seen.insert(id) {
            ids.push(id);
        }
    }
    ids
}

/// Asks the language gateway for a question and scene-citing trace over the
/// captioned scenes. Traces that cite no valid scene are regenerated with a
/// fresh seed, up to `max_chain_retries` extra attempts.
pub fn generate_query_trace(
    gateway: &dyn Gateway,
    prompts: &PromptSet,
    records: &[SceneRecord],
    base_seed: u64,
    max_chain_retries: u32,
) -> Result<RelevanceChain, Stage2Error> {
    if records.is_empty() {
        return Err(Stage2Error::EmptyScenes);
    }
    let items: Vec<ContextItem> = records
        .iter()
        .map(|r| ContextItem::caption(r.caption.clone()))
        .collect();
    let attempts = max_chain_retries + 1;
    for attempt in 0..attempts {
        let text = gateway.generate(&GenerateRequest {
            prompt: prompts.get("query_trace")?.to_string(),
            context_items: items.clone(),
            max_tokens: 192,
            seed: seed::derive_path(base_seed, &[attempt as u64]),
        })?;
        let Some((query, trace)) = split_query_trace(&text) else {
            continue;
        };
        let ids = parse_relevance_chain(&trace, records.len() as u32);
        if !ids.is_empty() {
            return Ok(RelevanceChain {
                query,
                trace,
                relevant_scene_ids: ids,
            });
        }
    }
    Err(Stage2Error::ChainRetriesExhausted { attempts })
}

fn split_query_trace(text: &str) -> Option<(String, String)> {
    let q_start = text.find("QUESTION:")?;
    let t_start = text.find("TRACE:")?;
    if t_start <= q_start {
        return None;
    }
    let query = text[q_start + "QUESTION:".len()..t_start].trim().to_string();
    let trace = text[t_start + "TRACE:".len()..].trim().to_string();
    if query.is_empty() || trace.is_empty() {
        None
    } else {
        Some((query, trace))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextStrategy {
    Preferred,
    PartialEvidence,
    IrrelevantScenes,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuiltContext {
    pub scene_ids: Vec<u32>,
    pub strategy_used: ContextStrategy,
    /// True when PartialEvidence was requested but too few scenes were
    /// relevant, so the context fell back to IrrelevantScenes.
    pub fell_back: bool,
}

/// Selects the scene subset for one request. Preferred returns the cited
/// scenes (or all scenes under FullVideo); PartialEvidence a uniformly drawn
/// nonempty proper subset of the cited scenes; IrrelevantScenes the
/// complement of the chain.
pub fn build_context(
    strategy: ContextStrategy,
    chain: &RelevanceChain,
    records: &[SceneRecord],
    cfg: &Stage2Config,
    rng: &mut impl Rng,
) -> Result<BuiltContext, Stage2Error> {
    if chain.relevant_scene_ids.is_empty() {
        return Err(Stage2Error::InvalidConfig("chain cites no scenes".into()));
    }
    let n = records.len() as u32;
    for &id in &chain.relevant_scene_ids {
        if !(1..=n).contains(&id) {
            return Err(Stage2Error::InvalidConfig(format!(
                "chain cites scene {id} outside 1..={n}"
            )));
        }
    }
    match strategy {
        ContextStrategy::Preferred => {
            let scene_ids = match cfg.preferred_context {
                PreferredContext::RelevantScenesOnly => chain.relevant_scene_ids.clone(),
                PreferredContext::FullVideo => (1..=n).collect(),
            };
            Ok(BuiltContext {
                scene_ids,
                strategy_used: ContextStrategy::Preferred,
                fell_back: false,
            })
        }
        ContextStrategy::PartialEvidence => {
            let m = chain.relevant_scene_ids.len();
            if (m as u32) < cfg.partial_min_relevant {
                let complement = complement_of(chain, n)?;
                return Ok(BuiltContext {
                    scene_ids: complement,
                    strategy_used: ContextStrategy::IrrelevantScenes,
                    fell_back: true,
                });
            }
            // Uniform over nonempty proper subsets: independent fair coin
            // per element, rejecting the empty and full draws.
            loop {
                let keep: Vec<u32> = chain
                    .relevant_scene_ids
                    .iter()
                    .copied()
                    .filter(|_| rng.random_bool(0.5))
                    .collect();
                if !keep.is_empty() && keep.len() < m {
                    return Ok(BuiltContext {
                        scene_ids: keep,
                        strategy_used: ContextStrategy::PartialEvidence,
                        fell_back: false,
                    });
                }
            }
        }
        ContextStrategy::IrrelevantScenes => {
            let complement = complement_of(chain, n)?;
            Ok(BuiltContext {
                scene_ids: complement,
                strategy_used: ContextStrategy::IrrelevantScenes,
                fell_back: false,
            })
        }
    }
}

fn complement_of(chain: &RelevanceChain, n: u32) -> Result<Vec<u32>, Stage2Error> {
    let cited: BTreeSet<u32> = chain.relevant_scene_ids.iter().copied().collect();
    let complement: Vec<u32> = (1..=n).filter(|id| !cited.contains(id)).collect();
    if complement.is_empty() {
        return Err(Stage2Error::AllScenesRelevant);
    }
    Ok(complement)
}

fn answer_from_scenes(
    gateway: &dyn Gateway,
    prompts: &PromptSet,
    query: &str,
    records: &[SceneRecord],
    scene_ids: &[u32],
    seed: u64,
) -> Result<String, Stage2Error> {
    let mut items = vec![ContextItem::caption(format!("QUESTION: {query}"))];
    for &id in scene_ids {
        let record = &records[(id - 1) as usize];
        for frame in &record.clip.frame_refs {
            items.push(ContextItem::frame(frame.clone()));
        }
        items.push(ContextItem::caption(record.caption.clone()));
    }
    // The leading question is a caption item too; scene captions follow it.
    let text = gateway.generate(&GenerateRequest {
        prompt: prompts.get("answer_scenes")?.to_string(),
        context_items: items,
        max_tokens: 128,
        seed,
    })?;
    if text.trim().is_empty() {
        return Err(GatewayError::Protocol("empty scene answer".into()).into());
    }
    Ok(text)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub attempted: usize,
    pub emitted: usize,
    pub emitted_partial_evidence: usize,
    pub emitted_irrelevant_scenes: usize,
    pub fallbacks_to_irrelevant: usize,
    pub sample_failed: usize,
    pub skipped_videos: usize,
}

pub struct Stage2Output {
    pub triples: Vec<PreferenceTriple>,
    pub scene_records: Vec<SceneRecord>,
    pub report: Stage2Report,
}

const CAPTION_STREAM: u64 = 1;
const QUERY_STREAM: u64 = 2;
const STRATEGY_SUB: u64 = 1;
const PREFERRED_SUB: u64 = 2;
const DISPREFERRED_SUB: u64 = 3;

/// What one (video, query) attempt produced. The flag on `Emitted` records
/// whether a thin chain forced the partial-evidence strategy to fall back.
pub enum SampleOutcome {
    Emitted(Box<PreferenceTriple>, bool),
    Failed(String),
}

impl SampleOutcome {
    /// Report counter this outcome belongs to.
    pub fn counter(&self) -> &'static str {
        match self {
            SampleOutcome::Emitted(..) => "emitted",
            SampleOutcome::Failed(_) => "sample_failed",
        }
    }
}

/// Sample-indexed access to the stage-2 pipeline. Construction runs the
/// captioning phase (sequential within a video, concurrent across videos;
/// a captioning failure aborts construction). Samples then round-robin
/// over the captioned videos, each a pure function of the config seed and
/// its index, so they can run in any order or across resumed processes.
pub struct Stage2Runner<'a> {
    cfg: &'a Stage2Config,
    gateway_llm: &'a dyn Gateway,
    gateway_vlm: &'a dyn Gateway,
    prompts: &'a PromptSet,
    captioned: Vec<(usize, String, Vec<SceneRecord>)>,
    queries_per_video: usize,
    skipped_videos: usize,
}

impl<'a> Stage2Runner<'a> {
    pub fn new(
        manifest: &CorpusManifest,
        cfg: &'a Stage2Config,
        gateway_llm: &'a dyn Gateway,
        gateway_vlm: &'a dyn Gateway,
        prompts: &'a PromptSet,
    ) -> Result<Self, Stage2Error> {
        cfg.validate()?;
        let videos = manifest.videos.as_deref().unwrap_or(&[]);
        let mut qualifying: Vec<(usize, &str, Vec<Clip>)> = Vec::new();
        let mut skipped = 0usize;
        for (vidx, video) in videos.iter().enumerate() {
            let mut scenes = Vec::with_capacity(video.scene_clip_ids.len());
            for clip_id in &video.scene_clip_ids {
                let clip = manifest
                    .clips
                    .iter()
                    .find(|c| &c.clip_id == clip_id)
                    .ok_or_else(|| Stage2Error::UnknownClip {
                        video_id: video.video_id.clone(),
                        clip_id: clip_id.clone(),
                    })?;
                scenes.push(clip.clone());
            }
            if scenes.len() < 3 {
                skipped += 1;
                continue;
            }
            qualifying.push((vidx, video.video_id.as_str(), scenes));
        }
        if qualifying.is_empty() {
            return Err(Stage2Error::NoQualifyingVideos);
        }

        use rayon::prelude::*;
        let captioned: Vec<(usize, String, Vec<SceneRecord>)> = qualifying
            .par_iter()
            .map(|(vidx, video_id, scenes)| {
                let base = seed::derive_path(cfg.seed, &[CAPTION_STREAM, *vidx as u64]);
                recursive_caption(gateway_vlm, prompts, scenes, base)
                    .map(|records| (*vidx, video_id.to_string(), records))
            })
            .collect::<Result<_, _>>()?;

        Ok(Stage2Runner {
            cfg,
            gateway_llm,
            gateway_vlm,
            prompts,
            captioned,
            queries_per_video: manifest.queries_per_video.unwrap_or(1).max(1) as usize,
            skipped_videos: skipped,
        })
    }

    /// Number of sample attempts a full run makes.
    pub fn attempts(&self) -> usize {
        self.cfg
            .target_count
            .unwrap_or(self.queries_per_video * self.captioned.len())
    }

    pub fn skipped_videos(&self) -> usize {
        self.skipped_videos
    }

    /// All scene records from the captioning phase, in video then scene order.
    pub fn scene_records(&self) -> Vec<SceneRecord> {
        self.captioned
            .iter()
            .flat_map(|(_, _, records)| records.clone())
            .collect()
    }

    /// Attempts sample `index`, round-robining over the captioned videos so
    /// extra samples spread evenly.
    pub fn sample(&self, index: usize) -> Result<SampleOutcome, Stage2Error> {
        let slot = index % self.captioned.len();
        let qidx = index / self.captioned.len();
        let (vidx, video_id, records) = &self.captioned[slot];
        synthesize_one(
            self.cfg,
            self.gateway_llm,
            self.gateway_vlm,
            self.prompts,
            *vidx,
            video_id,
            records,
            qidx,
        )
    }
}

/// Runs the full stage-2 pipeline: captioning, then concurrent triple
/// synthesis with emission in sample order. Per-sample failures are counted
/// and skipped.
pub fn synthesize_stage2(
    manifest: &CorpusManifest,
    cfg: &Stage2Config,
    gateway_llm: &dyn Gateway,
    gateway_vlm: &dyn Gateway,
    prompts: &PromptSet,
) -> Result<Stage2Output, Stage2Error> {
    let runner = Stage2Runner::new(manifest, cfg, gateway_llm, gateway_vlm, prompts)?;
    let total = runner.attempts();
    use rayon::prelude::*;
    let outcomes: Vec<SampleOutcome> = (0..total)
        .into_par_iter()
        .map(|i| runner.sample(i))
        .collect::<Result<_, _>>()?;

    let mut report = Stage2Report {
        attempted: total,
        skipped_videos: runner.skipped_videos(),
        ..Stage2Report::default()
    };
    let mut triples = Vec::new();
    for outcome in outcomes {
        match outcome {
            SampleOutcome::Emitted(t, fell_back) => {
                report.emitted += 1;
                if fell_back {
                    report.fallbacks_to_irrelevant += 1;
                }
                match t.dispreferred_strategy {
                    DispreferredStrategy::PartialEvidence => report.emitted_partial_evidence += 1,
                    DispreferredStrategy::IrrelevantScenes => {
                        report.emitted_irrelevant_scenes += 1
                    }
                    DispreferredStrategy::TemporalMisalignment => {}
                }
                triples.push(*t);
            }
            SampleOutcome::Failed(_) => report.sample_failed += 1,
        }
    }
    Ok(Stage2Output {
        triples,
        scene_records: runner.scene_records(),
        report,
    })
}

#[allow(clippy::too_many_arguments)]
fn synthesize_one(
    cfg: &Stage2Config,
    gateway_llm: &dyn Gateway,
    gateway_vlm: &dyn Gateway,
    prompts: &PromptSet,
    vidx: usize,
    video_id: &str,
    records: &[SceneRecord],
    qidx: usize,
) -> Result<SampleOutcome, Stage2Error> {
    let sample_seed = seed::derive_path(cfg.seed, &[QUERY_STREAM, vidx as u64, qidx as u64]);

    let chain = match generate_query_trace(
        gateway_llm,
        prompts,
        records,
        sample_seed,
        cfg.max_chain_retries,
    ) {
        Ok(chain) => chain,
        Err(Stage2Error::ChainRetriesExhausted { .. }) | Err(Stage2Error::Gateway(_)) => {
            return Ok(SampleOutcome::Failed("no usable chain".into()))
        }
        Err(e) => return Err(e),
    };

    let mut rng = seed::rng(seed::derive_path(sample_seed, &[STRATEGY_SUB]));
    let requested = if rng.random_bool(cfg.strategy_mix) {
        ContextStrategy::PartialEvidence
    } else {
        ContextStrategy::IrrelevantScenes
    };

    let preferred_ctx = build_context(ContextStrategy::Preferred, &chain, records, cfg, &mut rng)?;
    let degraded = match build_context(requested, &chain, records, cfg, &mut rng) {
        Ok(ctx) => ctx,
        Err(Stage2Error::AllScenesRelevant) => {
            return Ok(SampleOutcome::Failed("all scenes relevant".into()))
        }
        Err(e) => return Err(e),
    };

    let preferred = match answer_from_scenes(
        gateway_vlm,
        prompts,
        &chain.query,
        records,
        &preferred_ctx.scene_ids,
        seed::derive_path(sample_seed, &[PREFERRED_SUB]),
    ) {
        Ok(text) => text,
        Err(Stage2Error::Gateway(e)) => return Ok(SampleOutcome::Failed(e.to_string())),
        Err(e) => return Err(e),
    };
    let dispreferred = match answer_from_scenes(
        gateway_vlm,
        prompts,
        &chain.query,
        records,
        &degraded.scene_ids,
        seed::derive_path(sample_seed, &[DISPREFERRED_SUB]),
    ) {
        Ok(text) => text,
        Err(Stage2Error::Gateway(e)) => return Ok(SampleOutcome::Failed(e.to_string())),
        Err(e) => return Err(e),
    };

    let strategy = match degraded.strategy_used {
        ContextStrategy::PartialEvidence => DispreferredStrategy::PartialEvidence,
        ContextStrategy::IrrelevantScenes => DispreferredStrategy::IrrelevantScenes,
        ContextStrategy::Preferred => {
            return Err(Stage2Error::InvalidConfig(
                "degraded context came back as Preferred".into(),
            ))
        }
    };

    let triple = PreferenceTriple {
        triple_id: format!("s2-{vidx:04}-{qidx:02}"),
        query: chain.query.clone(),
        preferred,
        dispreferred,
        stage: Stage::Stage2,
        dispreferred_strategy: strategy,
        context_ref: video_id.to_string(),
        anchor_ref: video_id.to_string(),
        generation_seed: sample_seed,
        provenance: TripleProvenance::Scenes {
            video_id: video_id.to_string(),
            n_scenes: records.len() as u32,
            chain_scene_ids: chain.relevant_scene_ids.clone(),
            preferred_scene_ids: preferred_ctx.scene_ids.clone(),
            dispreferred_scene_ids: degraded.scene_ids.clone(),
            preferred_mode: cfg.preferred_context,
            partial_fallback: degraded.fell_back,
        },
    };
    let problems = triple.violations();
    if !problems.is_empty() {
        return Err(Stage2Error::InvalidConfig(format!(
            "internal invariant breach on {video_id}/{qidx}: {problems:?}"
        )));
    }
    Ok(SampleOutcome::Emitted(Box::new(triple), degraded.fell_back))
}
