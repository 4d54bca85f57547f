//! Serialization, validation, and resumable persistence.
//!
//! Datasets are line-delimited JSON with a trailing `#sha256:` footer over
//! the record bytes, so integrity is checkable without a side file and the
//! format stays streamable and diff-friendly. Synthesis runs checkpoint
//! their position after every sample; an interrupted run resumes at the
//! first unemitted index and produces bytes identical to an uninterrupted
//! one.

use crate::types::{cosine_similarity, Clip, DispreferredStrategy, DpoConfig, Embedding,
    PreferenceTriple, PreferredContext, Stage, TripleProvenance};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{Seek, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

const FOOTER_PREFIX: &str = "#sha256:";
const STATE_FILE: &str = "state.json";
const PARTIAL_FILE: &str = "partial.jsonl";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: checksum mismatch: footer says {expected}, content hashes to {actual}")]
    ChecksumMismatch {
        path: String,
        expected: String,
        actual: String,
    },
    #[error("{path}: missing checksum footer")]
    MissingFooter { path: String },
    #[error("invalid manifest: {0}")]
    ManifestInvalid(String),
    #[error("corrupt run state: {0}; pass a fresh-run flag to start over")]
    StateCorrupt(String),
    #[error("config changed: checkpoint was written with config hash {expected}, this run has {actual}")]
    ConfigChanged { expected: String, actual: String },
    #[error("pipeline failure: {0}")]
    Pipeline(String),
}

fn io_err(path: &Path, e: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// SHA-256 of a serializable value's canonical JSON, hex encoded. Configs
/// hashed this way gate checkpoint resume.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serialization cannot fail");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// SHA-256 of a file's raw bytes, hex encoded.
pub fn file_digest(path: &Path) -> Result<String, DatasetError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

// ---------------------------------------------------------------------------
// Corpus manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub video_id: String,
    /// Scene clips in chronological order.
    pub scene_clip_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub manifest_version: u32,
    pub embedding_dim: usize,
    pub clips: Vec<Clip>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub videos: Option<Vec<VideoEntry>>,
    pub root_seed: u64,
    /// Stage-2 queries drawn per long video; defaults to 1 when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries_per_video: Option<u32>,
}

/// On-disk clip form. Frame references may be listed explicitly or implied
/// by a frame count; embeddings may be raw float vectors (normalized at
/// ingestion) or the exact hex form this crate writes.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipSpec {
    clip_id: String,
    #[serde(default)]
    frame_refs: Option<Vec<String>>,
    #[serde(default)]
    frame_count: Option<u64>,
    #[serde(default = "default_fps")]
    fps: f64,
    #[serde(default)]
    caption: String,
    #[serde(default)]
    embedding: Option<EmbeddingSpec>,
}

fn default_fps() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum EmbeddingSpec {
    Raw(Vec<f64>),
    Hex(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    manifest_version: u32,
    embedding_dim: usize,
    clips: Vec<ClipSpec>,
    #[serde(default)]
    videos: Option<Vec<VideoEntry>>,
    root_seed: u64,
    #[serde(default)]
    queries_per_video: Option<u32>,
}

impl ClipSpec {
    fn resolve(self) -> Result<Clip, DatasetError> {
        let frame_refs = match (self.frame_refs, self.frame_count) {
            (Some(refs), maybe_count) => {
                if let Some(count) = maybe_count {
                    if refs.len() as u64 != count {
                        return Err(DatasetError::ManifestInvalid(format!(
                            "clip '{}': {} frame_refs but frame_count {count}",
                            self.clip_id,
                            refs.len()
                        )));
                    }
                }
                refs
            }
            (None, Some(count)) => (0..count)
                .map(|i| format!("{}#f{i}", self.clip_id))
                .collect(),
            (None, None) => {
                return Err(DatasetError::ManifestInvalid(format!(
                    "clip '{}' needs frame_refs or frame_count",
                    self.clip_id
                )))
            }
        };
        let embedding = match self.embedding {
            Some(EmbeddingSpec::Raw(values)) => Some(
                Embedding::normalized(values)
                    .map_err(|e| DatasetError::ManifestInvalid(format!(
                        "clip '{}': {e}",
                        self.clip_id
                    )))?,
            ),
            Some(EmbeddingSpec::Hex(text)) => Some(Embedding::from_hex(&text).map_err(|e| {
                DatasetError::ManifestInvalid(format!("clip '{}': {e}", self.clip_id))
            })?),
            None => None,
        };
        let clip = Clip {
            frame_count: frame_refs.len() as u64,
            clip_id: self.clip_id,
            frame_refs,
            fps: self.fps,
            caption: self.caption,
            embedding,
        };
        clip.validate()
            .map_err(|e| DatasetError::ManifestInvalid(e.to_string()))?;
        Ok(clip)
    }
}

impl CorpusManifest {
    pub fn from_file(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let file: ManifestFile = serde_json::from_str(&text).map_err(|e| {
            DatasetError::ManifestInvalid(format!("{}: {e}", path.display()))
        })?;
        let manifest = CorpusManifest {
            manifest_version: file.manifest_version,
            embedding_dim: file.embedding_dim,
            clips: file
                .clips
                .into_iter()
                .map(ClipSpec::resolve)
                .collect::<Result<_, _>>()?,
            videos: file.videos,
            root_seed: file.root_seed,
            queries_per_video: file.queries_per_video,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|e| io_err(path, e))
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.manifest_version < 1 {
            return Err(DatasetError::ManifestInvalid(
                "manifest_version must be at least 1".into(),
            ));
        }
        if self.embedding_dim == 0 {
            return Err(DatasetError::ManifestInvalid(
                "embedding_dim must be positive".into(),
            ));
        }
        let mut ids = BTreeSet::new();
        for clip in &self.clips {
            if !ids.insert(clip.clip_id.as_str()) {
                return Err(DatasetError::ManifestInvalid(format!(
                    "duplicate clip id '{}'",
                    clip.clip_id
                )));
            }
            if let Some(emb) = &clip.embedding {
                if emb.dim() != self.embedding_dim {
                    return Err(DatasetError::ManifestInvalid(format!(
                        "clip '{}' embedding has dimension {}, manifest says {}",
                        clip.clip_id,
                        emb.dim(),
                        self.embedding_dim
                    )));
                }
            }
        }
        if let Some(videos) = &self.videos {
            let mut video_ids = BTreeSet::new();
            for video in videos {
                if !video_ids.insert(video.video_id.as_str()) {
                    return Err(DatasetError::ManifestInvalid(format!(
                        "duplicate video id '{}'",
                        video.video_id
                    )));
                }
                for clip_id in &video.scene_clip_ids {
                    if !ids.contains(clip_id.as_str()) {
                        return Err(DatasetError::ManifestInvalid(format!(
                            "video '{}' references unknown clip '{clip_id}'",
                            video.video_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn clip(&self, clip_id: &str) -> Option<&Clip> {
        self.clips.iter().find(|c| c.clip_id == clip_id)
    }
}

// ---------------------------------------------------------------------------
// Record files

/// Writes records as one JSON object per line, key order fixed by the type,
/// then a `#sha256:` footer over every record byte including newlines.
pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<usize, DatasetError> {
    let mut body = Vec::new();
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| DatasetError::Pipeline(format!("serializing record: {e}")))?;
        body.extend_from_slice(line.as_bytes());
        body.push(b'\n');
    }
    let digest = hex::encode(Sha256::digest(&body));
    body.extend_from_slice(format!("{FOOTER_PREFIX}{digest}\n").as_bytes());
    std::fs::write(path, body).map_err(|e| io_err(path, e))?;
    Ok(records.len())
}

/// Reads a record file written by [`write_records`], verifying the footer
/// checksum. Parse failures name the 1-based line number.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let display = path.display().to_string();
    let mut records = Vec::new();
    let mut hasher = Sha256::new();
    let mut footer: Option<(usize, String)> = None;
    for (idx, line) in text.lines().enumerate() {
        let number = idx + 1;
        if let Some(rest) = line.strip_prefix(FOOTER_PREFIX) {
            if footer.is_some() {
                return Err(DatasetError::Parse {
                    path: display,
                    line: number,
                    message: "second footer line".into(),
                });
            }
            footer = Some((number, rest.to_string()));
            continue;
        }
        if let Some((footer_line, _)) = footer {
            return Err(DatasetError::Parse {
                path: display,
                line: number,
                message: format!("content after the footer on line {footer_line}"),
            });
        }
        let record: T = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
            path: display.clone(),
            line: number,
            message: e.to_string(),
        })?;
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
        records.push(record);
    }
    let Some((_, expected)) = footer else {
        return Err(DatasetError::MissingFooter { path: display });
    };
    let actual = hex::encode(hasher.finalize());
    if actual != expected {
        return Err(DatasetError::ChecksumMismatch {
            path: display,
            expected,
            actual,
        });
    }
    Ok(records)
}

pub fn write_triples(path: &Path, triples: &[PreferenceTriple]) -> Result<usize, DatasetError> {
    write_records(path, triples)
}

pub fn read_triples(path: &Path) -> Result<Vec<PreferenceTriple>, DatasetError> {
    read_records(path)
}

// ---------------------------------------------------------------------------
// Dataset validation

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub triple_id: String,
    pub problem: String,
}

/// Re-verifies a serialized triple dataset against the manifest and config:
/// per-triple invariants, the similarity bound by brute-force cosine over
/// manifest embeddings, and the stage-2 subset and disjointness relations.
/// A clean dataset returns an empty list.
pub fn validate_dataset(
    dataset_path: &Path,
    manifest: &CorpusManifest,
    cfg: &DpoConfig,
) -> Result<Vec<ValidationIssue>, DatasetError> {
    let triples = read_triples(dataset_path)?;
    let mut issues = Vec::new();
    let mut push = |triple_id: &str, problem: String| {
        issues.push(ValidationIssue {
            triple_id: triple_id.to_string(),
            problem,
        });
    };

    for t in &triples {
        for v in t.violations() {
            push(&t.triple_id, v);
        }
        match &t.provenance {
            TripleProvenance::Composite {
                clip_ids,
                anchor_index,
                similarity_threshold,
                total_frames,
                dispreferred_clip_ids,
            } => {
                if t.stage != Stage::Stage1 {
                    continue;
                }
                if (*similarity_threshold - cfg.similarity_threshold).abs() > 1e-12 {
                    push(
                        &t.triple_id,
                        format!(
                            "generated with threshold {similarity_threshold}, validating against {}",
                            cfg.similarity_threshold
                        ),
                    );
                }
                if *anchor_index >= clip_ids.len() {
                    push(
                        &t.triple_id,
                        format!("anchor_index {anchor_index} outside {} clips", clip_ids.len()),
                    );
                    continue;
                }
                if clip_ids[*anchor_index] != t.anchor_ref {
                    push(
                        &t.triple_id,
                        format!(
                            "anchor_ref '{}' but clip at anchor_index is '{}'",
                            t.anchor_ref, clip_ids[*anchor_index]
                        ),
                    );
                }
                let mut frames = 0u64;
                let mut missing = false;
                for clip_id in clip_ids {
                    match manifest.clip(clip_id) {
                        Some(clip) => frames += clip.frame_count,
                        None => {
                            push(&t.triple_id, format!("unknown clip '{clip_id}'"));
                            missing = true;
                        }
                    }
                }
                if !missing {
                    if frames != *total_frames {
                        push(
                            &t.triple_id,
                            format!("total_frames {total_frames} but clips sum to {frames}"),
                        );
                    }
                    if frames > cfg.frame_budget {
                        push(
                            &t.triple_id,
                            format!("{frames} frames over budget {}", cfg.frame_budget),
                        );
                    }
                }
                let anchor_emb = manifest.clip(&t.anchor_ref).and_then(|c| c.embedding.as_ref());
                for clip_id in clip_ids.iter().filter(|id| **id != t.anchor_ref) {
                    let Some(anchor_emb) = anchor_emb else { break };
                    let Some(emb) = manifest.clip(clip_id).and_then(|c| c.embedding.as_ref())
                    else {
                        continue;
                    };
                    match cosine_similarity(anchor_emb, emb) {
                        Ok(cos) if cos >= cfg.similarity_threshold => push(
                            &t.triple_id,
                            format!(
                                "distractor '{clip_id}' cosine {cos:.6} >= {}",
                                cfg.similarity_threshold
                            ),
                        ),
                        Ok(_) => {}
                        Err(e) => push(&t.triple_id, format!("cosine check failed: {e}")),
                    }
                }
                let expected_disp: Vec<&String> =
                    clip_ids.iter().filter(|id| **id != t.anchor_ref).collect();
                if dispreferred_clip_ids.iter().collect::<Vec<_>>() != expected_disp {
                    push(
                        &t.triple_id,
                        "dispreferred_clip_ids differ from the non-anchor clips".into(),
                    );
                }
                if dispreferred_clip_ids.contains(&t.anchor_ref) {
                    push(&t.triple_id, "anchor appears in the dispreferred context".into());
                }
            }
            TripleProvenance::Scenes {
                video_id,
                n_scenes,
                chain_scene_ids,
                preferred_scene_ids,
                dispreferred_scene_ids,
                preferred_mode,
                partial_fallback,
            } => {
                if t.stage != Stage::Stage2 {
                    continue;
                }
                let n = *n_scenes;
                let chain: BTreeSet<u32> = chain_scene_ids.iter().copied().collect();
                let disp: BTreeSet<u32> = dispreferred_scene_ids.iter().copied().collect();
                let preferred: BTreeSet<u32> = preferred_scene_ids.iter().copied().collect();
                if chain.is_empty() {
                    push(&t.triple_id, "empty relevance chain".into());
                    continue;
                }
                for set in [&chain, &disp, &preferred] {
                    for &id in set.iter() {
                        if !(1..=n).contains(&id) {
                            push(&t.triple_id, format!("scene id {id} outside 1..={n}"));
                        }
                    }
                }
                match preferred_mode {
                    PreferredContext::RelevantScenesOnly => {
                        if preferred != chain {
                            push(
                                &t.triple_id,
                                "preferred context differs from the relevance chain".into(),
                            );
                        }
                    }
                    PreferredContext::FullVideo => {
                        if preferred != (1..=n).collect::<BTreeSet<u32>>() {
                            push(&t.triple_id, "preferred context is not the full video".into());
                        }
                    }
                }
                match t.dispreferred_strategy {
                    DispreferredStrategy::PartialEvidence => {
                        if disp.is_empty() {
                            push(&t.triple_id, "partial-evidence context is empty".into());
                        } else if !disp.is_subset(&chain) || disp.len() >= chain.len() {
                            push(
                                &t.triple_id,
                                "partial-evidence context is not a proper subset of the chain"
                                    .into(),
                            );
                        }
                        if *partial_fallback {
                            push(
                                &t.triple_id,
                                "strategy says partial evidence but fallback flag is set".into(),
                            );
                        }
                    }
                    DispreferredStrategy::IrrelevantScenes => {
                        if disp.is_empty() {
                            push(&t.triple_id, "irrelevant-scenes context is empty".into());
                        } else if !disp.is_disjoint(&chain) {
                            push(
                                &t.triple_id,
                                "irrelevant-scenes context overlaps the chain".into(),
                            );
                        }
                    }
                    DispreferredStrategy::TemporalMisalignment => {}
                }
                if let Some(videos) = &manifest.videos {
                    match videos.iter().find(|v| &v.video_id == video_id) {
                        Some(video) => {
                            if video.scene_clip_ids.len() as u32 != n {
                                push(
                                    &t.triple_id,
                                    format!(
                                        "manifest lists {} scenes for '{video_id}', triple says {n}",
                                        video.scene_clip_ids.len()
                                    ),
                                );
                            }
                        }
                        None => push(&t.triple_id, format!("unknown video '{video_id}'")),
                    }
                }
            }
        }
    }
    Ok(issues)
}

// ---------------------------------------------------------------------------
// Checkpoint and resume

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    pub config_hash: String,
    pub root_seed: u64,
    /// First sample index not yet processed.
    pub next_index: usize,
    /// Valid byte length of the partial data file.
    pub bytes_written: u64,
    pub counters: BTreeMap<String, usize>,
    pub complete: bool,
}

/// Atomically writes the run state (temp file then rename).
pub fn save_state(run_dir: &Path, state: &RunState) -> Result<(), DatasetError> {
    let tmp = run_dir.join(format!("{STATE_FILE}.tmp"));
    let json = serde_json::to_string_pretty(state).expect("state serializes");
    std::fs::write(&tmp, json).map_err(|e| io_err(&tmp, e))?;
    let target = run_dir.join(STATE_FILE);
    std::fs::rename(&tmp, &target).map_err(|e| io_err(&target, e))
}

/// Loads the run state if one exists. A present-but-unreadable state is an
/// error, not a fresh start: silently restarting would break determinism.
pub fn load_state(run_dir: &Path) -> Result<Option<RunState>, DatasetError> {
    let path = run_dir.join(STATE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let state: RunState =
        serde_json::from_str(&text).map_err(|e| DatasetError::StateCorrupt(e.to_string()))?;
    Ok(Some(state))
}

/// What one sample contributed: an optional serialized record line (no
/// trailing newline) and the report counter it belongs to.
pub struct SampleEmit {
    pub line: Option<String>,
    pub counter: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub complete: bool,
    pub processed: usize,
    pub counters: BTreeMap<String, usize>,
    /// Set once the run completed and the dataset was finalized.
    pub final_path: Option<PathBuf>,
}

/// Drives a sample-indexed synthesis run with checkpointing.
///
/// `sample(i)` must be a pure function of the index (given fixed config and
/// seed); the runner guarantees each index is processed exactly once across
/// interruptions. `limit` stops after that many samples this invocation,
/// leaving the run resumable. On completion the partial file gains its
/// checksum footer and is renamed to `file_name` in the run directory.
pub fn run_resumable<F>(
    run_dir: &Path,
    file_name: &str,
    cfg_hash: &str,
    root_seed: u64,
    total: usize,
    limit: Option<usize>,
    mut sample: F,
) -> Result<RunOutcome, DatasetError>
where
    F: FnMut(usize) -> Result<SampleEmit, DatasetError>,
{
    std::fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
    let partial_path = run_dir.join(PARTIAL_FILE);
    let final_path = run_dir.join(file_name);

    let mut state = match load_state(run_dir)? {
        Some(state) => {
            if state.config_hash != cfg_hash {
                return Err(DatasetError::ConfigChanged {
                    expected: state.config_hash,
                    actual: cfg_hash.to_string(),
                });
            }
            if state.root_seed != root_seed {
                return Err(DatasetError::ConfigChanged {
                    expected: format!("seed {}", state.root_seed),
                    actual: format!("seed {root_seed}"),
                });
            }
            if state.complete {
                // Finished earlier; resuming is a no-op.
                return Ok(RunOutcome {
                    complete: true,
                    processed: 0,
                    counters: state.counters,
                    final_path: Some(final_path),
                });
            }
            let on_disk = std::fs::metadata(&partial_path)
                .map(|m| m.len())
                .unwrap_or(0);
            if on_disk < state.bytes_written {
                return Err(DatasetError::StateCorrupt(format!(
                    "partial file has {on_disk} bytes, checkpoint expects {}",
                    state.bytes_written
                )));
            }
            if on_disk > state.bytes_written {
                // Torn write past the last checkpoint; drop the tail.
                let file = std::fs::OpenOptions::new()
                    .write(true)
                    .open(&partial_path)
                    .map_err(|e| io_err(&partial_path, e))?;
                file.set_len(state.bytes_written)
                    .map_err(|e| io_err(&partial_path, e))?;
            }
            state
        }
        None => {
            std::fs::write(&partial_path, b"").map_err(|e| io_err(&partial_path, e))?;
            RunState {
                config_hash: cfg_hash.to_string(),
                root_seed,
                next_index: 0,
                bytes_written: 0,
                counters: BTreeMap::new(),
                complete: false,
            }
        }
    };

    let mut file = std::fs::OpenOptions::new()
        .append(true)
        .open(&partial_path)
        .map_err(|e| io_err(&partial_path, e))?;
    let mut processed = 0usize;

    for index in state.next_index..total {
        if let Some(limit) = limit {
            if processed >= limit {
                return Ok(RunOutcome {
                    complete: false,
                    processed,
                    counters: state.counters,
                    final_path: None,
                });
            }
        }
        let emit = sample(index)?;
        if let Some(line) = emit.line {
            file.write_all(line.as_bytes())
                .and_then(|_| file.write_all(b"\n"))
                .and_then(|_| file.flush())
                .map_err(|e| io_err(&partial_path, e))?;
            state.bytes_written += line.len() as u64 + 1;
        }
        *state.counters.entry(emit.counter).or_default() += 1;
        state.next_index = index + 1;
        save_state(run_dir, &state)?;
        processed += 1;
    }

    // Finalize: checksum the records, append the footer, move into place.
    drop(file);
    let mut body = std::fs::read(&partial_path).map_err(|e| io_err(&partial_path, e))?;
    body.truncate(state.bytes_written as usize);
    let digest = hex::encode(Sha256::digest(&body));
    let mut file = std::fs::OpenOptions::new()
        .write(true)
        .open(&partial_path)
        .map_err(|e| io_err(&partial_path, e))?;
    file.set_len(state.bytes_written)
        .map_err(|e| io_err(&partial_path, e))?;
    file.seek(std::io::SeekFrom::End(0))
        .map_err(|e| io_err(&partial_path, e))?;
    file.write_all(format!("{FOOTER_PREFIX}{digest}\n").as_bytes())
        .map_err(|e| io_err(&partial_path, e))?;
    drop(file);
    std::fs::rename(&partial_path, &final_path).map_err(|e| io_err(&final_path, e))?;
    state.complete = true;
    save_state(run_dir, &state)?;
    Ok(RunOutcome {
        complete: true,
        processed,
        counters: state.counters,
        final_path: Some(final_path),
    })
}
