//! One function per subcommand. Each loads its inputs, runs the matching
//! library operation, and leaves a run directory holding the outputs plus a
//! `run_manifest.json` that pins config hash, seed, and input digests.

use crate::config::{streams, GatewayMode, RunConfig, RunManifest};
use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use std::path::{Path, PathBuf};
use vidpref_core::dataset::{self, read_records, read_triples, write_records, SampleEmit};
use vidpref_core::gateway::http::HttpGateway;
use vidpref_core::gateway::mock::MockGateway;
use vidpref_core::gateway::Gateway;
use vidpref_core::objective::train::{
    eval_pref_accuracy, tokenize_triples, train_toy, TokenizedTriple,
};
use vidpref_core::objective::toy::ToyScorer;
use vidpref_core::probe::{
    run_probe, ContentOnlyOracle, PlacementMode, PlantedDipOracle, ProbeOracle, ProbeTask,
};
use vidpref_core::prompts::PromptSet;
use vidpref_core::seed;
use vidpref_core::stage1::{self, Stage1Report, Stage1Runner};
use vidpref_core::stage2::{Stage2Report, Stage2Runner};
use vidpref_core::types::{ModelTag, Stage};

fn make_gateway(cfg: &RunConfig) -> Result<Box<dyn Gateway>> {
    Ok(match cfg.gateway_mode {
        GatewayMode::Mock => Box::new(MockGateway::new(seed::derive_path(
            cfg.root_seed,
            &[streams::GATEWAY],
        ))),
        GatewayMode::Http => Box::new(HttpGateway::from_env(
            cfg.gateway.clone(),
            cfg.paths.gateway_log.clone(),
        )?),
    })
}

fn load_prompts(cfg: &RunConfig) -> Result<PromptSet> {
    Ok(match &cfg.paths.prompts_dir {
        Some(dir) => PromptSet::with_overrides(dir)?,
        None => PromptSet::builtin(),
    })
}

fn prepare_run_dir(cfg: &RunConfig, command: &str, fresh: bool) -> Result<PathBuf> {
    let run_dir = cfg.paths.out_dir.join(command);
    if fresh && run_dir.exists() {
        std::fs::remove_dir_all(&run_dir)
            .with_context(|| format!("clearing {}", run_dir.display()))?;
    }
    std::fs::create_dir_all(&run_dir)
        .with_context(|| format!("creating {}", run_dir.display()))?;
    Ok(run_dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

pub fn synth_stage1(cfg: &RunConfig, limit: Option<usize>, fresh: bool) -> Result<()> {
    let run_dir = prepare_run_dir(cfg, "synth-stage1", fresh)?;
    let manifest = dataset::CorpusManifest::from_file(&cfg.paths.corpus)?;
    let prompts = load_prompts(cfg)?;
    let gateway = make_gateway(cfg)?;
    let runner = Stage1Runner::new(&manifest, &cfg.stage1, gateway.as_ref(), &prompts)?;
    let attempts = runner.attempts();
    eprintln!(
        "[synth-stage1] {} clips, {attempts} attempts, seed {}",
        manifest.clips.len(),
        cfg.root_seed
    );

    let cfg_hash = dataset::config_hash(cfg);
    let outcome = dataset::run_resumable(
        &run_dir,
        "triples.jsonl",
        &cfg_hash,
        cfg.root_seed,
        attempts,
        limit,
        |index| {
            if index % 100 == 0 && index > 0 {
                eprintln!("[synth-stage1] sample {index}/{attempts}");
            }
            let outcome = runner
                .sample(index)
                .map_err(|e| dataset::DatasetError::Pipeline(e.to_string()))?;
            let line = match &outcome {
                stage1::SampleOutcome::Emitted(t) => Some(
                    serde_json::to_string(t)
                        .map_err(|e| dataset::DatasetError::Pipeline(e.to_string()))?,
                ),
                stage1::SampleOutcome::Failed(msg) => {
                    eprintln!("[synth-stage1] sample {index} failed: {msg}");
                    None
                }
                _ => None,
            };
            Ok(SampleEmit {
                line,
                counter: outcome.counter().to_string(),
            })
        },
    )?;

    if !outcome.complete {
        eprintln!(
            "[synth-stage1] checkpointed after {} samples; rerun to resume",
            outcome.processed
        );
        return Ok(());
    }

    let get = |k: &str| outcome.counters.get(k).copied().unwrap_or(0);
    let report = Stage1Report {
        attempted: attempts,
        emitted: get("emitted"),
        discarded_similarity: get("discarded_similarity"),
        discarded_specificity: get("discarded_specificity"),
        failed_gateway: get("failed_gateway"),
    };
    let report_path = run_dir.join("report.json");
    write_json(&report_path, &report)?;

    let mut run_manifest = RunManifest::new("synth-stage1", cfg);
    run_manifest.digest_input("corpus", &cfg.paths.corpus)?;
    run_manifest.counts = outcome.counters.clone();
    run_manifest.counts.insert("attempted".into(), attempts);
    run_manifest.record_output(&run_dir.join("triples.jsonl"));
    run_manifest.record_output(&report_path);
    run_manifest.write(&run_dir)?;
    eprintln!(
        "[synth-stage1] done: {} emitted of {attempts} attempted",
        report.emitted
    );
    Ok(())
}

pub fn synth_stage2(cfg: &RunConfig, limit: Option<usize>, fresh: bool) -> Result<()> {
    let run_dir = prepare_run_dir(cfg, "synth-stage2", fresh)?;
    let manifest = dataset::CorpusManifest::from_file(&cfg.paths.corpus)?;
    let prompts = load_prompts(cfg)?;
    let gateway = make_gateway(cfg)?;
    let runner = Stage2Runner::new(
        &manifest,
        &cfg.stage2,
        gateway.as_ref(),
        gateway.as_ref(),
        &prompts,
    )?;
    let attempts = runner.attempts();
    eprintln!(
        "[synth-stage2] {} scene records captioned, {attempts} attempts",
        runner.scene_records().len()
    );

    let cfg_hash = dataset::config_hash(cfg);
    let outcome = dataset::run_resumable(
        &run_dir,
        "triples.jsonl",
        &cfg_hash,
        cfg.root_seed,
        attempts,
        limit,
        |index| {
            let outcome = runner
                .sample(index)
                .map_err(|e| dataset::DatasetError::Pipeline(e.to_string()))?;
            let line = match &outcome {
                vidpref_core::stage2::SampleOutcome::Emitted(t, _) => Some(
                    serde_json::to_string(t)
                        .map_err(|e| dataset::DatasetError::Pipeline(e.to_string()))?,
                ),
                vidpref_core::stage2::SampleOutcome::Failed(msg) => {
                    eprintln!("[synth-stage2] sample {index} failed: {msg}");
                    None
                }
            };
            Ok(SampleEmit {
                line,
                counter: outcome.counter().to_string(),
            })
        },
    )?;

    if !outcome.complete {
        eprintln!(
            "[synth-stage2] checkpointed after {} samples; rerun to resume",
            outcome.processed
        );
        return Ok(());
    }

    let scenes_path = run_dir.join("scenes.jsonl");
    write_records(&scenes_path, &runner.scene_records())?;

    // Strategy-level counts come from the emitted file itself, which also
    // exercises the read path.
    let triples = read_triples(&run_dir.join("triples.jsonl"))?;
    let mut report = Stage2Report {
        attempted: attempts,
        emitted: triples.len(),
        sample_failed: outcome.counters.get("sample_failed").copied().unwrap_or(0),
        skipped_videos: runner.skipped_videos(),
        ..Stage2Report::default()
    };
    for t in &triples {
        match t.dispreferred_strategy {
            vidpref_core::types::DispreferredStrategy::PartialEvidence => {
                report.emitted_partial_evidence += 1
            }
            vidpref_core::types::DispreferredStrategy::IrrelevantScenes => {
                report.emitted_irrelevant_scenes += 1
            }
            vidpref_core::types::DispreferredStrategy::TemporalMisalignment => {}
        }
        if let vidpref_core::types::TripleProvenance::Scenes {
            partial_fallback: true,
            ..
        } = t.provenance
        {
            report.fallbacks_to_irrelevant += 1;
        }
    }
    let report_path = run_dir.join("report.json");
    write_json(&report_path, &report)?;

    let mut run_manifest = RunManifest::new("synth-stage2", cfg);
    run_manifest.digest_input("corpus", &cfg.paths.corpus)?;
    run_manifest.counts = outcome.counters.clone();
    run_manifest.counts.insert("attempted".into(), attempts);
    run_manifest
        .counts
        .insert("scene_records".into(), runner.scene_records().len());
    run_manifest.record_output(&run_dir.join("triples.jsonl"));
    run_manifest.record_output(&scenes_path);
    run_manifest.record_output(&report_path);
    run_manifest.write(&run_dir)?;
    eprintln!(
        "[synth-stage2] done: {} emitted of {attempts} attempted",
        report.emitted
    );
    Ok(())
}

pub fn caption(cfg: &RunConfig) -> Result<()> {
    let run_dir = prepare_run_dir(cfg, "caption", false)?;
    let manifest = dataset::CorpusManifest::from_file(&cfg.paths.corpus)?;
    let prompts = load_prompts(cfg)?;
    let gateway = make_gateway(cfg)?;
    let runner = Stage2Runner::new(
        &manifest,
        &cfg.stage2,
        gateway.as_ref(),
        gateway.as_ref(),
        &prompts,
    )?;
    let records = runner.scene_records();
    let scenes_path = run_dir.join("scenes.jsonl");
    write_records(&scenes_path, &records)?;

    let mut run_manifest = RunManifest::new("caption", cfg);
    run_manifest.digest_input("corpus", &cfg.paths.corpus)?;
    run_manifest.counts.insert("scene_records".into(), records.len());
    run_manifest
        .counts
        .insert("skipped_videos".into(), runner.skipped_videos());
    run_manifest.record_output(&scenes_path);
    run_manifest.write(&run_dir)?;
    eprintln!("[caption] wrote {} scene records", records.len());
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainReport {
    stage: String,
    examples: usize,
    steps: u32,
    init_accuracy: f64,
    final_accuracy: f64,
    final_dpo_loss: f64,
    final_total_loss: f64,
}

pub fn train_toy_cmd(
    cfg: &RunConfig,
    stage: Stage,
    dataset_path: Option<&Path>,
    init_checkpoint: Option<&Path>,
) -> Result<()> {
    let command = match stage {
        Stage::Stage1 => "train-toy-stage1",
        Stage::Stage2 => "train-toy-stage2",
    };
    let run_dir = prepare_run_dir(cfg, command, false)?;
    let data_path = dataset_path.unwrap_or(&cfg.paths.dataset);
    let triples = read_triples(data_path)?;
    let staged: Vec<_> = triples.into_iter().filter(|t| t.stage == stage).collect();
    if staged.is_empty() {
        bail!("no {stage} triples in {}", data_path.display());
    }
    let dataset: Vec<TokenizedTriple> = tokenize_triples(&staged, cfg.model.vocab_size);

    let init_path = init_checkpoint.or(cfg.paths.init_checkpoint.as_deref());
    let init = match init_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading checkpoint {}", p.display()))?;
            serde_json::from_str::<ToyScorer>(&text)
                .with_context(|| format!("parsing checkpoint {}", p.display()))?
        }
        None => ToyScorer::seeded(
            cfg.model.vocab_size,
            cfg.model.embed_dim,
            seed::derive_path(cfg.root_seed, &[streams::MODEL_INIT]),
            cfg.model.init_scale,
        ),
    };
    if init.vocab_size() != cfg.model.vocab_size {
        bail!(
            "checkpoint vocab {} does not match configured {}",
            init.vocab_size(),
            cfg.model.vocab_size
        );
    }

    let init_accuracy = eval_pref_accuracy(&init, &init, &dataset)?;
    eprintln!(
        "[train-toy] {} examples, {} steps, init accuracy {init_accuracy:.3}",
        dataset.len(),
        cfg.train.steps
    );
    let output = train_toy(&dataset, &cfg.train, stage, &init)?;
    let final_accuracy = eval_pref_accuracy(&output.checkpoint, &init, &dataset)?;
    let last = output
        .metrics
        .last()
        .ok_or_else(|| anyhow!("trainer produced no metrics"))?;

    let checkpoint_path = run_dir.join("checkpoint.json");
    write_json(&checkpoint_path, &output.checkpoint)?;
    let metrics_path = run_dir.join("metrics.jsonl");
    write_records(&metrics_path, &output.metrics)?;
    let report = TrainReport {
        stage: stage.to_string(),
        examples: dataset.len(),
        steps: cfg.train.steps,
        init_accuracy,
        final_accuracy,
        final_dpo_loss: last.dpo_loss,
        final_total_loss: last.total_loss,
    };
    let report_path = run_dir.join("report.json");
    write_json(&report_path, &report)?;

    let mut run_manifest = RunManifest::new(command, cfg);
    run_manifest.digest_input("dataset", data_path)?;
    if let Some(p) = init_path {
        run_manifest.digest_input("init_checkpoint", p)?;
    }
    run_manifest.counts.insert("examples".into(), dataset.len());
    run_manifest
        .counts
        .insert("steps".into(), cfg.train.steps as usize);
    run_manifest.record_output(&checkpoint_path);
    run_manifest.record_output(&metrics_path);
    run_manifest.record_output(&report_path);
    run_manifest.write(&run_dir)?;
    eprintln!(
        "[train-toy] done: accuracy {init_accuracy:.3} -> {final_accuracy:.3}, dpo loss {:.4}",
        last.dpo_loss
    );
    Ok(())
}

pub enum OracleChoice {
    Content,
    PlantedDip { center: f64 },
}

pub fn probe(
    cfg: &RunConfig,
    tasks_path: Option<&Path>,
    oracle: OracleChoice,
    placements: Option<usize>,
) -> Result<()> {
    let run_dir = prepare_run_dir(cfg, "probe", false)?;
    let tasks_path = tasks_path.unwrap_or(&cfg.paths.probe_tasks);
    let tasks: Vec<ProbeTask> = read_records(tasks_path)?;
    let grid = cfg.probe_grid;
    let oracle: Box<dyn ProbeOracle> = match oracle {
        OracleChoice::Content => Box::new(ContentOnlyOracle),
        OracleChoice::PlantedDip { center } => Box::new(PlantedDipOracle::new(
            grid,
            center,
            seed::derive_path(cfg.root_seed, &[streams::PROBE_ORACLE]),
        )),
    };
    let mode = match placements {
        Some(count) => PlacementMode::Sampled {
            count,
            seed: seed::derive_path(cfg.root_seed, &[streams::PROBE_PLACEMENTS]),
        },
        None => PlacementMode::Exhaustive,
    };
    eprintln!(
        "[probe] {} tasks on a {}x{} grid, content {}x{}",
        tasks.len(),
        grid.grid_side,
        grid.grid_side,
        grid.content_side,
        grid.content_side
    );
    let report = run_probe(oracle.as_ref(), &tasks, &grid, mode)?;

    let report_path = run_dir.join("report.json");
    write_json(&report_path, &report)?;
    let csv_path = run_dir.join("bins.csv");
    std::fs::write(&csv_path, report.to_csv())
        .with_context(|| format!("writing {}", csv_path.display()))?;

    let mut run_manifest = RunManifest::new("probe", cfg);
    run_manifest.digest_input("probe_tasks", tasks_path)?;
    run_manifest.counts.insert("tasks".into(), tasks.len());
    run_manifest
        .counts
        .insert("placements_per_task".into(), report.records.len() / tasks.len());
    run_manifest
        .counts
        .insert("total_evaluations".into(), report.total_evaluations);
    run_manifest.record_output(&report_path);
    run_manifest.record_output(&csv_path);
    run_manifest.write(&run_dir)?;
    eprintln!(
        "[probe] done: {} placements per task, {} bins",
        report.records.len() / tasks.len(),
        report.mean_bins.len()
    );
    Ok(())
}

pub fn validate(cfg: &RunConfig, dataset_path: Option<&Path>) -> Result<()> {
    let run_dir = prepare_run_dir(cfg, "validate", false)?;
    let data_path = dataset_path.unwrap_or(&cfg.paths.dataset);
    let manifest = dataset::CorpusManifest::from_file(&cfg.paths.corpus)?;
    let issues = dataset::validate_dataset(data_path, &manifest, &cfg.dpo)?;

    let report_path = run_dir.join("report.json");
    write_json(&report_path, &issues)?;

    let mut run_manifest = RunManifest::new("validate", cfg);
    run_manifest.digest_input("corpus", &cfg.paths.corpus)?;
    run_manifest.digest_input("dataset", data_path)?;
    run_manifest.counts.insert("issues".into(), issues.len());
    run_manifest.record_output(&report_path);
    run_manifest.write(&run_dir)?;

    if issues.is_empty() {
        eprintln!("[validate] clean: no issues");
        Ok(())
    } else {
        for issue in issues.iter().take(10) {
            eprintln!("[validate] {}: {}", issue.triple_id, issue.problem);
        }
        bail!(
            "validation found {} issue(s); full report at {}",
            issues.len(),
            report_path.display()
        );
    }
}

#[allow(clippy::too_many_arguments)]
pub fn score(
    cfg: &RunConfig,
    query: &str,
    response: &str,
    clip_ids: &[String],
    tag: ModelTag,
    anchor: Option<&str>,
) -> Result<()> {
    let run_dir = prepare_run_dir(cfg, "score", false)?;
    let manifest = dataset::CorpusManifest::from_file(&cfg.paths.corpus)?;
    let mut clips = Vec::with_capacity(clip_ids.len());
    for id in clip_ids {
        clips.push(
            manifest
                .clip(id)
                .ok_or_else(|| anyhow!("clip '{id}' not in the corpus"))?,
        );
    }
    let request = stage1::build_score_request(query, response, &clips, tag);
    if let Some(anchor_id) = anchor {
        stage1::check_stage1_score_request(&request, anchor_id)?;
    }
    let gateway = make_gateway(cfg)?;
    let record = gateway.score(&request)?;

    let score_path = run_dir.join("score.json");
    write_json(&score_path, &record)?;
    let mut run_manifest = RunManifest::new("score", cfg);
    run_manifest.digest_input("corpus", &cfg.paths.corpus)?;
    run_manifest
        .counts
        .insert("token_count".into(), record.token_count as usize);
    run_manifest
        .counts
        .insert("context_frames".into(), record.context_frames as usize);
    run_manifest.record_output(&score_path);
    run_manifest.write(&run_dir)?;
    eprintln!(
        "[score] sum logprob {:.4} over {} tokens",
        record.sum_logprob, record.token_count
    );
    Ok(())
}
