//! Run configuration: one TOML file, every field overridable from the
//! command line, one root seed from which every module seed derives.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use vidpref_core::dataset;
use vidpref_core::gateway::GatewayPolicy;
use vidpref_core::objective::train::ToyTrainConfig;
use vidpref_core::probe::ProbeGrid;
use vidpref_core::seed;
use vidpref_core::stage1::Stage1Config;
use vidpref_core::stage2::Stage2Config;
use vidpref_core::types::DpoConfig;

/// Where module seeds branch off the root seed. Keeping the labels in one
/// table makes the split auditable.
pub mod streams {
    pub const STAGE1: u64 = 1;
    pub const STAGE2: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const PROBE_ORACLE: u64 = 4;
    pub const PROBE_PLACEMENTS: u64 = 5;
    pub const GATEWAY: u64 = 6;
    pub const MODEL_INIT: u64 = 7;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GatewayMode {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    /// Directory of prompt template overrides; built-ins when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
    pub probe_tasks: PathBuf,
    /// Triple dataset consumed by `train-toy` and `validate`.
    pub dataset: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gateway_log: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: "fixtures/corpus.json".into(),
            out_dir: "out".into(),
            prompts_dir: None,
            probe_tasks: "fixtures/probe_tasks.jsonl".into(),
            dataset: "out/synth-stage1/triples.jsonl".into(),
            init_checkpoint: None,
            gateway_log: None,
        }
    }
}

/// Toy scorer shape; separate from the optimizer settings so checkpoints
/// and training schedules can vary independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub init_scale: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            vocab_size: 256,
            embed_dim: 16,
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub root_seed: u64,
    /// Worker threads for the parallel sections; library default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub gateway_mode: GatewayMode,
    pub paths: Paths,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub dpo: DpoConfig,
    pub train: ToyTrainConfig,
    pub model: ModelShape,
    pub probe_grid: ProbeGrid,
    pub gateway: GatewayPolicy,
}

impl RunConfig {
    /// Loads the file (or starts from defaults), applies `--set` overrides,
    /// then derives every module seed from the root seed so one flag
    /// controls full reproducibility.
    pub fn load(path: Option<&Path>, sets: &[String], root_seed_flag: Option<u64>) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for assignment in sets {
            apply_set(&mut value, assignment)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(value)
            .try_into()
            .context("invalid configuration")?;
        if let Some(seed) = root_seed_flag {
            cfg.root_seed = seed;
        }
        cfg.stage1.seed = seed::derive_path(cfg.root_seed, &[streams::STAGE1]);
        cfg.stage2.seed = seed::derive_path(cfg.root_seed, &[streams::STAGE2]);
        cfg.train.seed = seed::derive_path(cfg.root_seed, &[streams::TRAIN]);
        // The [dpo] section is the single source for loss hyperparameters;
        // the trainer's embedded copy always mirrors it.
        cfg.train.dpo = cfg.dpo.clone();
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.dpo.validate()?;
        self.train.validate()?;
        self.probe_grid.validate()?;
        self.gateway.validate()?;
        if self.model.vocab_size == 0 || self.model.embed_dim == 0 {
            bail!("model shape must be positive");
        }
        if !(self.model.init_scale.is_finite() && self.model.init_scale > 0.0) {
            bail!("init_scale must be positive and finite");
        }
        Ok(())
    }
}

/// Applies one `section.key=value` override. The value is parsed as TOML
/// when possible and falls back to a plain string, so `--set dpo.beta=0.02`
/// and `--set paths.corpus=data/c.json` both work.
fn apply_set(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((dotted, raw)) = assignment.split_once('=') else {
        bail!("--set needs section.key=value, got '{assignment}'");
    };
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = dotted.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("--set path '{dotted}' has an empty segment");
    }
    let mut table = root;
    for key in &keys[..keys.len() - 1] {
        table = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("'{key}' in '{dotted}' is not a table"))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

/// Everything needed to reproduce a run exactly: the effective config, its
/// hash, the root seed, and digests of every input file. Deliberately free
/// of timestamps and absolute environment so reruns are byte-identical.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub package_version: &'static str,
    pub format_version: u32,
    pub root_seed: u64,
    pub config_hash: String,
    pub input_digests: BTreeMap<String, String>,
    pub counts: BTreeMap<String, usize>,
    pub outputs: Vec<String>,
    pub effective_config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            package_version: env!("CARGO_PKG_VERSION"),
            format_version: 1,
            root_seed: cfg.root_seed,
            config_hash: dataset::config_hash(cfg),
            input_digests: BTreeMap::new(),
            counts: BTreeMap::new(),
            outputs: Vec::new(),
            effective_config: cfg.clone(),
        }
    }

    pub fn digest_input(&mut self, label: &str, path: &Path) -> Result<()> {
        let digest = dataset::file_digest(path)
            .with_context(|| format!("digesting {label} at {}", path.display()))?;
        self.input_digests.insert(label.to_string(), digest);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, run_dir: &Path) -> Result<PathBuf> {
        let path = run_dir.join("run_manifest.json");
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
