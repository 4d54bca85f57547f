//! `vidpref`: reproducible preference-data synthesis, toy training, and
//! positional-bias probing from one root seed.
//!
//! Progress goes to standard error; machine outputs land in per-command run
//! directories under the configured output directory. Exit codes: 0 on
//! success, 1 on a pipeline failure (with a machine-readable error record),
//! 2 on a usage error.

mod commands;
mod config;

use clap::{Parser, Subcommand, ValueEnum};
use config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;
use vidpref_core::types::{ModelTag, Stage};

#[derive(Parser)]
#[command(name = "vidpref", version, about = "Long-video preference data tooling")]
struct Cli {
    /// Run configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config field, e.g. --set dpo.beta=0.02 (repeatable).
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,

    /// Root seed; every module seed derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory root (shorthand for --set paths.out_dir=...).
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    /// Corpus manifest (shorthand for --set paths.corpus=...).
    #[arg(long, global = true, value_name = "FILE")]
    corpus: Option<PathBuf>,

    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Stage1,
    Stage2,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Stage1 => Stage::Stage1,
            StageArg::Stage2 => Stage::Stage2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TagArg {
    Policy,
    Reference,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleArg {
    /// Reads the answer from content frames; exactly position-invariant.
    Content,
    /// Position-sensitive oracle with an accuracy dip planted at a distance.
    PlantedDip,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize short-to-long preference triples from composites.
    SynthStage1 {
        /// Stop after this many samples (run again to resume).
        #[arg(long)]
        limit: Option<usize>,
        /// Discard any checkpointed progress and start over.
        #[arg(long)]
        fresh: bool,
    },
    /// Synthesize long-video triples from recursive scene captions.
    SynthStage2 {
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        fresh: bool,
    },
    /// Run only the recursive captioning phase.
    Caption,
    /// Train the toy scorer on a triple dataset.
    TrainToy {
        #[arg(long, value_enum, default_value = "stage1")]
        stage: StageArg,
        /// Triple dataset; defaults to paths.dataset.
        #[arg(long, value_name = "FILE")]
        dataset: Option<PathBuf>,
        /// Warm-start checkpoint (the stage-1 result, for a stage-2 pass).
        #[arg(long, value_name = "FILE")]
        init_checkpoint: Option<PathBuf>,
    },
    /// Measure answer accuracy against content position in a padded grid.
    Probe {
        /// Grid side length (shorthand for --set probe_grid.grid_side=N).
        #[arg(long)]
        grid: Option<usize>,
        /// Content side length (shorthand for --set probe_grid.content_side=N).
        #[arg(long)]
        content: Option<usize>,
        /// Sample this many placements instead of enumerating all.
        #[arg(long)]
        placements: Option<usize>,
        #[arg(long, value_enum, default_value = "content")]
        oracle: OracleArg,
        /// Mean-distance bin where the planted dip bottoms out.
        #[arg(long, default_value_t = 12.0)]
        dip_center: f64,
        /// Task file; defaults to paths.probe_tasks.
        #[arg(long, value_name = "FILE")]
        tasks: Option<PathBuf>,
    },
    /// Re-verify a serialized dataset against the corpus manifest.
    Validate {
        #[arg(long, value_name = "FILE")]
        dataset: Option<PathBuf>,
    },
    /// Score one response against clip contexts through the gateway.
    Score {
        #[arg(long)]
        query: String,
        #[arg(long)]
        response: String,
        /// Comma-separated clip ids forming the context.
        #[arg(long, value_delimiter = ',', required = true)]
        clips: Vec<String>,
        #[arg(long, value_enum, default_value = "policy")]
        model_tag: TagArg,
        /// Anchor clip id; reference-tagged requests are checked against it.
        #[arg(long)]
        anchor: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not usage errors.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((command, err)) => {
            eprintln!("error: {err:#}");
            write_error_record(&command, &err);
            ExitCode::FAILURE
        }
    }
}

/// On failure, leave a machine-readable record next to the other outputs
/// (or in the working directory if the output root is not writable).
fn write_error_record(command: &str, err: &anyhow::Error) {
    let record = serde_json::json!({
        "command": command,
        "error": format!("{err:#}"),
    });
    let text = serde_json::to_string_pretty(&record).expect("error record serializes");
    let path = PathBuf::from("vidpref_error.json");
    if std::fs::write(&path, &text).is_ok() {
        eprintln!("error record at {}", path.display());
    }
}

fn run(cli: Cli) -> Result<(), (String, anyhow::Error)> {
    let command_name = match &cli.command {
        Command::SynthStage1 { .. } => "synth-stage1",
        Command::SynthStage2 { .. } => "synth-stage2",
        Command::Caption => "caption",
        Command::TrainToy { .. } => "train-toy",
        Command::Probe { .. } => "probe",
        Command::Validate { .. } => "validate",
        Command::Score { .. } => "score",
    }
    .to_string();
    let fail = |e: anyhow::Error| (command_name.clone(), e);

    let mut sets = cli.sets.clone();
    if let Some(dir) = &cli.out_dir {
        sets.push(format!("paths.out_dir={}", toml_quote(&dir.display().to_string())));
    }
    if let Some(corpus) = &cli.corpus {
        sets.push(format!("paths.corpus={}", toml_quote(&corpus.display().to_string())));
    }
    if let Some(workers) = cli.workers {
        sets.push(format!("workers={workers}"));
    }
    if let Command::Probe { grid, content, .. } = &cli.command {
        if let Some(g) = grid {
            sets.push(format!("probe_grid.grid_side={g}"));
        }
        if let Some(c) = content {
            sets.push(format!("probe_grid.content_side={c}"));
        }
    }

    let cfg = RunConfig::load(cli.config.as_deref(), &sets, cli.seed).map_err(fail)?;
    if let Some(workers) = cfg.workers {
        // A later invocation in the same process cannot resize the pool;
        // that only matters under tests, where the builder may already be set.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }

    match cli.command {
        Command::SynthStage1 { limit, fresh } => {
            commands::synth_stage1(&cfg, limit, fresh).map_err(fail)
        }
        Command::SynthStage2 { limit, fresh } => {
            commands::synth_stage2(&cfg, limit, fresh).map_err(fail)
        }
        Command::Caption => commands::caption(&cfg).map_err(fail),
        Command::TrainToy {
            stage,
            dataset,
            init_checkpoint,
        } => commands::train_toy_cmd(
            &cfg,
            stage.into(),
            dataset.as_deref(),
            init_checkpoint.as_deref(),
        )
        .map_err(fail),
        Command::Probe {
            placements,
            oracle,
            dip_center,
            tasks,
            ..
        } => {
            let oracle = match oracle {
                OracleArg::Content => commands::OracleChoice::Content,
                OracleArg::PlantedDip => commands::OracleChoice::PlantedDip { center: dip_center },
            };
            commands::probe(&cfg, tasks.as_deref(), oracle, placements).map_err(fail)
        }
        Command::Validate { dataset } => commands::validate(&cfg, dataset.as_deref()).map_err(fail),
        Command::Score {
            query,
            response,
            clips,
            model_tag,
            anchor,
        } => {
            let tag = match model_tag {
                TagArg::Policy => ModelTag::Policy,
                TagArg::Reference => ModelTag::Reference,
            };
            commands::score(&cfg, &query, &response, &clips, tag, anchor.as_deref()).map_err(fail)
        }
    }
}

/// Quotes a path for embedding in a `--set` fragment so separators and
/// spaces survive the TOML parse.
fn toml_quote(s: &str) -> String {
    format!("{:?}", s)
}
