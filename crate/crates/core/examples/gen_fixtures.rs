//! Regenerates the checked-in fixture files. Run from the workspace root:
//!
//! ```text
//! cargo run -p vidpref-core --example gen_fixtures [out_dir]
//! ```
//!
//! Output is a pure function of the seeds below, so regenerating on any
//! machine reproduces the same bytes.

use vidpref_core::dataset::write_records;
use vidpref_core::fixtures::{corpus_with_videos, probe_task_set};
use vidpref_core::probe::ProbeGrid;

const CORPUS_SEED: u64 = 11;
const PROBE_SEED: u64 = 12;

const RUN_TOML: &str = r#"# Demo run configuration. Any field can be overridden on the command
# line with --set section.key=value; --seed replaces root_seed.

root_seed = 11

[paths]
corpus = "fixtures/corpus.json"
probe_tasks = "fixtures/probe_tasks.jsonl"
out_dir = "out"
dataset = "out/synth-stage1/triples.jsonl"

[stage1]
target_count = 80

[stage2]
target_count = 12
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "fixtures".to_string());
    let out = std::path::Path::new(&out_dir);
    std::fs::create_dir_all(out)?;

    let manifest = corpus_with_videos(60, 6, 6, 16, CORPUS_SEED);
    manifest.validate()?;
    manifest.save(&out.join("corpus.json"))?;

    let tasks = probe_task_set(30, ProbeGrid::default(), PROBE_SEED);
    write_records(&out.join("probe_tasks.jsonl"), &tasks)?;

    std::fs::write(out.join("run.toml"), RUN_TOML)?;

    eprintln!(
        "wrote {} clips, {} videos, {} probe tasks to {}",
        manifest.clips.len(),
        manifest.videos.as_ref().map_or(0, |v| v.len()),
        tasks.len(),
        out.display()
    );
    Ok(())
}
