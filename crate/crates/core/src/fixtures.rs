//! Seeded fixture generators for tests, examples, and demo runs.
//!
//! Everything here is a pure function of its arguments, so fixture files can
//! be regenerated at any time and two checkouts agree byte for byte.

use crate::dataset::{CorpusManifest, VideoEntry};
use crate::probe::{ProbeGrid, ProbeTask};
use crate::seed;
use crate::types::{Clip, Embedding};
use rand::Rng;
use rand_distr::StandardNormal;

const SUBJECTS: [&str; 12] = [
    "a courier", "the harbor crew", "two skaters", "a street vendor", "the night train",
    "a film crew", "the marching band", "an old tractor", "the dive team", "a kite flyer",
    "the repair shop", "a tour group",
];

const ACTIONS: [&str; 12] = [
    "sorts parcels", "hauls crates", "practices a jump", "grills skewers", "crosses the bridge",
    "sets up lights", "tunes their horns", "plows the lower field", "checks the hull",
    "untangles the line", "rebuilds an engine", "gathers by the fountain",
];

const PLACES: [&str; 12] = [
    "beside the canal lock", "under the gantry cranes", "at the skate bowl",
    "near the market arch", "over the river gorge", "inside the old theater",
    "along the parade route", "behind the grain silo", "off the breakwater",
    "on the windy headland", "past the toll booth", "outside the museum steps",
];

const HEADINGS: [&str; 6] = ["north", "south", "east", "west", "upriver", "downhill"];

const QUESTION_FORMS: [&str; 4] = [
    "Which heading does the convoy take?",
    "Which way does the lead vehicle turn?",
    "What direction does the group move?",
    "Which bearing does the camera follow?",
];

fn caption_for(rng: &mut impl Rng) -> String {
    let s = SUBJECTS[rng.random_range(0..SUBJECTS.len())];
    let a = ACTIONS[rng.random_range(0..ACTIONS.len())];
    let p = PLACES[rng.random_range(0..PLACES.len())];
    format!("{s} {a} {p}")
}

fn unit_embedding(rng: &mut impl Rng, dim: usize) -> Embedding {
    let values: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    Embedding::normalized(values).expect("gaussian draw is almost surely nonzero")
}

/// Short clips with embeddings and captions, the raw material for stage-1
/// composites. Frame counts vary between 6 and 16 at 1 fps.
pub fn clip_corpus(n_clips: usize, dim: usize, root_seed: u64) -> CorpusManifest {
    let mut clips = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let mut rng = seed::rng(seed::derive_path(root_seed, &[1, i as u64]));
        let clip_id = format!("clip-{i:03}");
        let frames = rng.random_range(6..=16u64);
        clips.push(Clip {
            frame_refs: (0..frames).map(|f| format!("{clip_id}#f{f}")).collect(),
            frame_count: frames,
            fps: 1.0,
            caption: caption_for(&mut rng),
            embedding: Some(unit_embedding(&mut rng, dim)),
            clip_id,
        });
    }
    CorpusManifest {
        manifest_version: 1,
        embedding_dim: dim,
        clips,
        videos: None,
        root_seed,
        queries_per_video: None,
    }
}

/// Adds long videos to a clip corpus: each video contributes its own scene
/// clips (no embeddings, so stage 1 ignores them) in chronological order.
pub fn corpus_with_videos(
    n_clips: usize,
    n_videos: usize,
    scenes_per_video: usize,
    dim: usize,
    root_seed: u64,
) -> CorpusManifest {
    let mut manifest = clip_corpus(n_clips, dim, root_seed);
    let mut videos = Vec::with_capacity(n_videos);
    for v in 0..n_videos {
        let video_id = format!("vid-{v:02}");
        let mut scene_clip_ids = Vec::with_capacity(scenes_per_video);
        for t in 0..scenes_per_video {
            let mut rng = seed::rng(seed::derive_path(root_seed, &[2, v as u64, t as u64]));
            let clip_id = format!("{video_id}-s{t:02}");
            let frames = rng.random_range(3..=6u64);
            manifest.clips.push(Clip {
                frame_refs: (0..frames).map(|f| format!("{clip_id}#f{f}")).collect(),
                frame_count: frames,
                fps: 1.0,
                caption: String::new(),
                embedding: None,
                clip_id: clip_id.clone(),
            });
            scene_clip_ids.push(clip_id);
        }
        videos.push(VideoEntry {
            video_id,
            scene_clip_ids,
        });
    }
    manifest.videos = Some(videos);
    manifest
}

/// Spatial-probe tasks whose gold answer is carried in every content frame
/// payload (`gold=<label>`), so a content-reading oracle can stay exactly
/// position-invariant.
pub fn probe_task_set(count: usize, grid: ProbeGrid, root_seed: u64) -> Vec<ProbeTask> {
    let m = grid.content_side;
    let mut tasks = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = seed::rng(seed::derive_path(root_seed, &[3, i as u64]));
        let gold_idx = rng.random_range(0..HEADINGS.len());
        let gold = HEADINGS[gold_idx].to_string();
        let mut options = vec![gold.clone()];
        while options.len() < 4 {
            let candidate = HEADINGS[rng.random_range(0..HEADINGS.len())];
            if !options.iter().any(|o| o == candidate) {
                options.push(candidate.to_string());
            }
        }
        // Move the gold option to a random slot so position carries no signal.
        let slot = rng.random_range(0..options.len());
        options.swap(0, slot);
        let task_id = format!("probe-{i:03}");
        let frames = (0..m * m)
            .map(|f| format!("{task_id}#f{f} gold={gold}"))
            .collect();
        tasks.push(ProbeTask {
            task_id,
            frames,
            question: QUESTION_FORMS[rng.random_range(0..QUESTION_FORMS.len())].to_string(),
            options,
            gold,
        });
    }
    tasks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpora_validate_and_are_deterministic() {
        let a = corpus_with_videos(20, 3, 5, 16, 42);
        let b = corpus_with_videos(20, 3, 5, 16, 42);
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.clips.len(), 20 + 3 * 5);
        assert_eq!(a.videos.as_ref().unwrap().len(), 3);

        let c = corpus_with_videos(20, 3, 5, 16, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn standalone_clips_are_stage1_eligible_and_scene_clips_are_not() {
        let m = corpus_with_videos(12, 2, 4, 8, 7);
        let with_embedding = m.clips.iter().filter(|c| c.embedding.is_some()).count();
        assert_eq!(with_embedding, 12);
        for clip in m.clips.iter().filter(|c| c.embedding.is_some()) {
            assert!(!clip.caption.trim().is_empty());
            assert!(!clip.caption.contains("GENERIC"));
            assert!(clip.frame_count <= 64);
        }
    }

    #[test]
    fn probe_tasks_validate_against_their_grid() {
        let grid = ProbeGrid::default();
        let tasks = probe_task_set(25, grid, 9);
        assert_eq!(tasks.len(), 25);
        for task in &tasks {
            task.validate(&grid).unwrap();
            assert!(task.frames.iter().all(|f| f.contains("gold=")));
        }
        assert_eq!(tasks, probe_task_set(25, grid, 9));
    }
}
