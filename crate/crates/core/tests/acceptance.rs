//! Release gate for the whole pipeline. Each test checks one property the
//! crate must hold at its stated tolerance and runtime budget, and prints a
//! `[acceptance] <property>: PASS` line, so running
//! `cargo test --test acceptance -- --nocapture` reads as a checklist.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use vidpref_core::dataset::{
    self, read_triples, run_resumable, validate_dataset, write_triples, DatasetError, SampleEmit,
};
use vidpref_core::fixtures::{clip_corpus, corpus_with_videos, probe_task_set};
use vidpref_core::gateway::mock::MockGateway;
use vidpref_core::gateway::ContextItemKind;
use vidpref_core::objective::toy::{toy_score, toy_score_grad, ToyScorer};
use vidpref_core::objective::train::{
    eval_pref_accuracy, tokenize_triples, train_toy, ToyTrainConfig,
};
use vidpref_core::objective::{
    dpo_loss, dpo_loss_from_margin, dpo_loss_grad, dpo_margin, stage1_loss, MarginInputs,
    ObjectiveError, RefContext,
};
use vidpref_core::probe::{
    enumerate_placements, run_probe, ContentOnlyOracle, PlacementMode, PlantedDipOracle, ProbeGrid,
};
use vidpref_core::prompts::PromptSet;
use vidpref_core::seed;
use vidpref_core::stage1::{
    assemble_composite, build_score_request, check_stage1_score_request, filter_distractors,
    synthesize_stage1, FilterOutcome, SampleOutcome, Stage1Config, Stage1Error, Stage1Runner,
};
use vidpref_core::stage2::{parse_relevance_chain, synthesize_stage2, Stage2Config};
use vidpref_core::types::{
    cosine_similarity, Clip, DispreferredStrategy, DpoConfig, ModelTag, Stage, TripleProvenance,
};

const LN_2: f64 = std::f64::consts::LN_2;

fn budget(t0: Instant, limit: Duration, what: &str) {
    let elapsed = t0.elapsed();
    assert!(
        elapsed < limit,
        "{what} took {elapsed:?}, budget {limit:?}"
    );
}

fn random_margin(rng: &mut impl Rng, ref_context: RefContext) -> MarginInputs {
    MarginInputs {
        policy_pos: rng.random_range(-20.0..20.0),
        policy_neg: rng.random_range(-20.0..20.0),
        ref_pos: rng.random_range(-20.0..20.0),
        ref_neg: rng.random_range(-20.0..20.0),
        ref_context,
    }
}

#[test]
fn loss_identities_and_symmetries_hold() {
    let t0 = Instant::now();

    let zero = MarginInputs {
        policy_pos: 0.0,
        policy_neg: 0.0,
        ref_pos: 0.0,
        ref_neg: 0.0,
        ref_context: RefContext::FullComposite,
    };
    let at_zero = dpo_loss(&zero, 0.01).unwrap();
    assert!(
        (at_zero - LN_2).abs() < 1e-12,
        "loss at zero margin {at_zero} vs ln 2"
    );

    // Saturation: a hugely favorable margin drives the loss to zero, a
    // hugely unfavorable one to the margin itself.
    assert!(dpo_loss_from_margin(40.0) < 1e-12);
    assert!((dpo_loss_from_margin(-40.0) - 40.0).abs() < 1e-12);

    let mut rng = seed::rng(seed::derive(101, 0));
    for _ in 0..10_000 {
        let m = random_margin(&mut rng, RefContext::FullComposite);
        let beta = rng.random_range(0.001..1.0);
        let margin = dpo_margin(&m, beta).unwrap();
        let loss = dpo_loss(&m, beta).unwrap();

        // Shifting every score by one constant leaves the margin alone.
        let c = rng.random_range(-10.0..10.0);
        let shifted = MarginInputs {
            policy_pos: m.policy_pos + c,
            policy_neg: m.policy_neg + c,
            ref_pos: m.ref_pos + c,
            ref_neg: m.ref_neg + c,
            ref_context: m.ref_context,
        };
        assert!((dpo_margin(&shifted, beta).unwrap() - margin).abs() < 1e-9);
        assert!((dpo_loss(&shifted, beta).unwrap() - loss).abs() < 1e-9);

        // So does shifting the preferred pair and the dispreferred pair by
        // two different constants.
        let c2 = rng.random_range(-10.0..10.0);
        let pair_shifted = MarginInputs {
            policy_pos: m.policy_pos + c,
            ref_pos: m.ref_pos + c,
            policy_neg: m.policy_neg + c2,
            ref_neg: m.ref_neg + c2,
            ref_context: m.ref_context,
        };
        assert!((dpo_margin(&pair_shifted, beta).unwrap() - margin).abs() < 1e-9);

        // Swapping preferred and dispreferred negates the margin exactly,
        // and the losses differ by exactly the margin (softplus identity).
        let swapped = MarginInputs {
            policy_pos: m.policy_neg,
            policy_neg: m.policy_pos,
            ref_pos: m.ref_neg,
            ref_neg: m.ref_pos,
            ref_context: m.ref_context,
        };
        let swapped_margin = dpo_margin(&swapped, beta).unwrap();
        assert_eq!(swapped_margin, -margin);
        let swapped_loss = dpo_loss(&swapped, beta).unwrap();
        let gap = (swapped_loss - loss) - margin;
        assert!(gap.abs() < 1e-9 * margin.abs().max(1.0));
    }

    budget(t0, Duration::from_secs(1), "loss identity checks");
    println!("[acceptance] loss identities and symmetries: PASS");
}

#[test]
fn gradients_match_central_differences() {
    let t0 = Instant::now();

    // Pairwise loss: the two policy components are true partial
    // derivatives (the reference ones are pinned to zero by the frozen
    // reference convention, so they are not differenced here).
    let mut rng = seed::rng(seed::derive(202, 0));
    for _ in 0..100 {
        let m = random_margin(&mut rng, RefContext::FullComposite);
        let beta = rng.random_range(0.005..0.5);
        let g = dpo_loss_grad(&m, beta).unwrap();
        let h = 1e-6;
        for (component, analytic) in [(0usize, g.d_policy_pos), (1, g.d_policy_neg)] {
            let mut plus = m;
            let mut minus = m;
            match component {
                0 => {
                    plus.policy_pos += h;
                    minus.policy_pos -= h;
                }
                _ => {
                    plus.policy_neg += h;
                    minus.policy_neg -= h;
                }
            }
            let fd =
                (dpo_loss(&plus, beta).unwrap() - dpo_loss(&minus, beta).unwrap()) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                (fd - analytic).abs() / denom < 1e-4,
                "pairwise grad component {component}: analytic {analytic}, differenced {fd}"
            );
        }
    }

    // Scorer gradient: 32 randomly sampled parameter components per seeded
    // instance, 100 instances.
    for instance in 0..100u64 {
        let mut rng = seed::rng(seed::derive(203, instance));
        let scorer = ToyScorer::seeded(48, 6, seed::derive(204, instance), 0.3);
        let context: Vec<usize> = (0..rng.random_range(2..6))
            .map(|_| rng.random_range(0..48))
            .collect();
        let response: Vec<usize> = (0..rng.random_range(2..7))
            .map(|_| rng.random_range(0..48))
            .collect();
        let analytic = toy_score_grad(&scorer, &context, &response).unwrap();
        let h = 1e-5;
        for _ in 0..32 {
            let i = rng.random_range(0..scorer.param_count());
            let mut plus = scorer.clone();
            plus.set_param(i, plus.param(i) + h);
            let mut minus = scorer.clone();
            minus.set_param(i, minus.param(i) - h);
            let up = toy_score(&plus, &context, &response, ModelTag::Policy).unwrap();
            let down = toy_score(&minus, &context, &response, ModelTag::Policy).unwrap();
            let fd = (up.sum_logprob - down.sum_logprob) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                (fd - analytic[i]).abs() / denom < 1e-4,
                "scorer grad component {i}: analytic {}, differenced {fd}",
                analytic[i]
            );
        }
    }

    budget(t0, Duration::from_secs(30), "gradient checks");
    println!("[acceptance] gradients match central differences: PASS");
}

#[test]
fn batch_loss_collapses_and_reference_context_is_enforced() {
    let mut rng = seed::rng(seed::derive(303, 0));

    // A one-element anchor-referenced batch is the pairwise loss,
    // bit for bit.
    for _ in 0..1_000 {
        let m = random_margin(&mut rng, RefContext::AnchorOnly);
        let beta = rng.random_range(0.001..1.0);
        let batch = stage1_loss(&[m], beta).unwrap();
        let single = dpo_loss(&m, beta).unwrap();
        assert_eq!(batch.to_bits(), single.to_bits());
    }

    // Any full-context element poisons the whole stage-1 batch.
    let mut rejected = 0;
    for trial in 0..100 {
        let size = rng.random_range(1..6usize);
        let bad_slot = rng.random_range(0..size);
        let batch: Vec<MarginInputs> = (0..size)
            .map(|i| {
                let ctx = if i == bad_slot {
                    RefContext::FullComposite
                } else {
                    RefContext::AnchorOnly
                };
                random_margin(&mut rng, ctx)
            })
            .collect();
        match stage1_loss(&batch, 0.01) {
            Err(ObjectiveError::RefContextViolation { index }) => {
                assert_eq!(index, bad_slot, "trial {trial} flagged the wrong element");
                rejected += 1;
            }
            other => panic!("trial {trial}: expected a context violation, got {other:?}"),
        }
    }
    assert_eq!(rejected, 100);

    // The same contract holds at the score-request level: a reference
    // request may only carry anchor frames, and the guard fires before any
    // dispatch.
    let clips: Vec<Clip> = (0..4)
        .map(|i| {
            let clip_id = format!("seg-{i}");
            Clip {
                frame_refs: (0..8).map(|f| format!("{clip_id}#f{f}")).collect(),
                frame_count: 8,
                fps: 1.0,
                caption: format!("segment {i}"),
                embedding: None,
                clip_id,
            }
        })
        .collect();
    let refs: Vec<&Clip> = clips.iter().collect();
    for trial in 0..100 {
        let anchor = &clips[trial % clips.len()];
        let ok = build_score_request("q", "a", &[anchor], ModelTag::Reference);
        check_stage1_score_request(&ok, &anchor.clip_id).unwrap();
        let bad = build_score_request("q", "a", &refs, ModelTag::Reference);
        assert!(matches!(
            check_stage1_score_request(&bad, &anchor.clip_id),
            Err(Stage1Error::RefContextViolation { .. })
        ));
        // Policy requests are allowed the full composite.
        let policy = build_score_request("q", "a", &refs, ModelTag::Policy);
        check_stage1_score_request(&policy, &anchor.clip_id).unwrap();
    }

    println!("[acceptance] one-element batch collapse and reference-context contract: PASS");
}

#[test]
fn reference_side_scores_a_quarter_of_the_policy_context() {
    let clips: Vec<Clip> = (0..4)
        .map(|i| {
            let clip_id = format!("long-{i}");
            Clip {
                frame_refs: (0..64).map(|f| format!("{clip_id}#f{f}")).collect(),
                frame_count: 64,
                fps: 1.0,
                caption: format!("long segment {i}"),
                embedding: None,
                clip_id,
            }
        })
        .collect();
    let anchor_index = 2;
    let all: Vec<&Clip> = clips.iter().collect();
    let anchor = &clips[anchor_index];

    let policy_req = build_score_request("where does it dock?", "at pier four", &all, ModelTag::Policy);
    let ref_req =
        build_score_request("where does it dock?", "at pier four", &[anchor], ModelTag::Reference);
    check_stage1_score_request(&ref_req, &anchor.clip_id).unwrap();

    let frames = |req: &vidpref_core::gateway::ScoreRequest| {
        req.context_items
            .iter()
            .filter(|i| i.kind == ContextItemKind::FrameRef)
            .count()
    };
    let policy_frames = frames(&policy_req);
    let ref_frames = frames(&ref_req);
    assert_eq!(policy_frames, 256);
    assert_eq!(ref_frames, 64);
    assert_eq!(policy_frames / ref_frames, 4);

    println!("[acceptance] anchor-only reference context at a 4x reduction: PASS");
}

#[test]
fn distractor_filter_agrees_with_exhaustive_cosine_pass() {
    let t0 = Instant::now();
    let cfg = Stage1Config {
        frame_budget: 100_000,
        ..Stage1Config::default()
    };
    let mut total_accepted = 0usize;
    let mut total_rejected = 0usize;

    for pool_seed in 0..1_000u64 {
        let manifest = clip_corpus(15, 6, seed::derive(404, pool_seed));
        let anchor = &manifest.clips[0];
        let pool = &manifest.clips[1..];
        let anchor_emb = anchor.embedding.as_ref().unwrap();

        let mut rng = seed::rng(seed::derive(405, pool_seed));
        let outcome = filter_distractors(anchor, pool, &cfg, &mut rng).unwrap();
        let (accepted, rejected) = match outcome {
            FilterOutcome::Accepted { accepted, rejected } => (accepted, rejected),
            FilterOutcome::Discarded { rejected } => (Vec::new(), rejected),
        };
        for clip in &accepted {
            let cos = cosine_similarity(anchor_emb, clip.embedding.as_ref().unwrap()).unwrap();
            assert!(
                cos < cfg.similarity_threshold,
                "pool {pool_seed}: accepted '{}' at cosine {cos}",
                clip.clip_id
            );
        }
        for clip in &rejected {
            let cos = cosine_similarity(anchor_emb, clip.embedding.as_ref().unwrap()).unwrap();
            assert!(
                cos >= cfg.similarity_threshold,
                "pool {pool_seed}: rejected '{}' at cosine {cos}",
                clip.clip_id
            );
        }
        total_accepted += accepted.len();
        total_rejected += rejected.len();
    }

    // The property must not hold vacuously: both decisions occur.
    assert!(total_accepted > 1_000, "only {total_accepted} acceptances");
    assert!(total_rejected > 50, "only {total_rejected} rejections");

    budget(t0, Duration::from_secs(10), "filter equivalence sweep");
    println!("[acceptance] distractor filter matches exhaustive cosine pass: PASS");
}

#[test]
fn anchor_position_is_uniform_over_slots() {
    let make_clip = |id: String| Clip {
        frame_refs: (0..8).map(|f| format!("{id}#f{f}")).collect(),
        frame_count: 8,
        fps: 1.0,
        caption: format!("clip {id}"),
        embedding: None,
        clip_id: id,
    };
    let cfg = Stage1Config {
        frame_budget: 64,
        ..Stage1Config::default()
    };
    let anchor = make_clip("anchor".to_string());
    let accepted: Vec<Clip> = (0..3).map(|i| make_clip(format!("d{i}"))).collect();

    let n = 4_000usize;
    let k = accepted.len() + 1;
    let mut counts = vec![0usize; k];
    for i in 0..n {
        let mut rng = seed::rng(seed::derive(505, i as u64));
        let composite = assemble_composite(
            &anchor,
            &accepted,
            &cfg,
            format!("comp-{i}"),
            i as u64,
            &mut rng,
        )
        .unwrap();
        assert_eq!(composite.clips.len(), k);
        counts[composite.anchor_index] += 1;
    }

    let expected = n as f64 / k as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    let critical = ChiSquared::new((k - 1) as f64).unwrap().inverse_cdf(0.99);
    assert!(
        stat < critical,
        "chi-square {stat:.3} exceeds the 0.99 quantile {critical:.3}; counts {counts:?}"
    );

    println!("[acceptance] anchor position uniform over slots (chi-square): PASS");
}

#[test]
fn scene_context_relations_survive_serialization() {
    let manifest = corpus_with_videos(0, 20, 5, 8, 606);
    manifest.validate().unwrap();
    let cfg = Stage2Config {
        target_count: Some(520),
        seed: seed::derive(607, 0),
        ..Stage2Config::default()
    };
    let gateway = MockGateway::new(seed::derive(607, 1));
    let prompts = PromptSet::builtin();
    let output = synthesize_stage2(&manifest, &cfg, &gateway, &gateway, &prompts).unwrap();
    assert!(
        output.triples.len() >= 500,
        "only {} triples synthesized",
        output.triples.len()
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("triples.jsonl");
    write_triples(&path, &output.triples).unwrap();
    let reloaded = read_triples(&path).unwrap();
    assert_eq!(reloaded, output.triples);

    let mut partial = 0usize;
    let mut irrelevant = 0usize;
    for triple in &reloaded {
        let TripleProvenance::Scenes {
            chain_scene_ids,
            dispreferred_scene_ids,
            ..
        } = &triple.provenance
        else {
            panic!("stage-2 triple '{}' lacks scene provenance", triple.triple_id);
        };
        let chain: BTreeSet<u32> = chain_scene_ids.iter().copied().collect();
        let context: BTreeSet<u32> = dispreferred_scene_ids.iter().copied().collect();
        assert!(!context.is_empty(), "'{}' has an empty context", triple.triple_id);
        match triple.dispreferred_strategy {
            DispreferredStrategy::PartialEvidence => {
                partial += 1;
                assert!(
                    context.is_subset(&chain) && context.len() < chain.len(),
                    "'{}' is not a proper subset of its chain",
                    triple.triple_id
                );
            }
            DispreferredStrategy::IrrelevantScenes => {
                irrelevant += 1;
                assert!(
                    context.is_disjoint(&chain),
                    "'{}' overlaps its chain",
                    triple.triple_id
                );
            }
            ref other => panic!("unexpected strategy {other:?} in stage-2 data"),
        }
    }
    assert!(partial > 0, "no partial-evidence triples in the fixture");
    assert!(irrelevant > 0, "no irrelevant-scenes triples in the fixture");

    // The standalone validator reaches the same verdict from the file alone.
    let issues = validate_dataset(&path, &manifest, &DpoConfig::default()).unwrap();
    assert!(issues.is_empty(), "validator found issues: {issues:?}");

    println!("[acceptance] scene context relations survive serialization: PASS");
}

#[test]
fn citation_parser_is_exact_on_labeled_traces() {
    // Hand-labeled traces: (trace, scene count, expected ids in
    // first-occurrence order). Covers duplicates, out-of-range ids,
    // whitespace, case, padding, and non-citation noise.
    let cases: &[(&str, u32, &[u32])] = &[
        ("Scene #1 shows the loading dock.", 5, &[1]),
        ("First Scene #2, then Scene #4.", 5, &[2, 4]),
        ("scene #3 only.", 5, &[3]),
        ("SCENE #5 wraps it up.", 5, &[5]),
        ("Scene #2 and scene #2 again.", 5, &[2]),
        ("Scene #1, Scene #1, Scene #1.", 5, &[1]),
        ("Scene #4 then Scene #2.", 5, &[4, 2]),
        ("Scene #9 is out of range.", 5, &[]),
        ("Scene #0 never exists.", 5, &[]),
        ("Scene #6 barely out.", 5, &[]),
        ("Scene #5 barely in.", 5, &[5]),
        ("Scene # 3 with a gap.", 5, &[3]),
        ("Scene #  4 with two gaps.", 5, &[4]),
        ("Scene#2 no space.", 5, &[2]),
        ("scene # 1 lowercase gap.", 5, &[1]),
        ("ScEnE #3 mixed case.", 5, &[3]),
        ("Scene\t#2 tab separated.", 5, &[2]),
        ("Scene\n#4 across a newline.", 5, &[4]),
        ("The answer hides in Scene #12.", 15, &[12]),
        ("Scene #07 leading zero.", 9, &[7]),
        ("Scene #0003 padded.", 5, &[3]),
        ("Scene #10 vs Scene #1.", 12, &[10, 1]),
        ("Scene #1 Scene #10.", 12, &[1, 10]),
        ("Scenes #2 and #4.", 5, &[]),
        ("No citations at all here.", 5, &[]),
        ("", 5, &[]),
        ("Scene #2, Scene #9, Scene #3.", 5, &[2, 3]),
        ("Scene #3 ... Scene #03.", 5, &[3]),
        ("scene #4 SCENE #4.", 5, &[4]),
        ("Scene #1 of Scene #2 of Scene #3.", 3, &[1, 2, 3]),
        ("Scene #99999999999999999999 overflows.", 5, &[]),
        ("Scene #4294967295 max id.", 5, &[]),
        ("Scene #2.5 has a decimal.", 5, &[2]),
        ("Scene ##3 double hash.", 5, &[]),
        ("Watch Scene #1; later Scene #5; finally Scene #2.", 5, &[1, 5, 2]),
        ("Scene #8, Scene #7.", 8, &[8, 7]),
        ("scene#06 compact padded.", 6, &[6]),
        ("Scene # 2 and Scene #2.", 5, &[2]),
        ("In scene #3 the camera pans; scene #3 repeats.", 4, &[3]),
        ("Scene #11 and Scene #12.", 12, &[11, 12]),
        ("Scene #13 just out.", 12, &[]),
        ("A montage (Scene #2) inside parens.", 5, &[2]),
        ("Quote: \"Scene #4\" cited.", 5, &[4]),
        ("Scene #1and no space after digit.", 5, &[1]),
        ("scene  #5 double space before hash.", 5, &[5]),
        ("SCENE#2.", 5, &[2]),
        ("The scene #2 mention.", 5, &[2]),
        ("Scene #3, Scene #2, Scene #3, Scene #1.", 3, &[3, 2, 1]),
        ("scene\t#\t4 tabs around hash.", 5, &[4]),
        ("Check Scene #05 and Scene #5.", 9, &[5]),
    ];
    assert_eq!(cases.len(), 50);

    let mut exact = 0usize;
    for (trace, n_scenes, expected) in cases {
        let parsed = parse_relevance_chain(trace, *n_scenes);
        assert_eq!(
            parsed, *expected,
            "trace {trace:?} with {n_scenes} scenes parsed to {parsed:?}"
        );
        exact += 1;
    }
    assert_eq!(exact, cases.len());

    println!("[acceptance] citation parser exact on labeled traces: PASS");
}

#[test]
fn probe_recovers_planted_dip_and_flat_oracle_stays_flat() {
    let t0 = Instant::now();
    let presets = [
        (ProbeGrid::default(), 81usize),
        (
            ProbeGrid {
                grid_side: 10,
                ..ProbeGrid::default()
            },
            49usize,
        ),
    ];

    for (grid, expected_placements) in presets {
        let placements = enumerate_placements(&grid, PlacementMode::Exhaustive).unwrap();
        assert_eq!(placements.len(), expected_placements);

        let tasks = probe_task_set(500, grid, seed::derive(808, grid.grid_side as u64));

        // A content-reading oracle cannot depend on placement: every
        // distance bin sits at the same accuracy.
        let flat = run_probe(&ContentOnlyOracle, &tasks, &grid, PlacementMode::Exhaustive).unwrap();
        assert_eq!(flat.total_evaluations, 500 * expected_placements);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (bin, stat) in &flat.mean_bins {
            assert!(
                stat.count >= 500,
                "bin {bin} has only {} evaluations",
                stat.count
            );
            lo = lo.min(stat.accuracy);
            hi = hi.max(stat.accuracy);
        }
        assert!(
            hi - lo < 0.02,
            "grid {}: flat oracle spread {} to {}",
            grid.grid_side,
            lo,
            hi
        );

        // An oracle with a known soft spot at distance 12 is located to
        // within one bin.
        let dip = PlantedDipOracle::new(grid, 12.0, seed::derive(809, grid.grid_side as u64));
        assert_eq!(dip.depth, 0.4);
        let report = run_probe(&dip, &tasks, &grid, PlacementMode::Exhaustive).unwrap();
        let (&min_bin, _) = report
            .mean_bins
            .iter()
            .min_by(|a, b| a.1.accuracy.total_cmp(&b.1.accuracy))
            .unwrap();
        assert!(
            (f64::from(min_bin) - 12.0).abs() <= 1.0,
            "grid {}: minimum-accuracy bin {min_bin} not within 1 of 12",
            grid.grid_side
        );
    }

    budget(t0, Duration::from_secs(120), "probe recovery runs");
    println!("[acceptance] probe recovers planted dip; flat oracle stays flat: PASS");
}

#[test]
fn toy_pipeline_learns_preferences_end_to_end() {
    let t0 = Instant::now();

    // Stage 1: synthesize from a seeded corpus through the mock gateway.
    let manifest = clip_corpus(320, 16, 910);
    let stage1_cfg = Stage1Config {
        target_count: Some(260),
        seed: seed::derive(911, 0),
        ..Stage1Config::default()
    };
    let gateway = MockGateway::new(seed::derive(911, 1));
    let prompts = PromptSet::builtin();
    let output = synthesize_stage1(&manifest, &stage1_cfg, &gateway, &prompts).unwrap();
    assert!(
        output.triples.len() >= 200,
        "only {} stage-1 triples",
        output.triples.len()
    );

    let vocab = 256;
    let embed_dim = 16;
    let tokenized = tokenize_triples(&output.triples, vocab);
    let held_out: Vec<_> = tokenized.iter().step_by(4).cloned().collect();
    let train_set: Vec<_> = tokenized
        .iter()
        .enumerate()
        .filter(|(i, _)| i % 4 != 0)
        .map(|(_, t)| t.clone())
        .collect();

    let dpo = DpoConfig::default();
    assert_eq!(dpo.beta, 0.01);
    assert_eq!(dpo.alpha, 1.0);
    let train_cfg = ToyTrainConfig {
        dpo: dpo.clone(),
        seed: seed::derive(911, 2),
        ..ToyTrainConfig::default()
    };
    assert_eq!(train_cfg.steps, 500);
    assert_eq!(train_cfg.batch_size, 8);

    let init = ToyScorer::seeded(vocab, embed_dim, seed::derive(911, 3), 0.1);
    let at_init = eval_pref_accuracy(&init, &init, &held_out).unwrap();
    assert!(
        (at_init - 0.5).abs() <= 0.05,
        "held-out accuracy at init {at_init}"
    );

    let stage1_run = train_toy(&train_set, &train_cfg, Stage::Stage1, &init).unwrap();
    let trained = eval_pref_accuracy(&stage1_run.checkpoint, &init, &held_out).unwrap();
    assert!(
        trained > 0.9,
        "held-out accuracy after training {trained}"
    );

    // Stage 2: a fresh pass over scene data, with the stage-1 checkpoint
    // as the frozen reference, must keep lowering the preference loss.
    let scene_manifest = corpus_with_videos(0, 10, 5, 16, 912);
    let stage2_cfg = Stage2Config {
        target_count: Some(60),
        seed: seed::derive(913, 0),
        ..Stage2Config::default()
    };
    let stage2_out =
        synthesize_stage2(&scene_manifest, &stage2_cfg, &gateway, &gateway, &prompts).unwrap();
    assert!(!stage2_out.triples.is_empty());
    let stage2_data = tokenize_triples(&stage2_out.triples, vocab);
    let stage2_run = train_toy(
        &stage2_data,
        &ToyTrainConfig {
            seed: seed::derive(913, 1),
            ..train_cfg.clone()
        },
        Stage::Stage2,
        &stage1_run.checkpoint,
    )
    .unwrap();
    let first = stage2_run.metrics.first().unwrap();
    let last = stage2_run.metrics.last().unwrap();
    assert!(
        (first.dpo_loss - LN_2).abs() < 1e-9,
        "stage-2 starts at {} instead of ln 2",
        first.dpo_loss
    );
    assert!(
        last.dpo_loss < first.dpo_loss,
        "stage-2 loss went {} -> {}",
        first.dpo_loss,
        last.dpo_loss
    );

    budget(t0, Duration::from_secs(300), "end-to-end toy run");
    println!("[acceptance] toy pipeline learns preferences end to end: PASS");
}

#[test]
fn pipeline_output_is_deterministic_and_resumable() {
    let manifest = clip_corpus(40, 8, 1111);
    let cfg = Stage1Config {
        target_count: Some(24),
        seed: seed::derive(1112, 0),
        ..Stage1Config::default()
    };
    let gateway = MockGateway::new(seed::derive(1112, 1));
    let prompts = PromptSet::builtin();
    let cfg_hash = dataset::config_hash(&cfg);

    let dir = tempfile::tempdir().unwrap();
    let run = |run_dir: &std::path::Path, limit: Option<usize>| {
        let runner = Stage1Runner::new(&manifest, &cfg, &gateway, &prompts).unwrap();
        let total = runner.attempts();
        run_resumable(
            run_dir,
            "triples.jsonl",
            &cfg_hash,
            cfg.seed,
            total,
            limit,
            |index| {
                let outcome = runner
                    .sample(index)
                    .map_err(|e| DatasetError::Pipeline(e.to_string()))?;
                let line = match &outcome {
                    SampleOutcome::Emitted(t) => Some(
                        serde_json::to_string(t)
                            .map_err(|e| DatasetError::Pipeline(e.to_string()))?,
                    ),
                    _ => None,
                };
                Ok(SampleEmit {
                    line,
                    counter: outcome.counter().to_string(),
                })
            },
        )
        .unwrap()
    };

    // A straight run, a rerun, and an interrupted-then-resumed run all
    // leave the same bytes on disk.
    let dir_a = dir.path().join("a");
    let dir_b = dir.path().join("b");
    let dir_c = dir.path().join("c");
    let out_a = run(&dir_a, None);
    assert!(out_a.complete);
    let out_b = run(&dir_b, None);
    assert!(out_b.complete);
    let partial = run(&dir_c, Some(7));
    assert!(!partial.complete);
    assert_eq!(partial.processed, 7);
    let resumed = run(&dir_c, None);
    assert!(resumed.complete);

    let bytes_a = std::fs::read(dir_a.join("triples.jsonl")).unwrap();
    let bytes_b = std::fs::read(dir_b.join("triples.jsonl")).unwrap();
    let bytes_c = std::fs::read(dir_c.join("triples.jsonl")).unwrap();
    assert!(!bytes_a.is_empty());
    assert_eq!(bytes_a, bytes_b, "rerun drifted from the first run");
    assert_eq!(bytes_a, bytes_c, "resumed run drifted from the straight run");

    // The same holds for the batch entry point, and for scene synthesis.
    let batch_a = synthesize_stage1(&manifest, &cfg, &gateway, &prompts).unwrap();
    let batch_b = synthesize_stage1(&manifest, &cfg, &gateway, &prompts).unwrap();
    assert_eq!(batch_a.triples, batch_b.triples);
    let from_disk = read_triples(&dir_a.join("triples.jsonl")).unwrap();
    assert_eq!(from_disk, batch_a.triples);

    let scene_manifest = corpus_with_videos(0, 6, 4, 8, 1113);
    let stage2_cfg = Stage2Config {
        seed: seed::derive(1114, 0),
        ..Stage2Config::default()
    };
    let scenes_a =
        synthesize_stage2(&scene_manifest, &stage2_cfg, &gateway, &gateway, &prompts).unwrap();
    let scenes_b =
        synthesize_stage2(&scene_manifest, &stage2_cfg, &gateway, &gateway, &prompts).unwrap();
    assert_eq!(scenes_a.triples, scenes_b.triples);

    // Round trip is lossless and the checksum footer catches corruption.
    let clean = dir.path().join("clean.jsonl");
    write_triples(&clean, &batch_a.triples).unwrap();
    assert_eq!(read_triples(&clean).unwrap(), batch_a.triples);

    let mut corrupted = std::fs::read(&clean).unwrap();
    let mid = corrupted.len() / 3;
    let target = (mid..corrupted.len())
        .find(|&i| corrupted[i].is_ascii_alphanumeric())
        .unwrap();
    corrupted[target] ^= 0x01;
    let bad = dir.path().join("corrupted.jsonl");
    std::fs::write(&bad, &corrupted).unwrap();
    assert!(matches!(
        read_triples(&bad),
        Err(DatasetError::ChecksumMismatch { .. })
    ));

    println!("[acceptance] deterministic reruns, resume, and checksums: PASS");
}
