//! Gradient-descent training of the toy scorer on preference triples.
//!
//! Stage 1 scores the frozen reference on the anchor-only context; stage 2
//! scores it on the same full context as the policy, with the stage-1
//! checkpoint passed in as `init`. The optimizer is plain gradient descent
//! so the analytic gradients stay the whole story.

use crate::objective::toy::{tokenize, toy_score, toy_score_grad, ToyScorer};
use crate::objective::{
    dpo_loss, dpo_loss_grad, stage1_loss, total_loss, MarginInputs, ObjectiveError, RefContext,
};
use crate::seed;
use crate::types::{DpoConfig, ModelTag, PreferenceTriple, Stage, TripleProvenance};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyTrainConfig {
    /// Step size for gradient descent, sized for the toy parameter scale.
    pub learning_rate: f64,
    pub steps: u32,
    pub batch_size: u32,
    pub schedule: Schedule,
    /// Fraction of steps spent in linear warmup before the schedule applies.
    pub warmup_ratio: f64,
    pub dpo: DpoConfig,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig {
            learning_rate: 0.5,
            steps: 500,
            batch_size: 8,
            schedule: Schedule::Cosine,
            warmup_ratio: 0.01,
            dpo: DpoConfig::default(),
            seed: 0,
        }
    }
}

impl ToyTrainConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ObjectiveError::NonFinite("learning_rate"));
        }
        if self.steps == 0 {
            return Err(ObjectiveError::EmptyBatch);
        }
        if self.batch_size == 0 {
            return Err(ObjectiveError::EmptyBatch);
        }
        if !(self.warmup_ratio.is_finite() && (0.0..1.0).contains(&self.warmup_ratio)) {
            return Err(ObjectiveError::NonFinite("warmup_ratio"));
        }
        self.dpo
            .validate()
            .map_err(|_| ObjectiveError::NonFinite("dpo config"))?;
        Ok(())
    }
}

/// Learning rate at `step`: linear warmup over `warmup_ratio * steps`, then
/// constant or cosine decay to zero at the final step.
pub fn lr_at(cfg: &ToyTrainConfig, step: u32) -> f64 {
    let warmup_steps = (cfg.warmup_ratio * cfg.steps as f64).floor() as u32;
    if step < warmup_steps {
        return cfg.learning_rate * (step + 1) as f64 / warmup_steps as f64;
    }
    match cfg.schedule {
        Schedule::Constant => cfg.learning_rate,
        Schedule::Cosine => {
            let span = (cfg.steps - warmup_steps).max(1) as f64;
            let progress = (step - warmup_steps) as f64 / span;
            cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// A triple reduced to token ids. `context` is what the policy (and the
/// stage-2 reference) scores against; `anchor_context` is the stage-1
/// reference view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedTriple {
    pub triple_id: String,
    pub stage: Stage,
    pub context: Vec<usize>,
    pub anchor_context: Vec<usize>,
    pub preferred: Vec<usize>,
    pub dispreferred: Vec<usize>,
}

/// Builds token sequences from triples: the query plus the context clip or
/// scene identifiers, hashed into the toy vocabulary.
pub fn tokenize_triples(triples: &[PreferenceTriple], vocab_size: usize) -> Vec<TokenizedTriple> {
    triples
        .iter()
        .map(|t| {
            let (full_ids, anchor_ids): (Vec<String>, Vec<String>) = match &t.provenance {
                TripleProvenance::Composite { clip_ids, .. } => {
                    (clip_ids.clone(), vec![t.anchor_ref.clone()])
                }
                TripleProvenance::Scenes {
                    video_id, n_scenes, ..
                } => {
                    let all: Vec<String> = (1..=*n_scenes)
                        .map(|s| format!("{video_id}/scene{s}"))
                        .collect();
                    (all.clone(), all)
                }
            };
            let context = context_tokens(&t.query, &full_ids, vocab_size);
            let anchor_context = context_tokens(&t.query, &anchor_ids, vocab_size);
            TokenizedTriple {
                triple_id: t.triple_id.clone(),
                stage: t.stage,
                context,
                anchor_context,
                preferred: tokenize(&t.preferred, vocab_size),
                dispreferred: tokenize(&t.dispreferred, vocab_size),
            }
        })
        .collect()
}

fn context_tokens(query: &str, ids: &[String], vocab_size: usize) -> Vec<usize> {
    let mut tokens = tokenize(query, vocab_size);
    tokens.extend(tokenize(&ids.join(" "), vocab_size));
    tokens
}

/// One metrics-log line per optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u32,
    pub dpo_loss: f64,
    pub nll: f64,
    pub total_loss: f64,
    pub pref_acc: f64,
    pub lr: f64,
}

pub struct TrainOutput {
    pub checkpoint: ToyScorer,
    pub metrics: Vec<StepMetrics>,
}

struct SampleEval {
    margin_inputs: MarginInputs,
    nll: f64,
    preferred_len: u64,
}

fn eval_sample(
    policy: &ToyScorer,
    reference: &ToyScorer,
    triple: &TokenizedTriple,
    stage: Stage,
) -> Result<SampleEval, ObjectiveError> {
    let policy_pos = toy_score(policy, &triple.context, &triple.preferred, ModelTag::Policy)?;
    let policy_neg = toy_score(
        policy,
        &triple.context,
        &triple.dispreferred,
        ModelTag::Policy,
    )?;
    let (ref_context_tokens, ref_context) = match stage {
        Stage::Stage1 => (&triple.anchor_context, RefContext::AnchorOnly),
        Stage::Stage2 => (&triple.context, RefContext::FullComposite),
    };
    let ref_pos = toy_score(
        reference,
        ref_context_tokens,
        &triple.preferred,
        ModelTag::Reference,
    )?;
    let ref_neg = toy_score(
        reference,
        ref_context_tokens,
        &triple.dispreferred,
        ModelTag::Reference,
    )?;
    let preferred_len = policy_pos.token_count;
    Ok(SampleEval {
        margin_inputs: MarginInputs {
            policy_pos: policy_pos.sum_logprob,
            policy_neg: policy_neg.sum_logprob,
            ref_pos: ref_pos.sum_logprob,
            ref_neg: ref_neg.sum_logprob,
            ref_context,
        },
        nll: -policy_pos.sum_logprob / preferred_len as f64,
        preferred_len,
    })
}

/// Preference accuracy of `policy` against a frozen `reference`: the
/// fraction of triples whose implicit reward margin favors the preferred
/// response, with exact ties counted as half a win. Both models score the
/// same full context here, unlike the stage-1 training margin, which
/// conditions the reference on the anchor alone. That makes the margin
/// isolate what training changed: raw logprob biases shared by both
/// scorers (length, token frequency) cancel, and a policy identical to
/// the reference sits at exactly 0.5 by construction.
pub fn eval_pref_accuracy(
    policy: &ToyScorer,
    reference: &ToyScorer,
    dataset: &[TokenizedTriple],
) -> Result<f64, ObjectiveError> {
    if dataset.is_empty() {
        return Err(ObjectiveError::EmptyDataset);
    }
    let mut wins = 0.0f64;
    for t in dataset {
        let policy_pos = toy_score(policy, &t.context, &t.preferred, ModelTag::Policy)?;
        let policy_neg = toy_score(policy, &t.context, &t.dispreferred, ModelTag::Policy)?;
        let ref_pos = toy_score(reference, &t.context, &t.preferred, ModelTag::Reference)?;
        let ref_neg = toy_score(reference, &t.context, &t.dispreferred, ModelTag::Reference)?;
        let margin = (policy_pos.sum_logprob - ref_pos.sum_logprob)
            - (policy_neg.sum_logprob - ref_neg.sum_logprob);
        if margin > 0.0 {
            wins += 1.0;
        } else if margin == 0.0 {
            wins += 0.5;
        }
    }
    Ok(wins / dataset.len() as f64)
}

/// Runs gradient descent from `init`. The reference model is a frozen clone
/// of `init`: the initial checkpoint for stage 1, the stage-1 checkpoint for
/// stage 2.
pub fn train_toy(
    dataset: &[TokenizedTriple],
    cfg: &ToyTrainConfig,
    stage: Stage,
    init: &ToyScorer,
) -> Result<TrainOutput, ObjectiveError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(ObjectiveError::EmptyDataset);
    }
    for t in dataset {
        if t.stage != stage {
            return Err(ObjectiveError::StageMismatch {
                requested: format!("{stage}"),
                found: format!("{}", t.stage),
            });
        }
    }

    let reference = init.clone();
    let mut policy = init.clone();
    let mut metrics = Vec::with_capacity(cfg.steps as usize);

    for step in 0..cfg.steps {
        let lr = lr_at(cfg, step);
        let mut rng = seed::rng(seed::derive(cfg.seed, step as u64));
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..dataset.len()))
            .collect();

        let mut grad = vec![0.0; policy.param_count()];
        let mut margins = Vec::with_capacity(batch.len());
        let mut total_sum = 0.0;
        let mut nll_sum = 0.0;
        let mut wins = 0.0f64;
        let inv_batch = 1.0 / batch.len() as f64;

        for &idx in &batch {
            let triple = &dataset[idx];
            let eval = eval_sample(&policy, &reference, triple, stage)?;
            let sample_dpo = dpo_loss(&eval.margin_inputs, cfg.dpo.beta)?;
            total_sum += total_loss(
                sample_dpo,
                eval.nll * eval.preferred_len as f64,
                eval.preferred_len,
                cfg.dpo.alpha,
            )?;
            nll_sum += eval.nll;
            // Batch accuracy on the training margin (anchor-referenced for
            // stage 1), ties counted as half.
            let m = &eval.margin_inputs;
            let margin = (m.policy_pos - m.ref_pos) - (m.policy_neg - m.ref_neg);
            if margin > 0.0 {
                wins += 1.0;
            } else if margin == 0.0 {
                wins += 0.5;
            }

            let g = dpo_loss_grad(&eval.margin_inputs, cfg.dpo.beta)?;
            let grad_pos = toy_score_grad(&policy, &triple.context, &triple.preferred)?;
            let grad_neg = toy_score_grad(&policy, &triple.context, &triple.dispreferred)?;
            // d total / d theta: the preference term through both response
            // scores plus the likelihood term through the preferred score.
            let pos_coeff = g.d_policy_pos - cfg.dpo.alpha / eval.preferred_len as f64;
            for (i, gp) in grad_pos.iter().enumerate() {
                grad[i] += inv_batch * (pos_coeff * gp + g.d_policy_neg * grad_neg[i]);
            }
            margins.push(eval.margin_inputs);
        }

        let batch_dpo = match stage {
            Stage::Stage1 => stage1_loss(&margins, cfg.dpo.beta)?,
            Stage::Stage2 => {
                let mut s = 0.0;
                for m in &margins {
                    s += dpo_loss(m, cfg.dpo.beta)?;
                }
                s / margins.len() as f64
            }
        };

        for (i, g) in grad.iter().enumerate() {
            policy.set_param(i, policy.param(i) - lr * g);
        }

        metrics.push(StepMetrics {
            step,
            dpo_loss: batch_dpo,
            nll: nll_sum * inv_batch,
            total_loss: total_sum * inv_batch,
            pref_acc: wins / batch.len() as f64,
            lr,
        });
    }

    Ok(TrainOutput {
        checkpoint: policy,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_triple(id: usize, stage: Stage) -> TokenizedTriple {
        // Preferred responses share tokens {1,2,3}, dispreferred share
        // {10,11,12}: separable by construction.
        TokenizedTriple {
            triple_id: format!("t{id}"),
            stage,
            context: vec![20 + id % 4, 24],
            anchor_context: vec![20 + id % 4],
            preferred: vec![1, 2, 3, (id % 5) + 30],
            dispreferred: vec![10, 11, 12, (id % 5) + 40],
        }
    }

    fn dataset(n: usize, stage: Stage) -> Vec<TokenizedTriple> {
        (0..n).map(|i| synthetic_triple(i, stage)).collect()
    }

    fn quick_cfg(steps: u32) -> ToyTrainConfig {
        ToyTrainConfig {
            learning_rate: 0.2,
            steps,
            batch_size: 4,
            schedule: Schedule::Constant,
            warmup_ratio: 0.0,
            dpo: DpoConfig::default(),
            seed: 11,
        }
    }

    #[test]
    fn identical_seeds_give_identical_metrics() {
        let data = dataset(16, Stage::Stage1);
        let init = ToyScorer::seeded(48, 6, 9, 0.1);
        let a = train_toy(&data, &quick_cfg(20), Stage::Stage1, &init).unwrap();
        let b = train_toy(&data, &quick_cfg(20), Stage::Stage1, &init).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.checkpoint, b.checkpoint);
    }

    #[test]
    fn single_sample_pure_preference_descent_is_monotone() {
        let data = dataset(1, Stage::Stage1);
        let init = ToyScorer::seeded(48, 6, 13, 0.1);
        let cfg = ToyTrainConfig {
            learning_rate: 0.05,
            steps: 50,
            batch_size: 1,
            schedule: Schedule::Constant,
            warmup_ratio: 0.0,
            dpo: DpoConfig {
                beta: 1.0,
                alpha: 0.0,
                ..DpoConfig::default()
            },
            seed: 3,
        };
        let out = train_toy(&data, &cfg, Stage::Stage1, &init).unwrap();
        for w in out.metrics.windows(2) {
            assert!(
                w[1].dpo_loss <= w[0].dpo_loss + 1e-12,
                "step {} rose: {} -> {}",
                w[1].step,
                w[0].dpo_loss,
                w[1].dpo_loss
            );
        }
    }

    #[test]
    fn stage_mismatch_and_empty_dataset_error() {
        let init = ToyScorer::zeros(48, 6);
        assert!(matches!(
            train_toy(&[], &quick_cfg(5), Stage::Stage1, &init),
            Err(ObjectiveError::EmptyDataset)
        ));
        let data = dataset(4, Stage::Stage2);
        assert!(matches!(
            train_toy(&data, &quick_cfg(5), Stage::Stage1, &init),
            Err(ObjectiveError::StageMismatch { .. })
        ));
    }

    #[test]
    fn training_separates_preferences() {
        let data = dataset(24, Stage::Stage1);
        let init = ToyScorer::seeded(48, 6, 5, 0.1);
        let before = eval_pref_accuracy(&init, &init, &data).unwrap();
        assert!(
            (before - 0.5).abs() < 1e-12,
            "identical policy and reference should sit at exactly 0.5, got {before}"
        );
        let out = train_toy(&data, &quick_cfg(120), Stage::Stage1, &init).unwrap();
        let after = eval_pref_accuracy(&out.checkpoint, &init, &data).unwrap();
        assert!(after > 0.9, "accuracy before {before}, after {after}");
    }

    #[test]
    fn warmup_and_cosine_schedule_shape() {
        let cfg = ToyTrainConfig {
            learning_rate: 1.0,
            steps: 100,
            batch_size: 1,
            schedule: Schedule::Cosine,
            warmup_ratio: 0.1,
            dpo: DpoConfig::default(),
            seed: 0,
        };
        assert!((lr_at(&cfg, 0) - 0.1).abs() < 1e-12);
        assert!((lr_at(&cfg, 9) - 1.0).abs() < 1e-12);
        assert!((lr_at(&cfg, 10) - 1.0).abs() < 1e-12);
        assert!(lr_at(&cfg, 99) < 0.01);
        let constant = ToyTrainConfig {
            schedule: Schedule::Constant,
            ..cfg
        };
        assert_eq!(lr_at(&constant, 50), 1.0);
    }

    #[test]
    fn stage2_uses_full_context_reference() {
        // Stage 2 margins start at exactly zero when the policy is
        // initialized from the reference checkpoint.
        let data = dataset(8, Stage::Stage2);
        let init = ToyScorer::seeded(48, 6, 17, 0.1);
        let cfg = quick_cfg(1);
        let out = train_toy(&data, &cfg, Stage::Stage2, &init).unwrap();
        assert!((out.metrics[0].dpo_loss - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
