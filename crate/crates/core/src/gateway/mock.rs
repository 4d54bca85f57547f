//! A deterministic in-process gateway.
//!
//! Output is a pure function of the request and two seeds (the gateway's own
//! and the request's), so synthesis runs against it are reproducible
//! byte-for-byte. Each task tag gets a distinct template family; faithful
//! and fabricated answer families share no marker words, which keeps toy
//! training separable.

use crate::gateway::{
    digest16, frame_count, ContextItemKind, Gateway, GatewayError, GenerateRequest, ScoreRequest,
};
use crate::seed;
use crate::types::ScoreRecord;
use rand::Rng;
use std::collections::HashSet;
use std::sync::Mutex;

/// Record of one call, kept for assertions about call order and content.
#[derive(Debug, Clone, PartialEq)]
pub enum CallRecord {
    Generate(GenerateRequest),
    Score(ScoreRequest),
}

pub struct MockGateway {
    seed: u64,
    per_token_logprob: f64,
    /// Generate requests carrying one of these seeds fail with a transport
    /// error, for exercising failure accounting in synthesis.
    fail_seeds: HashSet<u64>,
    /// When set, every trace citation is out of range, which makes chain
    /// parsing come back empty.
    trace_out_of_range: bool,
    /// When set, the specificity verdict is YES exactly for queries on this
    /// list, replacing the marker-token rule.
    specificity_accept: Option<HashSet<String>>,
    calls: Mutex<Vec<CallRecord>>,
}

const TASK_ANCHOR_QA: u64 = 1;
const TASK_SPECIFICITY: u64 = 2;
const TASK_DISPREFERRED_S1: u64 = 3;
const TASK_CAPTION: u64 = 4;
const TASK_QUERY_TRACE: u64 = 5;
const TASK_ANSWER_SCENES: u64 = 6;

const TOPICS: [&str; 6] = [
    "handoff",
    "reversal",
    "approach",
    "exchange",
    "pursuit",
    "pause",
];

impl MockGateway {
    pub fn new(seed: u64) -> Self {
        MockGateway {
            seed,
            per_token_logprob: -0.5,
            fail_seeds: HashSet::new(),
            trace_out_of_range: false,
            specificity_accept: None,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn with_per_token_logprob(mut self, lp: f64) -> Self {
        self.per_token_logprob = lp;
        self
    }

    pub fn with_fail_seeds(mut self, seeds: impl IntoIterator<Item = u64>) -> Self {
        self.fail_seeds = seeds.into_iter().collect();
        self
    }

    pub fn with_out_of_range_traces(mut self) -> Self {
        self.trace_out_of_range = true;
        self
    }

    pub fn with_specificity_accept_list<S: Into<String>>(
        mut self,
        queries: impl IntoIterator<Item = S>,
    ) -> Self {
        self.specificity_accept = Some(queries.into_iter().map(Into::into).collect());
        self
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.calls.lock().unwrap().clone()
    }

    pub fn generate_count(&self) -> usize {
        self.calls
            .lock()
            .unwrap()
            .iter()
            .filter(|c| matches!(c, CallRecord::Generate(_)))
            .count()
    }

    pub fn score_count(&self) -> usize {
        self.calls
            .lock()
            .unwrap()
            .iter()
            .filter(|c| matches!(c, CallRecord::Score(_)))
            .count()
    }

    pub fn clear_calls(&self) {
        self.calls.lock().unwrap().clear();
    }

    fn captions(req: &GenerateRequest) -> Vec<&str> {
        req.context_items
            .iter()
            .filter(|i| i.kind == ContextItemKind::Caption)
            .map(|i| i.payload.as_str())
            .collect()
    }

    fn frames(req: &GenerateRequest) -> Vec<&str> {
        req.context_items
            .iter()
            .filter(|i| i.kind == ContextItemKind::FrameRef)
            .map(|i| i.payload.as_str())
            .collect()
    }

    fn anchor_qa(&self, req: &GenerateRequest, rng: &mut impl Rng) -> Result<String, GatewayError> {
        let captions = Self::captions(req);
        let caption = captions
            .first()
            .ok_or_else(|| GatewayError::Protocol("anchor_qa requires a caption item".into()))?;
        let word = pick_word(caption, rng).unwrap_or("it");
        let topic = TOPICS[rng.random_range(0..TOPICS.len())];
        Ok(format!(
            "QUESTION: In the moment described as \"{caption}\", how does the {topic} involving {word} play out?\n\
             ANSWER: The footage is explicit here: {caption}. The {topic} centers on {word} throughout."
        ))
    }

    fn specificity(&self, req: &GenerateRequest) -> Result<String, GatewayError> {
        let captions = Self::captions(req);
        if captions.is_empty() {
            return Err(GatewayError::Protocol(
                "specificity requires the question as a caption item".into(),
            ));
        }
        // The question rides as the last caption item.
        if let Some(accept) = &self.specificity_accept {
            let query = *captions.last().expect("checked non-empty");
            return Ok(if accept.contains(query) { "YES" } else { "NO" }.into());
        }
        if captions.iter().any(|c| c.contains("GENERIC")) {
            Ok("NO".into())
        } else {
            Ok("YES".into())
        }
    }

    fn dispreferred_s1(
        &self,
        req: &GenerateRequest,
        rng: &mut impl Rng,
    ) -> Result<String, GatewayError> {
        let captions = Self::captions(req);
        if captions.is_empty() {
            return Err(GatewayError::Protocol(
                "dispreferred_s1 requires distractor captions".into(),
            ));
        }
        let first = captions[rng.random_range(0..captions.len())];
        let w1 = pick_word(first, rng).unwrap_or("elsewhere");
        let second = captions[rng.random_range(0..captions.len())];
        let w2 = pick_word(second, rng).unwrap_or("nearby");
        Ok(format!(
            "From what can be pieced together elsewhere: {first}. Attention drifts toward {w1} and {w2} instead."
        ))
    }

    fn caption(&self, req: &GenerateRequest, rng: &mut impl Rng) -> Result<String, GatewayError> {
        let frames = Self::frames(req);
        let subject = frames
            .first()
            .map(|f| f.split('#').next().unwrap_or(f))
            .ok_or_else(|| GatewayError::Protocol("caption requires frame items".into()))?;
        let prior = Self::captions(req).len();
        let topic = TOPICS[rng.random_range(0..TOPICS.len())];
        Ok(format!(
            "Segment {n}: a {topic} unfolds in {subject}, following {prior} earlier segment(s).",
            n = prior + 1
        ))
    }

    fn query_trace(
        &self,
        req: &GenerateRequest,
        rng: &mut impl Rng,
    ) -> Result<String, GatewayError> {
        let captions = Self::captions(req);
        let n = captions.len();
        if n == 0 {
            return Err(GatewayError::Protocol(
                "query_trace requires scene captions".into(),
            ));
        }
        let want = (2 + rng.random_range(0..2usize)).min(n);
        let mut pool: Vec<usize> = (1..=n).collect();
        let mut cited = Vec::with_capacity(want);
        for _ in 0..want {
            let j = rng.random_range(0..pool.len());
            cited.push(pool.swap_remove(j));
        }
        let word = pick_word(captions[cited[0] - 1], rng).unwrap_or("the thread");
        let question =
            format!("QUESTION: Across the video, how does {word} develop between the cited moments?");
        let mut trace = String::from("TRACE:");
        for (i, id) in cited.iter().enumerate() {
            let shown = if self.trace_out_of_range { id + n } else { *id };
            let verb = if i == 0 { "sets up" } else { "returns to" };
            let w = pick_word(captions[id - 1], rng).unwrap_or("it");
            trace.push_str(&format!(" Scene #{shown} {verb} {w}."));
        }
        Ok(format!("{question}\n{trace}"))
    }

    fn answer_scenes(
        &self,
        req: &GenerateRequest,
        rng: &mut impl Rng,
    ) -> Result<String, GatewayError> {
        let captions = Self::captions(req);
        if captions.is_empty() {
            return Err(GatewayError::Protocol(
                "answer_scenes requires scene captions".into(),
            ));
        }
        let gist: Vec<&str> = captions
            .iter()
            .map(|c| first_word(c).unwrap_or("scene"))
            .collect();
        let w = pick_word(captions[rng.random_range(0..captions.len())], rng).unwrap_or("it");
        Ok(format!(
            "Taking the {k} cited moments together ({list}), the thread runs through {w} from start to finish.",
            k = captions.len(),
            list = gist.join(", ")
        ))
    }
}

fn first_word(s: &str) -> Option<&str> {
    s.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .find(|w| !w.is_empty())
}

fn pick_word<'a>(s: &'a str, rng: &mut impl Rng) -> Option<&'a str> {
    let words: Vec<&str> = s
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| w.len() > 2)
        .collect();
    if words.is_empty() {
        None
    } else {
        Some(words[rng.random_range(0..words.len())])
    }
}

fn parse_task(prompt: &str) -> Option<&str> {
    prompt
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("TASK:"))
        .map(str::trim)
}

impl Gateway for MockGateway {
    fn generate(&self, req: &GenerateRequest) -> Result<String, GatewayError> {
        req.validate()?;
        self.calls
            .lock()
            .unwrap()
            .push(CallRecord::Generate(req.clone()));
        if self.fail_seeds.contains(&req.seed) {
            return Err(GatewayError::Transport("injected failure".into()));
        }
        let task = parse_task(&req.prompt)
            .ok_or_else(|| GatewayError::Protocol("prompt missing TASK line".into()))?;
        let code = match task {
            "anchor_qa" => TASK_ANCHOR_QA,
            "specificity" => TASK_SPECIFICITY,
            "dispreferred_s1" => TASK_DISPREFERRED_S1,
            "caption" => TASK_CAPTION,
            "query_trace" => TASK_QUERY_TRACE,
            "answer_scenes" => TASK_ANSWER_SCENES,
            other => {
                return Err(GatewayError::Protocol(format!("unknown task '{other}'")));
            }
        };
        let mut rng = seed::rng(seed::derive_path(self.seed, &[code, req.seed]));
        match code {
            TASK_ANCHOR_QA => self.anchor_qa(req, &mut rng),
            TASK_SPECIFICITY => self.specificity(req),
            TASK_DISPREFERRED_S1 => self.dispreferred_s1(req, &mut rng),
            TASK_CAPTION => self.caption(req, &mut rng),
            TASK_QUERY_TRACE => self.query_trace(req, &mut rng),
            TASK_ANSWER_SCENES => self.answer_scenes(req, &mut rng),
            _ => unreachable!(),
        }
    }

    fn score(&self, req: &ScoreRequest) -> Result<ScoreRecord, GatewayError> {
        req.validate()?;
        self.calls
            .lock()
            .unwrap()
            .push(CallRecord::Score(req.clone()));
        let token_count = req.response.split_whitespace().count() as u64;
        let context_concat: Vec<&str> = req
            .context_items
            .iter()
            .map(|i| i.payload.as_str())
            .collect();
        let record = ScoreRecord {
            model_tag: req.model_tag,
            context_id: format!("ctx-{}", digest16(&context_concat)),
            response_id: format!("resp-{}", digest16(&[req.response.as_str()])),
            token_logprobs: vec![self.per_token_logprob; token_count as usize],
            sum_logprob: self.per_token_logprob * token_count as f64,
            token_count,
            context_frames: frame_count(&req.context_items),
        };
        record
            .validate()
            .map_err(|e| GatewayError::Protocol(e.to_string()))?;
        Ok(record)
    }
}
