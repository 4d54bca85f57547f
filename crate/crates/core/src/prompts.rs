//! Prompt templates for the generation tasks.
//!
//! Every template's first line is `TASK: <name>`, which is how gateways
//! dispatch. The built-in set can be overridden per task by dropping
//! `<name>.txt` files in a directory; overrides must keep the task line.

use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown task '{0}'")]
    UnknownTask(String),
    #[error("template for '{task}' must start with 'TASK: {task}'")]
    MissingTaskHeader { task: String },
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

pub const TASK_NAMES: [&str; 6] = [
    "anchor_qa",
    "specificity",
    "dispreferred_s1",
    "caption",
    "query_trace",
    "answer_scenes",
];

const ANCHOR_QA: &str = "TASK: anchor_qa\n\
You are shown the frames and caption of one short clip. Write a question that \
can only be answered by watching this clip, then answer it faithfully. Reply \
with exactly two lines:\n\
QUESTION: <the question>\n\
ANSWER: <the grounded answer>\n";

const SPECIFICITY: &str = "TASK: specificity\n\
You are shown a clip and a candidate question about it. Reply YES if answering \
the question requires watching this clip, or NO if a generic answer would do.\n";

const DISPREFERRED_S1: &str = "TASK: dispreferred_s1\n\
Answer the question using only the scenes you are shown. The scene the \
question is really about is not among them, so your answer will reflect the \
wrong material. Answer in one or two sentences without disclaimers.\n";

const CAPTION: &str = "TASK: caption\n\
Describe this scene in one sentence. Earlier scene descriptions are provided \
for continuity; keep names and references consistent with them.\n";

const QUERY_TRACE: &str = "TASK: query_trace\n\
You are given the scene-by-scene captions of a long video. Write one question \
that requires combining several scenes to answer, then list your reasoning, \
citing every scene you used as 'Scene #<n>'. Reply with:\n\
QUESTION: <the question>\n\
TRACE: <reasoning with citations>\n";

const ANSWER_SCENES: &str = "TASK: answer_scenes\n\
Answer the question using only the scenes you are shown. Ground every claim \
in those scenes. Answer in one or two sentences.\n";

#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<String, String>,
}

impl PromptSet {
    pub fn builtin() -> Self {
        let mut templates = BTreeMap::new();
        for (name, text) in [
            ("anchor_qa", ANCHOR_QA),
            ("specificity", SPECIFICITY),
            ("dispreferred_s1", DISPREFERRED_S1),
            ("caption", CAPTION),
            ("query_trace", QUERY_TRACE),
            ("answer_scenes", ANSWER_SCENES),
        ] {
            templates.insert(name.to_string(), text.to_string());
        }
        PromptSet { templates }
    }

    /// Starts from the built-in set and replaces any task that has a
    /// `<name>.txt` file in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for task in TASK_NAMES {
            let path = dir.join(format!("{task}.txt"));
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| PromptError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                let header = format!("TASK: {task}");
                if text.lines().next().map(str::trim) != Some(header.as_str()) {
                    return Err(PromptError::MissingTaskHeader {
                        task: task.to_string(),
                    });
                }
                set.templates.insert(task.to_string(), text);
            }
        }
        Ok(set)
    }

    pub fn get(&self, task: &str) -> Result<&str, PromptError> {
        self.templates
            .get(task)
            .map(String::as_str)
            .ok_or_else(|| PromptError::UnknownTask(task.to_string()))
    }
}
