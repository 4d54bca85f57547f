//! Tooling for training long-video language models on synthesized preference data.
//!
//! The crate covers the full loop:
//!
//! * [`types`] holds the shared vocabulary: clips, composite sequences,
//!   preference triples, scene records, and the run configuration.
//! * [`objective`] implements the preference loss (a log-sigmoid margin over
//!   policy/reference score gaps), its gradients, and a tiny differentiable
//!   scorer plus trainer used to exercise the objective end to end.
//! * [`stage1`] synthesizes short-to-long preference triples by embedding an
//!   anchor clip inside a composite of dissimilar distractors.
//! * [`stage2`] synthesizes long-video triples from recursive scene captions
//!   and queries whose evidence chains cite specific scenes.
//! * [`gateway`] abstracts text generation and scoring behind one trait with
//!   a deterministic mock and a retrying HTTP client.
//! * [`probe`] measures answer accuracy as a function of where content sits
//!   inside a padded frame grid.
//! * [`dataset`] persists everything: corpus manifests, checksummed record
//!   streams, run state for resume, and dataset validation.
//!
//! Determinism is a design constraint throughout: one root seed is split per
//! sample, and every pipeline output is a pure function of (inputs, config,
//! seed).

pub mod dataset;
pub mod fixtures;
pub mod gateway;
pub mod objective;
pub mod probe;
pub mod prompts;
pub mod seed;
pub mod stage1;
pub mod stage2;
pub mod types;
