//! Inference-time LLM ensembles from a single base model.
//!
//! The library turns one chat model into an ensemble by running it under a
//! diverse, high-fidelity set of system prompts in parallel and aggregating
//! the answers. The pipeline is: generate a candidate prompt pool
//! ([`promptgen`]), score each prompt's accuracy on a small dev split
//! ([`fidelity`]), select a subset maximizing fidelity-adjusted semantic
//! volume ([`selector`]), run the selected constituents against a
//! chat-completion endpoint ([`providers`]), and aggregate their answers by
//! majority vote or best-of-n ([`aggregate`]). [`evalharness`] measures
//! ensemble accuracy and the volume/accuracy correlation analyses; [`cli`]
//! wires everything into subcommands.

pub mod aggregate;
pub mod cli;
pub mod core;
pub mod evalharness;
pub mod fidelity;
pub mod promptgen;
pub mod providers;
pub mod selector;

pub use crate::core::{
    Aggregator, CandidatePool, ConstituentResponse, EmbeddingMatrix, EnsembleSelection, EvalReport,
    FidelityVector, Prompt, PromptSource, SamplingParams, SelectionMethod, TaskInstance, TaskKind,
};
