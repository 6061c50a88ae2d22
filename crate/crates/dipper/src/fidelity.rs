//! Prompt fidelity: each candidate prompt's standalone accuracy on the
//! development split, measured by running the prompted model over every
//! dev instance and checking the extracted answer against gold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::normalize_answer;
use crate::core::{
    validate_pool, CandidatePool, ConstituentResponse, CoreError, FidelityVector, SamplingParams,
    TaskInstance, TaskKind,
};
use crate::providers::{ChatJob, ChatProvider, ProviderError};

#[derive(Debug, Error)]
pub enum FidelityError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("development set is empty")]
    EmptyDev,
    #[error("pool size must be at least 1")]
    EmptyPool,
}

/// A seeded dev/test partition of a dataset. The dev side is used only for
/// fidelity scoring and alpha selection, never for final accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevSplit {
    pub dev: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
    pub seed: u64,
    pub dev_size: usize,
    pub dataset_id: String,
}

impl DevSplit {
    /// Stable identifier tying fidelity vectors to the split they were
    /// scored on.
    pub fn dev_set_id(&self) -> String {
        format!("{}-dev{}-seed{}", self.dataset_id, self.dev_size, self.seed)
    }
}

/// User message for one instance: the fixed few-shot exemplar block
/// directly followed by the query. The reasoning prompt occupies the
/// system role alone.
pub fn compose_user_message(exemplar_block: &str, query: &str) -> String {
    format!("{exemplar_block}{query}")
}

/// Scores every prompt in the pool on the dev split: value i is the
/// fraction of dev instances where prompt i's extracted answer matches gold
/// after normalization. An unparseable response counts as incorrect. All
/// (prompt, instance) calls run with bounded parallelism; counting is
/// order-independent. On transport failure the error propagates, but every
/// completed call is already in the cache, so rescoring resumes from there.
pub fn score_pool(
    pool: &CandidatePool,
    split: &DevSplit,
    provider: &ChatProvider,
    params: &SamplingParams,
    task_kind: TaskKind,
    exemplar_block: &str,
) -> Result<FidelityVector, FidelityError> {
    validate_pool(pool)?;
    if split.dev.is_empty() {
        return Err(FidelityError::EmptyDev);
    }
    let jobs: Vec<ChatJob> = pool
        .prompts
        .iter()
        .flat_map(|prompt| {
            split.dev.iter().map(|instance| ChatJob {
                system: prompt.text.clone(),
                user: compose_user_message(exemplar_block, &instance.query),
                params: params.clone(),
            })
        })
        .collect();
    let mut results = provider.complete_batch(&jobs);
    // surface the first failure; completed calls are already cached, so a
    // rescore resumes from where this one stopped
    if let Some(pos) = results.iter().position(|r| r.is_err()) {
        return Err(results.swap_remove(pos).unwrap_err().into());
    }
    let completions: Vec<_> = results.into_iter().map(|r| r.unwrap()).collect();

    let dev_len = split.dev.len();
    let mut values = Vec::with_capacity(pool.len());
    for (prompt_idx, prompt) in pool.prompts.iter().enumerate() {
        let mut correct = 0usize;
        for (instance_idx, instance) in split.dev.iter().enumerate() {
            let completion = &completions[prompt_idx * dev_len + instance_idx];
            let response = ConstituentResponse::from_raw(prompt.id, &completion.text, task_kind);
            let gold = normalize_answer(&instance.gold_answer, task_kind);
            if response.extracted_answer.as_deref() == Some(gold.as_str()) {
                correct += 1;
            }
        }
        values.push(correct as f64 / dev_len as f64);
    }
    Ok(FidelityVector::new(values, split.dev_set_id(), dev_len)?)
}

/// The no-dev-set fallback: a uniform prior of 0.5 for every prompt. The
/// dev-size marker is 2 so the multiple-of-1/dev_size invariant holds.
pub fn uninformed_fidelity(pool_size: usize) -> Result<FidelityVector, FidelityError> {
    if pool_size == 0 {
        return Err(FidelityError::EmptyPool);
    }
    Ok(FidelityVector::new(vec![0.5; pool_size], "uninformed", 2)?)
}

/// On-disk fidelity record: the vector plus the digest of the pool it was
/// scored against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRecord {
    pub pool_digest: String,
    pub dev_set_id: String,
    pub dev_size: usize,
    pub values: Vec<f64>,
}

impl FidelityRecord {
    pub fn new(pool: &CandidatePool, fidelity: &FidelityVector) -> Self {
        Self {
            pool_digest: pool.digest(),
            dev_set_id: fidelity.dev_set_id.clone(),
            dev_size: fidelity.dev_size,
            values: fidelity.values.clone(),
        }
    }

    pub fn to_vector(&self) -> Result<FidelityVector, CoreError> {
        FidelityVector::new(self.values.clone(), self.dev_set_id.clone(), self.dev_size)
    }
}
