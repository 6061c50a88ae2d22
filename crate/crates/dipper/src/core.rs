//! Shared domain model: prompts, pools, fidelity vectors, embeddings,
//! sampling parameters, task instances, selections, and reports.
//!
//! All types here are plain immutable data, serialize to flat JSON records
//! with lower_snake_case field names, and are safe to share across threads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for the unit-norm invariant on embedding rows.
pub const NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("pool contains no prompts")]
    EmptyPool,
    #[error("prompt {0} has empty text")]
    EmptyPrompt(usize),
    #[error("prompts {0} and {1} have identical normalized text")]
    DuplicatePrompt(usize, usize),
    #[error("prompt at position {position} has id {id}; ids must equal pool positions")]
    IdNotPosition { position: usize, id: usize },
    #[error("embedding row {row} is ragged: expected dim {expected}, got {got}")]
    RaggedEmbedding {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("embedding row {0} is not finite or has zero norm")]
    BadEmbeddingRow(usize),
    #[error("embedding matrix has no rows")]
    EmptyEmbedding,
    #[error("fidelity value {value} at index {index} is outside [0, 1]")]
    FidelityOutOfRange { index: usize, value: f64 },
    #[error("fidelity value {value} at index {index} is not a multiple of 1/{dev_size}")]
    FidelityNotGranular {
        index: usize,
        value: f64,
        dev_size: usize,
    },
    #[error("fidelity length {got} does not match pool size {expected}")]
    FidelityLength { expected: usize, got: usize },
    #[error("selection has no prompt ids")]
    EmptySelection,
    #[error("selection method {0} does not allow repeated prompt ids")]
    RepeatedPromptIds(String),
    #[error("task instance {0} has an empty gold answer")]
    EmptyGold(String),
    #[error("task instance {id}: gold answer {gold:?} is not among choice labels {labels:?}")]
    GoldNotInChoices {
        id: String,
        gold: String,
        labels: Vec<String>,
    },
}

/// Where a prompt came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSource {
    Seed,
    Generated,
    Manual,
}

/// A single reasoning prompt. The id is the prompt's index within its pool
/// and is the canonical tie-break order everywhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: usize,
    pub text: String,
    pub source: PromptSource,
}

impl Prompt {
    pub fn new(id: usize, text: impl Into<String>, source: PromptSource) -> Self {
        Self {
            id,
            text: text.into(),
            source,
        }
    }
}

/// Case- and whitespace-folded form used for duplicate detection.
pub fn normalized_prompt_text(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// The candidate pool of prompts the selector draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub prompts: Vec<Prompt>,
    pub generator_model: String,
    pub created_from: String,
}

impl CandidatePool {
    pub fn new(
        prompts: Vec<Prompt>,
        generator_model: impl Into<String>,
        created_from: impl Into<String>,
    ) -> Self {
        Self {
            prompts,
            generator_model: generator_model.into(),
            created_from: created_from.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompt(&self, id: usize) -> Option<&Prompt> {
        self.prompts.iter().find(|p| p.id == id)
    }

    /// Hex digest over the normalized prompt texts, in id order. Used to tie
    /// fidelity files to the pool they were scored against.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for p in &self.prompts {
            hasher.update(normalized_prompt_text(&p.text).as_bytes());
            hasher.update([0u8]);
        }
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Checks every `CandidatePool` invariant: non-empty pool, non-empty prompt
/// texts, ids equal to pool positions (prompt identity is the pool index),
/// and no two prompts with identical normalized text.
pub fn validate_pool(pool: &CandidatePool) -> Result<(), CoreError> {
    if pool.prompts.is_empty() {
        return Err(CoreError::EmptyPool);
    }
    let mut seen_text: Vec<(String, usize)> = Vec::with_capacity(pool.len());
    for (i, p) in pool.prompts.iter().enumerate() {
        if p.id != i {
            return Err(CoreError::IdNotPosition {
                position: i,
                id: p.id,
            });
        }
        if p.text.trim().is_empty() {
            return Err(CoreError::EmptyPrompt(p.id));
        }
        let norm = normalized_prompt_text(&p.text);
        if let Some((_, first)) = seen_text.iter().find(|(t, _)| *t == norm) {
            return Err(CoreError::DuplicatePrompt(*first, p.id));
        }
        seen_text.push((norm, p.id));
    }
    Ok(())
}

/// Per-prompt dev-set accuracy, aligned index-for-index with a pool.
/// Every value is an integer multiple of `1/dev_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityVector {
    pub values: Vec<f64>,
    pub dev_set_id: String,
    pub dev_size: usize,
}

impl FidelityVector {
    pub fn new(
        values: Vec<f64>,
        dev_set_id: impl Into<String>,
        dev_size: usize,
    ) -> Result<Self, CoreError> {
        let v = Self {
            values,
            dev_set_id: dev_set_id.into(),
            dev_size,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        for (i, &v) in self.values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(CoreError::FidelityOutOfRange { index: i, value: v });
            }
            let scaled = v * self.dev_size as f64;
            if (scaled - scaled.round()).abs() > 1e-9 {
                return Err(CoreError::FidelityNotGranular {
                    index: i,
                    value: v,
                    dev_size: self.dev_size,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Sum of all values (the L1 norm, since values are non-negative).
    pub fn l1(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn check_len(&self, pool_size: usize) -> Result<(), CoreError> {
        if self.values.len() != pool_size {
            return Err(CoreError::FidelityLength {
                expected: pool_size,
                got: self.values.len(),
            });
        }
        Ok(())
    }
}

/// n x p matrix of prompt embeddings; row i is the unit-norm embedding of
/// prompt i. Construction renormalizes whatever the provider returned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<Vec<f64>>,
    pub model_label: String,
}

impl EmbeddingMatrix {
    /// Builds the matrix from raw provider vectors, renormalizing every row
    /// to unit L2 norm. Rejects ragged, non-finite, or zero-norm rows.
    pub fn new(raw: Vec<Vec<f64>>, model_label: impl Into<String>) -> Result<Self, CoreError> {
        if raw.is_empty() {
            return Err(CoreError::EmptyEmbedding);
        }
        let dim = raw[0].len();
        if dim == 0 {
            return Err(CoreError::BadEmbeddingRow(0));
        }
        let mut data = Vec::with_capacity(raw.len());
        for (i, row) in raw.into_iter().enumerate() {
            if row.len() != dim {
                return Err(CoreError::RaggedEmbedding {
                    row: i,
                    expected: dim,
                    got: row.len(),
                });
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(CoreError::BadEmbeddingRow(i));
            }
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= 0.0 || !norm.is_finite() {
                return Err(CoreError::BadEmbeddingRow(i));
            }
            data.push(row.into_iter().map(|x| x / norm).collect());
        }
        Ok(Self {
            rows: data.len(),
            dim,
            data,
            model_label: model_label.into(),
        })
    }

    /// Rows restricted to `ids`, in the given order.
    pub fn select_rows(&self, ids: &[usize]) -> Vec<&[f64]> {
        ids.iter().map(|&i| self.data[i].as_slice()).collect()
    }
}

/// Decoding parameters for one chat completion. `seed_index` distinguishes
/// repeated draws from the same (prompt, question) pair so that caching does
/// not collapse them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub max_tokens: u32,
    pub seed_index: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.8,
            repetition_penalty: 1.05,
            max_tokens: 512,
            seed_index: 0,
        }
    }
}

impl SamplingParams {
    pub fn with_seed_index(&self, seed_index: u32) -> Self {
        Self {
            seed_index,
            ..self.clone()
        }
    }
}

/// How answers are matched against gold: the shape of the answer span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Answer inside the last `\boxed{...}`.
    Boxed,
    /// Last numeric token in the response.
    FinalNumber,
    /// Last standalone A-E choice letter.
    ChoiceLetter,
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "boxed" => Ok(Self::Boxed),
            "final_number" => Ok(Self::FinalNumber),
            "choice_letter" => Ok(Self::ChoiceLetter),
            other => Err(format!("unknown task kind {other:?}")),
        }
    }
}

/// One benchmark question with its gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub query: String,
    pub gold_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

impl TaskInstance {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.gold_answer.trim().is_empty() {
            return Err(CoreError::EmptyGold(self.id.clone()));
        }
        if let Some(choices) = &self.choices {
            let labels: Vec<String> = (0..choices.len())
                .map(|i| ((b'A' + i as u8) as char).to_string())
                .collect();
            if !labels.contains(&self.gold_answer) {
                return Err(CoreError::GoldNotInChoices {
                    id: self.id.clone(),
                    gold: self.gold_answer.clone(),
                    labels,
                });
            }
        }
        Ok(())
    }
}

/// One constituent's reply to one question: the raw text, its reasoning part
/// (raw text minus the answer span), and the extracted canonical answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstituentResponse {
    pub prompt_id: usize,
    pub raw_text: String,
    pub reasoning: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
}

/// How a prompt subset was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Fasv,
    Topn,
    Randplus,
    #[serde(rename = "self")]
    SelfEnsemble,
    Exhaustive,
    Manual,
}

impl std::fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Fasv => "fasv",
            Self::Topn => "topn",
            Self::Randplus => "randplus",
            Self::SelfEnsemble => "self",
            Self::Exhaustive => "exhaustive",
            Self::Manual => "manual",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for SelectionMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fasv" => Ok(Self::Fasv),
            "topn" => Ok(Self::Topn),
            "randplus" => Ok(Self::Randplus),
            "self" => Ok(Self::SelfEnsemble),
            "exhaustive" => Ok(Self::Exhaustive),
            "manual" => Ok(Self::Manual),
            other => Err(format!("unknown selection method {other:?}")),
        }
    }
}

/// A chosen prompt subset. `score` is the fidelity-adjusted semantic volume
/// for fasv/exhaustive selections and `None` where no score is meaningful
/// (or where the score is degenerate, i.e. negative infinity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSelection {
    pub prompt_ids: Vec<usize>,
    pub method: SelectionMethod,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl EnsembleSelection {
    pub fn n(&self) -> usize {
        self.prompt_ids.len()
    }

    /// Repeated ids are allowed only for self-ensembles and manual slot
    /// lists (the unique-k padding protocol).
    pub fn has_repeats(&self) -> bool {
        let mut sorted = self.prompt_ids.clone();
        sorted.sort_unstable();
        sorted.windows(2).any(|w| w[0] == w[1])
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.prompt_ids.is_empty() {
            return Err(CoreError::EmptySelection);
        }
        if self.has_repeats()
            && !matches!(
                self.method,
                SelectionMethod::SelfEnsemble | SelectionMethod::Manual
            )
        {
            return Err(CoreError::RepeatedPromptIds(self.method.to_string()));
        }
        Ok(())
    }
}

/// Which aggregation rule produced the final answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Mv,
    Bon,
}

impl std::fmt::Display for Aggregator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Mv => write!(f, "mv"),
            Self::Bon => write!(f, "bon"),
        }
    }
}

impl std::str::FromStr for Aggregator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mv" => Ok(Self::Mv),
            "bon" => Ok(Self::Bon),
            other => Err(format!("unknown aggregator {other:?}")),
        }
    }
}

/// Per-instance outcome inside an [`EvalReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub instance_id: String,
    pub final_answer: String,
    pub correct: bool,
}

/// Result of evaluating one ensemble over a test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub selection: EnsembleSelection,
    pub aggregator: Aggregator,
    pub per_instance: Vec<InstanceOutcome>,
    pub accuracy: f64,
    pub run_id: String,
}

impl EvalReport {
    /// Accuracy recomputed from the per-instance flags; must equal the
    /// stored value exactly.
    pub fn recomputed_accuracy(&self) -> f64 {
        if self.per_instance.is_empty() {
            return 0.0;
        }
        let correct = self.per_instance.iter().filter(|o| o.correct).count();
        correct as f64 / self.per_instance.len() as f64
    }
}
