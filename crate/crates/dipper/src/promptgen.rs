//! Candidate-pool generation: seed exemplars, the brainstorm template, list
//! parsing, and bounded continuation rounds against a generator model.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{
    normalized_prompt_text, validate_pool, CandidatePool, Prompt, PromptSource, SamplingParams,
};
use crate::providers::{ChatProvider, ProviderConfig, ProviderError};

/// Items shorter than this are treated as list-parsing noise and dropped.
pub const MIN_ITEM_LEN: usize = 8;
/// Default number of continuation rounds when the generator under-delivers.
pub const DEFAULT_MAX_ROUNDS: u32 = 5;

#[derive(Debug, Error)]
pub enum PromptGenError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("generator output yielded zero parseable prompts")]
    ParseYieldedZero,
    #[error("generation request needs at least one exemplar")]
    NoExemplars,
    #[error("target_count {target} is below the exemplar count {exemplars}")]
    TargetTooSmall { target: usize, exemplars: usize },
}

/// A request to grow a candidate pool from exemplar prompts.
#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub exemplars: Vec<Prompt>,
    pub target_count: usize,
    pub generator: ProviderConfig,
    pub params: SamplingParams,
    pub max_rounds: u32,
}

impl GenerationRequest {
    pub fn new(exemplars: Vec<Prompt>, target_count: usize, generator: ProviderConfig) -> Self {
        Self {
            exemplars,
            target_count,
            generator,
            params: SamplingParams::default(),
            max_rounds: DEFAULT_MAX_ROUNDS,
        }
    }

    fn validate(&self) -> Result<(), PromptGenError> {
        if self.exemplars.is_empty() {
            return Err(PromptGenError::NoExemplars);
        }
        if self.target_count < self.exemplars.len() {
            return Err(PromptGenError::TargetTooSmall {
                target: self.target_count,
                exemplars: self.exemplars.len(),
            });
        }
        Ok(())
    }
}

const SEED_PROMPT_TEXTS: [&str; 7] = [
    "Let's think step-by-step to find the answer.",
    "Reflect on the question carefully before answering.",
    "Rephrase the question in your own words before responding.",
    "Actively reason through the question and answer each part systematically.",
    "Answer this question as a scientist would.",
    "Eliminate the obviously incorrect answers first and then choose the most likely correct answer.",
    "Analyze the context of the question and use relevant information to derive the answer.",
];

/// The seven basic reasoning prompts used as default exemplars, ids 0-6.
pub fn seed_prompts() -> Vec<Prompt> {
    SEED_PROMPT_TEXTS
        .iter()
        .enumerate()
        .map(|(i, t)| Prompt::new(i, *t, PromptSource::Seed))
        .collect()
}

/// Renders the brainstorm instruction with the exemplar list substituted
/// and the requested count in place of the default 200.
pub fn render_generation_prompt(req: &GenerationRequest) -> Result<String, PromptGenError> {
    req.validate()?;
    let exemplar_block = req
        .exemplars
        .iter()
        .map(|p| p.text.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    Ok(format!(
        "Here are some instruction examples:\n\n{exemplar_block}\n\nStudy the above examples and \
         brainstorm {count} similar instructions with detailed descriptions of different \
         reasoning behaviors that are helpful for reasoning. Those {count} proposed instructions \
         should be diverse enough.",
        count = req.target_count
    ))
}

static LIST_MARKER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:\d+\s*[.):]\s*|[-*•]\s+)").unwrap());

/// Splits generator output into prompt candidates: one item per
/// numbered/bulleted line (or line-wide bold header), with the enumeration
/// marker, any whole-item bold wrapper, and surrounding whitespace
/// stripped. Items shorter than [`MIN_ITEM_LEN`] characters are dropped.
pub fn parse_generated(text: &str) -> Vec<String> {
    let mut items = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let stripped = if let Some(m) = LIST_MARKER_RE.find(trimmed) {
            trimmed[m.end()..].trim()
        } else if trimmed.starts_with("**") {
            // the generated-prompt shape: a bold header leading the line
            trimmed
        } else {
            continue;
        };
        // unwrap bold markers only when they enclose the whole item
        let unwrapped = match stripped
            .strip_prefix("**")
            .and_then(|rest| rest.strip_suffix("**"))
        {
            Some(inner) if !inner.contains("**") => inner.trim(),
            _ => stripped,
        };
        if unwrapped.chars().count() >= MIN_ITEM_LEN {
            items.push(unwrapped.to_string());
        }
    }
    items
}

/// Outcome of pool generation, including whether the generator fell short
/// of the requested count after all continuation rounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolGeneration {
    pub pool: CandidatePool,
    pub requested: usize,
    pub rounds: u32,
    pub shortfall: bool,
}

/// Generates a deduplicated candidate pool. The generation prompt is sent
/// repeatedly (each round under a fresh `seed_index`) until `target_count`
/// distinct prompts accumulate or `max_rounds` is exhausted; a shortfall is
/// reported, not fatal.
pub fn generate_pool(
    req: &GenerationRequest,
    provider: &ChatProvider,
) -> Result<PoolGeneration, PromptGenError> {
    req.validate()?;
    let generation_prompt = render_generation_prompt(req)?;
    let mut texts: Vec<String> = Vec::new();
    let mut seen: Vec<String> = Vec::new();
    let mut rounds = 0;
    while texts.len() < req.target_count && rounds < req.max_rounds.max(1) {
        let params = req.params.with_seed_index(req.params.seed_index + rounds);
        let completion = provider.complete("", &generation_prompt, &params)?;
        rounds += 1;
        for item in parse_generated(&completion.text) {
            let norm = normalized_prompt_text(&item);
            if !seen.contains(&norm) {
                seen.push(norm);
                texts.push(item);
                if texts.len() == req.target_count {
                    break;
                }
            }
        }
    }
    if texts.is_empty() {
        return Err(PromptGenError::ParseYieldedZero);
    }
    let prompts: Vec<Prompt> = texts
        .into_iter()
        .enumerate()
        .map(|(i, t)| Prompt::new(i, t, PromptSource::Generated))
        .collect();
    let shortfall = prompts.len() < req.target_count;
    let pool = CandidatePool::new(
        prompts,
        &req.generator.model,
        format!("{} exemplar prompts", req.exemplars.len()),
    );
    validate_pool(&pool).expect("generated pool satisfies pool invariants");
    Ok(PoolGeneration {
        pool,
        requested: req.target_count,
        rounds,
        shortfall,
    })
}

/// Writes a pool as JSONL, one prompt record per line.
pub fn write_pool_jsonl(pool: &CandidatePool, path: &std::path::Path) -> std::io::Result<()> {
    use std::io::Write;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    for p in &pool.prompts {
        serde_json::to_writer(&mut f, p)?;
        writeln!(f)?;
    }
    Ok(())
}

/// Reads a pool from JSONL and validates it.
pub fn read_pool_jsonl(
    path: &std::path::Path,
    generator_model: &str,
    created_from: &str,
) -> Result<CandidatePool, std::io::Error> {
    let content = std::fs::read_to_string(path)?;
    let mut prompts = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Prompt = serde_json::from_str(line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), lineno + 1),
            )
        })?;
        prompts.push(p);
    }
    let pool = CandidatePool::new(prompts, generator_model, created_from);
    validate_pool(&pool)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    Ok(pool)
}
