//! Response aggregation: answer extraction and normalization, majority
//! voting, and Best-of-N reranking.
//!
//! Extraction finds the answer span inside free-form model output (last
//! `\boxed{...}` block, last numeric token, or last standalone choice
//! letter). Normalization maps equivalent surface forms to one canonical
//! string so that "0.5", "1/2" and "\frac{1}{2}" all count as the same vote.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use num_rational::Ratio;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{Aggregator, ConstituentResponse, FidelityVector, TaskKind};

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("no constituent produced an extractable answer")]
    NoExtractableAnswer,
    #[error("constituent {0} is missing a finite reward")]
    MissingReward(usize),
    #[error("cannot aggregate an empty response set")]
    NoResponses,
}

/// Outcome of aggregating one question's constituent responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationResult {
    pub final_answer: String,
    pub rule: Aggregator,
    /// Canonical answer -> vote count (majority voting only; empty for bon).
    pub vote_counts: BTreeMap<String, usize>,
    /// The constituent that decided the outcome: the tie-break constituent
    /// for mv ties, the max-reward constituent for bon, otherwise the
    /// lowest-id proposer of the final answer.
    pub winner_prompt_id: usize,
    pub tie_broken: bool,
}

static FINAL_NUMBER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[+-]?\d+(?:\.\d+)?(?:/\d+)?").unwrap());
static CHOICE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\(([A-Ea-e])\)|\b([A-E])\b").unwrap());
static FRAC_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\\d?frac\{([+-]?\d+)\}\{([+-]?\d+)\}$").unwrap());
static RATIONAL_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^([+-]?\d+)(?:\.(\d+))?(?:/(\d+))?$").unwrap());

/// Byte range and text of the answer span inside `raw_text`, if any.
fn extract_span(raw_text: &str, task_kind: TaskKind) -> Option<(std::ops::Range<usize>, String)> {
    match task_kind {
        TaskKind::Boxed => {
            let marker = "\\boxed{";
            let start = raw_text.rfind(marker)?;
            let content_start = start + marker.len();
            let mut depth = 1usize;
            for (offset, ch) in raw_text[content_start..].char_indices() {
                match ch {
                    '{' => depth += 1,
                    '}' => {
                        depth -= 1;
                        if depth == 0 {
                            let content = &raw_text[content_start..content_start + offset];
                            return Some((start..content_start + offset + 1, content.to_string()));
                        }
                    }
                    _ => {}
                }
            }
            None // unbalanced braces: no extractable answer
        }
        TaskKind::FinalNumber => {
            let m = FINAL_NUMBER_RE.find_iter(raw_text).last()?;
            Some((m.range(), m.as_str().to_string()))
        }
        TaskKind::ChoiceLetter => {
            let caps = CHOICE_RE.captures_iter(raw_text).last()?;
            let whole = caps.get(0).unwrap();
            let letter = caps
                .get(1)
                .or_else(|| caps.get(2))
                .map(|m| m.as_str().to_string())?;
            Some((whole.range(), letter))
        }
    }
}

/// Extracts the answer span from free-form output. Absence of a match is a
/// `None`, never an error.
pub fn extract_answer(raw_text: &str, task_kind: TaskKind) -> Option<String> {
    extract_span(raw_text, task_kind).map(|(_, s)| s)
}

fn parse_rational(s: &str) -> Option<Ratio<i128>> {
    if let Some(caps) = FRAC_RE.captures(s) {
        let numer: i128 = caps[1].parse().ok()?;
        let denom: i128 = caps[2].parse().ok()?;
        if denom == 0 {
            return None;
        }
        return Some(Ratio::new(numer, denom));
    }
    let caps = RATIONAL_RE.captures(s)?;
    let int_part: i128 = caps[1].parse().ok()?;
    let negative = s.starts_with('-');
    match (caps.get(2), caps.get(3)) {
        (None, None) => Some(Ratio::from_integer(int_part)),
        (Some(frac), None) => {
            let digits = frac.as_str();
            let scale = 10_i128.checked_pow(digits.len() as u32)?;
            let frac_val: i128 = digits.parse().ok()?;
            let magnitude = int_part.abs().checked_mul(scale)?.checked_add(frac_val)?;
            let signed = if negative { -magnitude } else { magnitude };
            Some(Ratio::new(signed, scale))
        }
        (None, Some(denom)) => {
            let d: i128 = denom.as_str().parse().ok()?;
            if d == 0 {
                return None;
            }
            Some(Ratio::new(int_part, d))
        }
        (Some(_), Some(_)) => None, // "1.5/2" is not a recognized numeric form
    }
}

fn canonical_rational(r: Ratio<i128>) -> String {
    if *r.denom() == 1 {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// Strips trailing periods and the whitespace they expose, to a fixpoint.
fn strip_trailing_periods(s: &str) -> &str {
    let mut t = s;
    loop {
        let stripped = t.trim_end().trim_end_matches('.').trim_end();
        if stripped == t {
            return t;
        }
        t = stripped;
    }
}

/// Canonicalizes an answer string: trims, strips `$`/commas/trailing
/// periods, collapses whitespace, uppercases choice letters, and reduces
/// numeric forms (decimals, `a/b`, `\frac{a}{b}`) to one canonical fraction
/// or integer. Idempotent.
pub fn normalize_answer(raw: &str, task_kind: TaskKind) -> String {
    let collapsed = raw
        .replace(['$', ','], "")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    let mut s = strip_trailing_periods(&collapsed).to_string();
    if task_kind == TaskKind::ChoiceLetter {
        // unwrap nested parens and re-strip anything they exposed
        loop {
            let unwrapped = s
                .strip_prefix('(')
                .and_then(|rest| rest.strip_suffix(')'))
                .map(|inner| strip_trailing_periods(inner.trim()).to_string());
            match unwrapped {
                Some(inner) if inner != s => s = inner,
                _ => break,
            }
        }
        return s.to_uppercase();
    }
    let candidate = s.strip_prefix('+').unwrap_or(&s);
    if let Some(r) = parse_rational(candidate) {
        return canonical_rational(r);
    }
    s
}

impl ConstituentResponse {
    /// Builds a response from raw model output: extracts the answer span,
    /// normalizes it, and keeps the remaining text as the reasoning part.
    pub fn from_raw(prompt_id: usize, raw_text: impl Into<String>, task_kind: TaskKind) -> Self {
        let raw_text = raw_text.into();
        let (reasoning, extracted_answer) = match extract_span(&raw_text, task_kind) {
            Some((range, span)) => {
                let mut reasoning = String::with_capacity(raw_text.len());
                reasoning.push_str(&raw_text[..range.start]);
                reasoning.push_str(&raw_text[range.end..]);
                let normalized = normalize_answer(&span, task_kind);
                let answer = if normalized.is_empty() {
                    None
                } else {
                    Some(normalized)
                };
                (reasoning.trim().to_string(), answer)
            }
            None => (raw_text.trim().to_string(), None),
        };
        Self {
            prompt_id,
            raw_text,
            reasoning,
            extracted_answer,
            reward: None,
        }
    }

    pub fn with_reward(mut self, reward: f64) -> Self {
        self.reward = Some(reward);
        self
    }
}

/// Best proposer of an answer: highest fidelity first, then lowest id.
fn best_proposer(ids: &[usize], u: Option<&FidelityVector>) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for &id in ids {
        let fidelity = u.and_then(|u| u.values.get(id).copied()).unwrap_or(0.0);
        if fidelity > best.0 || (fidelity == best.0 && id < best.1) {
            best = (fidelity, id);
        }
    }
    best
}

/// Majority voting: the most-proposed canonical answer wins. Responses with
/// no extractable answer are dropped from the vote. Count ties break to the
/// answer proposed by the highest-fidelity constituent, then lowest id.
pub fn majority_vote(
    responses: &[ConstituentResponse],
    u: Option<&FidelityVector>,
) -> Result<AggregationResult, AggregateError> {
    if responses.is_empty() {
        return Err(AggregateError::NoResponses);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut proposers: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for resp in responses {
        if let Some(ans) = &resp.extracted_answer {
            *counts.entry(ans.clone()).or_insert(0) += 1;
            proposers
                .entry(ans.clone())
                .or_default()
                .push(resp.prompt_id);
        }
    }
    if counts.is_empty() {
        return Err(AggregateError::NoExtractableAnswer);
    }
    let max_count = *counts.values().max().unwrap();
    let tied: Vec<&String> = counts
        .iter()
        .filter(|(_, &c)| c == max_count)
        .map(|(a, _)| a)
        .collect();
    let tie_broken = tied.len() > 1;
    let winner = tied
        .iter()
        .map(|ans| {
            let (fidelity, id) = best_proposer(&proposers[ans.as_str()], u);
            (*ans, fidelity, id)
        })
        .max_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.2.cmp(&a.2)) // lower id wins
        })
        .map(|(ans, _, _)| ans.clone())
        .unwrap();
    let winner_prompt_id = if tie_broken {
        best_proposer(&proposers[&winner], u).1
    } else {
        *proposers[&winner].iter().min().unwrap()
    };
    Ok(AggregationResult {
        final_answer: winner,
        rule: Aggregator::Mv,
        vote_counts: counts,
        winner_prompt_id,
        tie_broken,
    })
}

/// Best-of-N: the extracted answer of the highest-reward response. Reward
/// ties break to the lowest prompt id; an unextractable winner falls through
/// to the next-highest reward (flagged).
pub fn best_of_n(responses: &[ConstituentResponse]) -> Result<AggregationResult, AggregateError> {
    if responses.is_empty() {
        return Err(AggregateError::NoResponses);
    }
    for resp in responses {
        match resp.reward {
            Some(r) if r.is_finite() => {}
            _ => return Err(AggregateError::MissingReward(resp.prompt_id)),
        }
    }
    let mut order: Vec<&ConstituentResponse> = responses.iter().collect();
    order.sort_by(|a, b| {
        b.reward
            .unwrap()
            .partial_cmp(&a.reward.unwrap())
            .unwrap()
            .then(a.prompt_id.cmp(&b.prompt_id))
    });
    let mut fell_through = false;
    for (rank, resp) in order.iter().enumerate() {
        if let Some(ans) = &resp.extracted_answer {
            let reward_tied = order
                .iter()
                .enumerate()
                .any(|(i, other)| i != rank && other.reward == resp.reward);
            return Ok(AggregationResult {
                final_answer: ans.clone(),
                rule: Aggregator::Bon,
                vote_counts: BTreeMap::new(),
                winner_prompt_id: resp.prompt_id,
                tie_broken: fell_through || reward_tied,
            });
        }
        fell_through = true;
    }
    Err(AggregateError::NoExtractableAnswer)
}
