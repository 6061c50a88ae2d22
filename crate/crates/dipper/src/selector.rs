//! Prompt subset selection: semantic volume, fidelity-adjusted semantic
//! volume (FASV), greedy maximization, an exhaustive oracle, and the
//! Top-n / Random+ / self-ensemble baselines.
//!
//! The semantic volume of a set of unit-norm prompt embeddings is the
//! log-determinant of their Gram matrix: the squared volume of the
//! parallelepiped the embeddings span. FASV adds `alpha` times the L1 norm
//! of the prompt fidelities, trading diversity against expected accuracy.
//! A rank-deficient Gram (duplicate or linearly dependent embeddings) maps
//! to the `f64::NEG_INFINITY` sentinel rather than an error, so greedy
//! comparisons exclude duplicates naturally.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{
    CandidatePool, EmbeddingMatrix, EnsembleSelection, FidelityVector, Prompt, SelectionMethod,
};

#[derive(Debug, Error)]
pub enum SelectorError {
    #[error("gram matrix needs rows <= dim: got {rows} rows in dimension {dim}")]
    ShapeError { rows: usize, dim: usize },
    #[error("fidelity length {fidelity} does not match embedding rows {rows}")]
    LengthMismatch { fidelity: usize, rows: usize },
    #[error("ensemble size {n} exceeds pool size {pool}")]
    NTooLarge { n: usize, pool: usize },
    #[error("ensemble size must be at least 1")]
    ZeroN,
    #[error("{subsets} subsets of size {n} exceed the exhaustive search budget of {budget}")]
    TooManySubsets {
        subsets: u128,
        n: usize,
        budget: u128,
    },
}

/// Parameters for one selection run. `seed` only matters for `randplus`;
/// `jitter` optionally adds `jitter * I` to the Gram matrix so that
/// rank-deficient subsets get finite (if meaningless) scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub n: usize,
    pub alpha: f64,
    pub method: SelectionMethod,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub jitter: f64,
}

impl SelectionConfig {
    pub fn new(n: usize, alpha: f64, method: SelectionMethod) -> Self {
        Self {
            n,
            alpha,
            method,
            seed: 0,
            jitter: 0.0,
        }
    }
}

/// Log-determinant of `m * m^T` via symmetric eigendecomposition.
///
/// Eigenvalues at or below the rank tolerance make the Gram singular and
/// yield `NEG_INFINITY` (unless `jitter > 0`, which regularizes first).
pub fn gram_log_det(m: &DMatrix<f64>, jitter: f64) -> f64 {
    let n = m.nrows();
    let mut gram = m * m.transpose();
    if jitter > 0.0 {
        for i in 0..n {
            gram[(i, i)] += jitter;
        }
    }
    let eigenvalues = gram.symmetric_eigen().eigenvalues;
    let max = eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let tol = max * n as f64 * f64::EPSILON;
    let mut log_det = 0.0;
    for &lambda in eigenvalues.iter() {
        if lambda <= tol {
            return f64::NEG_INFINITY;
        }
        log_det += lambda.ln();
    }
    log_det
}

fn rows_to_matrix(rows: &[&[f64]]) -> DMatrix<f64> {
    let n = rows.len();
    let p = rows[0].len();
    DMatrix::from_fn(n, p, |i, j| rows[i][j])
}

/// Semantic volume `log det(R R^T)` of an embedding matrix.
///
/// Requires `rows <= dim`; a wider-than-tall matrix cannot span positive
/// volume and is reported as a shape error rather than a sentinel.
pub fn semantic_volume(r: &EmbeddingMatrix) -> Result<f64, SelectorError> {
    if r.rows > r.dim {
        return Err(SelectorError::ShapeError {
            rows: r.rows,
            dim: r.dim,
        });
    }
    let refs: Vec<&[f64]> = r.data.iter().map(|v| v.as_slice()).collect();
    Ok(gram_log_det(&rows_to_matrix(&refs), 0.0))
}

/// Performance-adjusted embedding matrix: row i of `r` scaled by
/// `exp(alpha * u_i / 2)`. The result is intentionally not unit-norm.
pub fn adjusted_matrix(
    r: &EmbeddingMatrix,
    u: &FidelityVector,
    alpha: f64,
) -> Result<DMatrix<f64>, SelectorError> {
    if u.len() != r.rows {
        return Err(SelectorError::LengthMismatch {
            fidelity: u.len(),
            rows: r.rows,
        });
    }
    let mut m = DMatrix::from_fn(r.rows, r.dim, |i, j| r.data[i][j]);
    for i in 0..r.rows {
        let scale = (alpha * u.values[i] / 2.0).exp();
        for j in 0..r.dim {
            m[(i, j)] *= scale;
        }
    }
    Ok(m)
}

/// Fidelity-adjusted semantic volume: `semantic_volume(R) + alpha * ||u||_1`.
/// `NEG_INFINITY` from a rank-deficient Gram propagates through the sum.
pub fn fasv(r: &EmbeddingMatrix, u: &FidelityVector, alpha: f64) -> Result<f64, SelectorError> {
    if u.len() != r.rows {
        return Err(SelectorError::LengthMismatch {
            fidelity: u.len(),
            rows: r.rows,
        });
    }
    Ok(semantic_volume(r)? + alpha * u.l1())
}

/// FASV of the subset of pool rows given by `ids` (positions). Used by the
/// greedy/exhaustive loops and the alpha-sweep analysis, which score many
/// subsets of one fixed pool. Rows are evaluated in sorted-id order so the
/// same subset always gets the same floating-point score, whatever order
/// the caller discovered it in.
pub fn subset_fasv(
    r: &EmbeddingMatrix,
    u: &FidelityVector,
    alpha: f64,
    jitter: f64,
    ids: &[usize],
) -> f64 {
    let mut ordered = ids.to_vec();
    ordered.sort_unstable();
    let rows = r.select_rows(&ordered);
    let volume = gram_log_det(&rows_to_matrix(&rows), jitter);
    let fidelity_sum: f64 = ordered.iter().map(|&i| u.values[i]).sum();
    volume + alpha * fidelity_sum
}

fn check_selection_inputs(
    pool: &CandidatePool,
    r: &EmbeddingMatrix,
    u: &FidelityVector,
    cfg: &SelectionConfig,
) -> Result<(), SelectorError> {
    if u.len() != r.rows || pool.len() != r.rows {
        return Err(SelectorError::LengthMismatch {
            fidelity: u.len(),
            rows: r.rows,
        });
    }
    if cfg.n == 0 {
        return Err(SelectorError::ZeroN);
    }
    if cfg.n > pool.len() {
        return Err(SelectorError::NTooLarge {
            n: cfg.n,
            pool: pool.len(),
        });
    }
    if cfg.n > r.dim {
        return Err(SelectorError::ShapeError {
            rows: cfg.n,
            dim: r.dim,
        });
    }
    Ok(())
}

/// Position of the largest fidelity value, ties broken by lowest id.
fn argmax_fidelity(u: &FidelityVector) -> usize {
    let mut best = 0;
    for (i, &v) in u.values.iter().enumerate() {
        if v > u.values[best] {
            best = i;
        }
    }
    best
}

/// Greedy FASV maximization: seed with the highest-fidelity prompt, then
/// repeatedly add the candidate whose inclusion maximizes the subset's
/// fidelity-adjusted semantic volume, until `n` prompts are selected.
/// All ties break to the lowest prompt id.
pub fn greedy_select(
    pool: &CandidatePool,
    r: &EmbeddingMatrix,
    u: &FidelityVector,
    cfg: &SelectionConfig,
) -> Result<EnsembleSelection, SelectorError> {
    check_selection_inputs(pool, r, u, cfg)?;
    let mut chosen = vec![argmax_fidelity(u)];
    let mut remaining: Vec<usize> = (0..pool.len()).filter(|&i| i != chosen[0]).collect();

    let mut score = subset_fasv(r, u, cfg.alpha, cfg.jitter, &chosen);
    for _ in 1..cfg.n {
        // best_pos 0 covers the all-NEG_INFINITY case: lowest remaining id
        let mut best_pos = 0;
        let mut best_score = f64::NEG_INFINITY;
        let mut candidate = chosen.clone();
        candidate.push(0);
        for (pos, &k) in remaining.iter().enumerate() {
            *candidate.last_mut().unwrap() = k;
            let v = subset_fasv(r, u, cfg.alpha, cfg.jitter, &candidate);
            // strict > keeps the lowest id on ties (remaining is id-ordered)
            if v > best_score {
                best_score = v;
                best_pos = pos;
            }
        }
        chosen.push(remaining.remove(best_pos));
        score = best_score;
    }

    Ok(EnsembleSelection {
        prompt_ids: chosen,
        method: SelectionMethod::Fasv,
        alpha: cfg.alpha,
        score: if score.is_finite() { Some(score) } else { None },
        seed: None,
    })
}

const EXHAUSTIVE_BUDGET: u128 = 1_000_000;

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// Exact FASV maximization by enumerating every size-`n` subset. Ties break
/// to the lexicographically smallest id sequence. Refuses pools where the
/// subset count exceeds the search budget.
pub fn exhaustive_select(
    pool: &CandidatePool,
    r: &EmbeddingMatrix,
    u: &FidelityVector,
    cfg: &SelectionConfig,
) -> Result<EnsembleSelection, SelectorError> {
    check_selection_inputs(pool, r, u, cfg)?;
    let subsets = binomial(pool.len(), cfg.n);
    if subsets > EXHAUSTIVE_BUDGET {
        return Err(SelectorError::TooManySubsets {
            subsets,
            n: cfg.n,
            budget: EXHAUSTIVE_BUDGET,
        });
    }
    use itertools::Itertools;
    let mut best: Option<(Vec<usize>, f64)> = None;
    for subset in (0..pool.len()).combinations(cfg.n) {
        let v = subset_fasv(r, u, cfg.alpha, cfg.jitter, &subset);
        // strict > keeps the lexicographically-first subset on ties
        match &best {
            Some((_, bv)) if v <= *bv => {}
            _ => best = Some((subset, v)),
        }
    }
    let (prompt_ids, score) = best.expect("at least one subset");
    Ok(EnsembleSelection {
        prompt_ids,
        method: SelectionMethod::Exhaustive,
        alpha: cfg.alpha,
        score: if score.is_finite() { Some(score) } else { None },
        seed: None,
    })
}

/// The `n` prompts with the largest fidelity, ties broken by lowest id.
/// Prompt ids are the positions in the fidelity vector.
pub fn topn_select(
    u: &FidelityVector,
    cfg: &SelectionConfig,
) -> Result<EnsembleSelection, SelectorError> {
    if cfg.n == 0 {
        return Err(SelectorError::ZeroN);
    }
    if cfg.n > u.len() {
        return Err(SelectorError::NTooLarge {
            n: cfg.n,
            pool: u.len(),
        });
    }
    let mut order: Vec<usize> = (0..u.len()).collect();
    order.sort_by(|&a, &b| {
        u.values[b]
            .partial_cmp(&u.values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(cfg.n);
    Ok(EnsembleSelection {
        prompt_ids: order,
        method: SelectionMethod::Topn,
        alpha: cfg.alpha,
        score: None,
        seed: None,
    })
}

/// Seeded sampling of `n` prompts without replacement, with draw weights
/// proportional to fidelity (renormalized after each draw). Zero-fidelity
/// prompts are drawn only once every positive-fidelity prompt is exhausted,
/// then uniformly.
pub fn randplus_select(
    u: &FidelityVector,
    cfg: &SelectionConfig,
) -> Result<EnsembleSelection, SelectorError> {
    if cfg.n == 0 {
        return Err(SelectorError::ZeroN);
    }
    if cfg.n > u.len() {
        return Err(SelectorError::NTooLarge {
            n: cfg.n,
            pool: u.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut remaining: Vec<usize> = (0..u.len()).collect();
    let mut chosen = Vec::with_capacity(cfg.n);
    while chosen.len() < cfg.n {
        let weights: Vec<f64> = remaining.iter().map(|&i| u.values[i]).collect();
        let pick = if weights.iter().any(|&w| w > 0.0) {
            let dist = WeightedIndex::new(&weights).expect("positive weight present");
            dist.sample(&mut rng)
        } else {
            // all remaining have zero fidelity: uniform
            rng.random_range(0..remaining.len())
        };
        chosen.push(remaining.remove(pick));
    }
    Ok(EnsembleSelection {
        prompt_ids: chosen,
        method: SelectionMethod::Randplus,
        alpha: cfg.alpha,
        score: None,
        seed: Some(cfg.seed),
    })
}

/// The self-ensemble baseline: one prompt repeated `n` times. Downstream
/// inference distinguishes the slots via `seed_index`.
pub fn self_ensemble_select(baseline_prompt: &Prompt, n: usize) -> EnsembleSelection {
    EnsembleSelection {
        prompt_ids: vec![baseline_prompt.id; n],
        method: SelectionMethod::SelfEnsemble,
        alpha: 0.0,
        score: None,
        seed: None,
    }
}
