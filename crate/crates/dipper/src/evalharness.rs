//! Dataset ingestion, dev/test splitting, ensemble execution, accuracy, and
//! the volume/accuracy correlation analyses.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{
    best_of_n, majority_vote, normalize_answer, AggregateError, AggregationResult,
};
use crate::core::{
    Aggregator, CandidatePool, ConstituentResponse, CoreError, EmbeddingMatrix, EnsembleSelection,
    EvalReport, FidelityVector, InstanceOutcome, SamplingParams, SelectionMethod, TaskInstance,
    TaskKind,
};
use crate::fidelity::{compose_user_message, DevSplit};
use crate::providers::{ChatJob, ChatProvider, ProviderError, RewardProvider};
use crate::selector;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate instance id {0}")]
    DuplicateInstanceId(String),
    #[error("dev size {dev_size} must be smaller than the dataset size {total}")]
    DevTooLarge { dev_size: usize, total: usize },
    #[error("sequences have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two points for a rank correlation")]
    TooShort,
    #[error("rank correlation is undefined for a constant sequence")]
    DegenerateConstantInput,
    #[error("alpha sweep needs at least 10 trials, got {0}")]
    TooFewTrials(usize),
    #[error("selection references prompt {0}, which is not in the pool")]
    PromptNotInPool(usize),
    #[error("unique-k needs 1 <= k <= ensemble size, got k={k}, size={size}")]
    BadUniqueK { k: usize, size: usize },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Selector(#[from] selector::SelectorError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Jsonl,
}

/// A benchmark dataset plus its fixed few-shot exemplar block. The block is
/// shared by every prompt and method so that the reasoning prompt is the
/// only varying conditioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub id: String,
    pub instances: Vec<TaskInstance>,
    pub task_kind: TaskKind,
    pub shots: usize,
    pub exemplar_block: String,
}

#[derive(Debug, Deserialize)]
struct RawInstance {
    id: String,
    question: String,
    answer: String,
    #[serde(default)]
    choices: Option<Vec<String>>,
    #[serde(default)]
    subject: Option<String>,
}

/// Loads a JSONL dataset: one `{"id", "question", "answer", "choices"?,
/// "subject"?}` record per line. Malformed lines are reported with their
/// 1-based line number.
pub fn load_dataset(
    path: &Path,
    format: DatasetFormat,
    task_kind: TaskKind,
) -> Result<Dataset, HarnessError> {
    let DatasetFormat::Jsonl = format;
    let content = std::fs::read_to_string(path)?;
    let mut instances = Vec::new();
    let mut seen_ids: Vec<String> = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawInstance = serde_json::from_str(line).map_err(|e| HarnessError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let instance = TaskInstance {
            id: raw.id,
            query: raw.question,
            gold_answer: raw.answer,
            choices: raw.choices,
            subject: raw.subject,
        };
        instance.validate().map_err(|e| HarnessError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if seen_ids.contains(&instance.id) {
            return Err(HarnessError::DuplicateInstanceId(instance.id));
        }
        seen_ids.push(instance.id.clone());
        instances.push(instance);
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    Ok(Dataset {
        id,
        instances,
        task_kind,
        shots: 0,
        exemplar_block: String::new(),
    })
}

impl Dataset {
    /// Attaches few-shot exemplars; the block is rendered once and fixed
    /// for all questions and methods. `shots` equals the exemplar count by
    /// construction.
    pub fn with_exemplars(mut self, exemplars: &[(String, String)]) -> Self {
        self.shots = exemplars.len();
        self.exemplar_block = exemplars
            .iter()
            .map(|(q, a)| format!("Question: {q}\nAnswer: {a}\n\n"))
            .collect();
        self
    }
}

/// Loads exemplars from a JSONL file of `{"question", "answer"}` records.
pub fn load_exemplars(path: &Path) -> Result<Vec<(String, String)>, HarnessError> {
    #[derive(Deserialize)]
    struct RawExemplar {
        question: String,
        answer: String,
    }
    let content = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExemplar = serde_json::from_str(line).map_err(|e| HarnessError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push((raw.question, raw.answer));
    }
    Ok(out)
}

/// Seeded uniform dev/test split. Dev instances keep dataset order; the
/// remainder becomes the test side. Deterministic per seed.
pub fn split_dev_test(ds: &Dataset, dev_size: usize, seed: u64) -> Result<DevSplit, HarnessError> {
    if dev_size >= ds.instances.len() {
        return Err(HarnessError::DevTooLarge {
            dev_size,
            total: ds.instances.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, ds.instances.len(), dev_size).into_vec();
    picked.sort_unstable();
    let dev: Vec<TaskInstance> = picked.iter().map(|&i| ds.instances[i].clone()).collect();
    let test: Vec<TaskInstance> = ds
        .instances
        .iter()
        .enumerate()
        .filter(|(i, _)| !picked.contains(i))
        .map(|(_, inst)| inst.clone())
        .collect();
    Ok(DevSplit {
        dev,
        test,
        seed,
        dev_size,
        dataset_id: ds.id.clone(),
    })
}

/// Everything `run_ensemble` needs besides the selection and data.
pub struct EnsembleContext<'a> {
    pub chat: &'a ChatProvider,
    pub reward: Option<&'a RewardProvider>,
    pub params: SamplingParams,
    pub aggregator: Aggregator,
    pub fidelity: Option<&'a FidelityVector>,
    pub task_kind: TaskKind,
    pub exemplar_block: String,
    pub run_id: String,
}

/// One line of the per-question aggregation trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub instance_id: String,
    pub prompt_id: usize,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(rename = "final")]
    pub final_answer: String,
    pub rule: Aggregator,
}

/// Constituent slots for a selection: `(prompt id, seed index)` per slot.
/// Selections with repeated ids (self-ensemble, unique-k padding) get one
/// seed index per slot so the cache distinguishes the draws.
fn selection_slots(sel: &EnsembleSelection, base: &SamplingParams) -> Vec<(usize, u32)> {
    let repeats = sel.has_repeats();
    sel.prompt_ids
        .iter()
        .enumerate()
        .map(|(slot, &pid)| {
            let seed_index = if repeats {
                base.seed_index + slot as u32
            } else {
                base.seed_index
            };
            (pid, seed_index)
        })
        .collect()
}

/// Counters gathered while running an ensemble.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    /// Instances whose aggregation needed a tie-break.
    pub tie_breaks: usize,
    /// Constituent completions the provider reported as length-stopped.
    pub truncated: usize,
}

/// Runs the selected ensemble over the test split: `n` completions per
/// instance (the prompt in the system role, exemplars plus query in the
/// user role), aggregated to one answer and compared with gold after
/// normalization. Accuracy is the exact mean of the correctness flags.
pub fn run_ensemble(
    sel: &EnsembleSelection,
    pool: &CandidatePool,
    split: &DevSplit,
    ctx: &EnsembleContext,
) -> Result<EvalReport, HarnessError> {
    run_ensemble_traced(sel, pool, split, ctx).map(|(report, _, _)| report)
}

/// As [`run_ensemble`], additionally returning the per-constituent trace
/// and run counters.
pub fn run_ensemble_traced(
    sel: &EnsembleSelection,
    pool: &CandidatePool,
    split: &DevSplit,
    ctx: &EnsembleContext,
) -> Result<(EvalReport, Vec<TraceRecord>, RunStats), HarnessError> {
    sel.validate()?;
    for &pid in &sel.prompt_ids {
        if pool.prompt(pid).is_none() {
            return Err(HarnessError::PromptNotInPool(pid));
        }
    }
    let slots = selection_slots(sel, &ctx.params);
    let jobs: Vec<ChatJob> = split
        .test
        .iter()
        .flat_map(|instance| {
            slots.iter().map(|&(pid, seed_index)| ChatJob {
                system: pool.prompt(pid).unwrap().text.clone(),
                user: compose_user_message(&ctx.exemplar_block, &instance.query),
                params: ctx.params.with_seed_index(seed_index),
            })
        })
        .collect();
    let mut results = ctx.chat.complete_batch(&jobs);
    if let Some(pos) = results.iter().position(|r| r.is_err()) {
        return Err(results.swap_remove(pos).unwrap_err().into());
    }
    let completions: Vec<_> = results.into_iter().map(|r| r.unwrap()).collect();

    let n = slots.len();
    let mut per_instance = Vec::with_capacity(split.test.len());
    let mut traces = Vec::with_capacity(split.test.len() * n);
    let mut correct_count = 0usize;
    let mut stats = RunStats::default();
    for (instance_idx, instance) in split.test.iter().enumerate() {
        let mut responses: Vec<ConstituentResponse> = Vec::with_capacity(n);
        for (slot_idx, &(pid, _)) in slots.iter().enumerate() {
            let completion = &completions[instance_idx * n + slot_idx];
            if completion.truncated {
                stats.truncated += 1;
            }
            responses.push(ConstituentResponse::from_raw(
                pid,
                &completion.text,
                ctx.task_kind,
            ));
        }
        if ctx.aggregator == Aggregator::Bon {
            let reward = ctx.reward.ok_or_else(|| {
                ProviderError::InvalidRequest("best-of-n needs a reward provider".into())
            })?;
            let pairs: Vec<(String, String)> = responses
                .iter()
                .map(|r| (instance.query.clone(), r.raw_text.clone()))
                .collect();
            let mut scores = reward.score_batch(&pairs);
            if let Some(pos) = scores.iter().position(|r| r.is_err()) {
                return Err(scores.swap_remove(pos).unwrap_err().into());
            }
            for (resp, score) in responses.iter_mut().zip(scores) {
                resp.reward = Some(score.unwrap());
            }
        }
        let aggregation = match ctx.aggregator {
            Aggregator::Mv => majority_vote(&responses, ctx.fidelity),
            Aggregator::Bon => best_of_n(&responses),
        };
        // a question where nothing was extractable is simply incorrect
        let aggregation = match aggregation {
            Ok(a) => a,
            Err(AggregateError::NoExtractableAnswer) => AggregationResult {
                final_answer: String::new(),
                rule: ctx.aggregator,
                vote_counts: Default::default(),
                winner_prompt_id: sel.prompt_ids[0],
                tie_broken: false,
            },
            Err(e) => return Err(e.into()),
        };
        if aggregation.tie_broken {
            stats.tie_breaks += 1;
        }
        let gold = normalize_answer(&instance.gold_answer, ctx.task_kind);
        let correct = !aggregation.final_answer.is_empty() && aggregation.final_answer == gold;
        if correct {
            correct_count += 1;
        }
        for resp in &responses {
            traces.push(TraceRecord {
                instance_id: instance.id.clone(),
                prompt_id: resp.prompt_id,
                raw_text: resp.raw_text.clone(),
                extracted: resp.extracted_answer.clone(),
                reward: resp.reward,
                final_answer: aggregation.final_answer.clone(),
                rule: ctx.aggregator,
            });
        }
        per_instance.push(InstanceOutcome {
            instance_id: instance.id.clone(),
            final_answer: aggregation.final_answer,
            correct,
        });
    }
    let accuracy = if per_instance.is_empty() {
        0.0
    } else {
        correct_count as f64 / per_instance.len() as f64
    };
    let report = EvalReport {
        selection: sel.clone(),
        aggregator: ctx.aggregator,
        per_instance,
        accuracy,
        run_id: ctx.run_id.clone(),
    };
    Ok((report, traces, stats))
}

/// The unique-k protocol: keep `k` distinct prompts and pad to the full
/// ensemble size by seeded sampling with replacement from those k. The
/// result is a manual slot list (repeats allowed, like a self-ensemble).
pub fn unique_k_selection(
    ids: &[usize],
    ensemble_size: usize,
    seed: u64,
) -> Result<EnsembleSelection, HarnessError> {
    let k = ids.len();
    if k == 0 || k > ensemble_size {
        return Err(HarnessError::BadUniqueK {
            k,
            size: ensemble_size,
        });
    }
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots: Vec<usize> = ids.to_vec();
    while slots.len() < ensemble_size {
        slots.push(ids[rng.random_range(0..k)]);
    }
    Ok(EnsembleSelection {
        prompt_ids: slots,
        method: SelectionMethod::Manual,
        alpha: 0.0,
        score: None,
        seed: Some(seed),
    })
}

/// Ranks with average ranks for ties.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        xs[a]
            .partial_cmp(&xs[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // positions i..=j share the average of ranks i+1..=j+1
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of the average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, HarnessError> {
    if xs.len() != ys.len() {
        return Err(HarnessError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(HarnessError::TooShort);
    }
    if xs.iter().all(|&x| x == xs[0]) || ys.iter().all(|&y| y == ys[0]) {
        return Err(HarnessError::DegenerateConstantInput);
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mean_x: f64 = rx.iter().sum::<f64>() / n;
    let mean_y: f64 = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for i in 0..rx.len() {
        let dx = rx[i] - mean_x;
        let dy = ry[i] - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    Ok(cov / (var_x * var_y).sqrt())
}

/// One point of an alpha sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweepPoint {
    pub alpha: f64,
    pub rho: f64,
}

/// For each alpha, samples `trials` random size-`n` subsets, evaluates each
/// subset's ensemble accuracy once via `eval`, and correlates the subsets'
/// fidelity-adjusted semantic volumes with those accuracies. The same
/// sampled subsets are reused across alphas, so differences in rho come
/// from the volume term alone.
#[allow(clippy::too_many_arguments)]
pub fn sweep_alpha<E>(
    pool: &CandidatePool,
    u: &FidelityVector,
    r: &EmbeddingMatrix,
    alphas: &[f64],
    trials: usize,
    n: usize,
    seed: u64,
    mut eval: E,
) -> Result<Vec<AlphaSweepPoint>, HarnessError>
where
    E: FnMut(&[usize]) -> Result<f64, HarnessError>,
{
    if trials < 10 {
        return Err(HarnessError::TooFewTrials(trials));
    }
    u.check_len(pool.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subsets: Vec<Vec<usize>> = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut ids = rand::seq::index::sample(&mut rng, pool.len(), n).into_vec();
        ids.sort_unstable();
        subsets.push(ids);
    }
    // evaluate each distinct subset once
    let mut accuracies: Vec<f64> = Vec::with_capacity(trials);
    let mut memo: Vec<(Vec<usize>, f64)> = Vec::new();
    for ids in &subsets {
        let hit = memo.iter().find(|(k, _)| k == ids).map(|(_, v)| *v);
        let acc = match hit {
            Some(v) => v,
            None => {
                let v = eval(ids)?;
                memo.push((ids.clone(), v));
                v
            }
        };
        accuracies.push(acc);
    }
    let mut points = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let volumes: Vec<f64> = subsets
            .iter()
            .map(|ids| selector::subset_fasv(r, u, alpha, 0.0, ids))
            .collect();
        let rho = spearman(&volumes, &accuracies)?;
        points.push(AlphaSweepPoint { alpha, rho });
    }
    Ok(points)
}

/// The alpha with the highest rank correlation; ties prefer the smaller
/// alpha.
pub fn pick_alpha(points: &[AlphaSweepPoint]) -> Option<f64> {
    points
        .iter()
        .fold(None, |best: Option<&AlphaSweepPoint>, p| match best {
            Some(b) if p.rho > b.rho || (p.rho == b.rho && p.alpha < b.alpha) => Some(p),
            Some(b) => Some(b),
            None => Some(p),
        })
        .map(|p| p.alpha)
}

/// Writes an eval report as canonical JSON (stable field order, trailing
/// newline). Contains no timestamps, so identical runs are byte-identical.
pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(report).expect("report serializes");
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Per-instance rows as CSV: `instance_id, final_answer, correct`.
pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(io_from_csv)?;
    w.write_record(["instance_id", "final_answer", "correct"])
        .map_err(io_from_csv)?;
    for row in &report.per_instance {
        w.write_record([
            row.instance_id.as_str(),
            row.final_answer.as_str(),
            if row.correct { "true" } else { "false" },
        ])
        .map_err(io_from_csv)?;
    }
    w.flush()?;
    Ok(())
}

/// Alpha-sweep plot data: columns `alpha, rho`.
pub fn write_plotdata_alpha(points: &[AlphaSweepPoint], path: &Path) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(io_from_csv)?;
    w.write_record(["alpha", "rho"]).map_err(io_from_csv)?;
    for p in points {
        w.write_record([p.alpha.to_string(), p.rho.to_string()])
            .map_err(io_from_csv)?;
    }
    w.flush()?;
    Ok(())
}

/// Size-sweep plot data: columns `n, method, accuracy`.
pub fn write_plotdata_size(
    rows: &[(usize, SelectionMethod, f64)],
    path: &Path,
) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(io_from_csv)?;
    w.write_record(["n", "method", "accuracy"])
        .map_err(io_from_csv)?;
    for (n, method, accuracy) in rows {
        w.write_record([n.to_string(), method.to_string(), accuracy.to_string()])
            .map_err(io_from_csv)?;
    }
    w.flush()?;
    Ok(())
}

/// Appends trace records to `responses.jsonl`.
pub fn append_responses_jsonl(traces: &[TraceRecord], path: &Path) -> Result<(), HarnessError> {
    use std::io::Write;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    for t in traces {
        serde_json::to_writer(&mut f, t).map_err(std::io::Error::other)?;
        writeln!(f)?;
    }
    Ok(())
}

fn io_from_csv(e: csv::Error) -> HarnessError {
    HarnessError::Io(std::io::Error::other(e))
}
