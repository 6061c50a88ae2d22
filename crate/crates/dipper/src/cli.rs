//! Pipeline front door: flat-file configuration, the subcommand
//! implementations, and run bookkeeping under `runs/<run-id>/`.
//!
//! Configuration is a single flat key-value file with dotted section
//! prefixes (`provider.chat.base_url = ...`), chosen for greppability.
//! Every subcommand is deterministic given the config, the seed, and a
//! warm cache. Exit codes: 0 success, 1 hard error, 2 degraded success
//! (prompt-generation shortfalls, length-truncated responses).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::AggregateError;
use crate::core::{
    hex_string, Aggregator, CandidatePool, EnsembleSelection, EvalReport, FidelityVector,
    SamplingParams, SelectionMethod, TaskKind,
};
use crate::evalharness::{
    self, load_dataset, load_exemplars, split_dev_test, Dataset, DatasetFormat, EnsembleContext,
    HarnessError,
};
use crate::fidelity::{score_pool, uninformed_fidelity, FidelityError, FidelityRecord};
use crate::promptgen::{
    generate_pool, read_pool_jsonl, seed_prompts, write_pool_jsonl, GenerationRequest,
    PromptGenError,
};
use crate::providers::{
    cache::ResponseCache, ChatProvider, EmbedProvider, ProviderConfig, ProviderError,
    RewardProvider,
};
use crate::selector::{
    exhaustive_select, greedy_select, randplus_select, self_ensemble_select, topn_select,
    SelectionConfig, SelectorError,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_DEGRADED: u8 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config {path}:{line}: {message}")]
    Config {
        path: String,
        line: usize,
        message: String,
    },
    #[error("config: {0}")]
    ConfigValue(String),
    #[error("provider block {block}: {source}")]
    Provider {
        block: &'static str,
        source: ProviderError,
    },
    #[error("stage {stage}: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn stage<E: std::fmt::Display>(name: &'static str) -> impl Fn(E) -> CliError {
    move |e| CliError::Stage {
        stage: name,
        message: e.to_string(),
    }
}

/// Fully resolved run configuration. Paths are resolved relative to the
/// config file's directory.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub chat: ProviderConfig,
    pub embedding: ProviderConfig,
    pub reward: ProviderConfig,
    pub generator: ProviderConfig,
    pub sampling: SamplingParams,
    pub selection: SelectionConfig,
    pub dataset_path: Option<PathBuf>,
    pub task_kind: TaskKind,
    pub exemplars_path: Option<PathBuf>,
    pub dev_size: usize,
    pub split_seed: u64,
    pub aggregator: Aggregator,
    pub run_id: String,
    pub runs_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub pool_path: Option<PathBuf>,
    pub gen_target_count: usize,
    pub gen_max_rounds: u32,
    pub sweep_alphas: Vec<f64>,
    pub sweep_trials: usize,
    pub sweep_n: Option<usize>,
    pub unique_k: Option<usize>,
}

impl RunConfig {
    pub fn run_dir(&self) -> PathBuf {
        self.runs_dir.join(&self.run_id)
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub run_id: Option<String>,
    pub seed: Option<u64>,
    pub pool: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub dev_size: Option<usize>,
    pub method: Option<SelectionMethod>,
    pub n: Option<usize>,
    pub alpha: Option<f64>,
    pub aggregator: Option<Aggregator>,
    pub alphas: Option<Vec<f64>>,
    pub trials: Option<usize>,
    pub unique_k: Option<usize>,
}

const PROVIDER_FIELDS: [&str; 7] = [
    "base_url",
    "model",
    "api_key_env",
    "timeout_s",
    "max_retries",
    "max_concurrency",
    "repetition_penalty_key",
];
const SAMPLING_FIELDS: [&str; 5] = [
    "temperature",
    "top_p",
    "repetition_penalty",
    "max_tokens",
    "seed_index",
];
const SELECTION_FIELDS: [&str; 5] = ["n", "alpha", "method", "seed", "jitter"];
const DATASET_FIELDS: [&str; 3] = ["path", "task_kind", "exemplars_path"];
const TOP_KEYS: [&str; 12] = [
    "dev_size",
    "seed",
    "aggregator",
    "run_id",
    "runs_dir",
    "cache_dir",
    "pool.path",
    "gen.target_count",
    "gen.max_rounds",
    "sweep.alphas",
    "sweep.trials",
    "sweep.n",
];

fn known_key(key: &str) -> bool {
    if let Some(rest) = key.strip_prefix("provider.") {
        for block in ["chat", "embedding", "reward", "generator"] {
            if let Some(field) = rest.strip_prefix(&format!("{block}.")) {
                return PROVIDER_FIELDS.contains(&field);
            }
        }
        return false;
    }
    if let Some(field) = key.strip_prefix("sampling.") {
        return SAMPLING_FIELDS.contains(&field);
    }
    if let Some(field) = key.strip_prefix("selection.") {
        return SELECTION_FIELDS.contains(&field);
    }
    if let Some(field) = key.strip_prefix("dataset.") {
        return DATASET_FIELDS.contains(&field);
    }
    if key == "unique_k" {
        return true;
    }
    TOP_KEYS.contains(&key)
}

/// Parses the flat `key = value` format: one pair per line, `#` comments,
/// later keys override earlier ones, unknown keys rejected.
pub fn parse_flat_config(text: &str, path: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config {
                path: path.to_string(),
                line: idx + 1,
                message: "expected `key = value`".into(),
            });
        };
        let key = key.trim().to_string();
        if !known_key(&key) {
            return Err(CliError::Config {
                path: path.to_string(),
                line: idx + 1,
                message: format!("unknown key {key:?}"),
            });
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

struct ConfigReader<'a> {
    map: &'a BTreeMap<String, String>,
    base_dir: PathBuf,
}

impl ConfigReader<'_> {
    fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|e| CliError::ConfigValue(format!("{key} = {raw:?}: {e}"))),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|raw| {
            let p = PathBuf::from(raw);
            if p.is_absolute() || raw.starts_with("mock://") {
                p
            } else {
                self.base_dir.join(p)
            }
        })
    }

    fn provider(&self, block: &str) -> Result<ProviderConfig, CliError> {
        let prefix = format!("provider.{block}");
        let mut cfg = ProviderConfig::new(self.get(&format!("{prefix}.base_url")).unwrap_or(""));
        // mock fixture paths resolve like any other configured path
        if let Some(rest) = cfg.base_url.clone().strip_prefix("mock://") {
            if !rest.starts_with('/') {
                cfg.base_url = format!("mock://{}", self.base_dir.join(rest).display());
            }
        }
        if let Some(m) = self.get(&format!("{prefix}.model")) {
            cfg.model = m.to_string();
        }
        if let Some(k) = self.get(&format!("{prefix}.api_key_env")) {
            cfg.api_key_env = k.to_string();
        }
        cfg.timeout_s = self.parse(&format!("{prefix}.timeout_s"), cfg.timeout_s)?;
        cfg.max_retries = self.parse(&format!("{prefix}.max_retries"), cfg.max_retries)?;
        cfg.max_concurrency =
            self.parse(&format!("{prefix}.max_concurrency"), cfg.max_concurrency)?;
        if let Some(k) = self.get(&format!("{prefix}.repetition_penalty_key")) {
            cfg.repetition_penalty_key = k.to_string();
        }
        Ok(cfg)
    }
}

fn filesystem_safe(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Loads and validates a run configuration. `config_path` of `None` yields
/// the built-in defaults (useful only for cache-purge and report).
pub fn load_config(
    config_path: Option<&Path>,
    overrides: &Overrides,
) -> Result<RunConfig, CliError> {
    let (text, base_dir, path_label) = match config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::ConfigValue(format!("reading {}: {e}", p.display())))?;
            let base = p
                .parent()
                .map(|d| d.to_path_buf())
                .unwrap_or_else(|| PathBuf::from("."));
            (text, base, p.display().to_string())
        }
        None => (String::new(), PathBuf::from("."), "<defaults>".to_string()),
    };
    let map = parse_flat_config(&text, &path_label)?;
    let reader = ConfigReader {
        map: &map,
        base_dir,
    };

    let sampling = SamplingParams {
        temperature: reader.parse("sampling.temperature", 0.7)?,
        top_p: reader.parse("sampling.top_p", 0.8)?,
        repetition_penalty: reader.parse("sampling.repetition_penalty", 1.05)?,
        max_tokens: reader.parse("sampling.max_tokens", 512)?,
        seed_index: reader.parse("sampling.seed_index", 0)?,
    };
    let method: SelectionMethod = match overrides.method {
        Some(m) => m,
        None => reader
            .get("selection.method")
            .unwrap_or("fasv")
            .parse()
            .map_err(CliError::ConfigValue)?,
    };
    let selection = SelectionConfig {
        n: overrides
            .n
            .map(Ok)
            .unwrap_or(reader.parse("selection.n", 5))?,
        alpha: overrides
            .alpha
            .map(Ok)
            .unwrap_or(reader.parse("selection.alpha", 1.0))?,
        method,
        seed: reader.parse("selection.seed", 0)?,
        jitter: reader.parse("selection.jitter", 0.0)?,
    };
    let task_kind: TaskKind = reader
        .get("dataset.task_kind")
        .unwrap_or("boxed")
        .parse()
        .map_err(CliError::ConfigValue)?;
    let aggregator: Aggregator = match overrides.aggregator {
        Some(a) => a,
        None => reader
            .get("aggregator")
            .unwrap_or("mv")
            .parse()
            .map_err(CliError::ConfigValue)?,
    };

    let run_id = overrides
        .run_id
        .clone()
        .or_else(|| reader.get("run_id").map(String::from))
        .unwrap_or_else(|| default_run_id(&text));
    if !filesystem_safe(&run_id) {
        return Err(CliError::ConfigValue(format!(
            "run_id {run_id:?} is not filesystem-safe"
        )));
    }

    let runs_dir = reader
        .path("runs_dir")
        .unwrap_or_else(|| reader.base_dir.join("runs"));
    let cache_dir = reader
        .path("cache_dir")
        .unwrap_or_else(|| runs_dir.join(&run_id).join("cache"));

    let sweep_alphas = match &overrides.alphas {
        Some(a) => a.clone(),
        None => match reader.get("sweep.alphas") {
            None => vec![0.0, 0.5, 1.0, 2.0, 5.0],
            Some(raw) => raw
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|e| CliError::ConfigValue(format!("sweep.alphas: {e}")))
                })
                .collect::<Result<_, _>>()?,
        },
    };

    let cfg = RunConfig {
        chat: reader.provider("chat")?,
        embedding: reader.provider("embedding")?,
        reward: reader.provider("reward")?,
        generator: reader.provider("generator")?,
        sampling,
        selection,
        dataset_path: overrides
            .data
            .clone()
            .or_else(|| reader.path("dataset.path")),
        task_kind,
        exemplars_path: reader.path("dataset.exemplars_path"),
        dev_size: overrides
            .dev_size
            .map(Ok)
            .unwrap_or(reader.parse("dev_size", 20))?,
        split_seed: overrides.seed.map(Ok).unwrap_or(reader.parse("seed", 0))?,
        aggregator,
        run_id,
        runs_dir,
        cache_dir,
        pool_path: overrides.pool.clone().or_else(|| reader.path("pool.path")),
        gen_target_count: reader.parse("gen.target_count", 200)?,
        gen_max_rounds: reader.parse("gen.max_rounds", 5)?,
        sweep_alphas,
        sweep_trials: overrides
            .trials
            .map(Ok)
            .unwrap_or(reader.parse("sweep.trials", 50))?,
        sweep_n: match reader.get("sweep.n") {
            None => None,
            Some(raw) => Some(
                raw.parse()
                    .map_err(|e| CliError::ConfigValue(format!("sweep.n = {raw:?}: {e}")))?,
            ),
        },
        unique_k: match overrides.unique_k {
            Some(k) => Some(k),
            None => match reader.get("unique_k") {
                None => None,
                Some(raw) => Some(
                    raw.parse()
                        .map_err(|e| CliError::ConfigValue(format!("unique_k = {raw:?}: {e}")))?,
                ),
            },
        },
    };

    // referenced paths must exist at validation time
    for (key, path) in [
        ("dataset.path", &cfg.dataset_path),
        ("pool.path", &cfg.pool_path),
        ("dataset.exemplars_path", &cfg.exemplars_path),
    ] {
        if let Some(p) = path {
            if !p.exists() {
                return Err(CliError::ConfigValue(format!(
                    "{key} = {} does not exist",
                    p.display()
                )));
            }
        }
    }
    Ok(cfg)
}

fn default_run_id(config_text: &str) -> String {
    use sha2::{Digest, Sha256};
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let mut hasher = Sha256::new();
    hasher.update(config_text.as_bytes());
    hasher.update(nanos.to_le_bytes());
    hex_string(&hasher.finalize())[..12].to_string()
}

/// Run metadata: timestamps and provider call counts live here, never in
/// report.json, so identical reruns stay byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub created_at_unix_ms: u128,
    pub chat_calls: u64,
    pub embed_calls: u64,
    pub reward_calls: u64,
    pub tie_breaks: usize,
    #[serde(default)]
    pub truncated: usize,
}

/// On-disk selection record: the selection plus its explicit size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub method: SelectionMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub prompt_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl SelectionRecord {
    fn from_selection(sel: &EnsembleSelection) -> Self {
        Self {
            method: sel.method,
            n: Some(sel.n()),
            alpha: sel.alpha,
            seed: sel.seed,
            prompt_ids: sel.prompt_ids.clone(),
            score: sel.score,
        }
    }

    fn into_selection(self) -> Result<EnsembleSelection, CliError> {
        if let Some(n) = self.n {
            if n != self.prompt_ids.len() {
                return Err(CliError::ConfigValue(format!(
                    "selection record: n = {n} but {} prompt ids",
                    self.prompt_ids.len()
                )));
            }
        }
        let sel = EnsembleSelection {
            prompt_ids: self.prompt_ids,
            method: self.method,
            alpha: self.alpha,
            score: self.score,
            seed: self.seed,
        };
        sel.validate()
            .map_err(|e| CliError::ConfigValue(format!("selection record: {e}")))?;
        Ok(sel)
    }
}

fn write_meta(dir: &Path, meta: &RunMeta) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    let mut bytes = serde_json::to_vec_pretty(meta).expect("meta serializes");
    bytes.push(b'\n');
    std::fs::write(dir.join("meta.json"), bytes)?;
    Ok(())
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Pool metadata sidecar written next to the generated pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolMeta {
    pub generator_model: String,
    pub created_from: String,
    pub params: SamplingParams,
    pub requested: usize,
    pub obtained: usize,
    pub rounds: u32,
    pub shortfall: bool,
}

/// `gen-prompts`: generate a candidate pool and persist it as JSONL.
/// Exit 0 on success, 2 when the generator fell short of the target.
pub fn cmd_gen_prompts(cfg: &RunConfig, pool_out: Option<&Path>) -> Result<u8, CliError> {
    if cfg.generator.base_url.is_empty() {
        return Err(CliError::ConfigValue(
            "provider.generator.base_url is not configured".into(),
        ));
    }
    let provider =
        ChatProvider::from_config(&cfg.generator, Some(&cfg.cache_dir)).map_err(|source| {
            CliError::Provider {
                block: "provider.generator",
                source,
            }
        })?;
    let mut req =
        GenerationRequest::new(seed_prompts(), cfg.gen_target_count, cfg.generator.clone());
    req.params = cfg.sampling.clone();
    req.max_rounds = cfg.gen_max_rounds;
    let gen = generate_pool(&req, &provider).map_err(|e| match e {
        PromptGenError::Provider(source) => CliError::Provider {
            block: "provider.generator",
            source,
        },
        other => stage("gen-prompts")(other),
    })?;
    let out_path = pool_out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.run_dir().join("pool.jsonl"));
    write_pool_jsonl(&gen.pool, &out_path)?;
    let meta = PoolMeta {
        generator_model: cfg.generator.model.clone(),
        created_from: gen.pool.created_from.clone(),
        params: cfg.sampling.clone(),
        requested: gen.requested,
        obtained: gen.pool.len(),
        rounds: gen.rounds,
        shortfall: gen.shortfall,
    };
    let mut meta_bytes = serde_json::to_vec_pretty(&meta).expect("pool meta serializes");
    meta_bytes.push(b'\n');
    std::fs::write(out_path.with_extension("meta.json"), meta_bytes)?;
    println!(
        "pool: {} prompts ({} requested) in {} rounds -> {}",
        gen.pool.len(),
        gen.requested,
        gen.rounds,
        out_path.display()
    );
    if gen.shortfall {
        eprintln!(
            "warning: generator produced {} of {} requested prompts",
            gen.pool.len(),
            gen.requested
        );
        return Ok(EXIT_DEGRADED);
    }
    Ok(EXIT_OK)
}

fn load_pool(cfg: &RunConfig) -> Result<CandidatePool, CliError> {
    let path = cfg
        .pool_path
        .clone()
        .unwrap_or_else(|| cfg.run_dir().join("pool.jsonl"));
    if !path.exists() {
        return Err(CliError::ConfigValue(format!(
            "no pool at {}; run gen-prompts or set pool.path",
            path.display()
        )));
    }
    read_pool_jsonl(&path, &cfg.chat.model, "loaded from file").map_err(CliError::Io)
}

fn load_split_dataset(cfg: &RunConfig) -> Result<(Dataset, crate::fidelity::DevSplit), CliError> {
    let path = cfg
        .dataset_path
        .as_ref()
        .ok_or_else(|| CliError::ConfigValue("dataset.path is not configured".into()))?;
    let mut ds =
        load_dataset(path, DatasetFormat::Jsonl, cfg.task_kind).map_err(stage("load-dataset"))?;
    if let Some(ex_path) = &cfg.exemplars_path {
        let exemplars = load_exemplars(ex_path).map_err(stage("load-dataset"))?;
        ds = ds.with_exemplars(&exemplars);
    }
    let split = split_dev_test(&ds, cfg.dev_size, cfg.split_seed).map_err(stage("split"))?;
    Ok((ds, split))
}

fn chat_provider(cfg: &RunConfig) -> Result<ChatProvider, CliError> {
    if cfg.chat.base_url.is_empty() {
        return Err(CliError::ConfigValue(
            "provider.chat.base_url is not configured".into(),
        ));
    }
    ChatProvider::from_config(&cfg.chat, Some(&cfg.cache_dir)).map_err(|source| {
        CliError::Provider {
            block: "provider.chat",
            source,
        }
    })
}

fn embed_provider(cfg: &RunConfig) -> Result<EmbedProvider, CliError> {
    if cfg.embedding.base_url.is_empty() {
        return Err(CliError::ConfigValue(
            "provider.embedding.base_url is not configured".into(),
        ));
    }
    EmbedProvider::from_config(&cfg.embedding, Some(&cfg.cache_dir)).map_err(|source| {
        CliError::Provider {
            block: "provider.embedding",
            source,
        }
    })
}

fn reward_provider(cfg: &RunConfig) -> Result<Option<RewardProvider>, CliError> {
    if cfg.reward.base_url.is_empty() {
        return Ok(None);
    }
    RewardProvider::from_config(&cfg.reward, Some(&cfg.cache_dir))
        .map(Some)
        .map_err(|source| CliError::Provider {
            block: "provider.reward",
            source,
        })
}

fn write_json_file<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::ConfigValue(format!("parsing {}: {e}", path.display())))
}

/// `score`: fidelity vector over the pool from the dev split.
pub fn cmd_score(cfg: &RunConfig) -> Result<u8, CliError> {
    let pool = load_pool(cfg)?;
    let (ds, split) = load_split_dataset(cfg)?;
    let provider = chat_provider(cfg)?;
    let fidelity = score_pool(
        &pool,
        &split,
        &provider,
        &cfg.sampling,
        cfg.task_kind,
        &ds.exemplar_block,
    )
    .map_err(|e| match e {
        FidelityError::Provider(source) => CliError::Provider {
            block: "provider.chat",
            source,
        },
        other => stage("score")(other),
    })?;
    let record = FidelityRecord::new(&pool, &fidelity);
    write_json_file(&record, &cfg.run_dir().join("fidelity.json"))?;
    println!(
        "fidelity: {} prompts scored on {} dev instances (mean {:.3})",
        fidelity.len(),
        split.dev.len(),
        fidelity.l1() / fidelity.len() as f64
    );
    Ok(EXIT_OK)
}

fn load_fidelity(cfg: &RunConfig, pool: &CandidatePool) -> Result<FidelityVector, CliError> {
    let path = cfg.run_dir().join("fidelity.json");
    if path.exists() {
        let record: FidelityRecord = read_json_file(&path)?;
        if record.pool_digest != pool.digest() {
            return Err(CliError::ConfigValue(format!(
                "fidelity at {} was scored against a different pool",
                path.display()
            )));
        }
        record
            .to_vector()
            .map_err(|e| CliError::ConfigValue(e.to_string()))
    } else {
        uninformed_fidelity(pool.len()).map_err(|e| stage("select")(e))
    }
}

fn select_with_method(
    cfg: &RunConfig,
    pool: &CandidatePool,
    u: &FidelityVector,
) -> Result<(EnsembleSelection, u64), CliError> {
    let sel_err = |e: SelectorError| stage("select")(e);
    match cfg.selection.method {
        SelectionMethod::Fasv | SelectionMethod::Exhaustive => {
            let embedder = embed_provider(cfg)?;
            let texts: Vec<String> = pool.prompts.iter().map(|p| p.text.clone()).collect();
            let r = embedder
                .embed(&texts)
                .map_err(|source| CliError::Provider {
                    block: "provider.embedding",
                    source,
                })?;
            let sel = if cfg.selection.method == SelectionMethod::Fasv {
                greedy_select(pool, &r, u, &cfg.selection).map_err(sel_err)?
            } else {
                exhaustive_select(pool, &r, u, &cfg.selection).map_err(sel_err)?
            };
            Ok((sel, embedder.backend_calls()))
        }
        SelectionMethod::Topn => Ok((topn_select(u, &cfg.selection).map_err(sel_err)?, 0)),
        SelectionMethod::Randplus => Ok((randplus_select(u, &cfg.selection).map_err(sel_err)?, 0)),
        SelectionMethod::SelfEnsemble => {
            // the baseline prompt is the best single prompt by fidelity
            let mut best = 0;
            for (i, &v) in u.values.iter().enumerate() {
                if v > u.values[best] {
                    best = i;
                }
            }
            Ok((
                self_ensemble_select(&pool.prompts[best], cfg.selection.n),
                0,
            ))
        }
        SelectionMethod::Manual => Err(CliError::ConfigValue(
            "manual selections are written by hand; point eval --selection at the file".into(),
        )),
    }
}

/// `select`: choose the ensemble prompt subset and persist it.
pub fn cmd_select(cfg: &RunConfig) -> Result<u8, CliError> {
    let pool = load_pool(cfg)?;
    let u = load_fidelity(cfg, &pool)?;
    let (selection, _) = select_with_method(cfg, &pool, &u)?;
    write_json_file(
        &SelectionRecord::from_selection(&selection),
        &cfg.run_dir().join("selection.json"),
    )?;
    println!(
        "selection: method={} n={} alpha={} ids={:?} score={:?}",
        selection.method,
        selection.n(),
        selection.alpha,
        selection.prompt_ids,
        selection.score
    );
    Ok(EXIT_OK)
}

fn run_selection(
    cfg: &RunConfig,
    pool: &CandidatePool,
    split: &crate::fidelity::DevSplit,
    ds: &Dataset,
    selection: &EnsembleSelection,
    fidelity: Option<&FidelityVector>,
) -> Result<(EvalReport, usize, RunMeta), CliError> {
    let chat = chat_provider(cfg)?;
    let reward = reward_provider(cfg)?;
    if cfg.aggregator == Aggregator::Bon && reward.is_none() {
        return Err(CliError::ConfigValue(
            "aggregator bon needs provider.reward.base_url".into(),
        ));
    }
    let ctx = EnsembleContext {
        chat: &chat,
        reward: reward.as_ref(),
        params: cfg.sampling.clone(),
        aggregator: cfg.aggregator,
        fidelity,
        task_kind: cfg.task_kind,
        exemplar_block: ds.exemplar_block.clone(),
        run_id: cfg.run_id.clone(),
    };
    let (report, traces, stats) = evalharness::run_ensemble_traced(selection, pool, split, &ctx)
        .map_err(|e| match e {
            HarnessError::Provider(source) => CliError::Provider {
                block: "provider.chat",
                source,
            },
            HarnessError::Aggregate(AggregateError::MissingReward(id)) => CliError::Stage {
                stage: "run",
                message: format!("constituent {id} is missing a reward"),
            },
            other => stage("run")(other),
        })?;
    let run_dir = cfg.run_dir();
    let responses_path = run_dir.join("responses.jsonl");
    if responses_path.exists() {
        std::fs::remove_file(&responses_path)?;
    }
    evalharness::append_responses_jsonl(&traces, &responses_path).map_err(stage("run"))?;
    evalharness::write_report_json(&report, &run_dir.join("report.json")).map_err(stage("run"))?;
    evalharness::write_report_csv(&report, &run_dir.join("report.csv")).map_err(stage("run"))?;
    let meta = RunMeta {
        run_id: cfg.run_id.clone(),
        created_at_unix_ms: now_ms(),
        chat_calls: chat.backend_calls(),
        embed_calls: 0,
        reward_calls: reward.as_ref().map(|r| r.backend_calls()).unwrap_or(0),
        tie_breaks: stats.tie_breaks,
        truncated: stats.truncated,
    };
    Ok((report, stats.tie_breaks, meta))
}

/// `eval`: run one persisted selection over the test split and report.
pub fn cmd_eval(cfg: &RunConfig, selection_path: Option<&Path>) -> Result<u8, CliError> {
    let pool = load_pool(cfg)?;
    let (ds, split) = load_split_dataset(cfg)?;
    let sel_path = selection_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.run_dir().join("selection.json"));
    let record: SelectionRecord = read_json_file(&sel_path)?;
    let mut selection = record.into_selection()?;
    if let Some(k) = cfg.unique_k {
        let unique: Vec<usize> = selection.prompt_ids.iter().take(k).copied().collect();
        selection = evalharness::unique_k_selection(&unique, selection.n(), cfg.split_seed)
            .map_err(stage("eval"))?;
    }
    // tie-breaks use the scored fidelity when this run has one; a stale
    // or mismatched fidelity file is still a hard error
    let fidelity = if cfg.run_dir().join("fidelity.json").exists() {
        Some(load_fidelity(cfg, &pool)?)
    } else {
        None
    };
    let (report, _, meta) = run_selection(cfg, &pool, &split, &ds, &selection, fidelity.as_ref())?;
    let truncated = meta.truncated;
    write_meta(&cfg.run_dir(), &meta)?;
    println!(
        "eval: method={} n={} accuracy={:.4} over {} test instances",
        report.selection.method,
        report.selection.n(),
        report.accuracy,
        report.per_instance.len()
    );
    if truncated > 0 {
        eprintln!("warning: {truncated} constituent responses were length-truncated");
        return Ok(EXIT_DEGRADED);
    }
    Ok(EXIT_OK)
}

/// `run`: the full pipeline: (generate or load pool) -> score -> select ->
/// run -> report, everything persisted under `runs/<run-id>/`. Idempotent
/// under a warm cache.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<u8, CliError> {
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir)?;

    // stage: pool
    let mut exit = EXIT_OK;
    let pool = if cfg.pool_path.is_some() {
        let pool = load_pool(cfg)?;
        write_pool_jsonl(&pool, &run_dir.join("pool.jsonl"))?;
        pool
    } else {
        // a generation shortfall degrades the pipeline exit code
        exit = exit.max(cmd_gen_prompts(cfg, Some(&run_dir.join("pool.jsonl")))?);
        read_pool_jsonl(&run_dir.join("pool.jsonl"), &cfg.chat.model, "generated")
            .map_err(CliError::Io)?
    };

    // stage: score
    let (ds, split) = load_split_dataset(cfg)?;
    let chat = chat_provider(cfg)?;
    let fidelity = score_pool(
        &pool,
        &split,
        &chat,
        &cfg.sampling,
        cfg.task_kind,
        &ds.exemplar_block,
    )
    .map_err(|e| match e {
        FidelityError::Provider(source) => CliError::Provider {
            block: "provider.chat",
            source,
        },
        other => stage("score")(other),
    })?;
    let score_calls = chat.backend_calls();
    write_json_file(
        &FidelityRecord::new(&pool, &fidelity),
        &run_dir.join("fidelity.json"),
    )?;

    // stage: select
    let (mut selection, embed_calls) = select_with_method(cfg, &pool, &fidelity)?;
    if let Some(k) = cfg.unique_k {
        let unique: Vec<usize> = selection.prompt_ids.iter().take(k).copied().collect();
        selection = evalharness::unique_k_selection(&unique, selection.n(), cfg.split_seed)
            .map_err(stage("select"))?;
    }
    write_json_file(
        &SelectionRecord::from_selection(&selection),
        &run_dir.join("selection.json"),
    )?;

    // stage: run + eval
    let (report, _, mut meta) =
        run_selection(cfg, &pool, &split, &ds, &selection, Some(&fidelity))?;
    meta.chat_calls += score_calls;
    meta.embed_calls += embed_calls;
    let truncated = meta.truncated;
    write_meta(&run_dir, &meta)?;
    println!(
        "pipeline: run {} method={} n={} accuracy={:.4}",
        cfg.run_id,
        report.selection.method,
        report.selection.n(),
        report.accuracy
    );
    if truncated > 0 {
        eprintln!("warning: {truncated} constituent responses were length-truncated");
        exit = exit.max(EXIT_DEGRADED);
    }
    Ok(exit)
}

/// `sweep-alpha`: correlate subset volume with ensemble accuracy across an
/// alpha grid; writes `plotdata.csv` and prints the best alpha.
pub fn cmd_sweep_alpha(cfg: &RunConfig) -> Result<u8, CliError> {
    let pool = load_pool(cfg)?;
    let (ds, split) = load_split_dataset(cfg)?;
    let u = load_fidelity(cfg, &pool)?;
    let embedder = embed_provider(cfg)?;
    let texts: Vec<String> = pool.prompts.iter().map(|p| p.text.clone()).collect();
    let r = embedder
        .embed(&texts)
        .map_err(|source| CliError::Provider {
            block: "provider.embedding",
            source,
        })?;
    let chat = chat_provider(cfg)?;
    let reward = reward_provider(cfg)?;
    let n = cfg.sweep_n.unwrap_or(cfg.selection.n);
    let points = evalharness::sweep_alpha(
        &pool,
        &u,
        &r,
        &cfg.sweep_alphas,
        cfg.sweep_trials,
        n,
        cfg.split_seed,
        |ids| {
            let sel = EnsembleSelection {
                prompt_ids: ids.to_vec(),
                method: SelectionMethod::Manual,
                alpha: 0.0,
                score: None,
                seed: None,
            };
            let ctx = EnsembleContext {
                chat: &chat,
                reward: reward.as_ref(),
                params: cfg.sampling.clone(),
                aggregator: cfg.aggregator,
                fidelity: Some(&u),
                task_kind: cfg.task_kind,
                exemplar_block: ds.exemplar_block.clone(),
                run_id: cfg.run_id.clone(),
            };
            evalharness::run_ensemble(&sel, &pool, &split, &ctx).map(|r| r.accuracy)
        },
    )
    .map_err(stage("sweep-alpha"))?;
    let run_dir = cfg.run_dir();
    evalharness::write_plotdata_alpha(&points, &run_dir.join("plotdata.csv"))
        .map_err(stage("sweep-alpha"))?;
    for p in &points {
        println!("alpha={} rho={:.4}", p.alpha, p.rho);
    }
    if let Some(best) = evalharness::pick_alpha(&points) {
        println!("best alpha: {best}");
    }
    Ok(EXIT_OK)
}

/// `report`: human-readable summary of a finished run, plus plot data.
pub fn cmd_report(cfg: &RunConfig, format: &str) -> Result<u8, CliError> {
    let run_dir = cfg.run_dir();
    let report_path = run_dir.join("report.json");
    if !report_path.exists() {
        return Err(CliError::UnknownRun(cfg.run_id.clone()));
    }
    let report: EvalReport = read_json_file(&report_path)?;
    let meta: Option<RunMeta> = read_json_file(&run_dir.join("meta.json")).ok();
    let tie_breaks = meta.as_ref().map(|m| m.tie_breaks).unwrap_or(0);
    let rows = [(
        report.selection.n(),
        report.selection.method,
        report.accuracy,
    )];
    evalharness::write_plotdata_size(&rows, &run_dir.join("plotdata.csv"))
        .map_err(stage("report"))?;
    if format == "csv" {
        println!("method,n,alpha,accuracy,tie_breaks");
        println!(
            "{},{},{},{},{}",
            report.selection.method,
            report.selection.n(),
            report.selection.alpha,
            report.accuracy,
            tie_breaks
        );
    } else {
        println!("run        {}", report.run_id);
        println!("method     {}", report.selection.method);
        println!("n          {}", report.selection.n());
        println!("alpha      {}", report.selection.alpha);
        println!("aggregator {}", report.aggregator);
        println!("instances  {}", report.per_instance.len());
        println!("tie_breaks {tie_breaks}");
        println!("accuracy   {:.4}", report.accuracy);
    }
    Ok(EXIT_OK)
}

/// `cache-purge`: manually evict every cached response.
pub fn cmd_cache_purge(cfg: &RunConfig) -> Result<u8, CliError> {
    let cache = ResponseCache::new(&cfg.cache_dir);
    let removed = cache.purge()?;
    println!(
        "purged {removed} cache entries from {}",
        cfg.cache_dir.display()
    );
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_config_parses_dotted_keys() {
        let text = "# comment\nprovider.chat.base_url = http://x\n\nselection.n = 3\n";
        let map = parse_flat_config(text, "t").unwrap();
        assert_eq!(map["provider.chat.base_url"], "http://x");
        assert_eq!(map["selection.n"], "3");
    }

    #[test]
    fn unknown_keys_are_rejected_with_line_numbers() {
        let err = parse_flat_config("selection.nn = 3", "t").unwrap_err();
        match err {
            CliError::Config {
                line: 1, message, ..
            } => assert!(message.contains("selection.nn")),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_flat_config("provider.chat.base_url http://x", "t").unwrap_err();
        assert!(matches!(err, CliError::Config { line: 1, .. }));
    }

    #[test]
    fn later_keys_override_earlier_ones() {
        let map = parse_flat_config("selection.n = 3\nselection.n = 7", "t").unwrap();
        assert_eq!(map["selection.n"], "7");
    }

    #[test]
    fn defaults_apply_when_config_is_empty() {
        let cfg = load_config(None, &Overrides::default()).unwrap();
        assert_eq!(cfg.sampling.temperature, 0.7);
        assert_eq!(cfg.sampling.max_tokens, 512);
        assert_eq!(cfg.selection.n, 5);
        assert_eq!(cfg.selection.method, SelectionMethod::Fasv);
        assert_eq!(cfg.dev_size, 20);
        assert_eq!(cfg.chat.api_key_env, "DIPPER_API_KEY");
        assert_eq!(cfg.gen_target_count, 200);
        assert_eq!(cfg.sweep_alphas, vec![0.0, 0.5, 1.0, 2.0, 5.0]);
    }

    #[test]
    fn run_id_must_be_filesystem_safe() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "run_id = ../evil\n").unwrap();
        assert!(matches!(
            load_config(Some(&path), &Overrides::default()),
            Err(CliError::ConfigValue(_))
        ));
    }

    #[test]
    fn referenced_paths_must_exist() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "dataset.path = missing.jsonl\n").unwrap();
        let err = load_config(Some(&path), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("does not exist"));
    }

    #[test]
    fn relative_paths_resolve_against_the_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("data.jsonl"), "").unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "dataset.path = data.jsonl\n").unwrap();
        let cfg = load_config(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(cfg.dataset_path.unwrap(), dir.path().join("data.jsonl"));
    }

    #[test]
    fn overrides_beat_config_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(
            &path,
            "selection.n = 3\nselection.method = topn\nrun_id = from-config\n",
        )
        .unwrap();
        let overrides = Overrides {
            n: Some(9),
            method: Some(SelectionMethod::Randplus),
            run_id: Some("from-flag".into()),
            ..Overrides::default()
        };
        let cfg = load_config(Some(&path), &overrides).unwrap();
        assert_eq!(cfg.selection.n, 9);
        assert_eq!(cfg.selection.method, SelectionMethod::Randplus);
        assert_eq!(cfg.run_id, "from-flag");
    }

    #[test]
    fn missing_run_is_reported_as_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(
            &path,
            format!("run_id = nope\nruns_dir = {}\n", dir.path().display()),
        )
        .unwrap();
        let cfg = load_config(Some(&path), &Overrides::default()).unwrap();
        assert!(matches!(
            cmd_report(&cfg, "table"),
            Err(CliError::UnknownRun(id)) if id == "nope"
        ));
    }
}
