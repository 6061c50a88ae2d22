//! Shared mock fixtures for the integration and acceptance suites.
//!
//! Both fixtures are hand-enumerated truth tables over a 15-instance
//! dataset (5 dev, 10 test under the fixed split seed):
//!
//! * complementary: three prompts, each 6/10 on test but wrong on
//!   different items, so majority voting reaches exactly 9/10;
//! * gap: the three highest-fidelity prompts are near-duplicates that
//!   answer identically (ensemble accuracy 6/10), while the diverse
//!   triple {0, 3, 4} is complementary (9/10), so volume-based selection
//!   beats top-n selection.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dipper::core::{Prompt, PromptSource, TaskInstance, TaskKind};
use dipper::evalharness::{load_dataset, split_dev_test, DatasetFormat};
use dipper::promptgen::write_pool_jsonl;
use dipper::providers::mock::{MockChatRule, MockChatSpec, MockEmbedSpec};

pub const SPLIT_SEED: u64 = 11;
pub const DEV_SIZE: usize = 5;

pub struct Fixture {
    pub config_path: PathBuf,
    pub runs_dir: PathBuf,
}

fn instance_query(i: usize) -> String {
    format!("Compute the value of item {i:02}.")
}

fn instance_gold(i: usize) -> String {
    format!("{}", i * 3 + 1)
}

fn write_dataset(dir: &Path) -> PathBuf {
    let path = dir.join("data.jsonl");
    let lines: Vec<String> = (0..15)
        .map(|i| {
            serde_json::json!({
                "id": format!("q{i:02}"),
                "question": instance_query(i),
                "answer": instance_gold(i),
            })
            .to_string()
        })
        .collect();
    std::fs::write(&path, lines.join("\n")).unwrap();
    path
}

/// Dev and test instances in split order, derived from the same seeded
/// split the pipeline will perform.
fn split_instances(data_path: &Path) -> (Vec<TaskInstance>, Vec<TaskInstance>) {
    let ds = load_dataset(data_path, DatasetFormat::Jsonl, TaskKind::Boxed).unwrap();
    let split = split_dev_test(&ds, DEV_SIZE, SPLIT_SEED).unwrap();
    (split.dev, split.test)
}

fn exact_rule(system: &str, user: &str, response: String) -> MockChatRule {
    MockChatRule {
        system: Some(system.to_string()),
        system_contains: None,
        user: Some(user.to_string()),
        user_contains: None,
        seed_index: None,
        response,
        truncated: false,
    }
}

fn boxed(answer: &str) -> String {
    format!("Working through it, the answer is \\boxed{{{answer}}}.")
}

fn write_json(path: &Path, value: &impl serde::Serialize) {
    std::fs::write(path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
}

fn write_pool(dir: &Path, texts: &[&str]) -> PathBuf {
    let path = dir.join("pool.jsonl");
    let pool = dipper::core::CandidatePool::new(
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Prompt::new(i, *t, PromptSource::Manual))
            .collect(),
        "mock-generator",
        "fixture",
    );
    write_pool_jsonl(&pool, &path).unwrap();
    path
}

fn write_config(
    dir: &Path,
    run_id: &str,
    method: &str,
    n: usize,
    chat_fixture: &Path,
    embed_fixture: &Path,
) -> PathBuf {
    let path = dir.join(format!("{run_id}.conf"));
    let text = format!(
        "provider.chat.base_url = mock://{chat}\n\
         provider.chat.model = mock-chat\n\
         provider.chat.max_concurrency = 8\n\
         provider.embedding.base_url = mock://{embed}\n\
         provider.embedding.model = mock-embed\n\
         pool.path = pool.jsonl\n\
         dataset.path = data.jsonl\n\
         dataset.task_kind = boxed\n\
         dev_size = {dev}\n\
         seed = {seed}\n\
         aggregator = mv\n\
         selection.method = {method}\n\
         selection.n = {n}\n\
         selection.alpha = 1.0\n\
         run_id = {run_id}\n\
         runs_dir = runs\n\
         cache_dir = cache\n",
        chat = chat_fixture.display(),
        embed = embed_fixture.display(),
        dev = DEV_SIZE,
        seed = SPLIT_SEED,
    );
    std::fs::write(&path, text).unwrap();
    path
}

/// Adds a mock reward endpoint to an existing fixture config: responses
/// carrying the gold answer score 9.0, everything else 1.0. With the
/// complementary truth table, best-of-n then resolves exactly the
/// instances where at least one constituent answered gold.
#[allow(dead_code)] // each integration test target compiles this module separately
pub fn add_reward_block(dir: &Path, fixture: &Fixture) {
    let data_path = dir.join("data.jsonl");
    let (_, test) = split_instances(&data_path);
    let rules: Vec<serde_json::Value> = test
        .iter()
        .map(|inst| {
            serde_json::json!({
                "question_contains": inst.query,
                "response_contains": format!("\\boxed{{{}}}", inst.gold_answer),
                "score": 9.0,
            })
        })
        .collect();
    let reward_path = dir.join("reward.json");
    std::fs::write(
        &reward_path,
        serde_json::json!({"rules": rules, "default": 1.0}).to_string(),
    )
    .unwrap();
    let mut config = std::fs::read_to_string(&fixture.config_path).unwrap();
    config = config.replace("aggregator = mv", "aggregator = bon");
    config.push_str(&format!(
        "provider.reward.base_url = mock://{}\nprovider.reward.model = mock-reward\n",
        reward_path.display()
    ));
    std::fs::write(&fixture.config_path, config).unwrap();
}

/// Three complementary prompts: solo test accuracy 3 x 0.6, majority vote
/// 0.9. Dev behavior gives every prompt fidelity 0.8.
pub fn complementary_fixture(dir: &Path, run_id: &str) -> Fixture {
    let texts = [
        "Work through the problem one step at a time.",
        "Restate the problem before solving it.",
        "Check each intermediate result as you go.",
    ];
    let data_path = write_dataset(dir);
    write_pool(dir, &texts);
    let (dev, test) = split_instances(&data_path);

    let mut rules = Vec::new();
    // dev: everyone right on the first four dev items, wrong on the fifth
    for (di, inst) in dev.iter().enumerate() {
        for text in &texts {
            let answer = if di < 4 {
                boxed(&inst.gold_answer)
            } else {
                boxed("7777")
            };
            rules.push(exact_rule(text, &inst.query, answer));
        }
    }
    // test: the wrong prompt rotates over items 0..8; item 9 defeats all
    for (ti, inst) in test.iter().enumerate() {
        for (pi, text) in texts.iter().enumerate() {
            let wrong = ti == 9 || pi == ti % 3;
            let answer = if wrong {
                boxed(&format!("8{pi}{ti}"))
            } else {
                boxed(&inst.gold_answer)
            };
            rules.push(exact_rule(text, &inst.query, answer));
        }
    }
    let chat_path = dir.join("chat.json");
    write_json(
        &chat_path,
        &MockChatSpec {
            rules,
            default: None,
            latency_ms: 0,
        },
    );

    let mut entries = BTreeMap::new();
    entries.insert(texts[0].to_string(), vec![1.0, 0.0, 0.0]);
    entries.insert(texts[1].to_string(), vec![0.0, 1.0, 0.0]);
    entries.insert(texts[2].to_string(), vec![0.0, 0.0, 1.0]);
    let embed_path = dir.join("embed.json");
    write_json(
        &embed_path,
        &MockEmbedSpec {
            dim: 3,
            entries,
            hash_fallback: false,
        },
    );

    let config_path = write_config(dir, run_id, "fasv", 3, &chat_path, &embed_path);
    Fixture {
        config_path,
        runs_dir: dir.join("runs"),
    }
}

/// Five prompts where the top three by fidelity (ids 0-2) are
/// near-duplicates in both embedding space and answer behavior, while ids
/// 3-4 are diverse and complementary with id 0. Greedy FASV at alpha 1
/// picks {0, 3, 4} (test accuracy 0.9); top-n picks {0, 1, 2} (0.6).
pub fn gap_fixture(dir: &Path, run_id: &str, method: &str) -> Fixture {
    let texts = [
        "Solve the problem with slow, careful steps.",
        "Solve the problem with slow and careful steps.",
        "Solve the problem using slow, careful steps.",
        "Estimate the answer first, then refine it.",
        "Translate the problem into equations and solve them.",
    ];
    let data_path = write_dataset(dir);
    write_pool(dir, &texts);
    let (dev, test) = split_instances(&data_path);

    let mut rules = Vec::new();
    // dev fidelities: ids 0-2 get 4/5, ids 3-4 get 3/5
    for (di, inst) in dev.iter().enumerate() {
        for (pi, text) in texts.iter().enumerate() {
            let right = if pi < 3 { di < 4 } else { di < 3 };
            let answer = if right {
                boxed(&inst.gold_answer)
            } else {
                boxed(&format!("7{pi}{di}"))
            };
            rules.push(exact_rule(text, &inst.query, answer));
        }
    }
    // test: ids 0-2 behave identically (wrong on 0,3,6,9 with a shared
    // wrong answer); id 3 wrong on 1,4,7,9; id 4 wrong on 2,5,8,9
    for (ti, inst) in test.iter().enumerate() {
        for (pi, text) in texts.iter().enumerate() {
            let wrong = match pi {
                0..=2 => ti % 3 == 0,
                3 => ti % 3 == 1 || ti == 9,
                _ => ti % 3 == 2 || ti == 9,
            };
            let answer = if wrong {
                // the near-duplicates share one wrong answer so they vote
                // as a bloc; the diverse prompts are wrong independently
                let tag = if pi < 3 { 0 } else { pi };
                boxed(&format!("8{tag}{ti}"))
            } else {
                boxed(&inst.gold_answer)
            };
            rules.push(exact_rule(text, &inst.query, answer));
        }
    }
    let chat_path = dir.join("chat.json");
    write_json(
        &chat_path,
        &MockChatSpec {
            rules,
            default: None,
            latency_ms: 0,
        },
    );

    let mut entries = BTreeMap::new();
    entries.insert(texts[0].to_string(), vec![1.0, 0.0, 0.0]);
    entries.insert(texts[1].to_string(), vec![0.999, 0.0447, 0.0]);
    entries.insert(texts[2].to_string(), vec![0.999, -0.0447, 0.0]);
    entries.insert(texts[3].to_string(), vec![0.0, 1.0, 0.0]);
    entries.insert(texts[4].to_string(), vec![0.0, 0.0, 1.0]);
    let embed_path = dir.join("embed.json");
    write_json(
        &embed_path,
        &MockEmbedSpec {
            dim: 3,
            entries,
            hash_fallback: false,
        },
    );

    let config_path = write_config(dir, run_id, method, 3, &chat_path, &embed_path);
    Fixture {
        config_path,
        runs_dir: dir.join("runs"),
    }
}
