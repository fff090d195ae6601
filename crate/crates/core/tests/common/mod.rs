//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use std::sync::Arc;

use promptgrad::datasets::{QAItem, Splits, TaskFormat};
use promptgrad::extract::ExtractionRule;
use promptgrad::gateway::{BackendConfig, Gateway, MockBackend, MockScript, ResponseCache};
use promptgrad::textgrad::{EngineSettings, Engines, Stage};

pub const LETTERS: [&str; 4] = ["A", "B", "C", "D"];

pub fn mc_item(id: &str, gold: &str) -> QAItem {
    QAItem::multiple_choice(
        id,
        format!("Question {id}?"),
        [
            ("A", "first"),
            ("B", "second"),
            ("C", "third"),
            ("D", "fourth"),
        ],
        gold,
    )
}

pub fn mc_items(prefix: &str, n: usize) -> Vec<QAItem> {
    (0..n)
        .map(|i| mc_item(&format!("{prefix}{i:04}"), LETTERS[i % 4]))
        .collect()
}

pub fn splits(train: usize, dev: usize) -> Splits {
    Splits {
        train: mc_items("train-", train),
        dev: mc_items("dev-", dev),
        test: Vec::new(),
    }
}

pub fn mc() -> (TaskFormat, ExtractionRule) {
    let f = TaskFormat::multiple_choice("ABCD").unwrap();
    let r = ExtractionRule::for_format(&f);
    (f, r)
}

/// The item id from a rendered user turn ("Question <id>?").
pub fn item_id(user_text: &str) -> &str {
    user_text
        .split("Question ")
        .nth(1)
        .and_then(|rest| rest.split('?').next())
        .unwrap_or("")
}

/// Gold letter of an item built by [`mc_items`].
pub fn gold_of(id: &str) -> &'static str {
    let n: usize = id.rsplit('-').next().unwrap().parse().unwrap();
    LETTERS[n % 4]
}

/// A wrong letter for the item.
pub fn wrong_of(id: &str) -> &'static str {
    let g = gold_of(id);
    LETTERS.iter().find(|l| **l != g).unwrap()
}

pub struct Rig {
    pub task: Arc<MockBackend>,
    pub backward: Arc<MockBackend>,
    pub engines: Engines,
}

fn gateway(backend: Arc<MockBackend>, cache: Option<Arc<ResponseCache>>) -> Arc<Gateway> {
    let mut cfg = BackendConfig::mock();
    cfg.retry_limit = 0;
    Arc::new(Gateway::new(backend, &cfg).unwrap().with_cache(cache))
}

pub fn rig(
    task: MockScript,
    backward: MockScript,
    cache: Option<Arc<ResponseCache>>,
    parallelism: usize,
) -> Rig {
    let task = Arc::new(MockBackend::new(task).unwrap());
    let backward = Arc::new(MockBackend::new(backward).unwrap());
    let engines = Engines::new(
        gateway(task.clone(), cache.clone()),
        EngineSettings::task("task-model"),
        gateway(backward.clone(), cache),
        EngineSettings::backward("backward-model"),
        parallelism,
    );
    Rig {
        task,
        backward,
        engines,
    }
}

pub fn marker(stage: Stage) -> &'static str {
    stage.marker().unwrap()
}

/// Backward script with fixed feedback and the given rewrite reply.
pub fn rewriter(rewrite: &str) -> MockScript {
    MockScript::new()
        .contains(marker(Stage::TgdStep), rewrite)
        .catch_all("Feedback: be more careful.")
}
