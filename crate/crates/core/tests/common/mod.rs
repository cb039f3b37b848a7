#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use calm_core::evaluation::{load_gold, GoldRecord};
use calm_core::lm::{Noise, Reply, Rule, ScriptedBackend};
use calm_core::pipeline::{load_queries, QueryRecord};
use calm_core::retrieval::{build_index, load_corpus, Bm25Params, Corpus, Index};

pub const SUBJECT_PATTERN: &str = r"^What is (.+) known for\?$";
pub const NOISE_STATEMENT: &str = "{SUBJECT} is also known for a glass lighthouse that sings at dusk.";

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub struct Fixture {
    pub corpus: Corpus,
    pub index: Index,
    pub queries: Vec<QueryRecord>,
    pub gold: Vec<GoldRecord>,
}

pub fn fixture(name: &str) -> Fixture {
    let dir = data_dir().join(name);
    let corpus = load_corpus(&dir.join("corpus.jsonl")).expect("corpus");
    let index = build_index(&corpus, Bm25Params::default()).expect("index");
    Fixture {
        queries: load_queries(&dir.join("queries.jsonl")).expect("queries"),
        gold: load_gold(&dir.join("gold.jsonl")).expect("gold"),
        corpus,
        index,
    }
}

/// Reads every sentence about the question's subject from the shown
/// documents, optionally inventing one unsupported sentence.
pub fn reader(id: &str, noise: Option<(f64, u64)>) -> Arc<ScriptedBackend> {
    let noise = noise.map(|(probability, seed)| Noise {
        probability,
        statement: NOISE_STATEMENT.into(),
        seed,
    });
    Arc::new(
        ScriptedBackend::new(
            id,
            vec![Rule::always(Reply::ReadSentences {
                subject_pattern: Some(SUBJECT_PATTERN.into()),
                noise,
            })],
        )
        .expect("valid script"),
    )
}

pub fn text_backend(id: &str, text: &str) -> Arc<ScriptedBackend> {
    Arc::new(ScriptedBackend::new(id, vec![Rule::always(Reply::Text { text: text.into() })]).expect("valid script"))
}

pub fn responses(path: &str) -> BTreeMap<String, String> {
    let raw = std::fs::read_to_string(data_dir().join(path)).expect("responses file");
    serde_json::from_str(&raw).expect("responses json")
}
