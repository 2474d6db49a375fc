#![allow(dead_code)]

use std::collections::HashSet;

use semgen::config::{ModelConfig, ModelKind};
use semgen::data::{parse_corpus, DictionaryEntry, Vocabulary};
use semgen::embeddings::{CharConfig, ContextualProvider, EmbeddingTable};
use semgen::model::{build_examples, Example, Model};

pub const CORPUS: &str = r#"{"id":"e1","word":"check","pos":"noun","sense_id":"check.1","definition":"a written order to pay money","contexts":["he paid the checks to the bank","the bank took a check"],"usage":"he wrote a check to the bank"}
{"id":"e2","word":"check","pos":"verb","sense_id":"check.2","definition":"to examine something","contexts":["check the river side"],"usage":"check the order"}
{"id":"e3","word":"bank","pos":"noun","sense_id":"bank.1","definition":"the side of a river","contexts":["he sat on the bank of the river"],"usage":"the river bank"}
{"id":"e4","word":"order","pos":"noun","sense_id":"order.1","definition":"a request to pay","contexts":["the order was paid"],"usage":"he wrote the order"}
"#;

pub fn entries() -> Vec<DictionaryEntry> {
    parse_corpus(CORPUS).unwrap().0
}

/// Twenty ids: the four specials plus every token of the fixture corpus.
pub fn vocab() -> Vocabulary {
    let mut tokens = Vec::new();
    for e in entries() {
        tokens.push(e.word.clone());
        tokens.extend(e.definition.clone());
        for c in &e.contexts {
            tokens.extend(c.tokens.clone());
        }
        if let Some(u) = &e.usage {
            tokens.extend(u.clone());
        }
    }
    Vocabulary::build(tokens, 20, &HashSet::new()).unwrap()
}

pub fn micro_char() -> CharConfig {
    CharConfig {
        char_dim: 3,
        widths: vec![2, 3],
        filters: vec![2, 3],
        highway_layers: 1,
    }
}

/// Small dims used by most model tests.
pub fn micro(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        word_dim: 4,
        encoder_hidden: 2,
        state_dim: 4,
        decoder_layers: 2,
        attention_dim: 4,
        contextual_dim: 3,
        max_context_len: 64,
        char: micro_char(),
        ..ModelConfig::default()
    }
}

pub fn provider(cfg: &ModelConfig) -> ContextualProvider {
    ContextualProvider::deterministic(cfg.contextual_dim, 7)
}

pub fn examples(cfg: &ModelConfig, vocab: &Vocabulary) -> Vec<Example> {
    let p = provider(cfg);
    build_examples(&entries(), vocab, cfg.contextual.then_some(&p)).unwrap()
}

pub fn model(cfg: ModelConfig, vocab: &Vocabulary, seed: u64) -> Model {
    let table = EmbeddingTable::random(vocab.len(), cfg.word_dim, seed);
    Model::new(cfg, &table.vectors, seed).unwrap()
}
