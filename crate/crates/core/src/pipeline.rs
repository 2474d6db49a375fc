//! Glue from a [`RunConfig`] to ready-to-train data and models.

use std::collections::HashSet;

use log::info;

use crate::config::{DataConfig, ModelConfig, RunConfig};
use crate::data::{
    load_corpus, load_sentences, load_stopwords, split_by_sense, DictionaryEntry, LoadReport, Splits, Vocabulary,
};
use crate::embeddings::{load_word_embeddings, ContextualProvider, EmbeddingTable};
use crate::error::Result;
use crate::model::{build_examples, Example, Model};

/// Seed of the hashed contextual provider. Fixed so that contextual vectors
/// behave like a pretrained resource rather than varying with the run seed.
pub const CONTEXTUAL_SEED: u64 = 0x5e_6e_c0_de;

/// Every token of an entry: word, definition, contexts and usage.
pub fn entry_tokens(entries: &[DictionaryEntry]) -> Vec<&str> {
    let mut out = Vec::new();
    for e in entries {
        out.push(e.word.as_str());
        out.extend(e.definition.iter().map(String::as_str));
        for c in &e.contexts {
            out.extend(c.tokens.iter().map(String::as_str));
        }
        if let Some(u) = &e.usage {
            out.extend(u.iter().map(String::as_str));
        }
    }
    out
}

/// Model vocabulary: corpus plus language-model sentences, capped at
/// `size`. Function words are kept because the decoder must produce them.
pub fn model_vocabulary(entries: &[DictionaryEntry], lm: &[Vec<String>], size: usize) -> Result<Vocabulary> {
    let mut stream = entry_tokens(entries);
    for s in lm {
        stream.extend(s.iter().map(String::as_str));
    }
    Vocabulary::build(stream, size, &HashSet::new())
}

/// Contextual vectors for `model`: the configured file, or the hashed
/// provider when none is given. `None` when the model does not use them.
pub fn contextual_provider(data: &DataConfig, model: &ModelConfig) -> Result<Option<ContextualProvider>> {
    if !model.contextual {
        return Ok(None);
    }
    Ok(Some(match &data.contextual {
        Some(p) => ContextualProvider::load(p, model.contextual_dim)?,
        None => ContextualProvider::deterministic(model.contextual_dim, CONTEXTUAL_SEED),
    }))
}

/// Everything a run needs before a model exists.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub entries: Vec<DictionaryEntry>,
    pub report: LoadReport,
    pub lm: Vec<Vec<String>>,
    pub vocab: Vocabulary,
    pub splits: Splits,
    pub word_vectors: EmbeddingTable,
    pub provider: Option<ContextualProvider>,
}

impl Prepared {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (entries, report) = load_corpus(&cfg.data.corpus)?;
        info!("{}", report.summary());
        let lm = match &cfg.data.lm_corpus {
            Some(p) => load_sentences(p)?,
            None => Vec::new(),
        };
        let vocab = model_vocabulary(&entries, &lm, cfg.data.vocab_size)?;
        let splits = split_by_sense(&entries, cfg.data.split, cfg.seed)?;
        let word_vectors = match &cfg.data.embeddings {
            Some(p) => {
                let t = load_word_embeddings(p, &vocab, cfg.seed)?;
                info!("word vectors cover {:.1}% of the vocabulary", 100.0 * t.coverage);
                t
            }
            None => EmbeddingTable::random(vocab.len(), cfg.model.word_dim, cfg.seed),
        };
        let provider = contextual_provider(&cfg.data, &cfg.model)?;
        Ok(Prepared {
            entries,
            report,
            lm,
            vocab,
            splits,
            word_vectors,
            provider,
        })
    }

    pub fn model(&self, cfg: &RunConfig) -> Result<Model> {
        Model::new(cfg.model.clone(), &self.word_vectors.vectors, cfg.seed)
    }

    pub fn examples(&self, entries: &[DictionaryEntry]) -> Result<Vec<Example>> {
        build_examples(entries, &self.vocab, self.provider.as_ref())
    }

    /// Training and validation examples; validation falls back to the
    /// training split when `data.valid_on_train` is set.
    pub fn train_valid(&self, cfg: &RunConfig) -> Result<(Vec<Example>, Vec<Example>)> {
        let train = self.examples(&self.splits.train)?;
        let valid = if cfg.data.valid_on_train {
            train.clone()
        } else {
            self.examples(&self.splits.valid)?
        };
        Ok((train, valid))
    }

    /// Language-model sentences encoded against the vocabulary.
    pub fn lm_ids(&self) -> Vec<Vec<usize>> {
        self.lm.iter().map(|s| self.vocab.encode(s)).collect()
    }

    pub fn stopwords(cfg: &RunConfig) -> Result<HashSet<String>> {
        match &cfg.data.stopwords {
            Some(p) => load_stopwords(p),
            None => Ok(HashSet::new()),
        }
    }
}
