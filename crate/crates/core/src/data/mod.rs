//! Corpus schema, vocabulary, sense-aware splits and statistics.

mod corpus;
mod split;
mod vocab;

pub use corpus::{
    find_occurrence, load_corpus, load_sentences, matches_inflection, parse_corpus, serialize_corpus,
    tokenize, Context, DictionaryEntry, LoadReport, Rejection, INFLECTION_SUFFIXES,
};
pub use split::{
    corpus_stats, format_stats_table, partition_seen_unseen, split_by_sense, split_stats, Familiarity,
    SplitName, SplitStats, Splits,
};
pub use vocab::{is_alphabetic, load_stopwords, Vocabulary, BOS, EOS, PAD, SPECIALS, UNK};
