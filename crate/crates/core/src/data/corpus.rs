use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::vocab::is_alphabetic;

/// Suffixes stripped when looking for an inflected target occurrence.
pub const INFLECTION_SUFFIXES: [&str; 6] = ["s", "es", "ed", "ing", "er", "est"];

/// A context sentence and where the target word occurs in it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    pub tokens: Vec<String>,
    pub target: Option<usize>,
}

/// One dictionary sense: definition, 1-3 contexts and an optional usage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DictionaryEntry {
    pub id: String,
    pub word: String,
    pub pos: String,
    pub domain: Option<String>,
    pub sense_id: String,
    pub definition: Vec<String>,
    pub contexts: Vec<Context>,
    pub usage: Option<Vec<String>>,
}

/// On-disk record: one JSON object per line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    word: String,
    #[serde(default)]
    pos: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain: Option<String>,
    sense_id: String,
    definition: String,
    contexts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    usage: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub lines: usize,
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
    /// Contexts in which the target word (or an inflection) was not found.
    pub absent_in_context: usize,
    /// Usages that do not contain the target word or an inflection.
    pub absent_in_usage: usize,
}

impl LoadReport {
    pub fn summary(&self) -> String {
        format!(
            "lines={} accepted={} rejected={} absent_in_context={} absent_in_usage={}",
            self.lines,
            self.accepted,
            self.rejected.len(),
            self.absent_in_context,
            self.absent_in_usage
        )
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_string).collect()
}

/// `token` is `word` itself or `word` plus one suffix from
/// [`INFLECTION_SUFFIXES`].
pub fn matches_inflection(word: &str, token: &str) -> bool {
    token == word
        || INFLECTION_SUFFIXES
            .iter()
            .any(|suf| token.strip_suffix(suf) == Some(word))
}

/// First exact occurrence of `word`, else the first inflected one.
pub fn find_occurrence<S: AsRef<str>>(word: &str, tokens: &[S]) -> Option<usize> {
    tokens
        .iter()
        .position(|t| t.as_ref() == word)
        .or_else(|| tokens.iter().position(|t| matches_inflection(word, t.as_ref())))
}

impl DictionaryEntry {
    fn from_record(r: Record) -> std::result::Result<Self, String> {
        let word = r.word.trim().to_lowercase();
        if !is_alphabetic(&word) {
            return Err(format!("word `{}` is empty or not purely alphabetic", r.word));
        }
        if r.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if r.sense_id.trim().is_empty() {
            return Err("empty sense_id".into());
        }
        let definition = tokenize(&r.definition);
        if definition.is_empty() {
            return Err("empty definition".into());
        }
        if r.contexts.is_empty() || r.contexts.len() > 3 {
            return Err(format!("expected 1-3 contexts, got {}", r.contexts.len()));
        }
        let mut contexts = Vec::with_capacity(r.contexts.len());
        for c in &r.contexts {
            let tokens = tokenize(c);
            if tokens.is_empty() {
                return Err("empty context".into());
            }
            let target = find_occurrence(&word, &tokens);
            contexts.push(Context { tokens, target });
        }
        let usage = match r.usage {
            Some(u) => {
                let toks = tokenize(&u);
                if toks.is_empty() {
                    return Err("empty usage".into());
                }
                Some(toks)
            }
            None => None,
        };
        Ok(DictionaryEntry {
            id: r.id,
            word,
            pos: r.pos,
            domain: r.domain,
            sense_id: r.sense_id,
            definition,
            contexts,
            usage,
        })
    }

    fn to_record(&self) -> Record {
        Record {
            id: self.id.clone(),
            word: self.word.clone(),
            pos: self.pos.clone(),
            domain: self.domain.clone(),
            sense_id: self.sense_id.clone(),
            definition: self.definition.join(" "),
            contexts: self.contexts.iter().map(|c| c.tokens.join(" ")).collect(),
            usage: self.usage.as_ref().map(|u| u.join(" ")),
        }
    }
}

/// Parses line-delimited JSON entries. Bad lines are skipped and reported;
/// more than half of the non-blank lines being bad is a hard error.
pub fn parse_corpus(text: &str) -> Result<(Vec<DictionaryEntry>, LoadReport)> {
    let mut report = LoadReport::default();
    let mut entries = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let line_no = i + 1;
        let parsed = serde_json::from_str::<Record>(line)
            .map_err(|e| e.to_string())
            .and_then(DictionaryEntry::from_record)
            .and_then(|e| {
                if ids.insert(e.id.clone()) {
                    Ok(e)
                } else {
                    Err(format!("duplicate id `{}`", e.id))
                }
            });
        match parsed {
            Ok(e) => {
                report.absent_in_context += e.contexts.iter().filter(|c| c.target.is_none()).count();
                if let Some(u) = &e.usage {
                    if find_occurrence(&e.word, u).is_none() {
                        report.absent_in_usage += 1;
                    }
                }
                entries.push(e);
            }
            Err(reason) => report.rejected.push(Rejection {
                line: line_no,
                reason,
            }),
        }
    }
    report.accepted = entries.len();
    if report.rejected.len() * 2 > report.lines {
        return Err(Error::Data(format!(
            "{} of {} lines are malformed (first: line {}: {})",
            report.rejected.len(),
            report.lines,
            report.rejected[0].line,
            report.rejected[0].reason
        )));
    }
    Ok((entries, report))
}

pub fn load_corpus(path: &Path) -> Result<(Vec<DictionaryEntry>, LoadReport)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn serialize_corpus(entries: &[DictionaryEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(&e.to_record()).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Plain-text sentence file for decoder pre-training: one sentence per line.
pub fn load_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(tokenize).filter(|t| !t.is_empty()).collect())
}
