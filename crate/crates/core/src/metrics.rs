//! Sentence-BLEU, ROUGE-L, perplexity and the evaluation report.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{find_occurrence, DictionaryEntry, Familiarity, Vocabulary};
use crate::embeddings::ContextualProvider;
use crate::error::{Error, Result};
use crate::model::{build_examples, Model, Task};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bleu {
    pub score: f64,
    /// Set when the candidate was empty; the score is then 0.
    pub empty_candidate: bool,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

/// Smoothed sentence-level BLEU.
///
/// Modified n-gram precisions for `n = 1..=min(4, |candidate|)`. For `n >= 2`
/// a zero numerator is smoothed to `1 / (total + 1)`. The score is the
/// geometric mean of the precisions times the brevity penalty
/// `exp(1 - r/c)` when the candidate is shorter than the reference.
pub fn sentence_bleu<S: AsRef<str>, T: AsRef<str>>(candidate: &[S], reference: &[T]) -> Result<Bleu> {
    if reference.is_empty() {
        return Err(Error::Precondition("BLEU reference is empty".into()));
    }
    let c = candidate.len();
    if c == 0 {
        return Ok(Bleu {
            score: 0.0,
            empty_candidate: true,
        });
    }
    let r = reference.len();
    let max_n = c.min(4);
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let matches: usize = cand
            .iter()
            .map(|(g, &k)| k.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let total = c - n + 1;
        let p = if matches == 0 {
            if n == 1 {
                return Ok(Bleu {
                    score: 0.0,
                    empty_candidate: false,
                });
            }
            1.0 / (total as f64 + 1.0)
        } else {
            matches as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(Bleu {
        score: bp * (log_sum / max_n as f64).exp(),
        empty_candidate: false,
    })
}

/// Length of the longest common subsequence.
pub fn lcs_len<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Balanced ROUGE-L F-measure.
pub fn rouge_l<S: AsRef<str>, T: AsRef<str>>(candidate: &[S], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Precondition("ROUGE-L reference is empty".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let l = lcs_len(candidate, reference) as f64;
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// `exp(total_nll / tokens)`.
pub fn perplexity(total_nll: f64, tokens: usize) -> Result<f64> {
    if tokens == 0 {
        return Err(Error::Precondition("perplexity over zero tokens".into()));
    }
    Ok((total_nll / tokens as f64).exp())
}

/// Teacher-forced perplexity of `model` on one task over `entries` (every
/// context of every entry).
pub fn corpus_perplexity(
    model: &Model,
    vocab: &Vocabulary,
    entries: &[DictionaryEntry],
    provider: Option<&ContextualProvider>,
    task: Task,
    batch_size: usize,
) -> Result<f64> {
    if entries.is_empty() {
        return Err(Error::Precondition("perplexity over an empty corpus".into()));
    }
    let examples = build_examples(entries, vocab, provider)?;
    let totals = model.task_nll(&examples, batch_size)?;
    let (_, nll, n) = totals
        .into_iter()
        .find(|(t, _, _)| *t == task)
        .ok_or_else(|| Error::Precondition(format!("model does not score {}", task.as_str())))?;
    perplexity(nll, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub entry_id: String,
    pub word: String,
    pub familiarity: Familiarity,
    pub reference: String,
    pub definition: String,
    pub bleu: f64,
    pub rouge_l: f64,
    pub empty: bool,
    pub unknown_word: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub usage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub usage_has_target: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionScores {
    pub partition: String,
    pub entries: usize,
    pub bleu: f64,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub entries: usize,
    pub bleu: f64,
    pub rouge_l: f64,
    pub perplexity: f64,
    pub usage_perplexity: Option<f64>,
    pub usage_inclusion_rate: Option<f64>,
    pub empty_hypotheses: usize,
    /// Full, Seen, Unseen in that order.
    pub partitions: Vec<PartitionScores>,
    pub hypotheses: Vec<Hypothesis>,
}

/// Settings for [`evaluate`].
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
    pub batch_size: usize,
}

fn partition(name: &str, hyps: &[&Hypothesis]) -> PartitionScores {
    let n = hyps.len();
    let mean = |f: fn(&Hypothesis) -> f64| if n == 0 { 0.0 } else { hyps.iter().map(|h| f(h)).sum::<f64>() / n as f64 };
    PartitionScores {
        partition: name.to_string(),
        entries: n,
        bleu: mean(|h| h.bleu),
        rouge_l: mean(|h| h.rouge_l),
    }
}

/// Generates one hypothesis per entry from its first context, scores it
/// against the reference definition and aggregates per partition.
/// Perplexities are teacher-forced over every context.
pub fn evaluate(
    model: &Model,
    vocab: &Vocabulary,
    entries: &[DictionaryEntry],
    familiarity: &[Familiarity],
    provider: Option<&ContextualProvider>,
    opts: EvalOptions,
) -> Result<EvalReport> {
    if familiarity.len() != entries.len() {
        return Err(Error::Precondition(format!(
            "Seen/Unseen labels cover {} of {} entries",
            familiarity.len(),
            entries.len()
        )));
    }
    if entries.is_empty() {
        return Err(Error::Precondition("evaluation corpus is empty".into()));
    }
    let examples = build_examples(entries, vocab, provider)?;
    let totals = model.task_nll(&examples, opts.batch_size)?;
    let ppl = |task: Task| -> Result<Option<f64>> {
        match totals.iter().find(|(t, _, _)| *t == task) {
            Some((_, nll, n)) => perplexity(*nll, *n).map(Some),
            None => Ok(None),
        }
    };
    let def_ppl = ppl(Task::Definition)?.expect("every model scores definitions");
    let usage_ppl = ppl(Task::Usage)?;

    let mut hypotheses = Vec::with_capacity(entries.len());
    let mut first = 0;
    for (i, (entry, fam)) in entries.iter().zip(familiarity).enumerate() {
        let ex = &examples[first];
        first += entry.contexts.len();
        let gen = model.generate(ex, opts.temperature, opts.max_len, opts.seed.wrapping_add(i as u64))?;
        let cand = vocab.decode(&gen.definition);
        let bleu = sentence_bleu(&cand, &entry.definition)?;
        let rouge = rouge_l(&cand, &entry.definition)?;
        let usage_tokens = gen.usage.as_ref().map(|u| vocab.decode(u));
        hypotheses.push(Hypothesis {
            entry_id: entry.id.clone(),
            word: entry.word.clone(),
            familiarity: *fam,
            reference: entry.definition.join(" "),
            definition: cand.join(" "),
            bleu: bleu.score,
            rouge_l: rouge,
            empty: bleu.empty_candidate,
            unknown_word: gen.unknown_word,
            usage_has_target: usage_tokens.as_ref().map(|u| find_occurrence(&entry.word, u).is_some()),
            usage: usage_tokens.map(|u| u.join(" ")),
        });
    }

    let all: Vec<&Hypothesis> = hypotheses.iter().collect();
    let seen: Vec<&Hypothesis> = all.iter().copied().filter(|h| h.familiarity == Familiarity::Seen).collect();
    let unseen: Vec<&Hypothesis> = all.iter().copied().filter(|h| h.familiarity == Familiarity::Unseen).collect();
    let full = partition("full", &all);
    let inclusion: Vec<bool> = hypotheses.iter().filter_map(|h| h.usage_has_target).collect();
    Ok(EvalReport {
        entries: hypotheses.len(),
        bleu: full.bleu,
        rouge_l: full.rouge_l,
        perplexity: def_ppl,
        usage_perplexity: usage_ppl,
        usage_inclusion_rate: if inclusion.is_empty() {
            None
        } else {
            Some(inclusion.iter().filter(|b| **b).count() as f64 / inclusion.len() as f64)
        },
        empty_hypotheses: hypotheses.iter().filter(|h| h.empty).count(),
        partitions: vec![full, partition("seen", &seen), partition("unseen", &unseen)],
        hypotheses,
    })
}

impl EvalReport {
    /// Summary record, one record per partition, then one per hypothesis.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        let summary = serde_json::json!({
            "record": "summary",
            "entries": self.entries,
            "bleu": self.bleu,
            "rouge_l": self.rouge_l,
            "perplexity": self.perplexity,
            "usage_perplexity": self.usage_perplexity,
            "usage_inclusion_rate": self.usage_inclusion_rate,
            "empty_hypotheses": self.empty_hypotheses,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        for p in &self.partitions {
            let mut v = serde_json::to_value(p).expect("partition serializes");
            v["record"] = "partition".into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        for h in &self.hypotheses {
            let mut v = serde_json::to_value(h).expect("hypothesis serializes");
            v["record"] = "hypothesis".into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }

    /// Scores x100 per partition.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10}{:>9}{:>10}{:>10}", "Partition", "Entries", "BLEU", "ROUGE-L");
        for p in &self.partitions {
            let _ = writeln!(
                out,
                "{:<10}{:>9}{:>10.2}{:>10.2}",
                p.partition,
                p.entries,
                100.0 * p.bleu,
                100.0 * p.rouge_l
            );
        }
        let _ = writeln!(out, "Perplexity (definition): {:.4}", self.perplexity);
        if let Some(p) = self.usage_perplexity {
            let _ = writeln!(out, "Perplexity (usage): {p:.4}");
        }
        if let Some(r) = self.usage_inclusion_rate {
            let _ = writeln!(out, "Usage inclusion rate: {:.2}%", 100.0 * r);
        }
        if self.empty_hypotheses > 0 {
            let _ = writeln!(out, "Empty hypotheses: {}", self.empty_hypotheses);
        }
        out
    }
}
