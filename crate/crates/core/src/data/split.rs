use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::corpus::DictionaryEntry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Valid, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<DictionaryEntry>,
    pub valid: Vec<DictionaryEntry>,
    pub test: Vec<DictionaryEntry>,
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &[DictionaryEntry] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }

    /// `entry id<TAB>split` lines in split order.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for name in SplitName::ALL {
            for e in self.get(name) {
                out.push_str(&e.id);
                out.push('\t');
                out.push_str(name.as_str());
                out.push('\n');
            }
        }
        out
    }
}

/// Splits by `(word, sense id)` so a sense never appears in two splits.
/// Groups are shuffled with `seed`; the train and valid group counts are
/// `round(ratio * groups)` and test takes the remainder.
pub fn split_by_sense(entries: &[DictionaryEntry], ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!(
            "split ratios must be in [0, 1] and sum to 1, got {ratios:?}"
        )));
    }
    let mut groups: BTreeMap<(&str, &str), Vec<&DictionaryEntry>> = BTreeMap::new();
    for e in entries {
        groups.entry((&e.word, &e.sense_id)).or_default().push(e);
    }
    let active = ratios.iter().filter(|&&r| r > 0.0).count();
    if groups.len() < active {
        return Err(Error::Data(format!(
            "{} sense groups cannot fill {active} splits",
            groups.len()
        )));
    }
    let mut keys: Vec<_> = groups.keys().copied().collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n = keys.len();
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_valid = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let mut splits = Splits::default();
    for (i, key) in keys.iter().enumerate() {
        let dst = if i < n_train {
            &mut splits.train
        } else if i < n_train + n_valid {
            &mut splits.valid
        } else {
            &mut splits.test
        };
        dst.extend(groups[key].iter().map(|e| (*e).clone()));
    }
    Ok(splits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Familiarity {
    Seen,
    Unseen,
}

/// A test entry is Seen iff its word is the target of any training entry,
/// with any sense.
pub fn partition_seen_unseen(train: &[DictionaryEntry], test: &[DictionaryEntry]) -> Vec<Familiarity> {
    let known: HashSet<&str> = train.iter().map(|e| e.word.as_str()).collect();
    test.iter()
        .map(|e| {
            if known.contains(e.word.as_str()) {
                Familiarity::Seen
            } else {
                Familiarity::Unseen
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: String,
    pub words: usize,
    pub entries: usize,
    /// Definition tokens.
    pub tokens: usize,
    pub def_len: f64,
    pub ctx_len: f64,
    pub usage_len: f64,
}

pub fn split_stats(name: &str, entries: &[DictionaryEntry]) -> SplitStats {
    let words: BTreeSet<&str> = entries.iter().map(|e| e.word.as_str()).collect();
    let tokens: usize = entries.iter().map(|e| e.definition.len()).sum();
    let (ctx_tokens, ctx_count) = entries
        .iter()
        .flat_map(|e| &e.contexts)
        .fold((0usize, 0usize), |(t, c), ctx| (t + ctx.tokens.len(), c + 1));
    let (usage_tokens, usage_count) = entries
        .iter()
        .filter_map(|e| e.usage.as_ref())
        .fold((0usize, 0usize), |(t, c), u| (t + u.len(), c + 1));
    let mean = |total: usize, n: usize| if n == 0 { 0.0 } else { total as f64 / n as f64 };
    SplitStats {
        split: name.to_string(),
        words: words.len(),
        entries: entries.len(),
        tokens,
        def_len: mean(tokens, entries.len()),
        ctx_len: mean(ctx_tokens, ctx_count),
        usage_len: mean(usage_tokens, usage_count),
    }
}

pub fn corpus_stats(splits: &Splits) -> Vec<SplitStats> {
    SplitName::ALL
        .iter()
        .map(|&n| split_stats(n.as_str(), splits.get(n)))
        .collect()
}

/// Renders stats as a fixed-width table, one column per split.
pub fn format_stats_table(stats: &[SplitStats]) -> String {
    let mut out = format!("{:<10}", "Split");
    for s in stats {
        out.push_str(&format!("{:>12}", s.split));
    }
    out.push('\n');
    type Cell = Box<dyn Fn(&SplitStats) -> String>;
    let rows: [(&str, Cell); 6] = [
        ("#Words", Box::new(|s| s.words.to_string())),
        ("#Entries", Box::new(|s| s.entries.to_string())),
        ("#Tokens", Box::new(|s| s.tokens.to_string())),
        ("Def Len", Box::new(|s| format!("{:.2}", s.def_len))),
        ("Ctx Len", Box::new(|s| format!("{:.2}", s.ctx_len))),
        ("Usg Len", Box::new(|s| format!("{:.2}", s.usage_len))),
    ];
    for (label, f) in rows.iter() {
        out.push_str(&format!("{label:<10}"));
        for s in stats {
            out.push_str(&format!("{:>12}", f(s)));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::Context;

    fn entry(id: &str, word: &str, sense: &str) -> DictionaryEntry {
        DictionaryEntry {
            id: id.into(),
            word: word.into(),
            pos: "noun".into(),
            domain: None,
            sense_id: sense.into(),
            definition: vec!["a".into(), "thing".into()],
            contexts: vec![Context {
                tokens: vec![word.into(), "here".into()],
                target: Some(0),
            }],
            usage: None,
        }
    }

    fn corpus() -> Vec<DictionaryEntry> {
        let mut v = Vec::new();
        for w in ["bank", "check", "order", "skirt", "gaze", "table"] {
            for s in 0..3 {
                v.push(entry(&format!("{w}{s}a"), w, &format!("{w}.{s}")));
                v.push(entry(&format!("{w}{s}b"), w, &format!("{w}.{s}")));
            }
        }
        v
    }

    fn keys(es: &[DictionaryEntry]) -> HashSet<(String, String)> {
        es.iter().map(|e| (e.word.clone(), e.sense_id.clone())).collect()
    }

    #[test]
    fn senses_never_straddle_splits() {
        let c = corpus();
        let s = split_by_sense(&c, [0.6, 0.2, 0.2], 3).unwrap();
        let (tr, va, te) = (keys(&s.train), keys(&s.valid), keys(&s.test));
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        assert_eq!(s.train.len() + s.valid.len() + s.test.len(), c.len());
    }

    #[test]
    fn degenerate_ratio_puts_everything_in_train() {
        let c = corpus();
        let s = split_by_sense(&c, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(s.train.len(), c.len());
        assert!(s.valid.is_empty() && s.test.is_empty());
    }

    #[test]
    fn same_seed_same_split() {
        let c = corpus();
        let a = split_by_sense(&c, [0.5, 0.25, 0.25], 9).unwrap();
        let b = split_by_sense(&c, [0.5, 0.25, 0.25], 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_groups_or_bad_ratios() {
        let c = vec![entry("a", "cat", "cat.1")];
        assert!(split_by_sense(&c, [0.5, 0.25, 0.25], 0).is_err());
        assert!(split_by_sense(&corpus(), [0.5, 0.5, 0.5], 0).is_err());
    }

    #[test]
    fn seen_unseen() {
        let train = vec![entry("1", "check", "check.1")];
        let test = vec![entry("2", "check", "check.2"), entry("3", "gaze", "gaze.1")];
        assert_eq!(
            partition_seen_unseen(&train, &test),
            vec![Familiarity::Seen, Familiarity::Unseen]
        );
        assert!(partition_seen_unseen(&[], &test).iter().all(|f| *f == Familiarity::Unseen));
    }

    #[test]
    fn empty_split_stats_are_zero() {
        let s = split_stats("test", &[]);
        assert_eq!((s.words, s.entries, s.tokens), (0, 0, 0));
        assert_eq!((s.def_len, s.ctx_len, s.usage_len), (0.0, 0.0, 0.0));
    }
}
