//! Word representations fed to the decoder: pretrained word vectors, the
//! character-level CNN + highway encoder, and contextual embeddings.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::data::{Vocabulary, SPECIALS};
use crate::error::{Error, Result};
use crate::init;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// A `[V, d]` word-vector matrix aligned with a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vectors: Tensor,
    pub trainable: bool,
    /// Fraction of non-special vocabulary tokens found in the source file.
    pub coverage: f64,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Every row drawn from `U(-0.1, 0.1)`.
    pub fn random(vocab_len: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingTable {
            vectors: Tensor::uniform(&[vocab_len, dim], 0.1, &mut rng),
            trainable: false,
            coverage: 0.0,
        }
    }
}

/// Parses a whitespace-separated vector file (`token v1 ... vd` per line,
/// optional `count dim` header). Vocabulary tokens missing from the file get
/// `U(-0.1, 0.1)` rows drawn with `seed`.
pub fn parse_word_embeddings(text: &str, source: &Path, vocab: &Vocabulary, seed: u64) -> Result<EmbeddingTable> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        msg,
    };
    let mut found: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut dim: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            dim = Some(fields[1].parse().expect("checked above"));
            continue;
        }
        let values = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(i + 1, format!("bad number: {e}")))?;
        match dim {
            None if values.is_empty() => return Err(parse_err(i + 1, "token without a vector".into())),
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(parse_err(
                    i + 1,
                    format!("expected {d} values, found {}", values.len()),
                ))
            }
            Some(_) => {}
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(i + 1, "non-finite value".into()));
        }
        found.insert(fields[0], values);
    }
    let dim = match dim {
        Some(d) if !found.is_empty() => d,
        _ => return Err(Error::Data(format!("{}: no embedding vectors", source.display()))),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(vocab.len() * dim);
    let mut hits = 0usize;
    for (id, tok) in vocab.tokens().iter().enumerate() {
        match found.get(tok.as_str()) {
            Some(v) if id >= SPECIALS.len() => {
                hits += 1;
                data.extend_from_slice(v);
            }
            _ => data.extend((0..dim).map(|_| rng.random_range(-0.1..=0.1))),
        }
    }
    let regular = vocab.len().saturating_sub(SPECIALS.len());
    Ok(EmbeddingTable {
        vectors: Tensor::new(vec![vocab.len(), dim], data)?,
        trainable: false,
        coverage: if regular == 0 { 0.0 } else { hits as f64 / regular as f64 },
    })
}

pub fn load_word_embeddings(path: &Path, vocab: &Vocabulary, seed: u64) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_word_embeddings(&text, path, vocab, seed)
}

pub const CHAR_PAD: usize = 0;
pub const CHAR_UNK: usize = 1;
pub const CHAR_BOW: usize = 2;
pub const CHAR_EOW: usize = 3;
/// `pad unk bow eow` followed by `a..=z`.
pub const CHAR_VOCAB_SIZE: usize = 4 + 26;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CharConfig {
    pub char_dim: usize,
    pub widths: Vec<usize>,
    pub filters: Vec<usize>,
    pub highway_layers: usize,
}

impl Default for CharConfig {
    fn default() -> Self {
        CharConfig {
            char_dim: 20,
            widths: vec![2, 3, 4, 5, 6],
            filters: vec![10, 30, 40, 40, 40],
            highway_layers: 2,
        }
    }
}

impl CharConfig {
    pub fn output_dim(&self) -> usize {
        self.filters.iter().sum()
    }

    pub fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(1)
    }

    pub fn parameter_count(&self) -> usize {
        let out = self.output_dim();
        let table = CHAR_VOCAB_SIZE * self.char_dim;
        let convs: usize = self
            .widths
            .iter()
            .zip(&self.filters)
            .map(|(w, f)| w * self.char_dim * f + f)
            .sum();
        table + convs + self.highway_layers * 2 * (out * out + out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.char_dim == 0
            || self.widths.is_empty()
            || self.widths.len() != self.filters.len()
            || self.widths.contains(&0)
            || self.filters.contains(&0)
        {
            return Err(Error::Config(format!("invalid character encoder config {self:?}")));
        }
        Ok(())
    }
}

/// Character ids for a word: `bow chars eow`, right-padded with `pad` to at
/// least `min_len` positions.
pub fn char_ids(word: &str, min_len: usize) -> Result<Vec<usize>> {
    if word.is_empty() {
        return Err(Error::Precondition("cannot encode an empty word".into()));
    }
    let mut ids = vec![CHAR_BOW];
    ids.extend(word.chars().map(|c| match c.to_ascii_lowercase() {
        c @ 'a'..='z' => 4 + (c as usize - 'a' as usize),
        _ => CHAR_UNK,
    }));
    ids.push(CHAR_EOW);
    while ids.len() < min_len {
        ids.push(CHAR_PAD);
    }
    Ok(ids)
}

#[derive(Debug, Clone)]
pub struct Highway {
    pub transform_w: ParamId,
    pub transform_b: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
}

/// Character CNN with max-over-time pooling followed by highway layers.
#[derive(Debug, Clone)]
pub struct CharEncoder {
    pub config: CharConfig,
    pub table: ParamId,
    /// `(width, weight [width * char_dim, filters], bias [1, filters])`.
    pub convs: Vec<(usize, ParamId, ParamId)>,
    pub highway: Vec<Highway>,
}

impl CharEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: CharConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let table = store.add(
            format!("{prefix}.table"),
            Tensor::uniform(&[CHAR_VOCAB_SIZE, config.char_dim], 0.1, rng),
            true,
        )?;
        let mut convs = Vec::new();
        for (&w, &f) in config.widths.iter().zip(&config.filters) {
            let weight = init::weight(store, &format!("{prefix}.conv{w}.w"), w * config.char_dim, f, rng)?;
            let bias = init::bias(store, &format!("{prefix}.conv{w}.b"), f, 0.0)?;
            convs.push((w, weight, bias));
        }
        let out = config.output_dim();
        let mut highway = Vec::new();
        for l in 0..config.highway_layers {
            highway.push(Highway {
                transform_w: init::weight(store, &format!("{prefix}.highway{l}.h.w"), out, out, rng)?,
                transform_b: init::bias(store, &format!("{prefix}.highway{l}.h.b"), out, 0.0)?,
                gate_w: init::weight(store, &format!("{prefix}.highway{l}.t.w"), out, out, rng)?,
                gate_b: init::bias(store, &format!("{prefix}.highway{l}.t.b"), out, -2.0)?,
            });
        }
        Ok(CharEncoder {
            config,
            table,
            convs,
            highway,
        })
    }

    /// `[1, sum(filters)]` features for `word`.
    pub fn encode(&self, tape: &mut Tape<'_>, word: &str) -> Result<Var> {
        let ids = char_ids(word, self.config.max_width())?;
        let table = tape.param(self.table);
        let chars = tape.embedding(table, &ids)?;
        let mut pooled = Vec::with_capacity(self.convs.len());
        for &(_, w, b) in &self.convs {
            let (w, b) = (tape.param(w), tape.param(b));
            let conv = tape.conv1d(chars, w)?;
            let conv = tape.add(conv, b)?;
            let act = tape.tanh(conv)?;
            pooled.push(tape.max_axis(act, 0)?);
        }
        let mut x = tape.concat(&pooled, 1)?;
        for hw in &self.highway {
            x = highway_layer(tape, x, hw)?;
        }
        Ok(x)
    }
}

/// `y = t * g(W_H x + b_H) + (1 - t) * x` with `t = sigmoid(W_T x + b_T)`,
/// written as `x + t * (g - x)`.
pub fn highway_layer(tape: &mut Tape<'_>, x: Var, hw: &Highway) -> Result<Var> {
    let (hw_w, hw_b) = (tape.param(hw.transform_w), tape.param(hw.transform_b));
    let (gt_w, gt_b) = (tape.param(hw.gate_w), tape.param(hw.gate_b));
    let h = tape.affine(x, hw_w, hw_b)?;
    let g = tape.tanh(h)?;
    let t = tape.affine(x, gt_w, gt_b)?;
    let t = tape.sigmoid(t)?;
    let delta = tape.sub(g, x)?;
    let carry = tape.mul(t, delta)?;
    tape.add(x, carry)
}

/// Source of contextual target-word embeddings.
#[derive(Debug, Clone, PartialEq)]
pub enum ContextualProvider {
    /// Unit vectors derived from a seeded hash of the target token and its
    /// immediate neighbours.
    Deterministic { dim: usize, seed: u64 },
    /// Precomputed vectors keyed by `<entry id>#<context index>`.
    FileBacked {
        dim: usize,
        vectors: HashMap<String, Vec<f64>>,
    },
}

impl ContextualProvider {
    pub fn deterministic(dim: usize, seed: u64) -> Self {
        ContextualProvider::Deterministic { dim, seed }
    }

    /// Loads `key v1 ... vd` lines; every vector must have length `dim`.
    pub fn load(path: &Path, dim: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut vectors = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(key) = fields.next() else { continue };
            let values = fields
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            if values.len() != dim {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected {dim} values, found {}", values.len()),
                });
            }
            vectors.insert(key.to_string(), values);
        }
        Ok(ContextualProvider::FileBacked { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        match self {
            ContextualProvider::Deterministic { dim, .. } | ContextualProvider::FileBacked { dim, .. } => *dim,
        }
    }

    pub fn key(entry_id: &str, context_index: usize) -> String {
        format!("{entry_id}#{context_index}")
    }

    /// Embedding of the target word at `target` in `context`. With no
    /// resolved occurrence the deterministic kind embeds `word` with empty
    /// neighbours.
    pub fn embed(&self, key: &str, word: &str, context: &[String], target: Option<usize>) -> Result<Vec<f64>> {
        if let Some(i) = target {
            if i >= context.len() {
                return Err(Error::Precondition(format!(
                    "target index {i} out of range for context of length {}",
                    context.len()
                )));
            }
        }
        match self {
            ContextualProvider::Deterministic { dim, seed } => {
                let (center, prev, next) = match target {
                    Some(i) => (
                        context[i].as_str(),
                        if i > 0 { context[i - 1].as_str() } else { "" },
                        context.get(i + 1).map_or("", String::as_str),
                    ),
                    None => (word, "", ""),
                };
                Ok(hashed_unit_vector(*seed, *dim, &[center, prev, next]))
            }
            ContextualProvider::FileBacked { vectors, .. } => vectors
                .get(key)
                .cloned()
                .ok_or_else(|| Error::MissingEmbedding(key.to_string())),
        }
    }
}

fn hashed_unit_vector(seed: u64, dim: usize, parts: &[&str]) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update([0x1f]);
        h.update(p.as_bytes());
    }
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}
