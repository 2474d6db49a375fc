//! Run configuration: model shape, trainer settings, data paths, decoding.
//!
//! Configs are TOML. Every field has a default, so a file only needs the
//! keys it changes; unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::AdamConfig;
use crate::decoder::{input_width, Decoder, InitVariant, StateInit};
use crate::embeddings::CharConfig;
use crate::encoder::{GruCell, SenseAttention};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ModelKind {
    #[default]
    #[serde(rename = "single")]
    Single,
    #[serde(rename = "parallel")]
    Parallel,
    #[serde(rename = "hier-du")]
    HierDu,
    #[serde(rename = "hier-ud")]
    HierUd,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Single, ModelKind::Parallel, ModelKind::HierDu, ModelKind::HierUd];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Single => "single",
            ModelKind::Parallel => "parallel",
            ModelKind::HierDu => "hier-du",
            ModelKind::HierUd => "hier-ud",
        }
    }

    pub fn is_multi_task(self) -> bool {
        self != ModelKind::Single
    }

    pub fn is_hierarchical(self) -> bool {
        matches!(self, ModelKind::HierDu | ModelKind::HierUd)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub word_dim: usize,
    pub encoder_hidden: usize,
    pub state_dim: usize,
    pub decoder_layers: usize,
    pub attention_dim: usize,
    pub contextual_dim: usize,
    pub max_context_len: usize,
    pub gate: bool,
    pub char_features: bool,
    pub contextual: bool,
    pub init: InitVariant,
    pub char: CharConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Single,
            word_dim: 300,
            encoder_hidden: 150,
            state_dim: 300,
            decoder_layers: 2,
            attention_dim: 300,
            contextual_dim: 1024,
            max_context_len: 64,
            gate: true,
            char_features: true,
            contextual: true,
            init: InitVariant::Both,
            char: CharConfig::default(),
        }
    }
}

/// Scalar counts per component; `total()` is what a freshly built model
/// holds in its parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub word_tables: usize,
    pub encoder: usize,
    pub attention: usize,
    pub char: usize,
    pub init: usize,
    pub gates: usize,
    pub decoders: usize,
    pub shortcut: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.word_tables
            + self.encoder
            + self.attention
            + self.char
            + self.init
            + self.gates
            + self.decoders
            + self.shortcut
    }
}

impl ModelConfig {
    pub fn context_dim(&self) -> usize {
        2 * self.encoder_hidden
    }

    pub fn char_dim(&self) -> usize {
        self.char.output_dim()
    }

    /// Widths of `[a*, y_prev, c*, e*]` and which are present.
    pub fn input_layout(&self) -> ([usize; 4], [bool; 4]) {
        (
            [self.word_dim, self.word_dim, self.char_dim(), self.contextual_dim],
            [true, true, self.char_features, self.contextual],
        )
    }

    pub fn input_dim(&self) -> usize {
        let (dims, active) = self.input_layout();
        input_width(dims, active)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("word_dim", self.word_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("state_dim", self.state_dim),
            ("decoder_layers", self.decoder_layers),
            ("attention_dim", self.attention_dim),
            ("max_context_len", self.max_context_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.contextual && self.contextual_dim == 0 {
            return Err(Error::Config("model.contextual_dim must be positive".into()));
        }
        if self.char_features {
            self.char.validate()?;
        }
        Ok(())
    }

    pub fn parameter_breakdown(&self, vocab_size: usize) -> ParamBreakdown {
        let u = self.input_dim();
        let heads = if self.kind.is_multi_task() { 2 } else { 1 };
        ParamBreakdown {
            // fixed decoder table, trainable special rows, encoder table
            word_tables: vocab_size * self.word_dim + 4 * self.word_dim + vocab_size * self.word_dim,
            encoder: 2 * GruCell::parameter_count(self.word_dim, self.encoder_hidden),
            attention: SenseAttention::parameter_count(self.word_dim, self.context_dim(), self.attention_dim),
            char: if self.char_features { self.char.parameter_count() } else { 0 },
            init: StateInit::parameter_count(self.init, self.word_dim, self.context_dim(), self.state_dim),
            gates: if self.gate { heads * u * u } else { 0 },
            decoders: heads * Decoder::parameter_count(u, self.state_dim, self.decoder_layers, vocab_size),
            shortcut: if self.kind.is_hierarchical() { (u + self.state_dim) * u } else { 0 },
        }
    }

    pub fn parameter_count(&self, vocab_size: usize) -> usize {
        self.parameter_breakdown(vocab_size).total()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    /// Stop once validation perplexity is at or below this value.
    pub target_valid_ppl: Option<f64>,
    pub pretrain_epochs: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            clip_norm: 5.0,
            target_valid_ppl: None,
            pretrain_epochs: 5,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config("train.clip_norm must be positive".into()));
        }
        if self.adam.lr.is_nan() || self.adam.lr < 0.0 {
            return Err(Error::Config("train.adam.lr must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: PathBuf,
    pub lm_corpus: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    /// Pretrained word vectors; random vectors are used when absent.
    pub embeddings: Option<PathBuf>,
    /// Precomputed contextual vectors; a deterministic hashed provider is
    /// used when absent.
    pub contextual: Option<PathBuf>,
    pub vocab_size: usize,
    pub split: [f64; 3],
    /// Validate on the training split instead of the valid split.
    pub valid_on_train: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: PathBuf::from("corpus.jsonl"),
            lm_corpus: None,
            stopwords: None,
            embeddings: None,
            contextual: None,
            vocab_size: 65_000,
            split: [0.8, 0.1, 0.1],
            valid_on_train: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            temperature: 0.05,
            max_len: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub generate: GenerateConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // Data paths are relative to the config file.
        if let Some(dir) = path.parent() {
            cfg.data.resolve_relative(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Applies `section.key=value`; the value is parsed as a TOML literal and
    /// falls back to a plain string.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a section")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{spec}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.generate.max_len == 0 {
            return Err(Error::Config("generate.max_len must be at least 1".into()));
        }
        if self.generate.temperature.is_nan() || self.generate.temperature <= 0.0 {
            return Err(Error::Config("generate.temperature must be positive".into()));
        }
        if self.data.vocab_size < 4 {
            return Err(Error::Config("data.vocab_size must be at least 4".into()));
        }
        Ok(())
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes to JSON");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

impl DataConfig {
    pub fn resolve_relative(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.corpus);
        for p in [&mut self.lm_corpus, &mut self.stopwords, &mut self.embeddings, &mut self.contextual]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }
}

/// Embedding features in the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Hash, Eq, Serialize, Deserialize)]
pub enum FeatureSet {
    /// Word vectors only.
    W2v,
    /// Word vectors and contextual embeddings.
    Elmo,
    /// Word vectors, contextual embeddings and character features.
    ElmoChar,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 3] = [FeatureSet::W2v, FeatureSet::Elmo, FeatureSet::ElmoChar];

    pub fn label(self) -> &'static str {
        match self {
            FeatureSet::W2v => "W2V",
            FeatureSet::Elmo => "+ELMo",
            FeatureSet::ElmoChar => "+CH",
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig) {
        cfg.contextual = self != FeatureSet::W2v;
        cfg.char_features = self == FeatureSet::ElmoChar;
    }
}

/// One point of the gate x features x initial-state grid.
#[derive(Debug, Clone, Copy, PartialEq, Hash, Eq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub gate: bool,
    pub features: FeatureSet,
    pub init: InitVariant,
}

impl AblationPoint {
    pub fn grid() -> Vec<AblationPoint> {
        let mut out = Vec::new();
        for gate in [true, false] {
            for features in FeatureSet::ALL {
                for init in InitVariant::ALL {
                    out.push(AblationPoint { gate, features, init });
                }
            }
        }
        out
    }

    pub fn apply(&self, cfg: &mut ModelConfig) {
        cfg.gate = self.gate;
        self.features.apply(cfg);
        cfg.init = self.init;
    }

    pub fn label(&self) -> String {
        format!(
            "{} {} s0={}",
            if self.gate { "gate" } else { "nogate" },
            self.features.label(),
            self.init.as_str()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_files() {
        let cfg = RunConfig::from_toml("seed = 3\n[model]\nkind = \"hier-du\"\nword_dim = 8\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.kind, ModelKind::HierDu);
        assert_eq!(cfg.model.word_dim, 8);
        assert_eq!(cfg.model.state_dim, 300);
        assert_eq!(cfg.train.batch_size, 32);
        assert!(RunConfig::from_toml("[model]\nbogus = 1\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.target_valid_ppl = Some(1.2);
        cfg.data.lm_corpus = Some("lm.txt".into());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("train.batch_size=4").unwrap();
        cfg.apply_override("model.kind=parallel").unwrap();
        cfg.apply_override("model.gate = false").unwrap();
        cfg.apply_override("train.adam.lr=0.01").unwrap();
        cfg.apply_override("data.corpus=/tmp/x.jsonl").unwrap();
        cfg.apply_override("seed=11").unwrap();
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.model.kind, ModelKind::Parallel);
        assert!(!cfg.model.gate);
        assert_eq!(cfg.train.adam.lr, 0.01);
        assert_eq!(cfg.data.corpus, PathBuf::from("/tmp/x.jsonl"));
        assert_eq!(cfg.seed, 11);
        assert!(cfg.apply_override("train.batch_size=many").is_err());
        assert!(cfg.apply_override("model.nope=1").is_err());
        assert!(cfg.apply_override("no_equals").is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn gate_accounts_for_input_square() {
        let mut cfg = ModelConfig::default();
        let with = cfg.parameter_count(1000);
        cfg.gate = false;
        let without = cfg.parameter_count(1000);
        let u = 2 * 300 + 160 + 1024;
        assert_eq!(with - without, u * u);
    }

    #[test]
    fn grid_has_every_combination() {
        let g = AblationPoint::grid();
        assert_eq!(g.len(), 24);
        let labels: std::collections::HashSet<_> = g.iter().map(|p| p.label()).collect();
        assert_eq!(labels.len(), 24);
    }

    #[test]
    fn validation() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.model.state_dim = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.generate.temperature = 0.0;
        assert!(cfg.validate().is_err());
    }
}
