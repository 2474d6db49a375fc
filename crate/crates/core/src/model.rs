//! The definition model and its three multi-task variants.
//!
//! Every kind shares one conditioning stack (word tables, context encoder,
//! sense attention, character features, initial-state projection). Each task
//! then has its own gated decoder head. In the hierarchical kinds the lower
//! head is re-run over the upper task's inputs and its top-layer output is
//! fed to the upper head through a shortcut projection.

use std::collections::HashSet;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{ModelConfig, ModelKind};
use crate::data::{DictionaryEntry, Vocabulary, BOS, EOS, PAD, UNK};
use crate::decoder::{gated_input, Decoder, DecoderState, GatedInputSpec, StateInit};
use crate::embeddings::{CharEncoder, ContextualProvider};
use crate::encoder::{ContextEncoder, SenseAttention};
use crate::error::{Error, Result};
use crate::init;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Definition,
    Usage,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Definition => "definition",
            Task::Usage => "usage",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Task::Definition => "def",
            Task::Usage => "usage",
        }
    }
}

/// One (entry, context) pair encoded against a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub entry_id: String,
    pub context_index: usize,
    pub word: String,
    pub word_id: usize,
    pub context: Vec<usize>,
    pub contextual: Option<Vec<f64>>,
    pub definition: Vec<usize>,
    pub usage: Option<Vec<usize>>,
}

impl Example {
    pub fn unknown_word(&self) -> bool {
        self.word_id == UNK
    }

    pub fn target(&self, task: Task) -> Option<&[usize]> {
        match task {
            Task::Definition => Some(&self.definition),
            Task::Usage => self.usage.as_deref(),
        }
    }
}

/// Expands every entry into one example per context. `provider` supplies the
/// contextual vectors and may be omitted when the model does not use them.
pub fn build_examples(
    entries: &[DictionaryEntry],
    vocab: &Vocabulary,
    provider: Option<&ContextualProvider>,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    let mut warned = HashSet::new();
    for e in entries {
        let word_id = vocab.id(&e.word);
        if word_id == UNK && warned.insert(e.word.clone()) {
            warn!("target word `{}` is not in the vocabulary; using <unk>", e.word);
        }
        if e.definition.is_empty() {
            return Err(Error::Data(format!("entry {} has no definition", e.id)));
        }
        for (i, ctx) in e.contexts.iter().enumerate() {
            if ctx.tokens.is_empty() {
                return Err(Error::Data(format!("entry {} has an empty context", e.id)));
            }
            let contextual = match provider {
                Some(p) => Some(p.embed(&ContextualProvider::key(&e.id, i), &e.word, &ctx.tokens, ctx.target)?),
                None => None,
            };
            out.push(Example {
                entry_id: e.id.clone(),
                context_index: i,
                word: e.word.clone(),
                word_id,
                context: vocab.encode(&ctx.tokens),
                contextual,
                definition: vocab.encode(&e.definition),
                usage: e.usage.as_ref().map(|u| vocab.encode(u)),
            });
        }
    }
    Ok(out)
}

/// Step-constant decoder features for a batch, one row per example.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning {
    pub batch: usize,
    pub v_star: Var,
    pub a_star: Var,
    pub c_star: Option<Var>,
    pub e_star: Option<Var>,
    pub s0: Var,
}

/// Teacher-forced result for one task over a batch.
#[derive(Debug, Clone)]
pub struct TaskOutput {
    /// `[T * B, |Y|]` logits, step-major.
    pub logits: Var,
    /// Gold token per logits row; `None` on padding.
    pub targets: Vec<Option<usize>>,
    /// Summed NLL `[1, 1]`.
    pub total: Var,
    pub tokens: usize,
    /// Token-mean NLL `[1, 1]`.
    pub mean: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub definition: Option<TaskOutput>,
    pub usage: Option<TaskOutput>,
}

impl ForwardOutput {
    pub fn task(&self, task: Task) -> Option<&TaskOutput> {
        match task {
            Task::Definition => self.definition.as_ref(),
            Task::Usage => self.usage.as_ref(),
        }
    }

    /// Unweighted sum of the per-task token-mean NLLs.
    pub fn multi_task_loss(&self, tape: &mut Tape<'_>) -> Result<Var> {
        match (&self.definition, &self.usage) {
            (Some(d), Some(u)) => tape.add(d.mean, u.mean),
            _ => Err(Error::Precondition("multi-task loss needs both task outputs".into())),
        }
    }

    /// The training objective: the multi-task sum when both tasks are
    /// present, otherwise the single task's mean NLL.
    pub fn loss(&self, tape: &mut Tape<'_>) -> Result<Var> {
        match (&self.definition, &self.usage) {
            (Some(_), Some(_)) => self.multi_task_loss(tape),
            (Some(t), None) | (None, Some(t)) => Ok(t.mean),
            (None, None) => Err(Error::Precondition("forward produced no task outputs".into())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Head {
    pub task: Task,
    pub gate: GatedInputSpec,
    pub decoder: Decoder,
}

/// Decoding position of one head over a batch.
#[derive(Debug, Clone)]
pub struct Cursor {
    head: usize,
    state: DecoderState,
    lower: Option<(usize, DecoderState)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub definition: Vec<usize>,
    pub usage: Option<Vec<usize>>,
    pub unknown_word: bool,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub store: ParamStore,
    word_table: ParamId,
    special: ParamId,
    encoder: ContextEncoder,
    attention: SenseAttention,
    char: Option<CharEncoder>,
    init: StateInit,
    heads: Vec<Head>,
    shortcut: Option<ParamId>,
}

impl Model {
    /// Builds a freshly initialised model. `word_vectors` (`[V, d_w]`) seeds
    /// both the frozen decoder table and the trainable encoder table.
    pub fn new(config: ModelConfig, word_vectors: &Tensor, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab_size = word_vectors.rows();
        if word_vectors.cols() != config.word_dim {
            return Err(Error::shape("word vectors", &[vocab_size, config.word_dim], word_vectors.shape()));
        }
        if vocab_size < 4 {
            return Err(Error::Config("vocabulary must contain the four special tokens".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let mut fixed = word_vectors.clone();
        let dw = config.word_dim;
        fixed.data_mut()[..4 * dw].fill(0.0);
        let word_table = store.add("embed.word", fixed, false)?;
        let special = store.add("embed.special", Tensor::uniform(&[4, dw], 0.1, &mut rng), true)?;
        let encoder = ContextEncoder::new(
            &mut store,
            word_vectors.clone(),
            config.encoder_hidden,
            config.max_context_len,
            &mut rng,
        )?;
        let attention = SenseAttention::new(&mut store, dw, config.context_dim(), config.attention_dim, &mut rng)?;
        let char = if config.char_features {
            Some(CharEncoder::new(&mut store, "char", config.char.clone(), &mut rng)?)
        } else {
            None
        };
        let init = StateInit::new(&mut store, config.init, dw, config.context_dim(), config.state_dim, &mut rng)?;

        let tasks: &[Task] = if config.kind.is_multi_task() {
            &[Task::Definition, Task::Usage]
        } else {
            &[Task::Definition]
        };
        let (dims, active) = config.input_layout();
        let u = config.input_dim();
        let mut heads = Vec::new();
        for &task in tasks {
            let gate = GatedInputSpec::new(&mut store, task.prefix(), dims, active, config.gate, &mut rng)?;
            let decoder = Decoder::new(
                &mut store,
                task.prefix(),
                u,
                config.state_dim,
                config.decoder_layers,
                vocab_size,
                &mut rng,
            )?;
            heads.push(Head { task, gate, decoder });
        }
        let shortcut = if config.kind.is_hierarchical() {
            Some(init::weight(&mut store, "shortcut.w_p", u + config.state_dim, u, &mut rng)?)
        } else {
            None
        };
        Ok(Model {
            config,
            vocab_size,
            store,
            word_table,
            special,
            encoder,
            attention,
            char,
            init,
            heads,
            shortcut,
        })
    }

    /// Rebuilds a model around a saved parameter store, checking that names
    /// and shapes match what `config` instantiates.
    pub fn from_store(config: ModelConfig, vocab_size: usize, store: ParamStore) -> Result<Self> {
        let dw = config.word_dim;
        let mut model = Model::new(config, &Tensor::zeros(&[vocab_size, dw]), 0)?;
        if model.store.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.store.len(),
                store.len()
            )));
        }
        for ((_, want), (_, got)) in model.store.iter().zip(store.iter()) {
            if want.name != got.name {
                return Err(Error::Checkpoint(format!("expected tensor `{}`, found `{}`", want.name, got.name)));
            }
            if want.value.shape() != got.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    want.name,
                    got.value.shape(),
                    want.value.shape()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.heads.iter().map(|h| h.task).collect()
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    fn head_index(&self, task: Task) -> Result<usize> {
        self.heads
            .iter()
            .position(|h| h.task == task)
            .ok_or_else(|| Error::Precondition(format!("a {} model has no {} head", self.config.kind, task.as_str())))
    }

    /// Head whose decoder is re-run underneath `task`, if any.
    fn lower_of(&self, task: Task) -> Option<Task> {
        match (self.config.kind, task) {
            (ModelKind::HierDu, Task::Usage) => Some(Task::Definition),
            (ModelKind::HierUd, Task::Definition) => Some(Task::Usage),
            _ => None,
        }
    }

    /// Decoder-side embedding: frozen table rows plus trainable rows for the
    /// special tokens.
    pub fn word_lookup(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Var> {
        let table = tape.param(self.word_table);
        let fixed = tape.embedding(table, ids)?;
        if ids.iter().all(|&i| i >= 4) {
            return Ok(fixed);
        }
        let dw = self.config.word_dim;
        let special_ids: Vec<usize> = ids.iter().map(|&i| if i < 4 { i } else { 0 }).collect();
        let mut mask = Tensor::zeros(&[ids.len(), dw]);
        for (r, &i) in ids.iter().enumerate() {
            if i < 4 {
                mask.data_mut()[r * dw..(r + 1) * dw].fill(1.0);
            }
        }
        let special = tape.param(self.special);
        let rows = tape.embedding(special, &special_ids)?;
        let mask = tape.constant(mask);
        let rows = tape.mul(rows, mask)?;
        tape.add(fixed, rows)
    }

    pub fn condition(&self, tape: &mut Tape<'_>, batch: &[&Example]) -> Result<Conditioning> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let ids: Vec<usize> = batch.iter().map(|e| e.word_id).collect();
        let v_star = self.word_lookup(tape, &ids)?;
        let mut attended = Vec::with_capacity(batch.len());
        let mut pooled = Vec::with_capacity(batch.len());
        for (i, ex) in batch.iter().enumerate() {
            let ctx = self.encoder.encode(tape, &ex.context)?;
            let query = tape.slice(v_star, 0, i, 1)?;
            let (a, _) = self.attention.forward(tape, query, ctx.states)?;
            attended.push(a);
            pooled.push(ctx.pooled);
        }
        let a_star = tape.concat(&attended, 0)?;
        let v_c = tape.concat(&pooled, 0)?;
        let c_star = match &self.char {
            Some(enc) => {
                let rows = batch
                    .iter()
                    .map(|ex| enc.encode(tape, &ex.word))
                    .collect::<Result<Vec<_>>>()?;
                Some(tape.concat(&rows, 0)?)
            }
            None => None,
        };
        let e_star = if self.config.contextual {
            let d = self.config.contextual_dim;
            let mut data = Vec::with_capacity(batch.len() * d);
            for ex in batch {
                let v = ex.contextual.as_ref().ok_or_else(|| {
                    Error::MissingEmbedding(ContextualProvider::key(&ex.entry_id, ex.context_index))
                })?;
                if v.len() != d {
                    return Err(Error::shape("contextual embedding", &[d], &[v.len()]));
                }
                data.extend_from_slice(v);
            }
            Some(tape.constant(Tensor::new(vec![batch.len(), d], data)?))
        } else {
            None
        };
        let s0 = self.init.initial(tape, v_star, v_c)?;
        Ok(Conditioning {
            batch: batch.len(),
            v_star,
            a_star,
            c_star,
            e_star,
            s0,
        })
    }

    /// All-zero conditioning, used to train the decoder as a plain language
    /// model.
    pub fn zero_conditioning(&self, tape: &mut Tape<'_>, batch: usize) -> Conditioning {
        let c = &self.config;
        let mut zeros = |d: usize| tape.constant(Tensor::zeros(&[batch, d]));
        Conditioning {
            batch,
            v_star: zeros(c.word_dim),
            a_star: zeros(c.word_dim),
            c_star: c.char_features.then(|| zeros(c.char_dim())),
            e_star: c.contextual.then(|| zeros(c.contextual_dim)),
            s0: zeros(c.state_dim),
        }
    }

    pub fn start(&self, tape: &mut Tape<'_>, task: Task, cond: &Conditioning) -> Result<Cursor> {
        let head = self.head_index(task)?;
        let state = self.heads[head].decoder.initial_state(tape, cond.s0);
        let lower = match self.lower_of(task) {
            Some(t) => {
                let idx = self.head_index(t)?;
                Some((idx, self.heads[idx].decoder.initial_state(tape, cond.s0)))
            }
            None => None,
        };
        Ok(Cursor { head, state, lower })
    }

    /// Consumes the previous tokens (one per batch row) and returns the
    /// next-token logits `[B, |Y|]`.
    pub fn step(&self, tape: &mut Tape<'_>, cond: &Conditioning, cursor: &mut Cursor, prev: &[usize]) -> Result<Var> {
        if prev.len() != cond.batch {
            return Err(Error::shape("decoder step", &[cond.batch], &[prev.len()]));
        }
        let head = &self.heads[cursor.head];
        let y = self.word_lookup(tape, prev)?;
        let x = gated_input(tape, &head.gate, [Some(cond.a_star), Some(y), cond.c_star, cond.e_star])?;
        let input = match &mut cursor.lower {
            Some((idx, lstate)) => {
                let (next, s_prime) = self.heads[*idx].decoder.advance(tape, lstate, x)?;
                *lstate = next;
                let joined = tape.concat(&[x, s_prime], 1)?;
                let w_p = tape.param(self.shortcut.expect("hierarchical model has a shortcut"));
                tape.matmul(joined, w_p)?
            }
            None => x,
        };
        let (next, logits) = head.decoder.step(tape, &cursor.state, input)?;
        cursor.state = next;
        Ok(logits)
    }

    /// Teacher-forced pass over `targets` (one per batch row, without
    /// `<bos>`/`<eos>`). `<eos>` is scored; padding is masked.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape<'_>,
        task: Task,
        cond: &Conditioning,
        targets: &[&[usize]],
    ) -> Result<TaskOutput> {
        if targets.len() != cond.batch {
            return Err(Error::shape("targets", &[cond.batch], &[targets.len()]));
        }
        let cursor = self.start(tape, task, cond)?;
        self.score(tape, cond, cursor, targets)
    }

    fn score(
        &self,
        tape: &mut Tape<'_>,
        cond: &Conditioning,
        mut cursor: Cursor,
        targets: &[&[usize]],
    ) -> Result<TaskOutput> {
        if targets.is_empty() || targets.iter().any(|t| t.is_empty()) {
            return Err(Error::Precondition("empty target sequence".into()));
        }
        let steps = targets.iter().map(|t| t.len()).max().unwrap_or(0) + 1;
        let mut rows = Vec::with_capacity(steps);
        let mut gold = Vec::with_capacity(steps * cond.batch);
        for t in 0..steps {
            let prev: Vec<usize> = targets
                .iter()
                .map(|seq| match t {
                    0 => BOS,
                    _ => seq.get(t - 1).copied().unwrap_or(PAD),
                })
                .collect();
            rows.push(self.step(tape, cond, &mut cursor, &prev)?);
            gold.extend(targets.iter().map(|seq| match t.cmp(&seq.len()) {
                std::cmp::Ordering::Less => Some(seq[t]),
                std::cmp::Ordering::Equal => Some(EOS),
                std::cmp::Ordering::Greater => None,
            }));
        }
        let logits = tape.concat(&rows, 0)?;
        let total = tape.cross_entropy(logits, &gold)?;
        let tokens = gold.iter().flatten().count();
        let mean = tape.scale(total, 1.0 / tokens as f64)?;
        Ok(TaskOutput {
            logits,
            targets: gold,
            total,
            tokens,
            mean,
        })
    }

    /// Forward pass over every task this model supervises.
    pub fn forward(&self, tape: &mut Tape<'_>, batch: &[&Example]) -> Result<ForwardOutput> {
        let cond = self.condition(tape, batch)?;
        let mut out = ForwardOutput {
            definition: None,
            usage: None,
        };
        for task in self.tasks() {
            let targets = batch
                .iter()
                .map(|ex| {
                    ex.target(task).ok_or_else(|| {
                        Error::Data(format!("entry {} has no {} for a multi-task model", ex.entry_id, task.as_str()))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let res = self.teacher_forced(tape, task, &cond, &targets)?;
            match task {
                Task::Definition => out.definition = Some(res),
                Task::Usage => out.usage = Some(res),
            }
        }
        Ok(out)
    }

    /// Unconditional language-model pass of the definition head.
    pub fn lm_forward(&self, tape: &mut Tape<'_>, sentences: &[&[usize]]) -> Result<TaskOutput> {
        if sentences.is_empty() {
            return Err(Error::Precondition("empty language-model batch".into()));
        }
        let cond = self.zero_conditioning(tape, sentences.len());
        let cursor = Cursor {
            head: 0,
            state: self.heads[0].decoder.initial_state(tape, cond.s0),
            lower: None,
        };
        self.score(tape, &cond, cursor, sentences)
    }

    /// Summed NLL and scored token count per supervised task, without
    /// building gradients.
    pub fn task_nll(&self, examples: &[Example], batch_size: usize) -> Result<Vec<(Task, f64, usize)>> {
        let mut totals: Vec<(Task, f64, usize)> = self.tasks().into_iter().map(|t| (t, 0.0, 0)).collect();
        for chunk in examples.chunks(batch_size.max(1)) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let mut tape = Tape::with_params(&self.store);
            let out = self.forward(&mut tape, &refs)?;
            for (task, nll, n) in totals.iter_mut() {
                let res = out.task(*task).expect("supervised task present");
                *nll += tape.value(res.total).item();
                *n += res.tokens;
            }
        }
        Ok(totals)
    }

    /// Samples a definition (and a usage for multi-task kinds).
    pub fn generate(&self, example: &Example, temperature: f64, max_len: usize, seed: u64) -> Result<Generated> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::Precondition(format!("temperature must be positive, got {temperature}")));
        }
        if max_len == 0 {
            return Err(Error::Precondition("max_len must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::with_params(&self.store);
        let cond = self.condition(&mut tape, &[example])?;
        let mut out = Generated {
            definition: Vec::new(),
            usage: None,
            unknown_word: example.unknown_word(),
        };
        for task in self.tasks() {
            let mut cursor = self.start(&mut tape, task, &cond)?;
            let mut prev = BOS;
            let mut seq = Vec::new();
            while seq.len() < max_len {
                let logits = self.step(&mut tape, &cond, &mut cursor, &[prev])?;
                let next = sample_token(tape.value(logits).data(), temperature, &mut rng);
                if next == EOS {
                    break;
                }
                seq.push(next);
                prev = next;
            }
            match task {
                Task::Definition => out.definition = seq,
                Task::Usage => out.usage = Some(seq),
            }
        }
        Ok(out)
    }

    /// Copies a pretrained definition decoder (gate, GRU layers, output
    /// projection) into every head, along with the special-token rows.
    /// Returns the number of tensors copied.
    pub fn warm_start(&mut self, pretrained: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for (_, p) in pretrained.iter() {
            let targets: Vec<String> = if let Some(rest) = p.name.strip_prefix("def.") {
                self.heads.iter().map(|h| format!("{}.{rest}", h.task.prefix())).collect()
            } else if p.name == "embed.special" {
                vec![p.name.clone()]
            } else {
                continue;
            };
            for name in targets {
                let id = self
                    .store
                    .id(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("pretrained tensor `{}` has no counterpart", p.name)))?;
                let dst = self.store.get_mut(id);
                if dst.value.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "pretrained `{}` has shape {:?} but `{name}` is {:?}",
                        p.name,
                        p.value.shape(),
                        dst.value.shape()
                    )));
                }
                dst.value = p.value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Draws from `softmax(logits / temperature)` with `<pad>` and `<bos>`
/// excluded; below a temperature of 1e-6 this is an exact argmax.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let allowed = |i: usize| i != PAD && i != BOS;
    if temperature < 1e-6 {
        let mut best = None;
        for (i, &l) in logits.iter().enumerate() {
            if allowed(i) && best.is_none_or(|(_, b)| l > b) {
                best = Some((i, l));
            }
        }
        return best.map_or(EOS, |(i, _)| i);
    }
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, l)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| if allowed(i) { ((l - max) / temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            if r < *w {
                return i;
            }
            r -= w;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(EOS)
}
