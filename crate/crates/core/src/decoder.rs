//! Gated two-layer GRU decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::GruCell;
use crate::error::{Error, Result};
use crate::init;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Which conditioning vectors feed the initial layer-1 state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitVariant {
    Zeros,
    Word,
    Context,
    #[default]
    Both,
}

impl InitVariant {
    pub const ALL: [InitVariant; 4] = [InitVariant::Zeros, InitVariant::Word, InitVariant::Context, InitVariant::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            InitVariant::Zeros => "zeros",
            InitVariant::Word => "word",
            InitVariant::Context => "context",
            InitVariant::Both => "both",
        }
    }
}

/// `s0 = [v*; v_c] W_s + b_s` for layer 1. The word and context variants
/// keep the full projection and zero the missing half; `Zeros` has no
/// parameters at all.
#[derive(Debug, Clone)]
pub struct StateInit {
    pub variant: InitVariant,
    pub word_dim: usize,
    pub context_dim: usize,
    pub state_dim: usize,
    pub proj: Option<(ParamId, ParamId)>,
}

impl StateInit {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        variant: InitVariant,
        word_dim: usize,
        context_dim: usize,
        state_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let proj = if variant == InitVariant::Zeros {
            None
        } else {
            Some((
                init::weight(store, "init.w_s", word_dim + context_dim, state_dim, rng)?,
                init::bias(store, "init.b_s", state_dim, 0.0)?,
            ))
        };
        Ok(StateInit {
            variant,
            word_dim,
            context_dim,
            state_dim,
            proj,
        })
    }

    pub fn parameter_count(variant: InitVariant, word_dim: usize, context_dim: usize, state_dim: usize) -> usize {
        match variant {
            InitVariant::Zeros => 0,
            _ => (word_dim + context_dim + 1) * state_dim,
        }
    }

    /// `v_star` is `[B, word_dim]`, `v_c` is `[B, context_dim]`; returns `[B, state_dim]`.
    pub fn initial(&self, tape: &mut Tape<'_>, v_star: Var, v_c: Var) -> Result<Var> {
        let (vs, vc) = (tape.shape(v_star).to_vec(), tape.shape(v_c).to_vec());
        if vs[1] != self.word_dim || vc[1] != self.context_dim || vs[0] != vc[0] {
            return Err(Error::shape("init_state", &vs, &vc));
        }
        let batch = vs[0];
        let Some((w, b)) = self.proj else {
            return Ok(tape.constant(Tensor::zeros(&[batch, self.state_dim])));
        };
        let word = match self.variant {
            InitVariant::Context => tape.constant(Tensor::zeros(&[batch, self.word_dim])),
            _ => v_star,
        };
        let ctx = match self.variant {
            InitVariant::Word => tape.constant(Tensor::zeros(&[batch, self.context_dim])),
            _ => v_c,
        };
        let joined = tape.concat(&[word, ctx], 1)?;
        let (w, b) = (tape.param(w), tape.param(b));
        tape.affine(joined, w, b)
    }
}

/// Input components in concatenation order.
pub const COMPONENTS: [&str; 4] = ["a*", "y_prev", "c*", "e*"];

/// Layout of the decoder input `u = [a*; y_prev; c*; e*]` and its gate.
#[derive(Debug, Clone)]
pub struct GatedInputSpec {
    pub dims: [usize; 4],
    pub active: [bool; 4],
    /// `[u, u]` gate matrix, no bias; `None` when the gate is ablated.
    pub gate: Option<ParamId>,
}

impl GatedInputSpec {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dims: [usize; 4],
        active: [bool; 4],
        gated: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let u = input_width(dims, active);
        let gate = if gated {
            Some(init::weight(store, &format!("{prefix}.w_g"), u, u, rng)?)
        } else {
            None
        };
        Ok(GatedInputSpec { dims, active, gate })
    }

    pub fn width(&self) -> usize {
        input_width(self.dims, self.active)
    }
}

pub fn input_width(dims: [usize; 4], active: [bool; 4]) -> usize {
    dims.iter().zip(active).filter(|(_, a)| *a).map(|(d, _)| d).sum()
}

/// `x = sigmoid(u W_g) * u` over the active components, or `x = u` without a gate.
pub fn gated_input(tape: &mut Tape<'_>, spec: &GatedInputSpec, parts: [Option<Var>; 4]) -> Result<Var> {
    let mut pieces = Vec::with_capacity(4);
    let mut batch = None;
    for (i, part) in parts.iter().enumerate() {
        match (spec.active[i], part) {
            (true, None) => {
                return Err(Error::Precondition(format!("active input {} not supplied", COMPONENTS[i])));
            }
            (false, Some(_)) => {
                return Err(Error::Precondition(format!("input {} supplied but ablated", COMPONENTS[i])));
            }
            (false, None) => {}
            (true, Some(v)) => {
                let shape = tape.shape(*v).to_vec();
                if shape[1] != spec.dims[i] || batch.is_some_and(|b| b != shape[0]) {
                    return Err(Error::shape("gated_input", &[batch.unwrap_or(shape[0]), spec.dims[i]], &shape));
                }
                batch = Some(shape[0]);
                pieces.push(*v);
            }
        }
    }
    if pieces.is_empty() {
        return Err(Error::Precondition("decoder input has no active components".into()));
    }
    let u = tape.concat(&pieces, 1)?;
    match spec.gate {
        None => Ok(u),
        Some(w) => {
            let w = tape.param(w);
            let g = tape.matmul(u, w)?;
            let g = tape.sigmoid(g)?;
            tape.mul(g, u)
        }
    }
}

/// Hidden state per decoder layer, each `[B, d_s]`.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub layers: Vec<Var>,
}

/// Stacked GRU layers and the output projection onto the decoder vocabulary.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub layers: Vec<GruCell>,
    pub w_d: ParamId,
    pub b_d: ParamId,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        state_dim: usize,
        num_layers: usize,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let inp = if l == 0 { input_dim } else { state_dim };
            layers.push(GruCell::new(store, &format!("{prefix}.gru{}", l + 1), inp, state_dim, rng)?);
        }
        let w_d = init::weight(store, &format!("{prefix}.w_d"), state_dim, vocab_size, rng)?;
        let b_d = init::bias(store, &format!("{prefix}.b_d"), vocab_size, 0.0)?;
        Ok(Decoder { layers, w_d, b_d })
    }

    pub fn parameter_count(input_dim: usize, state_dim: usize, num_layers: usize, vocab_size: usize) -> usize {
        GruCell::parameter_count(input_dim, state_dim)
            + (num_layers - 1) * GruCell::parameter_count(state_dim, state_dim)
            + (state_dim + 1) * vocab_size
    }

    pub fn state_dim(&self) -> usize {
        self.layers[0].hidden_dim
    }

    /// Layer 1 starts from `s0`, the others from zero.
    pub fn initial_state(&self, tape: &mut Tape<'_>, s0: Var) -> DecoderState {
        let batch = tape.shape(s0)[0];
        let mut layers = vec![s0];
        for _ in 1..self.layers.len() {
            layers.push(tape.constant(Tensor::zeros(&[batch, self.state_dim()])));
        }
        DecoderState { layers }
    }

    /// Advances every layer by one step and returns the top-layer output.
    pub fn advance(&self, tape: &mut Tape<'_>, state: &DecoderState, x: Var) -> Result<(DecoderState, Var)> {
        let mut input = x;
        let mut next = Vec::with_capacity(self.layers.len());
        for (cell, h) in self.layers.iter().zip(&state.layers) {
            input = cell.step(tape, *h, input)?;
            next.push(input);
        }
        Ok((DecoderState { layers: next }, input))
    }

    pub fn logits(&self, tape: &mut Tape<'_>, top: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w_d), tape.param(self.b_d));
        tape.affine(top, w, b)
    }

    /// One step: new state and `[B, |Y|]` logits.
    pub fn step(&self, tape: &mut Tape<'_>, state: &DecoderState, x: Var) -> Result<(DecoderState, Var)> {
        let (next, top) = self.advance(tape, state, x)?;
        let logits = self.logits(tape, top)?;
        Ok((next, logits))
    }
}

/// Teacher-forced log probability of `target`: `step(prev, t)` returns the
/// distribution after consuming `prev`. The first input is `bos`; every
/// target token and a final `eos` are scored.
pub fn sequence_log_prob<F>(target: &[usize], bos: usize, eos: usize, mut step: F) -> Result<f64>
where
    F: FnMut(usize, usize) -> Result<Vec<f64>>,
{
    if target.is_empty() {
        return Err(Error::Precondition("empty target sequence".into()));
    }
    let mut total = 0.0;
    let mut prev = bos;
    for (t, &y) in target.iter().chain(std::iter::once(&eos)).enumerate() {
        let dist = step(prev, t)?;
        let p = *dist
            .get(y)
            .ok_or_else(|| Error::Precondition(format!("token {y} outside a {}-way distribution", dist.len())))?;
        total += p.ln();
        prev = y;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check_params, softmax_in_place, ParamCheckOptions};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn set(store: &mut ParamStore, id: ParamId, value: f64) {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = Tensor::filled(&shape, value);
    }

    #[test]
    fn init_state_variants() {
        let mut store = ParamStore::new();
        let init = StateInit::new(&mut store, InitVariant::Both, 2, 3, 4, &mut rng()).unwrap();
        let (_, b) = init.proj.unwrap();
        store.get_mut(b).value = Tensor::row(vec![1.0, 2.0, 3.0, 4.0]);
        let mut t = Tape::with_params(&store);
        let v = t.constant(Tensor::zeros(&[1, 2]));
        let c = t.constant(Tensor::zeros(&[1, 3]));
        let s0 = init.initial(&mut t, v, c).unwrap();
        assert_eq!(t.value(s0).data(), &[1.0, 2.0, 3.0, 4.0]);
        let bad = t.constant(Tensor::zeros(&[1, 5]));
        assert!(init.initial(&mut t, v, bad).is_err());

        let mut store = ParamStore::new();
        let zeros = StateInit::new(&mut store, InitVariant::Zeros, 2, 3, 4, &mut rng()).unwrap();
        assert_eq!(store.len(), 0);
        let mut t = Tape::with_params(&store);
        let v = t.constant(Tensor::filled(&[2, 2], 7.0));
        let c = t.constant(Tensor::filled(&[2, 3], -1.0));
        let s0 = zeros.initial(&mut t, v, c).unwrap();
        assert_eq!(t.value(s0), &Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn constant_projection() {
        let mut store = ParamStore::new();
        let init = StateInit::new(&mut store, InitVariant::Both, 2, 2, 3, &mut rng()).unwrap();
        let (w, b) = init.proj.unwrap();
        set(&mut store, w, 0.0);
        set(&mut store, b, 0.25);
        let mut t = Tape::with_params(&store);
        let v = t.constant(Tensor::row(vec![3.0, -9.0]));
        let c = t.constant(Tensor::row(vec![1.0, 5.0]));
        let s0 = init.initial(&mut t, v, c).unwrap();
        assert_eq!(t.value(s0).data(), &[0.25; 3]);
    }

    #[test]
    fn word_variant_ignores_context() {
        let mut store = ParamStore::new();
        let init = StateInit::new(&mut store, InitVariant::Word, 2, 2, 3, &mut rng()).unwrap();
        let mut t = Tape::with_params(&store);
        let v = t.constant(Tensor::row(vec![0.3, -0.2]));
        let c1 = t.constant(Tensor::row(vec![1.0, 5.0]));
        let c2 = t.constant(Tensor::row(vec![-4.0, 2.0]));
        let a = init.initial(&mut t, v, c1).unwrap();
        let b = init.initial(&mut t, v, c2).unwrap();
        assert_eq!(t.value(a), t.value(b));
    }

    fn spec(store: &mut ParamStore, active: [bool; 4], gated: bool) -> GatedInputSpec {
        GatedInputSpec::new(store, "dec", [2, 2, 3, 1], active, gated, &mut rng()).unwrap()
    }

    #[test]
    fn zero_gate_halves_input() {
        let mut store = ParamStore::new();
        let s = spec(&mut store, [true; 4], true);
        set(&mut store, s.gate.unwrap(), 0.0);
        let mut t = Tape::with_params(&store);
        let parts = [
            Some(t.constant(Tensor::row(vec![1.0, 2.0]))),
            Some(t.constant(Tensor::row(vec![3.0, 4.0]))),
            Some(t.constant(Tensor::row(vec![5.0, 6.0, 7.0]))),
            Some(t.constant(Tensor::row(vec![8.0]))),
        ];
        let x = gated_input(&mut t, &s, parts).unwrap();
        assert_eq!(t.value(x).data(), &[0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0]);

        let zeros = [
            Some(t.constant(Tensor::zeros(&[1, 2]))),
            Some(t.constant(Tensor::zeros(&[1, 2]))),
            Some(t.constant(Tensor::zeros(&[1, 3]))),
            Some(t.constant(Tensor::zeros(&[1, 1]))),
        ];
        let x = gated_input(&mut t, &s, zeros).unwrap();
        assert!(t.value(x).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mask_controls_width_and_rejects_extras() {
        let mut store = ParamStore::new();
        let s = spec(&mut store, [true, true, false, false], true);
        assert_eq!(s.width(), 4);
        assert_eq!(store.value(s.gate.unwrap()).shape(), &[4, 4]);
        let mut t = Tape::with_params(&store);
        let a = t.constant(Tensor::row(vec![1.0, 2.0]));
        let y = t.constant(Tensor::row(vec![3.0, 4.0]));
        let c = t.constant(Tensor::row(vec![5.0, 6.0, 7.0]));
        let x = gated_input(&mut t, &s, [Some(a), Some(y), None, None]).unwrap();
        assert_eq!(t.shape(x), &[1, 4]);
        assert!(gated_input(&mut t, &s, [Some(a), Some(y), Some(c), None]).is_err());
        assert!(gated_input(&mut t, &s, [Some(a), None, None, None]).is_err());
        assert!(gated_input(&mut t, &s, [Some(a), Some(c), None, None]).is_err());
    }

    #[test]
    fn ungated_input_is_plain_concat() {
        let mut store = ParamStore::new();
        let s = spec(&mut store, [true, true, false, true], false);
        assert_eq!(store.len(), 0);
        let mut t = Tape::with_params(&store);
        let a = t.constant(Tensor::row(vec![1.0, 2.0]));
        let y = t.constant(Tensor::row(vec![3.0, 4.0]));
        let e = t.constant(Tensor::row(vec![9.0]));
        let x = gated_input(&mut t, &s, [Some(a), Some(y), None, Some(e)]).unwrap();
        assert_eq!(t.value(x).data(), &[1.0, 2.0, 3.0, 4.0, 9.0]);
    }

    #[test]
    fn step_gives_distribution() {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, "dec", 3, 4, 2, 7, &mut rng()).unwrap();
        let mut t = Tape::with_params(&store);
        let s0 = t.constant(Tensor::row(vec![0.5, -0.5, 0.1, 0.9]));
        let state = dec.initial_state(&mut t, s0);
        assert_eq!(t.value(state.layers[1]), &Tensor::zeros(&[1, 4]));
        let x = t.constant(Tensor::row(vec![1.0, 2.0, -1.0]));
        let (next, logits) = dec.step(&mut t, &state, x).unwrap();
        assert_eq!(next.layers.len(), 2);
        let probs = t.softmax(logits, 1).unwrap();
        let p = t.value(probs).data();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&v| v > 0.0));
        let wrong = t.constant(Tensor::zeros(&[1, 2]));
        assert!(dec.step(&mut t, &state, wrong).is_err());
    }

    #[test]
    fn zero_projection_is_uniform() {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, "dec", 3, 4, 2, 5, &mut rng()).unwrap();
        set(&mut store, dec.w_d, 0.0);
        let mut t = Tape::with_params(&store);
        let s0 = t.constant(Tensor::row(vec![0.5, -0.5, 0.1, 0.9]));
        let state = dec.initial_state(&mut t, s0);
        let x = t.constant(Tensor::row(vec![1.0, 2.0, -1.0]));
        let (_, logits) = dec.step(&mut t, &state, x).unwrap();
        let probs = t.softmax(logits, 1).unwrap();
        assert!(t.value(probs).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn two_layer_gradient_check() {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, "dec", 3, 2, 2, 4, &mut rng()).unwrap();
        let err = grad_check_params(&store, ParamCheckOptions::default(), |t| {
            let s0 = t.constant(Tensor::row(vec![0.3, -0.7]));
            let mut state = dec.initial_state(t, s0);
            let mut loss_rows = Vec::new();
            for x in [[0.5, -1.0, 0.2], [0.1, 0.4, -0.3]] {
                let x = t.constant(Tensor::row(x.to_vec()));
                let (next, logits) = dec.step(t, &state, x)?;
                state = next;
                loss_rows.push(logits);
            }
            let logits = t.concat(&loss_rows, 0)?;
            t.cross_entropy(logits, &[Some(1), Some(3)])
        })
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn uniform_decoder_log_prob() {
        let v = 6usize;
        let lp = sequence_log_prob(&[4, 5, 4], 2, 3, |_, _| Ok(vec![1.0 / v as f64; v])).unwrap();
        assert!((lp + 4.0 * (v as f64).ln()).abs() < 1e-12);
        assert!(sequence_log_prob(&[], 2, 3, |_, _| Ok(vec![1.0; 4])).is_err());
    }

    #[test]
    fn forced_single_token_vocabulary() {
        let lp = sequence_log_prob(&[0, 0], 0, 0, |_, _| Ok(vec![1.0])).unwrap();
        assert_eq!(lp, 0.0);
    }

    #[test]
    fn log_prob_matches_stepwise_recomputation() {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, "dec", 2, 3, 2, 6, &mut rng()).unwrap();
        let table = Tensor::uniform(&[6, 2], 1.0, &mut rng());
        let target = [4usize, 5, 1];

        let mut t = Tape::with_params(&store);
        let s0 = t.constant(Tensor::row(vec![0.2, 0.1, -0.4]));
        let mut state = dec.initial_state(&mut t, s0);
        let lp = sequence_log_prob(&target, 2, 3, |prev, _| {
            let x = t.constant(Tensor::row(table.row_slice(prev).to_vec()));
            let (next, logits) = dec.step(&mut t, &state, x)?;
            state = next;
            let mut p = t.value(logits).data().to_vec();
            softmax_in_place(&mut p);
            Ok(p)
        })
        .unwrap();

        // Same computation as one batched cross-entropy over the sequence.
        let mut t = Tape::with_params(&store);
        let s0 = t.constant(Tensor::row(vec![0.2, 0.1, -0.4]));
        let mut state = dec.initial_state(&mut t, s0);
        let mut rows = Vec::new();
        for prev in [2usize, 4, 5, 1] {
            let x = t.constant(Tensor::row(table.row_slice(prev).to_vec()));
            let (next, logits) = dec.step(&mut t, &state, x).unwrap();
            state = next;
            rows.push(logits);
        }
        let logits = t.concat(&rows, 0).unwrap();
        let nll = t.cross_entropy(logits, &[Some(4), Some(5), Some(1), Some(3)]).unwrap();
        assert!((lp + t.value(nll).item()).abs() < 1e-12);
    }
}
