//! GRU cell, bidirectional context encoder with max pooling, and the
//! target-word sense attention.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Gated recurrent unit:
///
/// ```text
/// z  = sigmoid(x W_z + h U_z + b_z)
/// r  = sigmoid(x W_r + h U_r + b_r)
/// h~ = tanh(x W_h + (r * h) U_h + b_h)
/// h' = (1 - z) * h + z * h~
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w: [ParamId; 3],
    pub u: [ParamId; 3],
    pub b: [ParamId; 3],
}

/// Input-side projections `x W + b` for the z, r and candidate gates.
#[derive(Debug, Clone, Copy)]
pub struct GateInputs {
    pub z: Var,
    pub r: Var,
    pub h: Var,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut w = Vec::new();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for gate in ["z", "r", "h"] {
            w.push(init::weight(store, &format!("{prefix}.w_{gate}"), input_dim, hidden_dim, rng)?);
            u.push(init::weight(store, &format!("{prefix}.u_{gate}"), hidden_dim, hidden_dim, rng)?);
            b.push(init::bias(store, &format!("{prefix}.b_{gate}"), hidden_dim, 0.0)?);
        }
        Ok(GruCell {
            input_dim,
            hidden_dim,
            w: [w[0], w[1], w[2]],
            u: [u[0], u[1], u[2]],
            b: [b[0], b[1], b[2]],
        })
    }

    pub fn parameter_count(input_dim: usize, hidden_dim: usize) -> usize {
        3 * (input_dim * hidden_dim + hidden_dim * hidden_dim + hidden_dim)
    }

    /// Projects `x` (`[n, input_dim]`) for all gates at once; rows are
    /// batch entries or time steps.
    pub fn project(&self, tape: &mut Tape<'_>, x: Var) -> Result<GateInputs> {
        let cols = tape.shape(x)[1];
        if cols != self.input_dim {
            return Err(Error::shape("gru input", &[self.input_dim], tape.shape(x)));
        }
        let mut out = [x; 3];
        for (g, o) in out.iter_mut().enumerate() {
            let (w, b) = (tape.param(self.w[g]), tape.param(self.b[g]));
            *o = tape.affine(x, w, b)?;
        }
        Ok(GateInputs {
            z: out[0],
            r: out[1],
            h: out[2],
        })
    }

    /// One recurrence given pre-projected inputs.
    pub fn step_projected(&self, tape: &mut Tape<'_>, h_prev: Var, gates: GateInputs) -> Result<Var> {
        if tape.shape(h_prev)[1] != self.hidden_dim {
            return Err(Error::shape("gru state", &[self.hidden_dim], tape.shape(h_prev)));
        }
        let (uz, ur, uh) = (tape.param(self.u[0]), tape.param(self.u[1]), tape.param(self.u[2]));
        let hz = tape.matmul(h_prev, uz)?;
        let z = tape.add(gates.z, hz)?;
        let z = tape.sigmoid(z)?;
        let hr = tape.matmul(h_prev, ur)?;
        let r = tape.add(gates.r, hr)?;
        let r = tape.sigmoid(r)?;
        let rh = tape.mul(r, h_prev)?;
        let rh = tape.matmul(rh, uh)?;
        let cand = tape.add(gates.h, rh)?;
        let cand = tape.tanh(cand)?;
        let delta = tape.sub(cand, h_prev)?;
        let delta = tape.mul(z, delta)?;
        tape.add(h_prev, delta)
    }

    pub fn step(&self, tape: &mut Tape<'_>, h_prev: Var, x: Var) -> Result<Var> {
        let gates = self.project(tape, x)?;
        self.step_projected(tape, h_prev, gates)
    }
}

/// Per-token states `[m, 2 d_h]` (forward half first) and their
/// dimension-wise max `[1, 2 d_h]`.
#[derive(Debug, Clone, Copy)]
pub struct EncodedContext {
    pub states: Var,
    pub pooled: Var,
}

/// Bidirectional GRU over the encoder's own trainable embedding table.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    pub embed: ParamId,
    pub forward: GruCell,
    pub backward: GruCell,
    pub max_len: usize,
}

impl ContextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        embed_init: Tensor,
        hidden_dim: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let word_dim = embed_init.cols();
        let embed = store.add("encoder.embed", embed_init, true)?;
        let forward = GruCell::new(store, "encoder.fwd", word_dim, hidden_dim, rng)?;
        let backward = GruCell::new(store, "encoder.bwd", word_dim, hidden_dim, rng)?;
        Ok(ContextEncoder {
            embed,
            forward,
            backward,
            max_len,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.forward.hidden_dim
    }

    /// Encodes token ids; contexts longer than `max_len` are truncated.
    pub fn encode(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<EncodedContext> {
        if ids.is_empty() {
            return Err(Error::Precondition("cannot encode an empty context".into()));
        }
        let ids = &ids[..ids.len().min(self.max_len)];
        let m = ids.len();
        let table = tape.param(self.embed);
        let x = tape.embedding(table, ids)?;
        let fwd = run_direction(tape, &self.forward, x, m, false)?;
        let bwd = run_direction(tape, &self.backward, x, m, true)?;
        let rows = fwd
            .iter()
            .zip(&bwd)
            .map(|(f, b)| tape.concat(&[*f, *b], 1))
            .collect::<Result<Vec<_>>>()?;
        let states = tape.concat(&rows, 0)?;
        let pooled = tape.max_axis(states, 0)?;
        Ok(EncodedContext { states, pooled })
    }
}

/// Runs `cell` over the rows of `x`, returning states in position order.
fn run_direction(tape: &mut Tape<'_>, cell: &GruCell, x: Var, m: usize, reverse: bool) -> Result<Vec<Var>> {
    let proj = cell.project(tape, x)?;
    let mut h = tape.constant(Tensor::zeros(&[1, cell.hidden_dim]));
    let mut out = vec![h; m];
    let order: Vec<usize> = if reverse { (0..m).rev().collect() } else { (0..m).collect() };
    for i in order {
        let gates = GateInputs {
            z: tape.slice(proj.z, 0, i, 1)?,
            r: tape.slice(proj.r, 0, i, 1)?,
            h: tape.slice(proj.h, 0, i, 1)?,
        };
        h = cell.step_projected(tape, h, gates)?;
        out[i] = h;
    }
    Ok(out)
}

/// `softmax(q k^T / sqrt(d)) v` for a single query row. Returns the attended
/// `[1, d]` row and the `[1, m]` weights.
pub fn scaled_dot_attention(tape: &mut Tape<'_>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = tape.shape(q)[1];
    let scores = tape.matmul_t(q, k)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax(scores, 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Context-aware target representation: the target embedding queries the
/// encoded context states, and the attended value is projected back to the
/// word-embedding width.
#[derive(Debug, Clone)]
pub struct SenseAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl SenseAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        word_dim: usize,
        state_dim: usize,
        attn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(SenseAttention {
            w_q: init::weight(store, "attention.w_q", word_dim, attn_dim, rng)?,
            w_k: init::weight(store, "attention.w_k", state_dim, attn_dim, rng)?,
            w_v: init::weight(store, "attention.w_v", state_dim, attn_dim, rng)?,
            w_o: init::weight(store, "attention.w_o", attn_dim, word_dim, rng)?,
        })
    }

    pub fn parameter_count(word_dim: usize, state_dim: usize, attn_dim: usize) -> usize {
        2 * word_dim * attn_dim + 2 * state_dim * attn_dim
    }

    /// Returns `(a*, weights)` with `a*` of shape `[1, word_dim]`.
    pub fn forward(&self, tape: &mut Tape<'_>, target: Var, states: Var) -> Result<(Var, Var)> {
        let (wq, wk, wv, wo) = (
            tape.param(self.w_q),
            tape.param(self.w_k),
            tape.param(self.w_v),
            tape.param(self.w_o),
        );
        let q = tape.matmul(target, wq)?;
        let k = tape.matmul(states, wk)?;
        let v = tape.matmul(states, wv)?;
        let (attended, weights) = scaled_dot_attention(tape, q, k, v)?;
        let a = tape.matmul(attended, wo)?;
        Ok((a, weights))
    }
}
