use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    tape: u64,
}

#[derive(Debug)]
enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    /// Constants, inputs, parameters, and any node whose inputs carry no gradient.
    Leaf,
    MatMul { a: usize, b: usize, transpose_b: bool },
    Add { a: usize, b: usize, broadcast: bool },
    Concat { inputs: Vec<usize>, axis: usize },
    Mul { a: usize, b: usize },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Softmax { a: usize, axis: usize },
    MaxAxis { a: usize, argmax: Vec<usize> },
    Embedding { table: usize, ids: Vec<usize> },
    Conv1d { input: usize, weight: usize },
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, probs: Vec<f64> },
    Scale { a: usize, factor: f64 },
    Slice { a: usize, axis: usize, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Parameter values are borrowed from a [`ParamStore`]
/// rather than copied, so the store cannot be mutated while a tape is alive.
///
/// Every primitive checks its input shapes and rejects non-finite outputs.
/// Vectors are `[1, n]` rows.
pub struct Tape<'p> {
    id: u64,
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape with no parameter store; only constants and inputs can be used.
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape {
            store: Some(store),
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.value_at(v.idx)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn value_at(&self, idx: usize) -> &Tensor {
        match &self.nodes[idx].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .store
                .expect("parameter node without a store")
                .value(*id),
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Precondition("variable does not belong to this tape".into()));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
        if t.is_finite() {
            Ok(t)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradient; used for gradient checks on raw tensors.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a parameter once per tape; repeated calls return the same
    /// node so gradients from every use accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let store = self.store.expect("tape has no parameter store");
        let trainable = store.get(id).trainable;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: trainable,
        });
        let v = Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        };
        self.param_vars.insert(id, v);
        v
    }

    fn rank2(&self, op: &'static str, idx: usize) -> Result<(usize, usize)> {
        let s = self.value_at(idx).shape();
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.rank2("matmul", ai)?;
        let (br, bc) = self.rank2("matmul", bi)?;
        let (kb, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                self.value_at(ai).shape(),
                self.value_at(bi).shape(),
            ));
        }
        let av = self.value_at(ai).data();
        let bv = self.value_at(bi).data();
        let mut out = vec![0.0; m * n];
        if transpose_b {
            for i in 0..m {
                let arow = &av[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bv[j * k..(j + 1) * k];
                    out[i * n + j] = dot(arow, brow);
                }
            }
        } else {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    axpy(x, &bv[p * n..(p + 1) * n], orow);
                }
            }
        }
        let t = Self::finite("matmul", Tensor::new(vec![m, n], out)?)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(t, Op::MatMul { a: ai, b: bi, transpose_b }, rg))
    }

    /// Element-wise sum of equal shapes, or `[m, n] + [1, n]` with the row
    /// broadcast over every row of the left operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let sa = self.value_at(ai).shape();
        let sb = self.value_at(bi).shape();
        let broadcast = if sa == sb {
            false
        } else if sa.len() == 2 && sb.len() == 2 && sb[0] == 1 && sa[1] == sb[1] {
            true
        } else {
            return Err(Error::shape("add", sa, sb));
        };
        let shape = sa.to_vec();
        let av = self.value_at(ai).data();
        let bv = self.value_at(bi).data();
        let data: Vec<f64> = if broadcast {
            let n = shape[1];
            av.iter().enumerate().map(|(i, x)| x + bv[i % n]).collect()
        } else {
            av.iter().zip(bv).map(|(x, y)| x + y).collect()
        };
        let t = Self::finite("add", Tensor::new(shape, data)?)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(t, Op::Add { a: ai, b: bi, broadcast }, rg))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() || axis > 1 {
            return Err(Error::Precondition("concat needs inputs and axis 0 or 1".into()));
        }
        let idxs = inputs.iter().map(|v| self.check(*v)).collect::<Result<Vec<_>>>()?;
        let (r0, c0) = self.rank2("concat", idxs[0])?;
        for &i in &idxs[1..] {
            let (r, c) = self.rank2("concat", i)?;
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(Error::shape(
                    "concat",
                    self.value_at(idxs[0]).shape(),
                    self.value_at(i).shape(),
                ));
            }
        }
        let t = if axis == 0 {
            let rows: usize = idxs.iter().map(|&i| self.value_at(i).rows()).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &i in &idxs {
                data.extend_from_slice(self.value_at(i).data());
            }
            Tensor::new(vec![rows, c0], data)?
        } else {
            let cols: usize = idxs.iter().map(|&i| self.value_at(i).cols()).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &i in &idxs {
                    data.extend_from_slice(self.value_at(i).row_slice(r));
                }
            }
            Tensor::new(vec![r0, cols], data)?
        };
        let rg = idxs.iter().any(|&i| self.rg(i));
        Ok(self.push(t, Op::Concat { inputs: idxs, axis }, rg))
    }

    /// Element-wise (Hadamard) product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let sa = self.value_at(ai).shape();
        let sb = self.value_at(bi).shape();
        if sa != sb {
            return Err(Error::shape("mul", sa, sb));
        }
        let shape = sa.to_vec();
        let data = self
            .value_at(ai)
            .data()
            .iter()
            .zip(self.value_at(bi).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Self::finite("mul", Tensor::new(shape, data)?)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(t, Op::Mul { a: ai, b: bi }, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let src = self.value_at(ai);
        let data = src.data().iter().map(|&x| sigmoid(x)).collect();
        let t = Self::finite("sigmoid", Tensor::new(src.shape().to_vec(), data)?)?;
        let rg = self.rg(ai);
        Ok(self.push(t, Op::Sigmoid { a: ai }, rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let src = self.value_at(ai);
        let data = src.data().iter().map(|x| x.tanh()).collect();
        let t = Self::finite("tanh", Tensor::new(src.shape().to_vec(), data)?)?;
        let rg = self.rg(ai);
        Ok(self.push(t, Op::Tanh { a: ai }, rg))
    }

    /// Softmax along `axis` of a rank-2 tensor.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let (m, n) = self.rank2("softmax", ai)?;
        if axis > 1 {
            return Err(Error::Precondition(format!("softmax axis {axis}")));
        }
        let src = self.value_at(ai).data();
        let mut out = vec![0.0; m * n];
        let (lines, len, stride_line, stride_elem) = if axis == 1 { (m, n, n, 1) } else { (n, m, 1, n) };
        let mut buf = vec![0.0; len];
        for l in 0..lines {
            for (e, b) in buf.iter_mut().enumerate() {
                *b = src[l * stride_line + e * stride_elem];
            }
            softmax_in_place(&mut buf);
            for (e, b) in buf.iter().enumerate() {
                out[l * stride_line + e * stride_elem] = *b;
            }
        }
        let t = Self::finite("softmax", Tensor::new(vec![m, n], out)?)?;
        let rg = self.rg(ai);
        Ok(self.push(t, Op::Softmax { a: ai, axis }, rg))
    }

    /// Maximum along `axis`, keeping the reduced dimension as size 1:
    /// axis 0 maps `[m, n] -> [1, n]`, axis 1 maps `[m, n] -> [m, 1]`.
    /// Ties resolve to the first index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let (m, n) = self.rank2("max_axis", ai)?;
        let src = self.value_at(ai).data();
        let (shape, argmax, data) = match axis {
            0 => {
                let mut arg = vec![0usize; n];
                let mut best = src[..n].to_vec();
                for i in 1..m {
                    for j in 0..n {
                        if src[i * n + j] > best[j] {
                            best[j] = src[i * n + j];
                            arg[j] = i;
                        }
                    }
                }
                let flat = arg.iter().enumerate().map(|(j, &i)| i * n + j).collect();
                (vec![1, n], flat, best)
            }
            1 => {
                let mut flat = Vec::with_capacity(m);
                let mut best = Vec::with_capacity(m);
                for i in 0..m {
                    let row = &src[i * n..(i + 1) * n];
                    let (j, v) = row
                        .iter()
                        .enumerate()
                        .fold((0, row[0]), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
                    flat.push(i * n + j);
                    best.push(v);
                }
                (vec![m, 1], flat, best)
            }
            _ => return Err(Error::Precondition(format!("max_axis axis {axis}"))),
        };
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(ai);
        Ok(self.push(t, Op::MaxAxis { a: ai, argmax }, rg))
    }

    /// Gathers rows of `table` (`[V, d]`) into `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ti = self.check(table)?;
        let (v, d) = self.rank2("embedding", ti)?;
        if ids.is_empty() {
            return Err(Error::Precondition("embedding lookup with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embedding", &[v, d], &[bad]));
        }
        let src = self.value_at(ti);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(src.row_slice(i));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(ti);
        Ok(self.push(
            t,
            Op::Embedding {
                table: ti,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Valid-padding 1-D convolution. `input` is `[L, C]` (positions x
    /// channels); `weight` is `[w * C, F]`, the flattened `w x C` window for
    /// each of `F` filters. Output is `[L - w + 1, F]`.
    pub fn conv1d(&mut self, input: Var, weight: Var) -> Result<Var> {
        let (ii, wi) = (self.check(input)?, self.check(weight)?);
        let (len, ch) = self.rank2("conv1d", ii)?;
        let (wr, f) = self.rank2("conv1d", wi)?;
        if wr % ch != 0 || wr / ch > len {
            return Err(Error::shape(
                "conv1d",
                self.value_at(ii).shape(),
                self.value_at(wi).shape(),
            ));
        }
        let width = wr / ch;
        let positions = len - width + 1;
        let x = self.value_at(ii).data();
        let w = self.value_at(wi).data();
        let mut out = vec![0.0; positions * f];
        for i in 0..positions {
            let window = &x[i * ch..(i + width) * ch];
            let orow = &mut out[i * f..(i + 1) * f];
            for (p, &xv) in window.iter().enumerate() {
                if xv != 0.0 {
                    axpy(xv, &w[p * f..(p + 1) * f], orow);
                }
            }
        }
        let t = Self::finite("conv1d", Tensor::new(vec![positions, f], out)?)?;
        let rg = self.rg(ii) || self.rg(wi);
        Ok(self.push(t, Op::Conv1d { input: ii, weight: wi }, rg))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[n, V]`). Rows with a `None` target are masked out.
    /// Returns a `[1, 1]` scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let li = self.check(logits)?;
        let (n, v) = self.rank2("cross_entropy", li)?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", &[n, v], &[targets.len()]));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::shape("cross_entropy", &[n, v], &[*bad]));
        }
        let src = self.value_at(li).data();
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = target else { continue };
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[*t];
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let t = Self::finite("cross_entropy", Tensor::scalar(loss))?;
        let rg = self.rg(li);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits: li,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ai = self.check(a)?;
        let src = self.value_at(ai);
        let data = src.data().iter().map(|x| x * factor).collect();
        let t = Self::finite("scale", Tensor::new(src.shape().to_vec(), data)?)?;
        let rg = self.rg(ai);
        Ok(self.push(t, Op::Scale { a: ai, factor }, rg))
    }

    /// `len` consecutive rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let (m, n) = self.rank2("slice", ai)?;
        let extent = match axis {
            0 => m,
            1 => n,
            _ => return Err(Error::Precondition(format!("slice axis {axis}"))),
        };
        if len == 0 || start + len > extent {
            return Err(Error::shape("slice", &[m, n], &[axis, start, len]));
        }
        let src = self.value_at(ai);
        let t = if axis == 0 {
            Tensor::new(vec![len, n], src.data()[start * n..(start + len) * n].to_vec())?
        } else {
            let mut data = Vec::with_capacity(m * len);
            for r in 0..m {
                data.extend_from_slice(&src.row_slice(r)[start..start + len]);
            }
            Tensor::new(vec![m, len], data)?
        };
        let rg = self.rg(ai);
        Ok(self.push(t, Op::Slice { a: ai, axis, start }, rg))
    }

    // Composites built only from the primitives above.

    /// `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Sum of all entries as a `[1, 1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rank2("sum", self.check(a)?)?;
        let left = self.constant(Tensor::filled(&[1, m], 1.0));
        let right = self.constant(Tensor::filled(&[n, 1], 1.0));
        let rows = self.matmul(left, a)?;
        self.matmul(rows, right)
    }

    /// `x W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Reverse sweep from a scalar `loss`. Every node is visited once, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        let li = self.check(loss)?;
        if self.value_at(li).len() != 1 {
            return Err(Error::Precondition(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value_at(li).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![1.0]);
        for idx in (0..=li).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Backward { tape: self.id, grads })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = self.value_at(idx);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (m, k) = (self.value_at(*a).shape()[0], self.value_at(*a).shape()[1]);
                let n = out.shape()[1];
                let av = self.value_at(*a).data();
                let bv = self.value_at(*b).data();
                if self.rg(*a) {
                    self.acc(grads, *a, |da| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            let darow = &mut da[i * k..(i + 1) * k];
                            if *transpose_b {
                                // da = g b, b is [n, k]
                                for (j, &gv) in grow.iter().enumerate() {
                                    if gv != 0.0 {
                                        axpy(gv, &bv[j * k..(j + 1) * k], darow);
                                    }
                                }
                            } else {
                                // da = g b^T, b is [k, n]
                                for (p, d) in darow.iter_mut().enumerate() {
                                    *d += dot(grow, &bv[p * n..(p + 1) * n]);
                                }
                            }
                        }
                    });
                }
                if self.rg(*b) {
                    self.acc(grads, *b, |db| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            let arow = &av[i * k..(i + 1) * k];
                            if *transpose_b {
                                // db = g^T a, db is [n, k]
                                for (j, &gv) in grow.iter().enumerate() {
                                    if gv != 0.0 {
                                        axpy(gv, arow, &mut db[j * k..(j + 1) * k]);
                                    }
                                }
                            } else {
                                // db = a^T g, db is [k, n]
                                for (p, &x) in arow.iter().enumerate() {
                                    if x != 0.0 {
                                        axpy(x, grow, &mut db[p * n..(p + 1) * n]);
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::Add { a, b, broadcast } => {
                if self.rg(*a) {
                    self.acc(grads, *a, |da| add_into(da, g));
                }
                if self.rg(*b) {
                    if *broadcast {
                        let n = out.shape()[1];
                        self.acc(grads, *b, |db| {
                            for row in g.chunks(n) {
                                add_into(db, row);
                            }
                        });
                    } else {
                        self.acc(grads, *b, |db| add_into(db, g));
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let cols = out.shape()[1];
                let mut offset = 0;
                for &i in inputs {
                    let (r, c) = (self.value_at(i).shape()[0], self.value_at(i).shape()[1]);
                    if self.rg(i) {
                        self.acc(grads, i, |d| {
                            if *axis == 0 {
                                add_into(d, &g[offset * cols..(offset + r) * cols]);
                            } else {
                                for row in 0..r {
                                    add_into(
                                        &mut d[row * c..(row + 1) * c],
                                        &g[row * cols + offset..row * cols + offset + c],
                                    );
                                }
                            }
                        });
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Mul { a, b } => {
                let av = self.value_at(*a).data();
                let bv = self.value_at(*b).data();
                if self.rg(*a) {
                    self.acc(grads, *a, |da| {
                        for ((d, gv), y) in da.iter_mut().zip(g).zip(bv) {
                            *d += gv * y;
                        }
                    });
                }
                if self.rg(*b) {
                    self.acc(grads, *b, |db| {
                        for ((d, gv), x) in db.iter_mut().zip(g).zip(av) {
                            *d += gv * x;
                        }
                    });
                }
            }
            Op::Sigmoid { a } => {
                let y = out.data();
                self.acc(grads, *a, |da| {
                    for ((d, gv), s) in da.iter_mut().zip(g).zip(y) {
                        *d += gv * s * (1.0 - s);
                    }
                });
            }
            Op::Tanh { a } => {
                let y = out.data();
                self.acc(grads, *a, |da| {
                    for ((d, gv), t) in da.iter_mut().zip(g).zip(y) {
                        *d += gv * (1.0 - t * t);
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let y = out.data();
                let (lines, len, sl, se) = if *axis == 1 { (m, n, n, 1) } else { (n, m, 1, n) };
                self.acc(grads, *a, |da| {
                    for l in 0..lines {
                        let inner: f64 = (0..len)
                            .map(|e| g[l * sl + e * se] * y[l * sl + e * se])
                            .sum();
                        for e in 0..len {
                            let p = l * sl + e * se;
                            da[p] += y[p] * (g[p] - inner);
                        }
                    }
                });
            }
            Op::MaxAxis { a, argmax } => {
                self.acc(grads, *a, |da| {
                    for (gv, &src) in g.iter().zip(argmax) {
                        da[src] += gv;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = out.shape()[1];
                self.acc(grads, *table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Conv1d { input, weight } => {
                let ch = self.value_at(*input).shape()[1];
                let f = out.shape()[1];
                let positions = out.shape()[0];
                let width = self.value_at(*weight).shape()[0] / ch;
                let x = self.value_at(*input).data();
                let w = self.value_at(*weight).data();
                if self.rg(*input) {
                    self.acc(grads, *input, |dx| {
                        for i in 0..positions {
                            let grow = &g[i * f..(i + 1) * f];
                            let dwin = &mut dx[i * ch..(i + width) * ch];
                            for (p, d) in dwin.iter_mut().enumerate() {
                                *d += dot(grow, &w[p * f..(p + 1) * f]);
                            }
                        }
                    });
                }
                if self.rg(*weight) {
                    self.acc(grads, *weight, |dw| {
                        for i in 0..positions {
                            let grow = &g[i * f..(i + 1) * f];
                            let win = &x[i * ch..(i + width) * ch];
                            for (p, &xv) in win.iter().enumerate() {
                                if xv != 0.0 {
                                    axpy(xv, grow, &mut dw[p * f..(p + 1) * f]);
                                }
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value_at(*logits).shape()[1];
                let gs = g[0];
                self.acc(grads, *logits, |dl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let row = &mut dl[r * v..(r + 1) * v];
                        for (d, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *d += gs * p;
                        }
                        row[*t] -= gs;
                    }
                });
            }
            Op::Scale { a, factor } => {
                self.acc(grads, *a, |da| {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv * factor;
                    }
                });
            }
            Op::Slice { a, axis, start } => {
                let n = self.value_at(*a).shape()[1];
                let (r, c) = (out.shape()[0], out.shape()[1]);
                self.acc(grads, *a, |da| {
                    if *axis == 0 {
                        add_into(&mut da[start * n..(start + r) * n], g);
                    } else {
                        for row in 0..r {
                            add_into(
                                &mut da[row * n + start..row * n + start + c],
                                &g[row * c..(row + 1) * c],
                            );
                        }
                    }
                });
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], idx: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let slot = grads[idx].get_or_insert_with(|| vec![0.0; self.value_at(idx).len()]);
        f(slot);
    }

    /// Collects parameter gradients from a finished backward pass.
    pub fn param_grads(&self, back: &Backward) -> Gradients {
        let len = self.store.map_or(0, ParamStore::len);
        let mut out = Gradients::new(len);
        for (id, var) in &self.param_vars {
            if let Some(g) = back.wrt(*var) {
                out.set(*id, g.to_vec());
            }
        }
        out
    }
}

/// Result of [`Tape::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Backward {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Backward {
    /// Gradient of the loss with respect to `v`, if `v` requires grad and the
    /// loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
