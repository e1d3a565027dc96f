//! Reverse-mode differentiation over a per-pass computation graph.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Nodes
//! are appended in evaluation order, so walking the node list backwards is a
//! valid topological order for the backward pass. A graph is meant to live
//! for one forward/backward pass and then be dropped.

use crate::autodiff::array::{gemm, Array};
use crate::error::{Error, Result};

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_trans: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    ScaleRows { x: Var, s: Var },
    Scale { x: Var, factor: f64 },
    Relu(Var),
    Softmax { x: Var, inv_tau: f64 },
    StopGradient,
    CrossEntropy { logits: Var, probs: Array, targets: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array, rstd: Vec<f64> },
    Gather { table: Var, indices: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    MaskedFill { x: Var, mask: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Computation graph for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Array>>,
    no_grad: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that never tracks gradients; used for evaluation and for the
    /// frozen baseline forward.
    pub fn no_grad() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn is_no_grad(&self) -> bool {
        self.no_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (br, bc) = self.value(b).dims2("matmul")?;
        let (k2, n) = if b_trans { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dimensions disagree: {:?} x {:?}{}",
                    self.value(a).shape(),
                    self.value(b).shape(),
                    if b_trans { "ᵀ" } else { "" }
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), b_trans, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array::matrix(m, n, out)?, Op::MatMul { a, b, b_trans }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        self.same_shape(op, a, b)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        Array::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a `[1, d]` bias to every row of an `[n, d]` matrix. This is the
    /// only broadcast the kernel supports.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2("add_bias")?;
        if self.value(bias).len() != d {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match width {d}", self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += *bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Array::matrix(n, d, out)?, Op::AddBias { x, bias }, rg))
    }

    /// Multiplies row `i` of `x` by the scalar `s[i]`; `s` has shape `[n, 1]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2("scale_rows")?;
        if self.value(s).shape() != [n, 1] {
            return Err(Error::shape(
                "scale_rows",
                format!("scale {:?} does not match {n} rows", self.value(s).shape()),
            ));
        }
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (row, f) in out.chunks_mut(d).zip(sv) {
            for o in row {
                *o *= *f;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Array::matrix(n, d, out)?, Op::ScaleRows { x, s }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let out = Array::new(v.shape().to_vec(), v.data().iter().map(|a| a * factor).collect())
            .expect("shape preserved");
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Array::new(v.shape().to_vec(), v.data().iter().map(|a| a.max(0.0)).collect())
            .expect("shape preserved");
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Row-wise `softmax(x / tau)` with max subtraction. Entries equal to
    /// `-inf` receive exactly zero probability.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let (n, d) = self.value(x).dims2("softmax_rows")?;
        let inv_tau = 1.0 / temperature;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row, inv_tau);
        }
        let rg = self.rg(x);
        Ok(self.push(Array::matrix(n, d, out)?, Op::Softmax { x, inv_tau }, rg))
    }

    /// Identity in the forward pass; contributes exactly zero gradient.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Per-row negative log-likelihood `-log softmax(logits[i])[targets[i]]`,
    /// returned as an `[n, 1]` column.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.value(logits).dims2("cross_entropy")?;
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {n} logit rows", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!("target {t} outside logit width {v}")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut out = Vec::with_capacity(n);
        for (i, row) in probs.chunks_mut(v).enumerate() {
            let lse = log_sum_exp(row);
            out.push(lse - row[targets[i]]);
            for p in row.iter_mut() {
                *p = (*p - lse).exp();
            }
        }
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            probs: Array::matrix(n, v, probs)?,
            targets: targets.to_vec(),
        };
        Ok(self.push(Array::matrix(n, 1, out)?, op, rg))
    }

    /// Scalar cross-entropy of a single logit row against one target.
    pub fn cross_entropy_from_logits(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (n, _) = self.value(logits).dims2("cross_entropy")?;
        if n != 1 {
            return Err(Error::shape("cross_entropy", "expected a single logit row"));
        }
        self.cross_entropy_rows(logits, &[target])
    }

    /// Row-wise layer normalisation followed by a per-feature affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.value(x).dims2("layer_norm")?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm", format!("gain/bias width must be {d}")));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: Array::matrix(n, d, xhat)?,
            rstd,
        };
        Ok(self.push(Array::matrix(n, d, out)?, op, rg))
    }

    /// Embedding lookup: row `indices[i]` of `table` becomes output row `i`.
    /// The backward pass scatter-adds into the table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, d) = self.value(table).dims2("gather_rows")?;
        if indices.is_empty() {
            return Err(Error::shape("gather_rows", "no indices"));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("row {i} outside table of {rows} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(tv.row_slice(i));
        }
        let rg = self.rg(table);
        let op = Op::Gather {
            table,
            indices: indices.to_vec(),
        };
        Ok(self.push(Array::matrix(indices.len(), d, out)?, op, rg))
    }

    /// Stacks matrices vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "nothing to concatenate"));
        }
        let (_, d) = self.value(parts[0]).dims2("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != d {
                return Err(Error::shape("concat_rows", format!("width {c} vs {d}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Array::matrix(rows, d, out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "nothing to concatenate"));
        }
        let (n, _) = self.value(parts[0]).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != n {
                return Err(Error::shape("concat_cols", format!("rows {r} vs {n}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p).data();
            for i in 0..n {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Array::matrix(n, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2("slice_cols")?;
        if len == 0 || start + len > d {
            return Err(Error::shape("slice_cols", format!("{start}..{} outside width {d}", start + len)));
        }
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&v[i * d + start..i * d + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Array::matrix(n, len, out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    /// Sum of all entries as a `[1, 1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Array::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of all entries as a `[1, 1]` scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Array::scalar(s), Op::Mean(x), rg)
    }

    /// Replaces entries where `mask` is true with `fill`. Filled entries pass
    /// no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let v = self.value(x);
        if mask.len() != v.len() {
            return Err(Error::shape("masked_fill", format!("mask of {} for {} values", mask.len(), v.len())));
        }
        let data = v
            .data()
            .iter()
            .zip(mask)
            .map(|(a, &m)| if m { fill } else { *a })
            .collect();
        let out = Array::new(v.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaskedFill { x, mask: mask.to_vec() }, rg))
    }

    /// Hides keys `j > i + offset` from query row `i` of an attention score
    /// matrix. With `offset = 0` this is the usual square causal mask; a
    /// positive offset accounts for cached keys that precede the queries.
    pub fn causal_mask(&mut self, scores: Var, offset: usize) -> Result<Var> {
        let (n, m) = self.value(scores).dims2("causal_mask")?;
        let mut mask = vec![false; n * m];
        for i in 0..n {
            for j in (i + offset + 1).min(m)..m {
                mask[i * m + j] = true;
            }
        }
        self.masked_fill(scores, &mask, f64::NEG_INFINITY)
    }

    /// Runs the backward pass from a scalar output, seeding it with 1.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::shape("backward", "output must be a scalar"));
        }
        let seed = Array::full(self.value(output).shape(), 1.0);
        self.backward_with(output, seed)
    }

    /// Runs the backward pass from `output` with an explicit upstream gradient.
    pub fn backward_with(&mut self, output: Var, seed: Array) -> Result<()> {
        if self.no_grad {
            return Err(Error::Pipeline("backward called on a no-grad graph".into()));
        }
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape("backward", "seed shape differs from output"));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    /// Gradient accumulated at `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn accumulate(&mut self, v: Var, g: Array) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(Array::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().expect("initialised").data_mut());
    }

    fn propagate(&mut self, idx: usize, g: &Array) {
        let shape = self.nodes[idx].value.shape().to_vec();
        // Temporarily move the op out so the node list can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul { a, b, b_trans } => {
                let (m, n) = (shape[0], shape[1]);
                let k = self.value(*a).cols();
                if self.rg(*a) {
                    // grad_a = g · bᵀ  (or g · b when b was used transposed)
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, self.value(*b).data(), !*b_trans, &mut ga, 0.0);
                    self.accumulate(*a, Array::matrix(m, k, ga).expect("shape"));
                }
                if self.rg(*b) {
                    let bshape = self.value(*b).shape().to_vec();
                    let mut gb = vec![0.0; k * n];
                    if *b_trans {
                        // b is n x k: grad_b = gᵀ · a
                        gemm(n, m, k, g.data(), true, self.value(*a).data(), false, &mut gb, 0.0);
                    } else {
                        // grad_b = aᵀ · g
                        gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut gb, 0.0);
                    }
                    self.accumulate(*b, Array::new(bshape, gb).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone());
                let mut neg = g.clone();
                neg.scale(-1.0);
                self.accumulate(*b, neg);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let ga: Vec<f64> = g.data().iter().zip(bv).map(|(x, y)| x * y).collect();
                    self.accumulate(*a, Array::new(shape.clone(), ga).expect("shape"));
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let gb: Vec<f64> = g.data().iter().zip(av).map(|(x, y)| x * y).collect();
                    self.accumulate(*b, Array::new(shape.clone(), gb).expect("shape"));
                }
            }
            Op::AddBias { x, bias } => {
                self.accumulate(*x, g.clone());
                let d = shape[1];
                let gd = g.data();
                self.accumulate_with(*bias, |acc| {
                    for row in gd.chunks(d) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += *v;
                        }
                    }
                });
            }
            Op::ScaleRows { x, s } => {
                let d = shape[1];
                if self.rg(*x) {
                    let sv = self.value(*s).data();
                    let mut gx = g.data().to_vec();
                    for (row, f) in gx.chunks_mut(d).zip(sv) {
                        for v in row {
                            *v *= *f;
                        }
                    }
                    self.accumulate(*x, Array::new(shape.clone(), gx).expect("shape"));
                }
                if self.rg(*s) {
                    let xv = self.value(*x).data();
                    let gs: Vec<f64> = g
                        .data()
                        .chunks(d)
                        .zip(xv.chunks(d))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    let n = gs.len();
                    self.accumulate(*s, Array::matrix(n, 1, gs).expect("shape"));
                }
            }
            Op::Scale { x, factor } => {
                let mut gx = g.clone();
                gx.scale(*factor);
                self.accumulate(*x, gx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(gv, a)| if *a > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(*x, Array::new(shape.clone(), gx).expect("shape"));
            }
            Op::Softmax { x, inv_tau } => {
                let d = shape[1];
                let y = self.nodes[idx].value.data();
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in g.data().chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - dot) * inv_tau;
                    }
                }
                self.accumulate(*x, Array::new(shape.clone(), gx).expect("shape"));
            }
            Op::CrossEntropy { logits, probs, targets } => {
                let v = probs.cols();
                let mut gl = probs.data().to_vec();
                for (i, row) in gl.chunks_mut(v).enumerate() {
                    row[targets[i]] -= 1.0;
                    let gi = g.data()[i];
                    for p in row.iter_mut() {
                        *p *= gi;
                    }
                }
                self.accumulate(*logits, Array::new(probs.shape().to_vec(), gl).expect("shape"));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = shape[1];
                let gd = g.data();
                let xh = xhat.data();
                if self.rg(*x) {
                    let gam = self.value(*gamma).data();
                    let mut gx = vec![0.0; gd.len()];
                    for (i, r) in rstd.iter().enumerate() {
                        let gr = &gd[i * d..(i + 1) * d];
                        let hr = &xh[i * d..(i + 1) * d];
                        let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[i * d + j] = r * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                    self.accumulate(*x, Array::new(shape.clone(), gx).expect("shape"));
                }
                self.accumulate_with(*gamma, |acc| {
                    for (gr, hr) in gd.chunks(d).zip(xh.chunks(d)) {
                        for j in 0..d {
                            acc[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.accumulate_with(*beta, |acc| {
                    for gr in gd.chunks(d) {
                        for j in 0..d {
                            acc[j] += gr[j];
                        }
                    }
                });
            }
            Op::Gather { table, indices } => {
                let d = shape[1];
                let gd = g.data();
                self.accumulate_with(*table, |acc| {
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            acc[i * d + j] += gd[k * d + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        let gp = g.data()[offset..offset + len].to_vec();
                        let ps = self.value(p).shape().to_vec();
                        self.accumulate(p, Array::new(ps, gp).expect("shape"));
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (n, total) = (shape[0], shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(n * w);
                        for i in 0..n {
                            gp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(p, Array::matrix(n, w, gp).expect("shape"));
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (n, w) = (shape[0], shape[1]);
                let d = self.value(*x).cols();
                let gd = g.data();
                let start = *start;
                self.accumulate_with(*x, |acc| {
                    for i in 0..n {
                        for j in 0..w {
                            acc[i * d + start + j] += gd[i * w + j];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                self.accumulate(*x, g.transpose().expect("rank 2"));
            }
            Op::Sum(x) => {
                let xs = self.value(*x).shape().to_vec();
                self.accumulate(*x, Array::full(&xs, g.data()[0]));
            }
            Op::Mean(x) => {
                let xs = self.value(*x).shape().to_vec();
                let n = self.value(*x).len() as f64;
                self.accumulate(*x, Array::full(&xs, g.data()[0] / n));
            }
            Op::MaskedFill { x, mask } => {
                let gx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(gv, &m)| if m { 0.0 } else { *gv })
                    .collect();
                self.accumulate(*x, Array::new(shape.clone(), gx).expect("shape"));
            }
        }
        self.nodes[idx].op = op;
    }
}

/// Numerically stable `log Σ exp(row)`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// In-place `softmax(row * inv_tau)`.
pub fn softmax_in_place(row: &mut [f64], inv_tau: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) * inv_tau).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// In-place log-softmax of a row.
pub fn log_softmax_in_place(row: &mut [f64]) {
    let lse = log_sum_exp(row);
    for v in row.iter_mut() {
        *v -= lse;
    }
}
