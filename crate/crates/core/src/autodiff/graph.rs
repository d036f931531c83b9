//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node in creation order, so a
//! reverse sweep over the node list is a valid topological order. Nodes that
//! do not depend on any gradient-requiring leaf are skipped during backward.

use std::sync::Arc;

use crate::autodiff::tensor::{gemm_acc, Tensor};
use crate::error::{Error, Result};

/// Probabilities fed to the log-losses are clamped this far from 0 and 1.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constant sparse row-mixing matrix in CSR form: output row `r` is
/// `sum_j w_j * src[idx_j]` over the entries of row `r`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseMix {
    offsets: Vec<usize>,
    idx: Vec<usize>,
    w: Vec<f64>,
}

impl SparseMix {
    pub fn new() -> Self {
        SparseMix { offsets: vec![0], idx: Vec::new(), w: Vec::new() }
    }

    pub fn push_row<I: IntoIterator<Item = (usize, f64)>>(&mut self, entries: I) {
        for (i, w) in entries {
            self.idx.push(i);
            self.w.push(w);
        }
        self.offsets.push(self.idx.len());
    }

    /// Plain row selection.
    pub fn gather(rows: &[usize]) -> Self {
        let mut m = SparseMix::new();
        for &r in rows {
            m.push_row([(r, 1.0)]);
        }
        m
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[r], self.offsets[r + 1]);
        self.idx[a..b].iter().copied().zip(self.w[a..b].iter().copied())
    }

    pub fn max_index(&self) -> Option<usize> {
        self.idx.iter().copied().max()
    }

    /// Applies the mix to a plain tensor.
    pub fn apply(&self, src: &Tensor) -> Tensor {
        let c = src.cols();
        let mut out = Tensor::zeros(self.out_rows(), c);
        for r in 0..self.out_rows() {
            let dst = &mut out.data_mut()[r * c..(r + 1) * c];
            for (i, w) in self.row(r) {
                let s = src.row(i);
                for k in 0..c {
                    dst[k] += w * s[k];
                }
            }
        }
        out
    }
}

/// Input/output row pairs per kernel offset for a sparse convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Rulebook {
    pub n_in: usize,
    pub n_out: usize,
    /// `pairs[k]` lists `(input_row, output_row)` for kernel offset `k`.
    pub pairs: Vec<Vec<(u32, u32)>>,
}

impl Rulebook {
    pub fn kernel_volume(&self) -> usize {
        self.pairs.len()
    }
}

/// Variable-size row groups for max pooling (CSR).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Groups {
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl Groups {
    pub fn new() -> Self {
        Groups { offsets: vec![0], members: Vec::new() }
    }

    pub fn push_group<I: IntoIterator<Item = usize>>(&mut self, members: I) {
        self.members.extend(members);
        self.offsets.push(self.members.len());
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.members[self.offsets[g]..self.offsets[g + 1]]
    }
}

#[derive(Debug, Clone)]
struct LossTerms {
    labels: Vec<f64>,
    weights: Vec<f64>,
    denom: f64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Mix(Var, Arc<SparseMix>),
    Conv(Var, Var, Arc<Rulebook>),
    MaxPool(Var, Arc<Groups>, Vec<usize>),
    Sum(Var),
    SmoothL1(Var, Tensor),
    Focal(Var, Arc<LossTerms>, f64, f64),
    Bce(Var, Arc<LossTerms>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients for every node that received one in a backward sweep.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    diagnostics: Vec<String>,
}

fn shape_err(lhs: (usize, usize), rhs: (usize, usize), context: &'static str) -> Error {
    Error::Shape { lhs, rhs, context }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-finite values seen during forward, one message per offending node.
    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.diagnostics.first() {
            Some(d) => Err(Error::NonFinite(d.clone())),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if !value.all_finite() {
            let msg = format!("node {} ({})", self.nodes.len(), op_name(&op));
            log::warn!("non-finite forward value at {msg}");
            self.diagnostics.push(msg);
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::zeros(rows, cols))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err(sa, sb, "matmul"));
        }
        let mut out = Tensor::zeros(sa.0, sb.1);
        gemm_acc(sa.0, sa.1, sb.1, self.value(a).data(), false, self.value(b).data(), false, out.data_mut());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Adds a `1 x C` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.0 != 1 || sb.1 != sx.1 {
            return Err(shape_err(sx, sb, "add_bias"));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for r in 0..sx.0 {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, ctx: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(sa, sb, ctx));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(sa.0, sa.1, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let out = Tensor::from_vec(r, c, data).expect("same size");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_vec(r, c, data).expect("same size");
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.shape(p).0,
            None => return Err(Error::Invalid("concat of zero tensors".into())),
        };
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(shape_err((rows, cols), s, "concat_cols"));
            }
            cols += s.1;
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Row-major reshape (no data movement).
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).clone().reshaped(rows, cols)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn mix(&mut self, src: Var, m: Arc<SparseMix>) -> Result<Var> {
        let n = self.shape(src).0;
        if let Some(mx) = m.max_index() {
            if mx >= n {
                return Err(Error::Invalid(format!("mix index {mx} out of range for {n} rows")));
            }
        }
        let out = m.apply(self.value(src));
        let rg = self.rg(src);
        Ok(self.push(out, Op::Mix(src, m), rg))
    }

    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        self.mix(src, Arc::new(SparseMix::gather(rows)))
    }

    /// Sparse convolution: `out[o] += x[i] * W_k` for each `(i, o)` in
    /// `book.pairs[k]`. `w` stacks the per-offset `C_in x C_out` kernels.
    pub fn conv(&mut self, x: Var, w: Var, book: Arc<Rulebook>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let kv = book.kernel_volume();
        if sw.0 != kv * sx.1 || sx.0 != book.n_in {
            return Err(shape_err(sx, sw, "conv (input rows, kernel * C_in)"));
        }
        let (cin, cout) = (sx.1, sw.1);
        let mut out = Tensor::zeros(book.n_out, cout);
        let xv = self.value(x);
        let wv = self.value(w).data();
        let mut xk = Vec::new();
        let mut yk = Vec::new();
        for (k, pairs) in book.pairs.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let m = pairs.len();
            xk.clear();
            for &(i, _) in pairs {
                xk.extend_from_slice(xv.row(i as usize));
            }
            yk.clear();
            yk.resize(m * cout, 0.0);
            gemm_acc(m, cin, cout, &xk, false, &wv[k * cin * cout..(k + 1) * cin * cout], false, &mut yk);
            for (j, &(_, o)) in pairs.iter().enumerate() {
                let dst = out.row_mut(o as usize);
                for (d, s) in dst.iter_mut().zip(&yk[j * cout..(j + 1) * cout]) {
                    *d += s;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::Conv(x, w, book), rg))
    }

    /// Column-wise max over each group of rows. Empty groups give zero rows;
    /// ties resolve to the lowest source row index.
    pub fn max_pool(&mut self, src: Var, groups: Arc<Groups>) -> Result<Var> {
        let (n, c) = self.shape(src);
        let sv = self.value(src);
        let mut out = Tensor::zeros(groups.len(), c);
        let mut arg = vec![usize::MAX; groups.len() * c];
        for g in 0..groups.len() {
            let members = groups.group(g);
            if let Some(&bad) = members.iter().find(|&&m| m >= n) {
                return Err(Error::Invalid(format!("pool member {bad} out of range for {n} rows")));
            }
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for &m in members {
                    let v = sv.get(m, ch);
                    if v > best || (v == best && m < best_i) {
                        best = v;
                        best_i = m;
                    }
                }
                if best_i != usize::MAX {
                    out.set(g, ch, best);
                    arg[g * c + ch] = best_i;
                }
            }
        }
        let rg = self.rg(src);
        Ok(self.push(out, Op::MaxPool(src, groups, arg), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Elementwise smooth-L1 against a constant target:
    /// `0.5 d^2` for `|d| < 1`, else `|d| - 0.5`.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let sp = self.shape(pred);
        if sp != target.shape() {
            return Err(shape_err(sp, target.shape(), "smooth_l1"));
        }
        let data = self.value(pred).data().iter().zip(target.data()).map(|(&p, &t)| smooth_l1(p - t)).collect();
        let out = Tensor::from_vec(sp.0, sp.1, data)?;
        let rg = self.rg(pred);
        Ok(self.push(out, Op::SmoothL1(pred, target.clone()), rg))
    }

    /// Mean focal loss over all elements of `p`.
    pub fn focal_loss(&mut self, p: Var, labels: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
        let n = labels.len();
        self.focal_loss_weighted(p, labels, &vec![1.0; n], n.max(1) as f64, alpha, gamma)
    }

    /// `sum_i w_i * focal_i / denom`; zero weights mark ignored elements.
    pub fn focal_loss_weighted(
        &mut self,
        p: Var,
        labels: &[f64],
        weights: &[f64],
        denom: f64,
        alpha: f64,
        gamma: f64,
    ) -> Result<Var> {
        let terms = self.loss_terms(p, labels, weights, denom)?;
        let pv = self.value(p).data();
        let total: f64 = (0..pv.len())
            .map(|i| terms.weights[i] * focal_elem(pv[i], terms.labels[i], alpha, gamma))
            .sum::<f64>()
            / terms.denom;
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(total), Op::Focal(p, Arc::new(terms), alpha, gamma), rg))
    }

    /// Mean binary cross entropy over all elements of `p`.
    pub fn bce_loss(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let n = labels.len();
        self.bce_loss_weighted(p, labels, &vec![1.0; n], n.max(1) as f64)
    }

    pub fn bce_loss_weighted(&mut self, p: Var, labels: &[f64], weights: &[f64], denom: f64) -> Result<Var> {
        let terms = self.loss_terms(p, labels, weights, denom)?;
        let pv = self.value(p).data();
        let total: f64 =
            (0..pv.len()).map(|i| terms.weights[i] * bce_elem(pv[i], terms.labels[i])).sum::<f64>() / terms.denom;
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(total), Op::Bce(p, Arc::new(terms)), rg))
    }

    fn loss_terms(&self, p: Var, labels: &[f64], weights: &[f64], denom: f64) -> Result<LossTerms> {
        let n = self.value(p).len();
        if labels.len() != n || weights.len() != n {
            return Err(shape_err(self.shape(p), (labels.len(), weights.len()), "loss labels/weights"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::NonBinaryLabel(bad));
        }
        if !(denom > 0.0) {
            return Err(Error::Invalid(format!("loss normalizer must be positive, got {denom}")));
        }
        Ok(LossTerms { labels: labels.to_vec(), weights: weights.to_vec(), denom })
    }

    /// Reverse sweep seeded with ones at `out`.
    pub fn backward(&self, out: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let (r, c) = self.shape(out);
        grads[out.0] = Some(Tensor::filled(r, c, 1.0));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
        }
        Grads { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accum_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.rg(v) {
            return;
        }
        let (r, c) = self.shape(v);
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(r, c));
        }
        f(slot.as_mut().expect("initialized"));
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = G B^T, dB = A^T G
                self.accum_with(grads, *a, |ga| {
                    gemm_acc(sa.0, sb.1, sa.1, g.data(), false, bv.data(), true, ga.data_mut())
                });
                self.accum_with(grads, *b, |gb| {
                    gemm_acc(sa.1, sa.0, sb.1, av.data(), true, g.data(), false, gb.data_mut())
                });
            }
            Op::AddBias(x, b) => {
                self.accum(grads, *x, g.clone());
                self.accum_with(grads, *b, |gb| {
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum_with(grads, *b, |gb| {
                    for (o, v) in gb.data_mut().iter_mut().zip(g.data()) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accum_with(grads, *a, |ga| {
                    for ((o, gv), y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gv * y;
                    }
                });
                self.accum_with(grads, *b, |gb| {
                    for ((o, gv), x) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gv * x;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accum_with(grads, *a, |ga| {
                    for (o, gv) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += s * gv;
                    }
                });
            }
            Op::Relu(a) => {
                let y = &node.value;
                self.accum_with(grads, *a, |ga| {
                    for ((o, gv), yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        if *yv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.accum_with(grads, *a, |ga| {
                    for ((o, gv), yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, w) = self.shape(p);
                    self.accum_with(grads, p, |gp| {
                        for r in 0..rows {
                            for (o, v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += v;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                let ga = g.clone().reshaped(r, c).expect("reshape preserves size");
                self.accum(grads, *a, ga);
            }
            Op::Mix(src, m) => {
                self.accum_with(grads, *src, |gs| {
                    let c = g.cols();
                    for r in 0..m.out_rows() {
                        let gr = g.row(r);
                        for (i, w) in m.row(r) {
                            for (o, v) in gs.row_mut(i).iter_mut().zip(gr) {
                                *o += w * v;
                            }
                        }
                    }
                    debug_assert_eq!(gs.cols(), c);
                });
            }
            Op::Conv(x, w, book) => {
                let (cin, cout) = (self.shape(*x).1, self.shape(*w).1);
                let xv = self.value(*x);
                let wv = self.value(*w).data();
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let mut gx = if need_x { Some(Tensor::zeros(book.n_in, cin)) } else { None };
                let mut gw = if need_w { Some(Tensor::zeros(book.pairs.len() * cin, cout)) } else { None };
                let mut xk = Vec::new();
                let mut gk = Vec::new();
                let mut dxk = Vec::new();
                for (k, pairs) in book.pairs.iter().enumerate() {
                    if pairs.is_empty() {
                        continue;
                    }
                    let m = pairs.len();
                    gk.clear();
                    for &(_, o) in pairs {
                        gk.extend_from_slice(g.row(o as usize));
                    }
                    if let Some(gw) = gw.as_mut() {
                        xk.clear();
                        for &(i, _) in pairs {
                            xk.extend_from_slice(xv.row(i as usize));
                        }
                        let slot = &mut gw.data_mut()[k * cin * cout..(k + 1) * cin * cout];
                        gemm_acc(cin, m, cout, &xk, true, &gk, false, slot);
                    }
                    if let Some(gx) = gx.as_mut() {
                        dxk.clear();
                        dxk.resize(m * cin, 0.0);
                        let wk = &wv[k * cin * cout..(k + 1) * cin * cout];
                        gemm_acc(m, cout, cin, &gk, false, wk, true, &mut dxk);
                        for (j, &(i, _)) in pairs.iter().enumerate() {
                            for (o, v) in gx.row_mut(i as usize).iter_mut().zip(&dxk[j * cin..(j + 1) * cin]) {
                                *o += v;
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    self.accum(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accum(grads, *w, gw);
                }
            }
            Op::MaxPool(src, _groups, arg) => {
                let c = g.cols();
                self.accum_with(grads, *src, |gs| {
                    for (flat, &a) in arg.iter().enumerate() {
                        if a != usize::MAX {
                            let ch = flat % c;
                            let cur = gs.get(a, ch);
                            gs.set(a, ch, cur + g.data()[flat]);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accum_with(grads, *a, |ga| {
                    for o in ga.data_mut() {
                        *o += s;
                    }
                });
            }
            Op::SmoothL1(pred, target) => {
                let pv = self.value(*pred);
                self.accum_with(grads, *pred, |gp| {
                    for (i, o) in gp.data_mut().iter_mut().enumerate() {
                        let d = pv.data()[i] - target.data()[i];
                        let dd = if d.abs() < 1.0 { d } else { d.signum() };
                        *o += g.data()[i] * dd;
                    }
                });
            }
            Op::Focal(p, terms, alpha, gamma) => {
                let pv = self.value(*p);
                let s = g.item() / terms.denom;
                self.accum_with(grads, *p, |gp| {
                    for (i, o) in gp.data_mut().iter_mut().enumerate() {
                        if terms.weights[i] != 0.0 {
                            *o += s * terms.weights[i] * focal_grad(pv.data()[i], terms.labels[i], *alpha, *gamma);
                        }
                    }
                });
            }
            Op::Bce(p, terms) => {
                let pv = self.value(*p);
                let s = g.item() / terms.denom;
                self.accum_with(grads, *p, |gp| {
                    for (i, o) in gp.data_mut().iter_mut().enumerate() {
                        if terms.weights[i] != 0.0 {
                            *o += s * terms.weights[i] * bce_grad(pv.data()[i], terms.labels[i]);
                        }
                    }
                });
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::AddBias(..) => "add_bias",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::ConcatCols(..) => "concat_cols",
        Op::Reshape(..) => "reshape",
        Op::Mix(..) => "mix",
        Op::Conv(..) => "conv",
        Op::MaxPool(..) => "max_pool",
        Op::Sum(..) => "sum",
        Op::SmoothL1(..) => "smooth_l1",
        Op::Focal(..) => "focal",
        Op::Bce(..) => "bce",
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn clamp_prob(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (c, c == p)
}

pub fn focal_elem(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let (p, _) = clamp_prob(p);
    let (pt, at) = if y == 1.0 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

fn focal_grad(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let (pc, inside) = clamp_prob(p);
    if !inside {
        return 0.0;
    }
    let (pt, at, sign) = if y == 1.0 { (pc, alpha, 1.0) } else { (1.0 - pc, 1.0 - alpha, -1.0) };
    let q = 1.0 - pt;
    let d_pt = at * (gamma * q.powf(gamma - 1.0) * pt.ln() - q.powf(gamma) / pt);
    sign * d_pt
}

pub fn bce_elem(p: f64, y: f64) -> f64 {
    let (p, _) = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn bce_grad(p: f64, y: f64) -> f64 {
    let (pc, inside) = clamp_prob(p);
    if !inside {
        return 0.0;
    }
    -y / pc + (1.0 - y) / (1.0 - pc)
}
