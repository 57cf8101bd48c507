//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order; [`Graph::backward`]
//! walks the tape in reverse. Leaves may borrow parameter storage so that
//! inference passes never copy weights. Nodes that do not depend on a tracked
//! leaf skip all backward bookkeeping.

use std::borrow::Cow;

use super::kernels::{self, AttnDims, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
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
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Var, Var),
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<f64> },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    tracked: bool,
}

/// Recorded computation. Confined to one thread; build one graph per step.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` is tracked and reachable.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Contract(format!("non-finite value entering graph ({what})")))
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { shape, value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf; tracked when the tensor has `requires_grad` set.
    pub fn input(&mut self, t: &'a Tensor) -> Result<Var> {
        self.param(t, t.requires_grad())
    }

    /// Borrowed leaf with explicit tracking.
    pub fn param(&mut self, t: &'a Tensor, track: bool) -> Result<Var> {
        check_finite(t.values(), "leaf")?;
        Ok(self.push(t.shape().to_vec(), Cow::Borrowed(t.values()), Op::Leaf, track))
    }

    /// Owned leaf.
    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<f64>, track: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape(format!("leaf shape {shape:?} vs {} values", values.len())));
        }
        check_finite(&values, "leaf")?;
        Ok(self.push(shape, Cow::Owned(values), Op::Leaf, track))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("graph node shape is consistent")
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{what}: expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dimensions {k} vs {k2}")));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul { a, b, m, k, n }, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("add {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Add(a, b), tracked))
    }

    /// `a[r×c] + b[c]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, c) = self.dims2(a, "add_row")?;
        if self.shape(b) != [c] {
            return Err(Error::Shape(format!("add_row bias {:?} for {c} columns", self.shape(b))));
        }
        let bias = self.value(b);
        let out: Vec<f64> = self.value(a).iter().enumerate().map(|(i, x)| x + bias[i % c]).collect();
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::AddRow(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("mul {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * s).collect();
        let tracked = self.is_tracked(a);
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Scale(a, s), tracked)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let tracked = self.is_tracked(a);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(a), tracked)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let tracked = self.is_tracked(a);
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Gelu(a), tracked)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, c) = self.dims2(x, "layer_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape("layer_norm affine parameters must match columns".into()));
        }
        let (out, xhat, rstd) = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), c);
        let tracked = self.is_tracked(x) || self.is_tracked(gamma) || self.is_tracked(beta);
        let (xhat, rstd) = if tracked { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            self.shape(x).to_vec(),
            Cow::Owned(out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            tracked,
        ))
    }

    /// Row gather from `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::Shape("embedding of zero ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("embedding id {bad} out of range {rows}")));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let tracked = self.is_tracked(table);
        Ok(self.push(
            vec![ids.len(), d],
            Cow::Owned(out),
            Op::Embedding { table, ids: ids.to_vec() },
            tracked,
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims2(a, "concat_rows")?;
        let (rb, cb) = self.dims2(b, "concat_rows")?;
        if ca != cb {
            return Err(Error::Shape(format!("concat_rows columns {ca} vs {cb}")));
        }
        let mut out = Vec::with_capacity((ra + rb) * ca);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(vec![ra + rb, ca], Cow::Owned(out), Op::ConcatRows(a, b), tracked))
    }

    /// Causal multi-head attention; query row `t` attends key rows `0..=offset+t`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, offset: usize) -> Result<Var> {
        let (queries, d_model) = self.dims2(q, "attention q")?;
        let (keys, dk) = self.dims2(k, "attention k")?;
        if self.shape(v) != [keys, dk] || dk != d_model {
            return Err(Error::Shape("attention q/k/v widths or key counts disagree".into()));
        }
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Shape(format!("{heads} heads do not divide width {d_model}")));
        }
        if offset + queries > keys {
            return Err(Error::Shape(format!("causal offset {offset} + {queries} queries exceeds {keys} keys")));
        }
        let dims = AttnDims { queries, keys, heads, d_model, offset };
        let (out, probs) = kernels::attention_forward(self.value(q), self.value(k), self.value(v), dims);
        let tracked = self.is_tracked(q) || self.is_tracked(k) || self.is_tracked(v);
        let probs = if tracked { probs } else { Vec::new() };
        Ok(self.push(vec![queries, d_model], Cow::Owned(out), Op::Attention { q, k, v, dims, probs }, tracked))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        let tracked = self.is_tracked(x);
        Ok(self.push(self.shape(x).to_vec(), Cow::Owned(out), Op::Softmax(x), tracked))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::Shape(format!("{} targets for {t} logit rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::Index(format!("target {bad} out of range {v}")));
        }
        let z = self.value(logits);
        let mut probs = z.to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(v).enumerate() {
            let lse = kernels::log_sum_exp(&z[r * v..(r + 1) * v]);
            loss += lse - z[r * v + targets[r]];
            kernels::softmax_in_place(row);
        }
        loss /= t as f64;
        let tracked = self.is_tracked(logits);
        let probs = if tracked { probs } else { Vec::new() };
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![loss]),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            tracked,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        check_finite(self.value(loss), "loss")?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.is_tracked(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            // Keep intermediate gradients only for leaves.
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].tracked {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(*a, &mut |da| {
                    kernels::gemm(m, n, k, MatRef::new(g, n), MatRef::transposed(bv, n), 1.0, da)
                });
                acc(*b, &mut |db| {
                    kernels::gemm(k, m, n, MatRef::transposed(av, k), MatRef::new(g, n), 1.0, db)
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::AddRow(a, b) => {
                let c = self.shape(*b)[0];
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |db| {
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(*a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::Sum(a) => acc(*a, &mut |da| da.iter_mut().for_each(|x| *x += g[0])),
            Op::Gelu(a) => {
                let av = self.value(*a);
                acc(*a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * kernels::gelu_grad(av[i]);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.shape(*gamma)[0];
                let gam = self.value(*gamma);
                acc(*gamma, &mut |dg| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for gr in g.chunks(c) {
                        db.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                });
                acc(*x, &mut |dx| {
                    for (r, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            dx[r * c + j] += rstd[r] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                acc(*table, &mut |dt| {
                    for (t, &i) in ids.iter().enumerate() {
                        dt[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[t * d..(t + 1) * d])
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let split = self.nodes[a.0].value.len();
                acc(*a, &mut |da| da.iter_mut().zip(&g[..split]).for_each(|(x, y)| *x += y));
                acc(*b, &mut |db| db.iter_mut().zip(&g[split..]).for_each(|(x, y)| *x += y));
            }
            Op::Attention { q, k, v, dims, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = self.nodes[q.0].tracked.then(|| vec![0.0; qv.len()]);
                let mut dk = self.nodes[k.0].tracked.then(|| vec![0.0; kv.len()]);
                let mut dv = self.nodes[v.0].tracked.then(|| vec![0.0; vv.len()]);
                kernels::attention_backward(
                    qv,
                    kv,
                    vv,
                    probs,
                    g,
                    *dims,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (var, part) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(part) = part {
                        acc(var, &mut |buf| buf.iter_mut().zip(&part).for_each(|(x, y)| *x += y));
                    }
                }
            }
            Op::Softmax(x) => {
                let c = *node.shape.last().unwrap();
                let p = &node.value;
                acc(*x, &mut |dx| {
                    for (r, (gr, pr)) in g.chunks(c).zip(p.chunks(c)).enumerate() {
                        let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] += pr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |dz| {
                    for (r, &y) in targets.iter().enumerate() {
                        for j in 0..v {
                            dz[r * v + j] += scale * probs[r * v + j];
                        }
                        dz[r * v + y] -= scale;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_is_ones() {
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap().with_requires_grad(true);
        let mut g = Graph::new();
        let xv = g.input(&x).unwrap();
        let s = g.sum(xv);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_backward_is_twice_input() {
        let x = Tensor::new(vec![4], vec![1.5, -2.0, 0.25, 3.0]).unwrap().with_requires_grad(true);
        let mut g = Graph::new();
        let xv = g.input(&x).unwrap();
        let sq = g.mul(xv, xv).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[3.0, -4.0, 0.5, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_requires_grad(true);
        let mut g = Graph::new();
        let xv = g.input(&x).unwrap();
        assert!(matches!(g.backward(xv), Err(Error::Contract(_))));
    }

    #[test]
    fn leaves_reject_non_finite() {
        let x = Tensor::new(vec![2], vec![f64::NEG_INFINITY, 0.0]).unwrap();
        let mut g = Graph::new();
        assert!(matches!(g.input(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn untracked_inputs_produce_no_gradients() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap().with_requires_grad(true);
        let mut g = Graph::new();
        let xv = g.input(&x).unwrap();
        let wv = g.input(&w).unwrap();
        let y = g.matmul(xv, wv).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(xv).is_none());
        assert_eq!(grads.get(wv).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let mut g = Graph::new();
        let (av, bv) = (g.input(&a).unwrap(), g.input(&b).unwrap());
        assert!(matches!(g.matmul(av, bv), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let z = Tensor::zeros(&[2, 4]);
        let mut g = Graph::new();
        let zv = g.input(&z).unwrap();
        assert!(matches!(g.cross_entropy(zv, &[0, 4]), Err(Error::Index(_))));
    }
}
