//! A small reverse-mode automatic differentiation tape over `f64` vectors.
//!
//! Every node holds a flat vector; matrices are row-major with the shape
//! carried by the op. Nodes are appended in evaluation order, so a single
//! reverse sweep over the node list is a valid topological backward pass.
//! Only nodes that (transitively) depend on a parameter leaf receive
//! gradients; constant inputs such as frozen word embeddings are skipped.

use std::rc::Rc;

use crate::params::{ParamId, ParamStore};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Probabilities are clamped to this floor before taking logarithms.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Const,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// vector * scalar node
    Scale(Var, Var),
    /// vector + scalar node (broadcast)
    Shift(Var, Var),
    /// a * x + b with constant a, b
    Affine(Var, f64),
    MatVec {
        w: Var,
        x: Var,
        cols: usize,
    },
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Dot(Var, Var),
    Sum(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSigmoid(Var),
    /// `diag * x_i + off * (sum(x) - x_i)`
    Constrained {
        x: Var,
        diag: Var,
        off: Option<Var>,
    },
    /// Valid 1-d convolution + ReLU + max over positions, fused.
    ConvMax {
        w: Var,
        b: Var,
        input: Rc<Vec<f64>>,
        dim: usize,
        width: usize,
        /// winning window start per filter, `None` when the ReLU clipped it
        winners: Vec<Option<usize>>,
    },
    /// `-ln(max(p, eps))` of a scalar
    NegLog(Var),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Parameter gradients indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Gradients {
            grads: params
                .iter()
                .map(|t| Some(vec![0.0; t.data.len()]))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.index()).and_then(|g| g.as_deref())
    }

    /// Adds `other` into `self`, element by element.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.iter_mut().zip(t).for_each(|(a, b)| *a += b),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId::new(i), g)))
    }
}

/// Expression graph with values computed eagerly on construction.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.len(), 1);
        value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(vec![value])
    }

    /// Leaf for a trainable tensor; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let value = self.params.get(id).data.clone();
        let v = self.push(value, Op::Param, true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn same_len(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).len(),
            self.value(b).len(),
            "{what}: operand lengths differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "add");
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let g = self.grad_flag(&[a, b]);
        self.push(value, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "sub");
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let g = self.grad_flag(&[a, b]);
        self.push(value, Op::Sub(a, b), g)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "mul");
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let g = self.grad_flag(&[a, b]);
        self.push(value, Op::Mul(a, b), g)
    }

    /// Vector times a one-element node.
    pub fn scale(&mut self, x: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let value = self.value(x).iter().map(|v| v * k).collect();
        let g = self.grad_flag(&[x, s]);
        self.push(value, Op::Scale(x, s), g)
    }

    /// Vector plus a one-element node broadcast over it.
    pub fn shift(&mut self, x: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let value = self.value(x).iter().map(|v| v + k).collect();
        let g = self.grad_flag(&[x, s]);
        self.push(value, Op::Shift(x, s), g)
    }

    /// `a * x + b` with constant coefficients.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let value = self.value(x).iter().map(|v| a * v + b).collect();
        let g = self.grad_flag(&[x]);
        self.push(value, Op::Affine(x, a), g)
    }

    /// Row-major `w` (`rows x cols`) times `x` (`cols`).
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let cols = self.value(x).len();
        let wv = self.value(w);
        assert!(
            cols > 0 && wv.len().is_multiple_of(cols),
            "matvec: {} weights cannot multiply a vector of {cols}",
            wv.len()
        );
        let xv = self.value(x);
        let value = wv.chunks_exact(cols).map(|row| dot(row, xv)).collect();
        let g = self.grad_flag(&[w, x]);
        self.push(value, Op::MatVec { w, x, cols }, g)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.tanh()).collect();
        let g = self.grad_flag(&[x]);
        self.push(value, Op::Tanh(x), g)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let g = self.grad_flag(&[x]);
        self.push(value, Op::Sigmoid(x), g)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut value = Vec::with_capacity(parts.iter().map(|p| self.value(*p).len()).sum());
        for p in parts {
            value.extend_from_slice(self.value(*p));
        }
        let g = self.grad_flag(parts);
        self.push(value, Op::Concat(parts.to_vec()), g)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x)[start..start + len].to_vec();
        let g = self.grad_flag(&[x]);
        self.push(value, Op::Slice(x, start), g)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "dot");
        let value = vec![dot(self.value(a), self.value(b))];
        let g = self.grad_flag(&[a, b]);
        self.push(value, Op::Dot(a, b), g)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = vec![self.value(x).iter().sum()];
        let g = self.grad_flag(&[x]);
        self.push(value, Op::Sum(x), g)
    }

    /// Sum of several same-length nodes.
    pub fn add_all(&mut self, parts: &[Var]) -> Var {
        let (first, rest) = parts.split_first().expect("add_all of nothing");
        rest.iter().fold(*first, |acc, p| self.add(acc, *p))
    }

    /// Max-shifted softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = softmax(self.value(x));
        let g = self.grad_flag(&[x]);
        self.push(value, Op::Softmax(x), g)
    }

    /// `x - logsumexp(x)`, exact where the softmax itself underflows.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + xv.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let value = xv.iter().map(|v| v - lse).collect();
        let g = self.grad_flag(&[x]);
        self.push(value, Op::LogSoftmax(x), g)
    }

    /// Elementwise `ln sigmoid(x)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| log_sigmoid(v)).collect();
        let g = self.grad_flag(&[x]);
        self.push(value, Op::LogSigmoid(x), g)
    }

    /// Applies `diag * I + off * (1 - I)` to `x` without materializing it.
    pub fn constrained(&mut self, x: Var, diag: Var, off: Option<Var>) -> Var {
        let d = self.scalar(diag);
        let xv = self.value(x);
        let value = match off {
            None => xv.iter().map(|v| d * v).collect(),
            Some(o) => {
                let o = self.scalar(o);
                let total: f64 = xv.iter().sum();
                xv.iter().map(|v| d * v + o * (total - v)).collect()
            }
        };
        let mut deps = vec![x, diag];
        deps.extend(off);
        let g = self.grad_flag(&deps);
        self.push(value, Op::Constrained { x, diag, off }, g)
    }

    /// ReLU convolution over a row-major `rows x dim` input followed by max
    /// pooling over window positions. `rows` may include zero padding; only
    /// the first `windows` start positions are pooled.
    pub fn conv_max(
        &mut self,
        w: Var,
        b: Var,
        input: Rc<Vec<f64>>,
        dim: usize,
        width: usize,
        windows: usize,
    ) -> Var {
        let span = width * dim;
        let filters = self.value(b).len();
        assert_eq!(
            self.value(w).len(),
            filters * span,
            "conv_max: filter shape"
        );
        assert!(windows >= 1 && (windows - 1) * dim + span <= input.len());
        let wv = self.value(w);
        let bv = self.value(b);
        let mut value = vec![0.0; filters];
        let mut winners = vec![None; filters];
        for (f, row) in wv.chunks_exact(span).enumerate() {
            let mut best = f64::NEG_INFINITY;
            let mut at = 0;
            for p in 0..windows {
                let pre = bv[f] + dot(row, &input[p * dim..p * dim + span]);
                if pre > best {
                    best = pre;
                    at = p;
                }
            }
            if best > 0.0 {
                value[f] = best;
                winners[f] = Some(at);
            }
        }
        let g = self.grad_flag(&[w, b]);
        self.push(
            value,
            Op::ConvMax {
                w,
                b,
                input,
                dim,
                width,
                winners,
            },
            g,
        )
    }

    /// `-ln(max(p, LOG_EPS))` for a one-element node.
    pub fn neg_log(&mut self, p: Var) -> Var {
        let value = vec![-self.scalar(p).max(LOG_EPS).ln()];
        let g = self.grad_flag(&[p]);
        self.push(value, Op::NegLog(p), g)
    }

    pub fn pick(&mut self, x: Var, index: usize) -> Var {
        self.slice(x, index, 1)
    }

    /// Reverse sweep from a scalar root. Returns gradients of every parameter
    /// leaf created before the root, zero where no path reaches it.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Const => {}
                Op::Param => {
                    grads[i] = Some(gout);
                    continue;
                }
                Op::Add(a, b) => {
                    self.send(&mut grads, *a, |g| add_into(g, &gout));
                    self.send(&mut grads, *b, |g| add_into(g, &gout));
                }
                Op::Sub(a, b) => {
                    self.send(&mut grads, *a, |g| add_into(g, &gout));
                    self.send(&mut grads, *b, |g| {
                        g.iter_mut().zip(&gout).for_each(|(g, d)| *g -= d)
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.send(&mut grads, *a, |g| {
                        for k in 0..g.len() {
                            g[k] += gout[k] * bv[k];
                        }
                    });
                    self.send(&mut grads, *b, |g| {
                        for k in 0..g.len() {
                            g[k] += gout[k] * av[k];
                        }
                    });
                }
                Op::Scale(x, s) => {
                    let k = self.scalar(*s);
                    let xv = self.value(*x);
                    self.send(&mut grads, *x, |g| {
                        g.iter_mut().zip(&gout).for_each(|(g, d)| *g += k * d)
                    });
                    self.send(&mut grads, *s, |g| g[0] += dot(&gout, xv));
                }
                Op::Shift(x, s) => {
                    self.send(&mut grads, *x, |g| add_into(g, &gout));
                    self.send(&mut grads, *s, |g| g[0] += gout.iter().sum::<f64>());
                }
                Op::Affine(x, a) => {
                    self.send(&mut grads, *x, |g| {
                        g.iter_mut().zip(&gout).for_each(|(g, d)| *g += a * d)
                    });
                }
                Op::MatVec { w, x, cols } => {
                    let (wv, xv) = (self.value(*w), self.value(*x));
                    self.send(&mut grads, *w, |g| {
                        for (r, grow) in g.chunks_exact_mut(*cols).enumerate() {
                            let d = gout[r];
                            if d != 0.0 {
                                grow.iter_mut().zip(xv).for_each(|(g, x)| *g += d * x);
                            }
                        }
                    });
                    self.send(&mut grads, *x, |g| {
                        for (r, row) in wv.chunks_exact(*cols).enumerate() {
                            let d = gout[r];
                            if d != 0.0 {
                                g.iter_mut().zip(row).for_each(|(g, w)| *g += d * w);
                            }
                        }
                    });
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    self.send(&mut grads, *x, |g| {
                        for k in 0..g.len() {
                            g[k] += gout[k] * (1.0 - y[k] * y[k]);
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    self.send(&mut grads, *x, |g| {
                        for k in 0..g.len() {
                            g[k] += gout[k] * y[k] * (1.0 - y[k]);
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        self.send(&mut grads, *p, |g| add_into(g, &gout[offset..offset + n]));
                        offset += n;
                    }
                }
                Op::Slice(x, start) => {
                    let start = *start;
                    self.send(&mut grads, *x, |g| {
                        add_into(&mut g[start..start + gout.len()], &gout)
                    });
                }
                Op::Dot(a, b) => {
                    let d = gout[0];
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.send(&mut grads, *a, |g| {
                        g.iter_mut().zip(bv).for_each(|(g, b)| *g += d * b)
                    });
                    self.send(&mut grads, *b, |g| {
                        g.iter_mut().zip(av).for_each(|(g, a)| *g += d * a)
                    });
                }
                Op::Sum(x) => {
                    let d = gout[0];
                    self.send(&mut grads, *x, |g| g.iter_mut().for_each(|g| *g += d));
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let inner = dot(&gout, y);
                    self.send(&mut grads, *x, |g| {
                        for k in 0..g.len() {
                            g[k] += y[k] * (gout[k] - inner);
                        }
                    });
                }
                Op::LogSoftmax(x) => {
                    let total: f64 = gout.iter().sum();
                    let y = &node.value;
                    self.send(&mut grads, *x, |g| {
                        for k in 0..g.len() {
                            g[k] += gout[k] - y[k].exp() * total;
                        }
                    });
                }
                Op::LogSigmoid(x) => {
                    let xv = self.value(*x);
                    self.send(&mut grads, *x, |g| {
                        for k in 0..g.len() {
                            g[k] += gout[k] * sigmoid(-xv[k]);
                        }
                    });
                }
                Op::Constrained { x, diag, off } => {
                    let xv = self.value(*x);
                    let d = self.scalar(*diag);
                    match off {
                        None => {
                            self.send(&mut grads, *x, |g| {
                                g.iter_mut().zip(&gout).for_each(|(g, u)| *g += d * u)
                            });
                            self.send(&mut grads, *diag, |g| g[0] += dot(&gout, xv));
                        }
                        Some(off) => {
                            let o = self.scalar(*off);
                            let gsum: f64 = gout.iter().sum();
                            let xsum: f64 = xv.iter().sum();
                            self.send(&mut grads, *x, |g| {
                                for k in 0..g.len() {
                                    g[k] += d * gout[k] + o * (gsum - gout[k]);
                                }
                            });
                            self.send(&mut grads, *diag, |g| g[0] += dot(&gout, xv));
                            self.send(&mut grads, *off, |g| {
                                g[0] += gout
                                    .iter()
                                    .zip(xv)
                                    .map(|(u, x)| u * (xsum - x))
                                    .sum::<f64>()
                            });
                        }
                    }
                }
                Op::ConvMax {
                    w,
                    b,
                    input,
                    dim,
                    width,
                    winners,
                } => {
                    let span = width * dim;
                    self.send(&mut grads, *w, |g| {
                        for (f, grow) in g.chunks_exact_mut(span).enumerate() {
                            if let Some(p) = winners[f] {
                                let window = &input[p * dim..p * dim + span];
                                grow.iter_mut()
                                    .zip(window)
                                    .for_each(|(g, x)| *g += gout[f] * x);
                            }
                        }
                    });
                    self.send(&mut grads, *b, |g| {
                        for (f, g) in g.iter_mut().enumerate() {
                            if winners[f].is_some() {
                                *g += gout[f];
                            }
                        }
                    });
                }
                Op::NegLog(p) => {
                    let pv = self.scalar(*p);
                    if pv > LOG_EPS {
                        self.send(&mut grads, *p, |g| g[0] -= gout[0] / pv);
                    }
                }
            }
        }

        let mut out = vec![None; self.params.len()];
        for (id, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if v.0 <= root.0 {
                    let len = self.nodes[v.0].value.len();
                    out[id] = Some(grads[v.0].take().unwrap_or_else(|| vec![0.0; len]));
                }
            }
        }
        Gradients { grads: out }
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], to: Var, f: impl FnOnce(&mut Vec<f64>)) {
        if !self.nodes[to.0].needs_grad {
            return;
        }
        let slot = &mut grads[to.0];
        let g = slot.get_or_insert_with(|| vec![0.0; self.nodes[to.0].value.len()]);
        f(g);
    }
}

fn add_into(g: &mut [f64], d: &[f64]) {
    g.iter_mut().zip(d).for_each(|(g, d)| *g += d);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
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

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamGroup, ParamStore};

    fn store(shapes: &[(&str, Vec<f64>)]) -> ParamStore {
        let mut p = ParamStore::new();
        for (name, data) in shapes {
            p.push(
                name,
                vec![data.len()],
                data.clone(),
                ParamGroup::SlotValue,
                false,
            );
        }
        p
    }

    /// Central differences over every scalar of every parameter.
    fn check(params: &ParamStore, build: impl Fn(&mut Graph) -> Var) {
        let mut g = Graph::new(params);
        let root = build(&mut g);
        let grads = g.backward(root);
        let eps = 1e-6;
        for (id, t) in params.iter_ids() {
            for k in 0..t.data.len() {
                let mut plus = params.clone();
                plus.get_mut(id).data[k] += eps;
                let mut minus = params.clone();
                minus.get_mut(id).data[k] -= eps;
                let fp = {
                    let mut g = Graph::new(&plus);
                    let r = build(&mut g);
                    g.scalar(r)
                };
                let fm = {
                    let mut g = Graph::new(&minus);
                    let r = build(&mut g);
                    g.scalar(r)
                };
                let numeric = (fp - fm) / (2.0 * eps);
                let analytic = grads.get(id).map_or(0.0, |g| g[k]);
                assert!(
                    (numeric - analytic).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "{} [{k}]: analytic {analytic} numeric {numeric}",
                    t.name
                );
            }
        }
    }

    #[test]
    fn elementwise_ops_gradients() {
        let p = store(&[
            ("a", vec![0.3, -1.2, 0.7]),
            ("b", vec![-0.5, 0.4, 2.0]),
            ("s", vec![0.8]),
        ]);
        check(&p, |g| {
            let a = g.param(ParamId::new(0));
            let b = g.param(ParamId::new(1));
            let s = g.param(ParamId::new(2));
            let m = g.mul(a, b);
            let t = g.tanh(m);
            let u = g.sub(t, b);
            let v = g.scale(u, s);
            let w = g.shift(v, s);
            let x = g.sigmoid(w);
            let y = g.affine(x, -2.0, 1.0);
            let z = g.add(y, a);
            let c = g.concat(&[z, a]);
            let sl = g.slice(c, 2, 3);
            let d = g.dot(sl, b);
            let sm = g.sum(sl);
            g.add(d, sm)
        });
    }

    #[test]
    fn matvec_softmax_neglog_gradients() {
        let p = store(&[
            ("w", vec![0.1, -0.3, 0.5, 0.9, -0.7, 0.2]),
            ("x", vec![1.5, -0.4]),
        ]);
        check(&p, |g| {
            let w = g.param(ParamId::new(0));
            let x = g.param(ParamId::new(1));
            let y = g.matvec(w, x);
            let sm = g.softmax(y);
            let pk = g.pick(sm, 1);
            g.neg_log(pk)
        });
    }

    #[test]
    fn log_ops_match_their_composites_and_survive_saturation() {
        let p = store(&[("x", vec![0.3, -2.0, 1.1]), ("w", vec![0.5, -0.25, 2.0])]);
        check(&p, |g| {
            let x = g.param(ParamId::new(0));
            let w = g.param(ParamId::new(1));
            let ls = g.log_softmax(x);
            let lg = g.log_sigmoid(x);
            let a = g.dot(ls, w);
            let b = g.dot(lg, w);
            g.add(a, b)
        });
        let mut g = Graph::new(&p);
        let x = g.param(ParamId::new(0));
        let sm = g.softmax(x);
        let ls = g.log_softmax(x);
        let sg = g.sigmoid(x);
        let lg = g.log_sigmoid(x);
        for k in 0..3 {
            assert!((g.value(sm)[k].ln() - g.value(ls)[k]).abs() < 1e-12);
            assert!((g.value(sg)[k].ln() - g.value(lg)[k]).abs() < 1e-12);
        }
        let far = g.constant(vec![0.0, 900.0]);
        let ls = g.log_softmax(far);
        assert_eq!(g.value(ls)[0], -900.0);
        let lg = g.log_sigmoid(far);
        assert_eq!(g.value(lg)[1], 0.0);
        let neg = g.constant(vec![-800.0]);
        let lg = g.log_sigmoid(neg);
        assert_eq!(g.value(lg)[0], -800.0);
    }

    #[test]
    fn constrained_gradients_and_value() {
        let p = store(&[
            ("x", vec![0.2, -1.0, 0.6, 1.3]),
            ("d", vec![1.7]),
            ("o", vec![-0.4]),
        ]);
        let mut g = Graph::new(&p);
        let x = g.param(ParamId::new(0));
        let d = g.param(ParamId::new(1));
        let o = g.param(ParamId::new(2));
        let y = g.constrained(x, d, Some(o));
        let xv = [0.2, -1.0, 0.6, 1.3];
        for (i, v) in g.value(y).iter().enumerate() {
            let dense: f64 = (0..4)
                .map(|j| if i == j { 1.7 * xv[j] } else { -0.4 * xv[j] })
                .sum();
            assert!((v - dense).abs() < 1e-12);
        }
        check(&p, |g| {
            let x = g.param(ParamId::new(0));
            let d = g.param(ParamId::new(1));
            let o = g.param(ParamId::new(2));
            let y = g.constrained(x, d, Some(o));
            let t = g.tanh(y);
            let z = g.constrained(t, d, None);
            let sq = g.mul(z, y);
            g.sum(sq)
        });
    }

    #[test]
    fn conv_max_gradients() {
        let p = store(&[
            ("w", vec![0.4, -0.2, 0.1, 0.3, -0.5, 0.6, 0.2, 0.9]),
            ("b", vec![0.05, 0.3]),
        ]);
        // three rows of dim 2, width 2 -> two windows
        let input = Rc::new(vec![1.0, -0.5, 0.25, 2.0, -1.5, 0.75]);
        check(&p, |g| {
            let w = g.param(ParamId::new(0));
            let b = g.param(ParamId::new(1));
            let y = g.conv_max(w, b, input.clone(), 2, 2, 2);
            let t = g.tanh(y);
            g.sum(t)
        });
    }

    #[test]
    fn constants_receive_no_gradient_work() {
        let p = store(&[("a", vec![1.0, 2.0])]);
        let mut g = Graph::new(&p);
        let a = g.param(ParamId::new(0));
        let c = g.constant(vec![3.0, 4.0]);
        let d = g.dot(a, c);
        let grads = g.backward(d);
        assert_eq!(grads.get(ParamId::new(0)).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn neg_log_clamps() {
        let p = store(&[("a", vec![0.0])]);
        let mut g = Graph::new(&p);
        let a = g.param(ParamId::new(0));
        let l = g.neg_log(a);
        assert!((g.scalar(l) + LOG_EPS.ln()).abs() < 1e-12);
        let grads = g.backward(l);
        assert_eq!(grads.get(ParamId::new(0)).unwrap(), &[0.0]);
    }

    #[test]
    fn softmax_is_shift_stable() {
        let s = softmax(&[1000.0, 1001.0]);
        assert!((s[0] - 0.2689414213699951).abs() < 1e-12);
        assert!((s[1] - 0.7310585786300049).abs() < 1e-12);
    }
}
