//! Tensor-level Wengert tape.
//!
//! Every op is appended after its parents, so the node vector is already in
//! topological order and the reverse pass is a single backwards sweep that
//! touches each node once. Nodes built only from constants are marked as not
//! requiring gradients and are skipped during the sweep.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Slice { src: NodeId, offset: usize },
    MatMul { a: NodeId, b: NodeId, n: usize, k: usize, m: usize },
    AddRowBias { a: NodeId, bias: NodeId, m: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Sum(NodeId),
    /// Row-wise softmax cross-entropy; `aux` holds the probabilities.
    SoftmaxXent { logits: NodeId, classes: usize, labels: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node<S> {
    op: Op,
    shape: Vec<usize>,
    value: Vec<S>,
    aux: Vec<S>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Adjoints<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Adjoints<S> {
    /// Adjoint of `id`; `None` when the output does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<S>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<S>, aux: Vec<S>, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            aux,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node<S> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.node(id).value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    /// Differentiable input.
    pub fn variable(&mut self, shape: Vec<usize>, value: Vec<S>) -> Result<NodeId> {
        check_len(&shape, value.len())?;
        Ok(self.push(Op::Leaf, shape, value, Vec::new(), true))
    }

    /// Input that receives no adjoint.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        let value = t.data().iter().map(|&v| S::from_f64(v)).collect();
        self.push(Op::Leaf, t.shape().to_vec(), value, Vec::new(), false)
    }

    pub fn constant_values(&mut self, shape: Vec<usize>, value: Vec<S>) -> Result<NodeId> {
        check_len(&shape, value.len())?;
        Ok(self.push(Op::Leaf, shape, value, Vec::new(), false))
    }

    /// Contiguous view `src[offset .. offset + prod(shape)]`, reshaped.
    pub fn slice(&mut self, src: NodeId, offset: usize, shape: Vec<usize>) -> Result<NodeId> {
        let len: usize = shape.iter().product();
        let n = self.node(src);
        if offset + len > n.value.len() {
            return Err(Error::config(format!(
                "slice {offset}..{} out of bounds for node of length {}",
                offset + len,
                n.value.len()
            )));
        }
        let value = n.value[offset..offset + len].to_vec();
        let rg = n.requires_grad;
        Ok(self.push(Op::Slice { src, offset }, shape, value, Vec::new(), rg))
    }

    /// `[n, k] × [k, m] → [n, m]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::config(format!(
                "matmul shape mismatch: {sa:?} × {sb:?}"
            )));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * m..(p + 1) * m];
                for (o, &bpj) in row.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::MatMul { a, b, n, k, m }, vec![n, m], out, Vec::new(), rg))
    }

    /// Adds a length-`m` bias to every row of an `[n, m]` matrix.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let m = *sa.last().unwrap_or(&0);
        if sa.len() != 2 || self.node(bias).value.len() != m {
            return Err(Error::config(format!(
                "bias of length {} does not fit matrix {sa:?}",
                self.node(bias).value.len()
            )));
        }
        let bv = &self.node(bias).value;
        let out: Vec<S> = self
            .node(a)
            .value
            .chunks(m)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &b)| x + b))
            .collect();
        let rg = self.node(a).requires_grad || self.node(bias).requires_grad;
        Ok(self.push(Op::AddRowBias { a, bias, m }, sa, out, Vec::new(), rg))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, name: &str, f: impl Fn(S, S) -> S) -> Result<(Vec<usize>, Vec<S>, bool)> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "{name}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok((self.shape(a).to_vec(), out, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, out, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), shape, out, Vec::new(), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, out, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), shape, out, Vec::new(), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, out, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), shape, out, Vec::new(), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let n = self.node(a);
        let out = n.value.iter().map(|&x| x.scale(c)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(Op::Scale(a, c), shape, out, Vec::new(), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let n = self.node(a);
        let out = n
            .value
            .iter()
            .map(|&x| if x.re() > 0.0 { x } else { S::zero() })
            .collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(Op::Relu(a), shape, out, Vec::new(), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let n = self.node(a);
        let out = n.value.iter().map(|&x| x.tanh()).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(Op::Tanh(a), shape, out, Vec::new(), rg)
    }

    /// Sum of all entries, as a length-1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let n = self.node(a);
        let mut acc = S::zero();
        for &x in &n.value {
            acc += x;
        }
        let rg = n.requires_grad;
        self.push(Op::Sum(a), vec![1], vec![acc], Vec::new(), rg)
    }

    /// Per-row cross-entropy of softmax(logits) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::config(format!(
                "cross-entropy: logits {shape:?} vs {} labels",
                labels.len()
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::config(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let z = &self.node(logits).value;
        let mut probs = Vec::with_capacity(n * c);
        let mut losses = Vec::with_capacity(n);
        for (i, &y) in labels.iter().enumerate() {
            let row = &z[i * c..(i + 1) * c];
            let shift = row.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
            let shift = S::from_f64(shift);
            let exps: Vec<S> = row.iter().map(|&v| (v - shift).exp()).collect();
            let mut total = S::zero();
            for &e in &exps {
                total += e;
            }
            let lse = shift + total.ln();
            losses.push(lse - row[y]);
            probs.extend(exps.into_iter().map(|e| e / total));
        }
        let rg = self.node(logits).requires_grad;
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                classes: c,
                labels: labels.to_vec(),
            },
            vec![n],
            losses,
            probs,
            rg,
        ))
    }

    /// Reverse sweep from `output` seeded with `seed` (same length as the
    /// output's value).
    pub fn backward(&self, output: NodeId, seed: &[S]) -> Result<Adjoints<S>> {
        let out = self.node(output);
        if seed.len() != out.value.len() {
            return Err(Error::config(format!(
                "backward seed of length {} for output of length {}",
                seed.len(),
                out.value.len()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.to_vec());

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Slice { src, offset } => {
                    let acc = self.adjoint_slot(&mut grads, *src);
                    for (a, v) in acc[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *a += *v;
                    }
                }
                &Op::MatMul { a, b, n, k, m } => {
                    if self.node(a).requires_grad {
                        // dA = dC · Bᵀ
                        let bv = &self.node(b).value;
                        let acc = self.adjoint_slot(&mut grads, a);
                        for i in 0..n {
                            let grow = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let brow = &bv[p * m..(p + 1) * m];
                                let mut s = S::zero();
                                for (&gv, &bvv) in grow.iter().zip(brow) {
                                    s += gv * bvv;
                                }
                                acc[i * k + p] += s;
                            }
                        }
                    }
                    if self.node(b).requires_grad {
                        // dB = Aᵀ · dC
                        let av = &self.node(a).value;
                        let acc = self.adjoint_slot(&mut grads, b);
                        for i in 0..n {
                            let grow = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let aip = av[i * k + p];
                                let arow = &mut acc[p * m..(p + 1) * m];
                                for (o, &gv) in arow.iter_mut().zip(grow) {
                                    *o += aip * gv;
                                }
                            }
                        }
                    }
                }
                &Op::AddRowBias { a, bias, m } => {
                    if self.node(bias).requires_grad {
                        let acc = self.adjoint_slot(&mut grads, bias);
                        for row in g.chunks(m) {
                            for (o, &v) in acc.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                    if self.node(a).requires_grad {
                        accumulate(self.adjoint_slot(&mut grads, a), &g);
                    }
                }
                &Op::Add(a, b) => {
                    if self.node(a).requires_grad {
                        accumulate(self.adjoint_slot(&mut grads, a), &g);
                    }
                    if self.node(b).requires_grad {
                        accumulate(self.adjoint_slot(&mut grads, b), &g);
                    }
                }
                &Op::Sub(a, b) => {
                    if self.node(a).requires_grad {
                        accumulate(self.adjoint_slot(&mut grads, a), &g);
                    }
                    if self.node(b).requires_grad {
                        let acc = self.adjoint_slot(&mut grads, b);
                        for (o, &v) in acc.iter_mut().zip(&g) {
                            *o += -v;
                        }
                    }
                }
                &Op::Mul(a, b) => {
                    if self.node(a).requires_grad {
                        let bv = &self.node(b).value;
                        let acc = self.adjoint_slot(&mut grads, a);
                        for ((o, &v), &y) in acc.iter_mut().zip(&g).zip(bv) {
                            *o += v * y;
                        }
                    }
                    if self.node(b).requires_grad {
                        let av = &self.node(a).value;
                        let acc = self.adjoint_slot(&mut grads, b);
                        for ((o, &v), &x) in acc.iter_mut().zip(&g).zip(av) {
                            *o += v * x;
                        }
                    }
                }
                &Op::Scale(a, c) => {
                    let acc = self.adjoint_slot(&mut grads, a);
                    for (o, &v) in acc.iter_mut().zip(&g) {
                        *o += v.scale(c);
                    }
                }
                &Op::Relu(a) => {
                    let xv = &self.node(a).value;
                    let acc = self.adjoint_slot(&mut grads, a);
                    for ((o, &v), &x) in acc.iter_mut().zip(&g).zip(xv) {
                        if x.re() > 0.0 {
                            *o += v;
                        }
                    }
                }
                &Op::Tanh(a) => {
                    let yv = &node.value;
                    let acc = self.adjoint_slot(&mut grads, a);
                    for ((o, &v), &y) in acc.iter_mut().zip(&g).zip(yv) {
                        *o += v * (S::from_f64(1.0) - y * y);
                    }
                }
                &Op::Sum(a) => {
                    let acc = self.adjoint_slot(&mut grads, a);
                    for o in acc.iter_mut() {
                        *o += g[0];
                    }
                }
                Op::SoftmaxXent {
                    logits,
                    classes,
                    labels,
                } => {
                    let c = *classes;
                    let probs = &node.aux;
                    let acc = self.adjoint_slot(&mut grads, *logits);
                    for (i, &y) in labels.iter().enumerate() {
                        let gi = g[i];
                        for j in 0..c {
                            let mut d = probs[i * c + j];
                            if j == y {
                                d = d - S::from_f64(1.0);
                            }
                            acc[i * c + j] += gi * d;
                        }
                    }
                }
            }
        }
        Ok(Adjoints { grads })
    }

    fn adjoint_slot<'g>(&self, grads: &'g mut [Option<Vec<S>>], id: NodeId) -> &'g mut Vec<S> {
        let len = self.nodes[id.0].value.len();
        grads[id.0].get_or_insert_with(|| vec![S::zero(); len])
    }
}

fn accumulate<S: Scalar>(acc: &mut [S], g: &[S]) {
    for (o, &v) in acc.iter_mut().zip(g) {
        *o += v;
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::config(format!(
            "shape {shape:?} needs {expected} values, got {len}"
        )));
    }
    Ok(())
}
