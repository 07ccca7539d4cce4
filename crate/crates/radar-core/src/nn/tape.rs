//! Vector-valued reverse-mode differentiation tape.
//!
//! Forward values are computed eagerly as operations are recorded; a single
//! backward pass accumulates gradients into the [`ParamSet`] tensors that the
//! recorded operations touched. Node payloads are whole vectors rather than
//! scalars, which keeps tapes short for the small dense networks built here.

use super::{softmax_kernel, NnError, ParamId, ParamSet};

/// Handle to one recorded tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param { id: ParamId },
    ParamRow { id: ParamId, row: usize, cols: usize },
    Affine { w: ParamId, b: Option<ParamId>, x: NodeId },
    Add { a: NodeId, b: NodeId },
    AddConst { a: NodeId },
    Scale { a: NodeId, c: f64 },
    ScaleByScalar { s: NodeId, v: NodeId },
    Relu { a: NodeId },
    Concat { a: NodeId, b: NodeId },
    Dot { a: NodeId, b: NodeId },
    SumVec { items: Vec<NodeId> },
    GatherScalars { items: Vec<NodeId> },
    MaskedSoftmax { x: NodeId, mask: Vec<bool> },
    MaskedLogSoftmax { x: NodeId, mask: Vec<bool> },
    LogSumExp { x: NodeId },
    Pick { x: NodeId, index: usize },
    SumScalars { items: Vec<NodeId> },
}

struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Records a forward computation and replays it backwards for gradients.
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Forward value of a length-one node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Vec<f64>) -> NodeId {
        self.push(Op::Input, value)
    }

    /// A parameter tensor used directly as a vector.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        let value = params.tensor(id).values.clone();
        self.push(Op::Param { id }, value)
    }

    /// One row of a matrix-shaped parameter tensor.
    pub fn param_row(&mut self, params: &ParamSet, id: ParamId, row: usize) -> NodeId {
        let t = params.tensor(id);
        let cols = *t.shape.last().expect("tensor has a shape");
        let value = t.values[row * cols..(row + 1) * cols].to_vec();
        self.push(Op::ParamRow { id, row, cols }, value)
    }

    /// `W x + b` with `W` shaped `[rows, cols]` row-major.
    pub fn affine(
        &mut self,
        params: &ParamSet,
        w: ParamId,
        b: Option<ParamId>,
        x: NodeId,
    ) -> Result<NodeId, NnError> {
        let wt = params.tensor(w);
        if wt.shape.len() != 2 {
            return Err(NnError::ShapeMismatch(format!(
                "affine weight {} must be rank 2, got shape {:?}",
                wt.name, wt.shape
            )));
        }
        let (rows, cols) = (wt.shape[0], wt.shape[1]);
        let xv = &self.nodes[x.0].value;
        if xv.len() != cols {
            return Err(NnError::ShapeMismatch(format!(
                "affine {}: input has length {}, weight expects {}",
                wt.name,
                xv.len(),
                cols
            )));
        }
        let mut y = vec![0.0; rows];
        for r in 0..rows {
            let row = &wt.values[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for c in 0..cols {
                acc += row[c] * xv[c];
            }
            y[r] = acc;
        }
        if let Some(bid) = b {
            let bt = params.tensor(bid);
            if bt.values.len() != rows {
                return Err(NnError::ShapeMismatch(format!(
                    "affine bias {} has length {}, expected {}",
                    bt.name,
                    bt.values.len(),
                    rows
                )));
            }
            for r in 0..rows {
                y[r] += bt.values[r];
            }
        }
        Ok(self.push(Op::Affine { w, b, x }, y))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.len() != bv.len() {
            return Err(NnError::ShapeMismatch(format!(
                "add: lengths {} vs {}",
                av.len(),
                bv.len()
            )));
        }
        let y = av.iter().zip(bv).map(|(x, z)| x + z).collect();
        Ok(self.push(Op::Add { a, b }, y))
    }

    /// Adds the same constant to every component.
    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let y = self.nodes[a.0].value.iter().map(|x| x + c).collect();
        self.push(Op::AddConst { a }, y)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let y = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        self.push(Op::Scale { a, c }, y)
    }

    /// Multiplies vector `v` by a length-one node `s`.
    pub fn scale_by_scalar(&mut self, s: NodeId, v: NodeId) -> Result<NodeId, NnError> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(NnError::ShapeMismatch(
                "scale_by_scalar: scalar operand must have length 1".to_string(),
            ));
        }
        let sv = self.nodes[s.0].value[0];
        let y = self.nodes[v.0].value.iter().map(|x| x * sv).collect();
        Ok(self.push(Op::ScaleByScalar { s, v }, y))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let y = self.nodes[a.0].value.iter().map(|x| x.max(0.0)).collect();
        self.push(Op::Relu { a }, y)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut y = self.nodes[a.0].value.clone();
        y.extend_from_slice(&self.nodes[b.0].value);
        self.push(Op::Concat { a, b }, y)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.len() != bv.len() {
            return Err(NnError::ShapeMismatch(format!(
                "dot: lengths {} vs {}",
                av.len(),
                bv.len()
            )));
        }
        let y = av.iter().zip(bv).map(|(x, z)| x * z).sum();
        Ok(self.push(Op::Dot { a, b }, vec![y]))
    }

    /// Elementwise sum of same-length vectors.
    pub fn sum_vec(&mut self, items: Vec<NodeId>) -> Result<NodeId, NnError> {
        let Some(first) = items.first() else {
            return Err(NnError::ShapeMismatch("sum_vec of zero vectors".to_string()));
        };
        let len = self.nodes[first.0].value.len();
        let mut y = vec![0.0; len];
        for id in &items {
            let v = &self.nodes[id.0].value;
            if v.len() != len {
                return Err(NnError::ShapeMismatch(format!(
                    "sum_vec: lengths {} vs {}",
                    v.len(),
                    len
                )));
            }
            for (acc, x) in y.iter_mut().zip(v) {
                *acc += x;
            }
        }
        Ok(self.push(Op::SumVec { items }, y))
    }

    /// Collects length-one nodes into a single vector.
    pub fn gather_scalars(&mut self, items: Vec<NodeId>) -> Result<NodeId, NnError> {
        let mut y = Vec::with_capacity(items.len());
        for id in &items {
            let v = &self.nodes[id.0].value;
            if v.len() != 1 {
                return Err(NnError::ShapeMismatch(
                    "gather_scalars: operands must have length 1".to_string(),
                ));
            }
            y.push(v[0]);
        }
        Ok(self.push(Op::GatherScalars { items }, y))
    }

    /// Masked softmax: masked entries get probability exactly 0, the rest a
    /// max-shifted softmax over the unmasked logits.
    pub fn masked_softmax(&mut self, x: NodeId, mask: Vec<bool>) -> Result<NodeId, NnError> {
        let probs = softmax_kernel(&self.nodes[x.0].value, &mask)?;
        Ok(self.push(Op::MaskedSoftmax { x, mask }, probs))
    }

    /// Masked log-softmax: masked entries hold `-inf` and must never be
    /// selected downstream.
    pub fn masked_log_softmax(&mut self, x: NodeId, mask: Vec<bool>) -> Result<NodeId, NnError> {
        let xv = &self.nodes[x.0].value;
        if xv.len() != mask.len() {
            return Err(NnError::ShapeMismatch(format!(
                "log_softmax: logits length {} vs mask length {}",
                xv.len(),
                mask.len()
            )));
        }
        let max = xv
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(NnError::AllMasked);
        }
        let log_z = xv
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| (v - max).exp())
            .sum::<f64>()
            .ln()
            + max;
        let y = xv
            .iter()
            .zip(&mask)
            .map(|(v, &m)| if m { v - log_z } else { f64::NEG_INFINITY })
            .collect();
        Ok(self.push(Op::MaskedLogSoftmax { x, mask }, y))
    }

    /// log(sum(exp(x))) over the whole vector, computed stably.
    pub fn log_sum_exp(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let max = xv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let y = if max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            xv.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max
        };
        self.push(Op::LogSumExp { x }, vec![y])
    }

    /// Selects one component as a length-one node.
    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId, NnError> {
        let xv = &self.nodes[x.0].value;
        if index >= xv.len() {
            return Err(NnError::ShapeMismatch(format!(
                "pick index {index} out of range {}",
                xv.len()
            )));
        }
        let y = vec![xv[index]];
        Ok(self.push(Op::Pick { x, index }, y))
    }

    /// Sum of length-one nodes into a length-one node.
    pub fn sum_scalars(&mut self, items: Vec<NodeId>) -> Result<NodeId, NnError> {
        let mut acc = 0.0;
        for id in &items {
            let v = &self.nodes[id.0].value;
            if v.len() != 1 {
                return Err(NnError::ShapeMismatch(
                    "sum_scalars: operands must have length 1".to_string(),
                ));
            }
            acc += v[0];
        }
        Ok(self.push(Op::SumScalars { items }, vec![acc]))
    }

    /// Propagates d(loss)/d(node) backwards from a scalar loss node and
    /// accumulates parameter gradients into `params`. A tape can only run
    /// backward once; record a fresh forward pass for another gradient.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamSet) -> Result<(), NnError> {
        if self.backward_done {
            return Err(NnError::BackwardTwice);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NnError::ShapeMismatch(
                "backward: loss node must have length 1".to_string(),
            ));
        }
        self.backward_done = true;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        // Helper: add `delta * scale` into the adjoint slot for `id`.
        fn bump(adj: &mut [Option<Vec<f64>>], id: NodeId, len: usize, f: impl Fn(&mut [f64])) {
            let slot = adj[id.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        }

        for i in (0..=loss.0).rev() {
            let Some(grad) = adj[i].take() else { continue };
            // Clone op metadata to keep the borrow checker happy; ops are tiny.
            let op = self.nodes[i].op.clone();
            match op {
                Op::Input => {}
                Op::Param { id } => {
                    let t = params.tensor_mut(id);
                    for (g, d) in t.grad.iter_mut().zip(&grad) {
                        *g += d;
                    }
                }
                Op::ParamRow { id, row, cols } => {
                    let t = params.tensor_mut(id);
                    for (c, d) in grad.iter().enumerate() {
                        t.grad[row * cols + c] += d;
                    }
                }
                Op::Affine { w, b, x } => {
                    let (rows, cols) = {
                        let wt = params.tensor(w);
                        (wt.shape[0], wt.shape[1])
                    };
                    let xv = self.nodes[x.0].value.clone();
                    {
                        let wt = params.tensor_mut(w);
                        for r in 0..rows {
                            for c in 0..cols {
                                wt.grad[r * cols + c] += grad[r] * xv[c];
                            }
                        }
                    }
                    if let Some(bid) = b {
                        let bt = params.tensor_mut(bid);
                        for (g, d) in bt.grad.iter_mut().zip(&grad) {
                            *g += d;
                        }
                    }
                    let wt = params.tensor(w);
                    bump(&mut adj, x, cols, |slot| {
                        for r in 0..rows {
                            let row = &wt.values[r * cols..(r + 1) * cols];
                            for c in 0..cols {
                                slot[c] += row[c] * grad[r];
                            }
                        }
                    });
                }
                Op::Add { a, b } => {
                    let len = grad.len();
                    bump(&mut adj, a, len, |slot| {
                        for (s, d) in slot.iter_mut().zip(&grad) {
                            *s += d;
                        }
                    });
                    bump(&mut adj, b, len, |slot| {
                        for (s, d) in slot.iter_mut().zip(&grad) {
                            *s += d;
                        }
                    });
                }
                Op::AddConst { a } => {
                    bump(&mut adj, a, grad.len(), |slot| {
                        for (s, d) in slot.iter_mut().zip(&grad) {
                            *s += d;
                        }
                    });
                }
                Op::Scale { a, c } => {
                    bump(&mut adj, a, grad.len(), |slot| {
                        for (s, d) in slot.iter_mut().zip(&grad) {
                            *s += c * d;
                        }
                    });
                }
                Op::ScaleByScalar { s, v } => {
                    let sv = self.nodes[s.0].value[0];
                    let vv = self.nodes[v.0].value.clone();
                    bump(&mut adj, v, grad.len(), |slot| {
                        for (sl, d) in slot.iter_mut().zip(&grad) {
                            *sl += sv * d;
                        }
                    });
                    let ds: f64 = vv.iter().zip(&grad).map(|(x, d)| x * d).sum();
                    bump(&mut adj, s, 1, |slot| slot[0] += ds);
                }
                Op::Relu { a } => {
                    let out = self.nodes[i].value.clone();
                    bump(&mut adj, a, grad.len(), |slot| {
                        for (k, (s, d)) in slot.iter_mut().zip(&grad).enumerate() {
                            if out[k] > 0.0 {
                                *s += d;
                            }
                        }
                    });
                }
                Op::Concat { a, b } => {
                    let alen = self.nodes[a.0].value.len();
                    bump(&mut adj, a, alen, |slot| {
                        for (s, d) in slot.iter_mut().zip(&grad[..alen]) {
                            *s += d;
                        }
                    });
                    let blen = grad.len() - alen;
                    bump(&mut adj, b, blen, |slot| {
                        for (s, d) in slot.iter_mut().zip(&grad[alen..]) {
                            *s += d;
                        }
                    });
                }
                Op::Dot { a, b } => {
                    let d = grad[0];
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    bump(&mut adj, a, av.len(), |slot| {
                        for (s, x) in slot.iter_mut().zip(&bv) {
                            *s += d * x;
                        }
                    });
                    bump(&mut adj, b, bv.len(), |slot| {
                        for (s, x) in slot.iter_mut().zip(&av) {
                            *s += d * x;
                        }
                    });
                }
                Op::SumVec { items } => {
                    for id in items {
                        bump(&mut adj, id, grad.len(), |slot| {
                            for (s, d) in slot.iter_mut().zip(&grad) {
                                *s += d;
                            }
                        });
                    }
                }
                Op::GatherScalars { items } => {
                    for (k, id) in items.into_iter().enumerate() {
                        let d = grad[k];
                        bump(&mut adj, id, 1, |slot| slot[0] += d);
                    }
                }
                Op::MaskedSoftmax { x, mask } => {
                    let p = self.nodes[i].value.clone();
                    let weighted: f64 = p
                        .iter()
                        .zip(&grad)
                        .zip(&mask)
                        .filter(|(_, &m)| m)
                        .map(|((pi, di), _)| pi * di)
                        .sum();
                    bump(&mut adj, x, grad.len(), |slot| {
                        for k in 0..slot.len() {
                            if mask[k] {
                                slot[k] += p[k] * (grad[k] - weighted);
                            }
                        }
                    });
                }
                Op::MaskedLogSoftmax { x, mask } => {
                    let logp = self.nodes[i].value.clone();
                    let total: f64 = grad
                        .iter()
                        .zip(&mask)
                        .filter(|(_, &m)| m)
                        .map(|(d, _)| *d)
                        .sum();
                    bump(&mut adj, x, grad.len(), |slot| {
                        for k in 0..slot.len() {
                            if mask[k] {
                                slot[k] += grad[k] - logp[k].exp() * total;
                            }
                        }
                    });
                }
                Op::LogSumExp { x } => {
                    let xv = self.nodes[x.0].value.clone();
                    let max = xv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = xv.iter().map(|v| (v - max).exp()).sum();
                    let d = grad[0];
                    bump(&mut adj, x, xv.len(), |slot| {
                        for (s, v) in slot.iter_mut().zip(&xv) {
                            *s += d * (v - max).exp() / z;
                        }
                    });
                }
                Op::Pick { x, index } => {
                    let d = grad[0];
                    let len = self.nodes[x.0].value.len();
                    bump(&mut adj, x, len, |slot| slot[index] += d);
                }
                Op::SumScalars { items } => {
                    let d = grad[0];
                    for id in items {
                        bump(&mut adj, id, 1, |slot| slot[0] += d);
                    }
                }
            }
        }
        Ok(())
    }
}
