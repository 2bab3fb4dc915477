//! Wengert tape for reverse-mode differentiation.
//!
//! The tape is an append-only list of recorded primitive applications. Each
//! node keeps its op kind, the ids of its inputs, and the saved output
//! activation, so the backward pass never recomputes the forward. A node is
//! recorded only when at least one input is already attached to the tape;
//! unattached inputs of a recorded op are registered as constant leaves on
//! the fly. Running ops on fully detached tensors therefore records nothing,
//! which is what tape-free inference relies on.
//!
//! Node ids are issued in creation order, so every input id is strictly
//! smaller than its consumer's id and a single reverse sweep suffices.

use crate::error::{Error, Result};
use crate::ops::{self, Broadcast, OpKind};
use crate::tensor::{NodeId, Tensor};

struct TapeNode {
    /// `None` marks a leaf (parameter or constant).
    kind: Option<OpKind>,
    inputs: Vec<NodeId>,
    /// Saved activation; for leaves, the registered value.
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a value as a leaf and returns the attached copy.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.push(None, Vec::new(), t.detached());
        let mut out = t.detached();
        out.node = Some(id);
        out
    }

    fn push(&mut self, kind: Option<OpKind>, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let id = self.nodes.len();
        debug_assert!(inputs.iter().all(|&i| i < id));
        self.nodes.push(TapeNode { kind, inputs, value });
        id
    }

    /// Applies a primitive, recording it when any input is tape-attached.
    pub fn apply(&mut self, kind: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
        let mut out = ops::apply(&kind, inputs)?;
        if inputs.iter().any(|t| t.node.is_some()) {
            let ids: Vec<NodeId> = inputs
                .iter()
                .map(|t| match t.node {
                    Some(id) => id,
                    None => self.push(None, Vec::new(), t.detached()),
                })
                .collect();
            let id = self.push(Some(kind), ids, out.detached());
            out.node = Some(id);
        }
        Ok(out)
    }

    /// Recomputes every recorded node from its inputs and checks the saved
    /// activation bit-for-bit.
    pub fn verify_replay(&self) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            let Some(kind) = &node.kind else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let recomputed = ops::apply(kind, &inputs)?;
            if !recomputed.bit_eq(&node.value) {
                return Err(Error::Invalid(format!(
                    "tape replay mismatch at node {id} ({})",
                    kind.name()
                )));
            }
        }
        Ok(())
    }

    /// Reverse sweep from a scalar loss. Returns a gradient for every node;
    /// leaves unreachable from the loss get zero gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if !loss.is_scalar() {
            return Err(Error::Invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let root = loss
            .node
            .ok_or_else(|| Error::Invalid("backward: loss is not attached to this tape".into()))?;
        if root >= self.nodes.len() {
            return Err(Error::Invalid(format!(
                "backward: loss node {root} is not on this tape"
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(kind) = &node.kind {
                self.backprop_one(kind, &node.inputs, &node.value, &dy, &mut grads);
            }
            grads[id] = Some(dy);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn backprop_one(
        &self,
        kind: &OpKind,
        inputs: &[NodeId],
        out: &Tensor,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let mut add_to = |id: NodeId, contrib: Vec<f64>| {
            match &mut grads[id] {
                Some(g) => {
                    for (gi, ci) in g.iter_mut().zip(&contrib) {
                        *gi += ci;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match kind {
            OpKind::Matmul => {
                let a = self.value(inputs[0]);
                let b = self.value(inputs[1]);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                // dA[i,p] = sum_j dY[i,j] B[p,j]
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += dy[i * n + j] * b.data()[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                add_to(inputs[0], da);
                // dB[p,j] = sum_i A[i,p] dY[i,j]
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = a.data()[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += av * dy[i * n + j];
                        }
                    }
                }
                add_to(inputs[1], db);
            }
            OpKind::Add => {
                let a = self.value(inputs[0]);
                let b = self.value(inputs[1]);
                match ops::broadcast_of(a, b).expect("recorded op had valid shapes") {
                    Broadcast::Same => {
                        add_to(inputs[0], dy.to_vec());
                        add_to(inputs[1], dy.to_vec());
                    }
                    Broadcast::ScalarRhs => {
                        add_to(inputs[0], dy.to_vec());
                        add_to(inputs[1], vec![dy.iter().sum()]);
                    }
                    Broadcast::ScalarLhs => {
                        add_to(inputs[0], vec![dy.iter().sum()]);
                        add_to(inputs[1], dy.to_vec());
                    }
                    Broadcast::RowRhs => {
                        add_to(inputs[0], dy.to_vec());
                        let d = b.numel();
                        let mut db = vec![0.0; d];
                        for row in dy.chunks_exact(d) {
                            for (dbj, &v) in db.iter_mut().zip(row) {
                                *dbj += v;
                            }
                        }
                        add_to(inputs[1], db);
                    }
                }
            }
            OpKind::Mul => {
                let a = self.value(inputs[0]);
                let b = self.value(inputs[1]);
                match ops::broadcast_of(a, b).expect("recorded op had valid shapes") {
                    Broadcast::Same => {
                        add_to(inputs[0], dy.iter().zip(b.data()).map(|(&d, &v)| d * v).collect());
                        add_to(inputs[1], dy.iter().zip(a.data()).map(|(&d, &v)| d * v).collect());
                    }
                    Broadcast::ScalarRhs => {
                        let s = b.data()[0];
                        add_to(inputs[0], dy.iter().map(|&d| d * s).collect());
                        let db = dy.iter().zip(a.data()).map(|(&d, &v)| d * v).sum();
                        add_to(inputs[1], vec![db]);
                    }
                    Broadcast::ScalarLhs => {
                        let s = a.data()[0];
                        let da = dy.iter().zip(b.data()).map(|(&d, &v)| d * v).sum();
                        add_to(inputs[0], vec![da]);
                        add_to(inputs[1], dy.iter().map(|&d| d * s).collect());
                    }
                    Broadcast::RowRhs => {
                        let d = b.numel();
                        let da = dy
                            .iter()
                            .enumerate()
                            .map(|(idx, &g)| g * b.data()[idx % d])
                            .collect();
                        add_to(inputs[0], da);
                        let mut db = vec![0.0; d];
                        for (row_dy, row_a) in dy.chunks_exact(d).zip(a.data().chunks_exact(d)) {
                            for ((dbj, &g), &av) in db.iter_mut().zip(row_dy).zip(row_a) {
                                *dbj += g * av;
                            }
                        }
                        add_to(inputs[1], db);
                    }
                }
            }
            OpKind::Scale(c) => {
                add_to(inputs[0], dy.iter().map(|&d| c * d).collect());
            }
            OpKind::Sigmoid => {
                let dx = dy
                    .iter()
                    .zip(out.data())
                    .map(|(&d, &y)| d * y * (1.0 - y))
                    .collect();
                add_to(inputs[0], dx);
            }
            OpKind::SoftmaxLastAxis => {
                let cols = *out.shape().last().unwrap();
                let mut dx = vec![0.0; out.numel()];
                for r in 0..out.numel() / cols {
                    let y = &out.data()[r * cols..(r + 1) * cols];
                    let dyr = &dy[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(dyr).map(|(&yi, &di)| yi * di).sum();
                    for ((dxi, &yi), &di) in
                        dx[r * cols..(r + 1) * cols].iter_mut().zip(y).zip(dyr)
                    {
                        *dxi = yi * (di - dot);
                    }
                }
                add_to(inputs[0], dx);
            }
            OpKind::LayerNorm { eps } => {
                let x = self.value(inputs[0]);
                let gamma = self.value(inputs[1]);
                let cols = gamma.numel();
                let rows = x.numel() / cols;
                let mut dx = vec![0.0; x.numel()];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    let xr = &x.data()[r * cols..(r + 1) * cols];
                    let dyr = &dy[r * cols..(r + 1) * cols];
                    let mean = xr.iter().sum::<f64>() / cols as f64;
                    let var =
                        xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) * inv).collect();
                    let gdy: Vec<f64> =
                        dyr.iter().zip(gamma.data()).map(|(&d, &g)| d * g).collect();
                    let m1 = gdy.iter().sum::<f64>() / cols as f64;
                    let m2 = gdy.iter().zip(&xhat).map(|(&g, &h)| g * h).sum::<f64>()
                        / cols as f64;
                    for j in 0..cols {
                        dx[r * cols + j] = inv * (gdy[j] - m1 - xhat[j] * m2);
                        dgamma[j] += dyr[j] * xhat[j];
                        dbeta[j] += dyr[j];
                    }
                }
                add_to(inputs[0], dx);
                add_to(inputs[1], dgamma);
                add_to(inputs[2], dbeta);
            }
            OpKind::Gelu => {
                let x = self.value(inputs[0]);
                let dx = dy
                    .iter()
                    .zip(x.data())
                    .map(|(&d, &v)| d * ops::gelu_grad(v))
                    .collect();
                add_to(inputs[0], dx);
            }
            OpKind::Transpose => {
                let (c, r) = (out.shape()[0], out.shape()[1]);
                // out is [c,r]; input was [r,c]
                let mut dx = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        dx[j * c + i] = dy[i * r + j];
                    }
                }
                add_to(inputs[0], dx);
            }
            OpKind::SliceRow(i) => {
                let x = self.value(inputs[0]);
                let cols = x.shape()[1];
                let mut dx = vec![0.0; x.numel()];
                dx[i * cols..(i + 1) * cols].copy_from_slice(dy);
                add_to(inputs[0], dx);
            }
            OpKind::Mean => {
                let n = self.value(inputs[0]).numel();
                add_to(inputs[0], vec![dy[0] / n as f64; n]);
            }
            OpKind::Sum => {
                let n = self.value(inputs[0]).numel();
                add_to(inputs[0], vec![dy[0]; n]);
            }
            OpKind::EmbedRows(indices) => {
                let table = self.value(inputs[0]);
                let d = table.shape()[1];
                let mut dt = vec![0.0; table.numel()];
                for (pos, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[idx * d + j] += dy[pos * d + j];
                    }
                }
                add_to(inputs[0], dt);
            }
            OpKind::CrossEntropy { target } => {
                let z = self.value(inputs[0]);
                let probs = ops::softmax_rows(z.data(), 1, z.numel());
                let mut dz = probs;
                dz[*target] -= 1.0;
                for v in dz.iter_mut() {
                    *v *= dy[0];
                }
                add_to(inputs[0], dz);
            }
            OpKind::BernoulliLogProb { action } => {
                let s = self.value(inputs[0]).data()[0];
                let ds = if *action { 1.0 / s } else { -1.0 / (1.0 - s) };
                add_to(inputs[0], vec![dy[0] * ds]);
            }
        }
    }
}

/// Gradients from one backward sweep, indexed by tape-node id.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to a tape-attached tensor. Nodes the loss never
    /// reached get a zero tensor of the right shape.
    pub fn wrt(&self, t: &Tensor) -> Result<Tensor> {
        let id = t
            .node()
            .ok_or_else(|| Error::Invalid("gradient requested for a detached tensor".into()))?;
        self.by_node(id)
    }

    pub fn by_node(&self, id: NodeId) -> Result<Tensor> {
        if id >= self.grads.len() {
            return Err(Error::Invalid(format!("gradient
 node {id} out of range")));
        }
        match &self.grads[id] {
            Some(g) => Tensor::from_vec(self.shapes[id].clone(), g.clone()),
            None => Ok(Tensor::zeros(self.shapes[id].clone())),
        }
    }

    /// True when the loss actually propagated to this node.
    pub fn reached(&self, id: NodeId) -> bool {
        self.grads.get(id).map(|g| g.is_some()).unwrap_or(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2, 3], vec![1., -2., 3., 0.5, 0., 7.]));
        let loss = tape.apply(OpKind::Sum, &[&x]).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sigmoid_at_zero_is_quarter() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(0.0));
        let y = tape.apply(OpKind::Sigmoid, &[&x]).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert!((grads.wrt(&x).unwrap().item().unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0));
        let unused = tape.leaf(&t(vec![3], vec![1., 2., 3.]));
        let y = tape.apply(OpKind::Scale(4.0), &[&x]).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert_eq!(grads.wrt(&unused).unwrap().data(), &[0.0; 3]);
        assert!(!grads.reached(unused.node().unwrap()));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1., 2.]));
        let y = tape.apply(OpKind::Scale(1.0), &[&x]).unwrap();
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn detached_inputs_record_nothing() {
        let mut tape = Tape::new();
        let a = t(vec![2, 2], vec![1., 2., 3., 4.]);
        let b = t(vec![2, 2], vec![0.5; 4]);
        let _ = tape.apply(OpKind::Matmul, &[&a, &b]).unwrap();
        assert!(tape.is_empty());
    }

    #[test]
    fn constants_are_auto_leafed() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0));
        let c = Tensor::scalar(10.0);
        let y = tape.apply(OpKind::Add, &[&x, &c]).unwrap();
        assert_eq!(y.item().unwrap(), 13.0);
        let grads = tape.backward(&y).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().item().unwrap(), 1.0);
    }

    #[test]
    fn repeated_input_accumulates() {
        // y = x * x, dy/dx = 2x
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0));
        let y = tape.apply(OpKind::Mul, &[&x, &x]).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn replay_reproduces_saved_activations() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2, 2], vec![0.3, -1.2, 2.2, 0.01]));
        let g = tape.leaf(&t(vec![2], vec![1.0, 1.5]));
        let b = tape.leaf(&t(vec![2], vec![0.0, -0.5]));
        let h = tape
            .apply(OpKind::LayerNorm { eps: ops::LAYER_NORM_EPS }, &[&x, &g, &b])
            .unwrap();
        let h2 = tape.apply(OpKind::Gelu, &[&h]).unwrap();
        let _ = tape.apply(OpKind::Mean, &[&h2]).unwrap();
        tape.verify_replay().unwrap();
    }
}
