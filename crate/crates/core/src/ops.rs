//! Primitive tensor operations: pure forward kernels shared by the tape
//! (which records them) and by tape-free inference.
//!
//! Broadcasting is deliberately narrow — only what the encoder and the gate
//! networks need: elementwise same-shape, a scalar against anything, and a
//! final-axis vector against a matrix (bias rows).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon used by every layer-norm in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// A primitive operation, including any non-tensor attributes it carries.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// `[m,k] x [k,n] -> [m,n]`
    Matmul,
    /// Elementwise sum; second operand may be a scalar or a last-axis vector.
    Add,
    /// Elementwise product; same broadcasting as `Add`.
    Mul,
    /// Multiply every element by a constant.
    Scale(f64),
    Sigmoid,
    /// Row-wise softmax over the last axis.
    SoftmaxLastAxis,
    /// Normalize over the last axis, then affine: inputs `(x, gamma, beta)`.
    LayerNorm { eps: f64 },
    /// Gaussian error linear unit (tanh form).
    Gelu,
    /// 2-d transpose.
    Transpose,
    /// Extract one row of a 2-d tensor as shape `[1, d]`.
    SliceRow(usize),
    /// Arithmetic mean of all elements, produces a scalar.
    Mean,
    /// Sum of all elements, produces a scalar.
    Sum,
    /// Gather rows of an embedding table: `[v,d] -> [n,d]`.
    EmbedRows(Vec<usize>),
    /// Softmax cross-entropy of a logit vector against a class index.
    CrossEntropy { target: usize },
    /// `ln s` if the recorded action is 1, else `ln(1-s)`; input is a scalar
    /// probability in (0,1).
    BernoulliLogProb { action: bool },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Sigmoid => "sigmoid",
            OpKind::SoftmaxLastAxis => "softmax-last-axis",
            OpKind::LayerNorm { .. } => "layer-norm",
            OpKind::Gelu => "gelu",
            OpKind::Transpose => "transpose",
            OpKind::SliceRow(_) => "slice-row",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::EmbedRows(_) => "embed-rows",
            OpKind::CrossEntropy { .. } => "cross-entropy",
            OpKind::BernoulliLogProb { .. } => "bernoulli-log-prob",
        }
    }
}

fn shape_err(op: &OpKind, inputs: &[&Tensor]) -> Error {
    let shapes: Vec<_> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    Error::Shape(format!("{}: incompatible shapes {:?}", op.name(), shapes))
}

fn arity_err(op: &OpKind, got: usize, want: usize) -> Error {
    Error::Invalid(format!("{}: expected {want} inputs, got {got}", op.name()))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_COEF: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// How the second operand of `Add`/`Mul` lines up against the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Broadcast {
    /// Identical shapes.
    Same,
    /// Second operand is a scalar.
    ScalarRhs,
    /// First operand is a scalar, output takes the second operand's shape.
    ScalarLhs,
    /// First is `[n,d]`, second is `[d]`: the vector is applied to each row.
    RowRhs,
}

pub(crate) fn broadcast_of(a: &Tensor, b: &Tensor) -> Option<Broadcast> {
    if a.shape() == b.shape() {
        Some(Broadcast::Same)
    } else if b.is_scalar() {
        Some(Broadcast::ScalarRhs)
    } else if a.is_scalar() {
        Some(Broadcast::ScalarLhs)
    } else if a.shape().len() == 2 && b.shape().len() == 1 && a.shape()[1] == b.shape()[0] {
        Some(Broadcast::RowRhs)
    } else {
        None
    }
}

fn elementwise(
    op: &OpKind,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let bc = broadcast_of(a, b).ok_or_else(|| shape_err(op, &[a, b]))?;
    let out = match bc {
        Broadcast::Same => {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_vec(a.shape().to_vec(), data)?
        }
        Broadcast::ScalarRhs => {
            let s = b.data()[0];
            let data = a.data().iter().map(|&x| f(x, s)).collect();
            Tensor::from_vec(a.shape().to_vec(), data)?
        }
        Broadcast::ScalarLhs => {
            let s = a.data()[0];
            let data = b.data().iter().map(|&y| f(s, y)).collect();
            Tensor::from_vec(b.shape().to_vec(), data)?
        }
        Broadcast::RowRhs => {
            let d = b.numel();
            let data = a
                .data()
                .chunks_exact(d)
                .flat_map(|row| row.iter().zip(b.data()).map(|(&x, &y)| f(x, y)))
                .collect();
            Tensor::from_vec(a.shape().to_vec(), data)?
        }
    };
    Ok(out)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Treats a 1-d tensor as a single row for row-wise ops.
fn rows_cols(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [d] => Ok((1, *d)),
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("expected 1-d or 2-d tensor, got {s:?}"))),
    }
}

pub(crate) fn softmax_rows(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let x = &data[r * cols..(r + 1) * cols];
        let y = &mut out[r * cols..(r + 1) * cols];
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi = (xi - max).exp();
            sum += *yi;
        }
        for yi in y.iter_mut() {
            *yi /= sum;
        }
    }
    out
}

/// Evaluates a primitive on raw values. No tape interaction; the output is
/// always detached.
pub fn apply(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    match kind {
        OpKind::Matmul => {
            let [a, b] = two(kind, inputs)?;
            let (m, ka) = a.dims2().map_err(|_| shape_err(kind, inputs))?;
            let (kb, n) = b.dims2().map_err(|_| shape_err(kind, inputs))?;
            if ka != kb {
                return Err(shape_err(kind, inputs));
            }
            Tensor::from_vec(vec![m, n], matmul_raw(a.data(), b.data(), m, ka, n))
        }
        OpKind::Add => {
            let [a, b] = two(kind, inputs)?;
            elementwise(kind, a, b, |x, y| x + y)
        }
        OpKind::Mul => {
            let [a, b] = two(kind, inputs)?;
            elementwise(kind, a, b, |x, y| x * y)
        }
        OpKind::Scale(c) => {
            let x = one(kind, inputs)?;
            let data = x.data().iter().map(|&v| c * v).collect();
            Tensor::from_vec(x.shape().to_vec(), data)
        }
        OpKind::Sigmoid => {
            let x = one(kind, inputs)?;
            let data = x.data().iter().map(|&v| sigmoid(v)).collect();
            Tensor::from_vec(x.shape().to_vec(), data)
        }
        OpKind::SoftmaxLastAxis => {
            let x = one(kind, inputs)?;
            let (rows, cols) = rows_cols(x).map_err(|_| shape_err(kind, inputs))?;
            Tensor::from_vec(x.shape().to_vec(), softmax_rows(x.data(), rows, cols))
        }
        OpKind::LayerNorm { eps } => {
            if inputs.len() != 3 {
                return Err(arity_err(kind, inputs.len(), 3));
            }
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let (rows, cols) = rows_cols(x).map_err(|_| shape_err(kind, inputs))?;
            if cols < 2 {
                return Err(Error::Shape(format!(
                    "layer-norm: last axis must have length >= 2, got shape {:?}",
                    x.shape()
                )));
            }
            if gamma.numel() != cols || beta.numel() != cols {
                return Err(shape_err(kind, inputs));
            }
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                let xin = &x.data()[r * cols..(r + 1) * cols];
                let yout = &mut out[r * cols..(r + 1) * cols];
                let mean = xin.iter().sum::<f64>() / cols as f64;
                let var = xin.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for ((y, &v), (&g, &bt)) in yout
                    .iter_mut()
                    .zip(xin)
                    .zip(gamma.data().iter().zip(beta.data()))
                {
                    *y = (v - mean) * inv * g + bt;
                }
            }
            Tensor::from_vec(x.shape().to_vec(), out)
        }
        OpKind::Gelu => {
            let x = one(kind, inputs)?;
            let data = x.data().iter().map(|&v| gelu(v)).collect();
            Tensor::from_vec(x.shape().to_vec(), data)
        }
        OpKind::Transpose => {
            let x = one(kind, inputs)?;
            let (r, c) = x.dims2().map_err(|_| shape_err(kind, inputs))?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x.data()[i * c + j];
                }
            }
            Tensor::from_vec(vec![c, r], out)
        }
        OpKind::SliceRow(i) => {
            let x = one(kind, inputs)?;
            let (r, c) = x.dims2().map_err(|_| shape_err(kind, inputs))?;
            if *i >= r {
                return Err(Error::Shape(format!(
                    "slice-row: row {i} out of range for shape {:?}",
                    x.shape()
                )));
            }
            Tensor::from_vec(vec![1, c], x.data()[i * c..(i + 1) * c].to_vec())
        }
        OpKind::Mean => {
            let x = one(kind, inputs)?;
            Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64))
        }
        OpKind::Sum => {
            let x = one(kind, inputs)?;
            Ok(Tensor::scalar(x.data().iter().sum::<f64>()))
        }
        OpKind::EmbedRows(indices) => {
            let table = one(kind, inputs)?;
            let (v, d) = table.dims2().map_err(|_| shape_err(kind, inputs))?;
            let mut out = Vec::with_capacity(indices.len() * d);
            for (pos, &idx) in indices.iter().enumerate() {
                if idx >= v {
                    return Err(Error::Invalid(format!(
                        "embed-rows: index {idx} at position {pos} out of range for table with {v} rows"
                    )));
                }
                out.extend_from_slice(&table.data()[idx * d..(idx + 1) * d]);
            }
            Tensor::from_vec(vec![indices.len(), d], out)
        }
        OpKind::CrossEntropy { target } => {
            let logits = one(kind, inputs)?;
            let (rows, cols) = rows_cols(logits).map_err(|_| shape_err(kind, inputs))?;
            if rows != 1 {
                return Err(Error::Shape(format!(
                    "cross-entropy: expected a single logit row, got shape {:?}",
                    logits.shape()
                )));
            }
            if *target >= cols {
                return Err(Error::Invalid(format!(
                    "cross-entropy: target class {target} out of range for {cols} classes"
                )));
            }
            let z = logits.data();
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let logsumexp = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            Ok(Tensor::scalar(logsumexp - z[*target]))
        }
        OpKind::BernoulliLogProb { action } => {
            let s = one(kind, inputs)?;
            let p = s.item().map_err(|_| shape_err(kind, inputs))?;
            if !(0.0 < p && p < 1.0) {
                return Err(Error::Invalid(format!(
                    "bernoulli-log-prob: probability {p} outside (0,1)"
                )));
            }
            Ok(Tensor::scalar(if *action { p.ln() } else { (1.0 - p).ln() }))
        }
    }
}

fn one<'a>(kind: &OpKind, inputs: &[&'a Tensor]) -> Result<&'a Tensor> {
    match inputs {
        [x] => Ok(x),
        _ => Err(arity_err(kind, inputs.len(), 1)),
    }
}

fn two<'a>(kind: &OpKind, inputs: &[&'a Tensor]) -> Result<[&'a Tensor; 2]> {
    match inputs {
        [a, b] => Ok([a, b]),
        _ => Err(arity_err(kind, inputs.len(), 2)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let out = apply(&OpKind::Sigmoid, &[&Tensor::scalar(0.0)]).unwrap();
        assert_eq!(out.item().unwrap(), 0.5);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let out = apply(&OpKind::SoftmaxLastAxis, &[&t(vec![2], vec![0.0, 0.0])]).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_identity_preserves_input() {
        let eye = t(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let x = t(vec![3, 4], (0..12).map(|i| i as f64 * 0.37 - 1.0).collect());
        let out = apply(&OpKind::Matmul, &[&eye, &x]).unwrap();
        assert!(out.bit_eq(&x.detached()));
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let a = t(vec![2, 3], vec![0.0; 6]);
        let b = t(vec![2, 2], vec![0.0; 4]);
        let err = apply(&OpKind::Matmul, &[&a, &b]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(vec![3, 5], (0..15).map(|i| (i as f64).sin() * 4.0).collect());
        let out = apply(&OpKind::SoftmaxLastAxis, &[&x]).unwrap();
        for row in out.data().chunks(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_scale() {
        let x = t(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 7.5]);
        let gamma = t(vec![4], vec![1.0; 4]);
        let beta = t(vec![4], vec![0.0; 4]);
        let out = apply(&OpKind::LayerNorm { eps: LAYER_NORM_EPS }, &[&x, &gamma, &beta]).unwrap();
        for row in out.data().chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-10, "mean {m}");
        }
    }

    #[test]
    fn layer_norm_on_constant_vector_is_finite() {
        let x = t(vec![1, 4], vec![3.0; 4]);
        let gamma = t(vec![4], vec![1.0; 4]);
        let beta = t(vec![4], vec![0.0; 4]);
        let out = apply(&OpKind::LayerNorm { eps: LAYER_NORM_EPS }, &[&x, &gamma, &beta]).unwrap();
        assert!(out.all_finite());
        assert_eq!(out.data(), &[0.0; 4]);
    }

    #[test]
    fn cross_entropy_uniform_two_class_is_ln2() {
        let out = apply(&OpKind::CrossEntropy { target: 0 }, &[&t(vec![2], vec![0.0, 0.0])]).unwrap();
        assert!((out.item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bernoulli_log_prob_matches_pmf() {
        let s = Tensor::scalar(0.8);
        let lp0 = apply(&OpKind::BernoulliLogProb { action: false }, &[&s]).unwrap();
        assert!((lp0.item().unwrap() - 0.2f64.ln()).abs() < 1e-15);
        let lp1 = apply(&OpKind::BernoulliLogProb { action: true }, &[&s]).unwrap();
        assert!((lp1.item().unwrap() - 0.8f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn embed_rows_out_of_range_names_position() {
        let table = t(vec![3, 2], vec![0.0; 6]);
        let err = apply(&OpKind::EmbedRows(vec![0, 5]), &[&table]).unwrap_err();
        assert!(err.to_string().contains("position 1"), "{err}");
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let x = t(vec![4, 4], (0..16).map(|i| (i as f64 * 0.93).cos()).collect());
        let g = t(vec![4], vec![1.1, 0.9, 1.0, 1.3]);
        let b = t(vec![4], vec![0.1, -0.2, 0.0, 0.4]);
        let a = apply(&OpKind::LayerNorm { eps: LAYER_NORM_EPS }, &[&x, &g, &b]).unwrap();
        let c = apply(&OpKind::LayerNorm { eps: LAYER_NORM_EPS }, &[&x, &g, &b]).unwrap();
        assert!(a.bit_eq(&c));
    }
}
