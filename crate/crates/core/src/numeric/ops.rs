//! Primitive operations and their vector-Jacobian products.
//!
//! Shape rules:
//! - `MatMul`: `[m,k] x [k,n] -> [m,n]` or `[m,k] x [k] -> [m]`.
//! - `Add`, `Mul`: equal shapes, or either operand of shape `[1]`, which
//!   is broadcast against the other.
//! - `Concat`: one or more rank-1 operands, joined end to end.
//! - `Slice`: rank-1 element range, or a row range of a rank-2 tensor.
//! - `Sum`: any shape to `[1]`.
//! - `Transpose`: rank-2 only.
//! - `Softmax`: rank-1, non-empty.
//! - the remaining unary maps keep the operand's shape. `Log` requires
//!   strictly positive input.

use super::{NumericError, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Mul,
    Concat,
    Slice { start: usize, end: usize },
    Sum,
    Transpose,
    Sigmoid,
    Tanh,
    Relu,
    Log,
    Neg,
    Scale(f64),
    Softmax,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Concat => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Sum => "sum",
            Primitive::Transpose => "transpose",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Log => "log",
            Primitive::Neg => "neg",
            Primitive::Scale(_) => "scale",
            Primitive::Softmax => "softmax",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::Mul => Some(2),
            Primitive::Concat => None,
            _ => Some(1),
        }
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

fn mismatch(op: &Primitive, a: &Tensor, b: &Tensor) -> NumericError {
    NumericError::ShapeMismatch {
        op: op.name(),
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn rank_error(op: &Primitive, t: &Tensor) -> NumericError {
    NumericError::Rank {
        op: op.name(),
        shape: t.shape().to_vec(),
    }
}

/// Evaluates one primitive on concrete operands.
pub fn apply_primitive(kind: &Primitive, operands: &[&Tensor]) -> Result<Tensor, NumericError> {
    if let Some(n) = kind.arity() {
        if operands.len() != n {
            return Err(NumericError::Arity {
                op: kind.name(),
                expected: n,
                got: operands.len(),
            });
        }
    } else if operands.is_empty() {
        return Err(NumericError::Arity {
            op: kind.name(),
            expected: 1,
            got: 0,
        });
    }
    match kind {
        Primitive::MatMul => matmul(kind, operands[0], operands[1]),
        Primitive::Add => binary(kind, operands[0], operands[1], |a, b| a + b),
        Primitive::Mul => binary(kind, operands[0], operands[1], |a, b| a * b),
        Primitive::Concat => concat(kind, operands),
        Primitive::Slice { start, end } => slice(kind, operands[0], *start, *end),
        Primitive::Sum => Ok(Tensor::scalar(operands[0].sum())),
        Primitive::Transpose => {
            let a = operands[0];
            if a.rank() != 2 {
                return Err(rank_error(kind, a));
            }
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let d = a.data();
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = d[i * n + j];
                }
            }
            Ok(Tensor::from_parts(vec![n, m], out))
        }
        Primitive::Sigmoid => Ok(operands[0].map(sigmoid)),
        Primitive::Tanh => Ok(operands[0].map(f64::tanh)),
        Primitive::Relu => Ok(operands[0].map(|v| v.max(0.0))),
        Primitive::Log => {
            let a = operands[0];
            if let Some(&bad) = a.data().iter().find(|&&v| v.is_nan() || v <= 0.0) {
                return Err(NumericError::Domain {
                    op: kind.name(),
                    value: bad,
                });
            }
            Ok(a.map(f64::ln))
        }
        Primitive::Neg => Ok(operands[0].map(|v| -v)),
        Primitive::Scale(c) => {
            let c = *c;
            Ok(operands[0].map(|v| v * c))
        }
        Primitive::Softmax => {
            let a = operands[0];
            if a.rank() != 1 {
                return Err(rank_error(kind, a));
            }
            Ok(Tensor::from_parts(vec![a.len()], softmax_values(a.data())))
        }
    }
}

/// Max-subtracted softmax over a slice.
pub(crate) fn softmax_values(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for x in &mut out {
        *x /= total;
    }
    out
}

/// Numerically stable softmax of a rank-1 tensor.
pub fn softmax(v: &Tensor) -> Result<Tensor, NumericError> {
    if v.rank() != 1 {
        return Err(rank_error(&Primitive::Softmax, v));
    }
    if !v.is_finite() {
        return Err(NumericError::NonFiniteInput { op: "softmax" });
    }
    apply_primitive(&Primitive::Softmax, &[v])
}

fn binary(
    kind: &Primitive,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, NumericError> {
    if a.shape() == b.shape() {
        let out = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), out))
    } else if a.len() == 1 && a.rank() == 1 {
        let x = a.data()[0];
        Ok(b.map(|y| f(x, y)))
    } else if b.len() == 1 && b.rank() == 1 {
        let y = b.data()[0];
        Ok(a.map(|x| f(x, y)))
    } else {
        Err(mismatch(kind, a, b))
    }
}

/// Row-major `[m,k] x [k]`; skips zero entries of `x` when it is sparse.
fn matvec(w: &[f64], m: usize, k: usize, x: &[f64]) -> Vec<f64> {
    let nz: Vec<usize> = (0..k).filter(|&j| x[j] != 0.0).collect();
    if nz.len() * 4 < k {
        (0..m)
            .map(|i| {
                let row = &w[i * k..(i + 1) * k];
                nz.iter().map(|&j| row[j] * x[j]).sum()
            })
            .collect()
    } else {
        w.chunks_exact(k)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

fn matmul(kind: &Primitive, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericError> {
    if a.rank() != 2 {
        return Err(mismatch(kind, a, b));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    match b.rank() {
        1 if b.shape()[0] == k => Ok(Tensor::from_parts(
            vec![m],
            matvec(a.data(), m, k, b.data()),
        )),
        2 if b.shape()[0] == k => {
            let n = b.shape()[1];
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Ok(Tensor::from_parts(vec![m, n], out))
        }
        _ => Err(mismatch(kind, a, b)),
    }
}

fn concat(kind: &Primitive, operands: &[&Tensor]) -> Result<Tensor, NumericError> {
    let mut out = Vec::new();
    for t in operands {
        if t.rank() != 1 {
            return Err(rank_error(kind, t));
        }
        out.extend_from_slice(t.data());
    }
    Ok(Tensor::from_parts(vec![out.len()], out))
}

fn slice(kind: &Primitive, a: &Tensor, start: usize, end: usize) -> Result<Tensor, NumericError> {
    let extent = a.shape()[0];
    if start >= end || end > extent || a.rank() > 2 {
        return Err(NumericError::SliceRange {
            shape: a.shape().to_vec(),
            start,
            end,
        });
    }
    match a.rank() {
        1 => Ok(Tensor::from_parts(
            vec![end - start],
            a.data()[start..end].to_vec(),
        )),
        2 => {
            let cols = a.shape()[1];
            Ok(Tensor::from_parts(
                vec![end - start, cols],
                a.data()[start * cols..end * cols].to_vec(),
            ))
        }
        _ => Err(rank_error(kind, a)),
    }
}

/// Gradient contributions of one recorded primitive.
///
/// `needs[i]` tells whether operand `i` wants a gradient; entries for
/// operands that do not are returned as `None`.
pub(crate) fn vjp(
    kind: &Primitive,
    operands: &[&Tensor],
    output: &Tensor,
    grad: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let mut out: Vec<Option<Vec<f64>>> = vec![None; operands.len()];
    match kind {
        Primitive::MatMul => {
            let (a, b) = (operands[0], operands[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            if b.rank() == 1 {
                let x = b.data();
                if needs[0] {
                    let mut ga = vec![0.0; m * k];
                    let nz: Vec<usize> = (0..k).filter(|&j| x[j] != 0.0).collect();
                    for i in 0..m {
                        let g = grad[i];
                        if g == 0.0 {
                            continue;
                        }
                        let row = &mut ga[i * k..(i + 1) * k];
                        if nz.len() * 4 < k {
                            for &j in &nz {
                                row[j] = g * x[j];
                            }
                        } else {
                            for (r, &xv) in row.iter_mut().zip(x) {
                                *r = g * xv;
                            }
                        }
                    }
                    out[0] = Some(ga);
                }
                if needs[1] {
                    let mut gx = vec![0.0; k];
                    let w = a.data();
                    for i in 0..m {
                        let g = grad[i];
                        if g == 0.0 {
                            continue;
                        }
                        for (o, &wv) in gx.iter_mut().zip(&w[i * k..(i + 1) * k]) {
                            *o += g * wv;
                        }
                    }
                    out[1] = Some(gx);
                }
            } else {
                let n = b.shape()[1];
                let (ad, bd) = (a.data(), b.data());
                if needs[0] {
                    // dA = G B^T
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grad[i * n + j] * bd[p * n + j];
                            }
                            ga[i * k + p] = s;
                        }
                    }
                    out[0] = Some(ga);
                }
                if needs[1] {
                    // dB = A^T G
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += av * grad[i * n + j];
                            }
                        }
                    }
                    out[1] = Some(gb);
                }
            }
        }
        Primitive::Add | Primitive::Mul => {
            let is_mul = matches!(kind, Primitive::Mul);
            for side in 0..2 {
                if !needs[side] {
                    continue;
                }
                let this = operands[side];
                let other = operands[1 - side];
                let local: Vec<f64> = if is_mul {
                    if other.len() == 1 && this.len() != 1 {
                        let o = other.data()[0];
                        grad.iter().map(|g| g * o).collect()
                    } else if other.len() == grad.len() {
                        grad.iter().zip(other.data()).map(|(g, o)| g * o).collect()
                    } else {
                        // this is the broadcast scalar
                        vec![grad.iter().zip(other.data()).map(|(g, o)| g * o).sum()]
                    }
                } else {
                    grad.to_vec()
                };
                out[side] = Some(if local.len() == this.len() {
                    local
                } else {
                    vec![local.iter().sum()]
                });
            }
        }
        Primitive::Concat => {
            let mut offset = 0;
            for (i, t) in operands.iter().enumerate() {
                if needs[i] {
                    out[i] = Some(grad[offset..offset + t.len()].to_vec());
                }
                offset += t.len();
            }
        }
        Primitive::Slice { start, .. } => {
            let a = operands[0];
            let stride = if a.rank() == 2 { a.shape()[1] } else { 1 };
            let mut g = vec![0.0; a.len()];
            g[start * stride..start * stride + grad.len()].copy_from_slice(grad);
            out[0] = Some(g);
        }
        Primitive::Sum => out[0] = Some(vec![grad[0]; operands[0].len()]),
        Primitive::Transpose => {
            let a = operands[0];
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let mut g = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    g[i * n + j] = grad[j * m + i];
                }
            }
            out[0] = Some(g);
        }
        Primitive::Sigmoid => {
            out[0] = Some(
                grad.iter()
                    .zip(output.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect(),
            )
        }
        Primitive::Tanh => {
            out[0] = Some(
                grad.iter()
                    .zip(output.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect(),
            )
        }
        Primitive::Relu => {
            out[0] = Some(
                grad.iter()
                    .zip(operands[0].data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )
        }
        Primitive::Log => {
            out[0] = Some(
                grad.iter()
                    .zip(operands[0].data())
                    .map(|(g, x)| g / x)
                    .collect(),
            )
        }
        Primitive::Neg => out[0] = Some(grad.iter().map(|g| -g).collect()),
        Primitive::Scale(c) => out[0] = Some(grad.iter().map(|g| g * c).collect()),
        Primitive::Softmax => {
            let y = output.data();
            let dot: f64 = grad.iter().zip(y).map(|(g, y)| g * y).sum();
            out[0] = Some(grad.iter().zip(y).map(|(g, y)| y * (g - dot)).collect());
        }
    }
    out
}
