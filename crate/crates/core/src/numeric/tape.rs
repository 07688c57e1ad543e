//! Recorded computation tape and reverse-mode differentiation.
//!
//! Every value produced through a [`Tape`] is appended to it, so node order
//! is a topological order by construction. A tape is single-threaded;
//! independent tapes can run side by side.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{apply_primitive, vjp, Primitive};
use super::{NumericError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
enum Origin {
    Leaf,
    Constant,
    Op {
        kind: Primitive,
        operands: Box<[usize]>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    origin: Origin,
    requires_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    /// Records a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Node {
            value,
            origin: Origin::Leaf,
            requires_grad: true,
        })
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Node {
            value,
            origin: Origin::Constant,
            requires_grad: false,
        })
    }

    fn check(&self, v: Var) -> Result<(), NumericError> {
        if v.tape != self.id || v.index >= self.len() {
            return Err(NumericError::ForeignVar);
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        self.nodes.borrow()[v.index].value.clone()
    }

    /// Scalar value of a one-element variable.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let t = &nodes[v.index].value;
        assert_eq!(t.len(), 1, "scalar() on tensor of shape {:?}", t.shape());
        t.data()[0]
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes.borrow()[v.index].origin, Origin::Leaf)
    }

    pub fn apply(&self, kind: Primitive, operands: &[Var]) -> Result<Var, NumericError> {
        for &v in operands {
            self.check(v)?;
        }
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor> = operands.iter().map(|v| &nodes[v.index].value).collect();
            let value = apply_primitive(&kind, &refs)?;
            let rg = operands.iter().any(|v| nodes[v.index].requires_grad);
            (value, rg)
        };
        Ok(self.push(Node {
            value,
            origin: Origin::Op {
                kind,
                operands: operands.iter().map(|v| v.index).collect(),
            },
            requires_grad,
        }))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, NumericError> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn concat(&self, parts: &[Var]) -> Result<Var, NumericError> {
        self.apply(Primitive::Concat, parts)
    }

    pub fn slice(&self, a: Var, start: usize, end: usize) -> Result<Var, NumericError> {
        self.apply(Primitive::Slice { start, end }, &[a])
    }

    /// Element `i` of a rank-1 variable, as shape `[1]`.
    pub fn pick(&self, a: Var, i: usize) -> Result<Var, NumericError> {
        self.slice(a, i, i + 1)
    }

    pub fn sum(&self, a: Var) -> Result<Var, NumericError> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn transpose(&self, a: Var) -> Result<Var, NumericError> {
        self.apply(Primitive::Transpose, &[a])
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var, NumericError> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn tanh(&self, a: Var) -> Result<Var, NumericError> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn relu(&self, a: Var) -> Result<Var, NumericError> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn log(&self, a: Var) -> Result<Var, NumericError> {
        self.apply(Primitive::Log, &[a])
    }

    pub fn neg(&self, a: Var) -> Result<Var, NumericError> {
        self.apply(Primitive::Neg, &[a])
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var, NumericError> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn softmax(&self, a: Var) -> Result<Var, NumericError> {
        self.apply(Primitive::Softmax, &[a])
    }

    /// `w·x + b`.
    pub fn affine(&self, w: Var, x: Var, b: Var) -> Result<Var, NumericError> {
        let wx = self.matmul(w, x)?;
        self.add(wx, b)
    }

    /// Sum of several same-shape variables, left to right.
    pub fn add_all(&self, parts: &[Var]) -> Result<Var, NumericError> {
        let (&first, rest) = parts.split_first().ok_or(NumericError::Arity {
            op: "add",
            expected: 1,
            got: 0,
        })?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Re-evaluates every recorded primitive from the stored inputs.
    pub fn replay(&self) -> Result<Vec<Tensor>, NumericError> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Tensor> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match &node.origin {
                Origin::Leaf | Origin::Constant => node.value.clone(),
                Origin::Op { kind, operands } => {
                    let refs: Vec<&Tensor> = operands.iter().map(|&i| &values[i]).collect();
                    apply_primitive(kind, &refs)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// True when a replay reproduces every recorded value bitwise.
    pub fn replay_matches(&self) -> Result<bool, NumericError> {
        let replayed = self.replay()?;
        let nodes = self.nodes.borrow();
        Ok(nodes
            .iter()
            .zip(&replayed)
            .all(|(n, r)| n.value.bitwise_eq(r)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericError> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.index];
        if root.value.len() != 1 {
            return Err(NumericError::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);
        for i in (0..=loss.index).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Origin::Op { kind, operands } = &node.origin else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = operands.iter().map(|&j| nodes[j].requires_grad).collect();
            let refs: Vec<&Tensor> = operands.iter().map(|&j| &nodes[j].value).collect();
            let parts = vjp(kind, &refs, &node.value, &g, &needs);
            for (&j, part) in operands.iter().zip(parts) {
                let Some(part) = part else { continue };
                match &mut grads[j] {
                    Some(acc) => {
                        for (a, p) in acc.iter_mut().zip(&part) {
                            *a += p;
                        }
                    }
                    slot @ None => *slot = Some(part),
                }
            }
        }
        let leaves = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.origin, Origin::Leaf))
            .map(|(i, n)| {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
                    .unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                (i, g)
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            leaves,
        })
    }
}

/// Gradients of a loss with respect to every leaf of a tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    leaves: Vec<(usize, Tensor)>,
}

impl Gradients {
    /// Gradient for a leaf; `None` if `v` is not a leaf of the source tape.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.leaves
            .binary_search_by_key(&v.index, |(i, _)| *i)
            .ok()
            .map(|k| &self.leaves[k].1)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
