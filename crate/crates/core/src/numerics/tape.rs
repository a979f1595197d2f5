//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Operations are recorded on a [`Tape`] as they are evaluated. Nodes are
//! appended in evaluation order, so walking the node list backwards is a
//! reverse topological order and each node is visited exactly once.
//!
//! ```
//! use depflow_core::numerics::{DenseMatrix, Tape};
//!
//! let mut tape = Tape::new();
//! let w = tape.param("w", DenseMatrix::scalar(3.0));
//! let y = tape.mul(w, w);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(w).item(), Some(6.0));
//! ```

use super::matrix::{gemm, DenseMatrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Swish(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    RowSum(Var),
}

struct Node {
    value: DenseMatrix,
    op: Op,
    needs_grad: bool,
    /// Intermediate kept for the backward pass (`sigmoid(x)` for swish).
    aux: Option<DenseMatrix>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, String)>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseMatrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            aux: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A registered leaf that receives a gradient.
    pub fn param(&mut self, name: impl Into<String>, value: DenseMatrix) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((v, name.into()));
        v
    }

    pub fn params(&self) -> impl Iterator<Item = (Var, &str)> {
        self.params.iter().map(|(v, n)| (*v, n.as_str()))
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self
            .value(a)
            .zip_with(self.value(b), f)
            .unwrap_or_else(|e| panic!("tape op {op:?}: {e}"));
        let g = self.grad_of(a) || self.grad_of(b);
        self.push(value, op, g)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let g = self.grad_of(a);
        self.push(value, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(&mut self, a: Var, row: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (n, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "row broadcast shape");
        let r = self.value(row).as_slice().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..n {
            for (x, y) in value.row_mut(i).iter_mut().zip(&r) {
                *x = f(*x, *y);
            }
        }
        let g = self.grad_of(a) || self.grad_of(row);
        self.push(value, op, g)
    }

    /// `a + 1 row^T`, broadcasting a `1 x c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, Op::AddRow(a, row), |x, y| x + y)
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, Op::MulRow(a, row), |x, y| x * y)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .matmul(self.value(b))
            .unwrap_or_else(|e| panic!("tape matmul: {e}"));
        let g = self.grad_of(a) || self.grad_of(b);
        self.push(value, Op::MatMul(a, b), g)
    }

    /// `scale * a + offset`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, offset: f64) -> Var {
        self.unary(a, Op::Affine(a, scale), |x| scale * x + offset)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let sig = x.map(sigmoid);
        let value = x.zip_with(&sig, |x, s| x * s).expect("same shape");
        let g = self.grad_of(a);
        let v = self.push(value, Op::Swish(a), g);
        if g {
            self.nodes[v.0].aux = Some(sig);
        }
        v
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = DenseMatrix::scalar(self.value(a).sum());
        let g = self.grad_of(a);
        self.push(value, Op::Sum(a), g)
    }

    /// Per-row sums, as an `n x 1` node.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let sums: Vec<f64> = (0..m.rows()).map(|i| m.row(i).iter().sum()).collect();
        let value = DenseMatrix::column_vector(&sums);
        let g = self.grad_of(a);
        self.push(value, Op::RowSum(a), g)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let (rows, cols) = self.shape(output);
        if rows != 1 || cols != 1 {
            return Err(Error::NonScalarOutput { rows, cols });
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(DenseMatrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, contrib: DenseMatrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let elementwise = |x: &DenseMatrix, f: fn(f64, f64) -> f64| zip_grad(g, x, f);
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.grad_of(a) {
                    acc(a, elementwise(val(b), |gi, bi| gi * bi));
                }
                if self.grad_of(b) {
                    acc(b, elementwise(val(a), |gi, ai| gi * ai));
                }
            }
            Op::AddRow(a, row) => {
                acc(a, g.clone());
                if self.grad_of(row) {
                    acc(row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let r = val(row).as_slice();
                if self.grad_of(a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (x, y) in ga.row_mut(i).iter_mut().zip(r) {
                            *x *= y;
                        }
                    }
                    acc(a, ga);
                }
                if self.grad_of(row) {
                    acc(row, column_sums(&elementwise(val(a), |gi, ai| gi * ai)));
                }
            }
            Op::MatMul(a, b) => {
                if self.grad_of(a) {
                    let (r, c) = val(a).shape();
                    let mut ga = DenseMatrix::zeros(r, c);
                    gemm(&mut ga, false, g, true, val(b), 1.0, false);
                    acc(a, ga);
                }
                if self.grad_of(b) {
                    let (r, c) = val(b).shape();
                    let mut gb = DenseMatrix::zeros(r, c);
                    gemm(&mut gb, true, val(a), false, g, 1.0, false);
                    acc(b, gb);
                }
            }
            Op::Affine(a, s) => acc(a, g.scale(s)),
            Op::Sigmoid(a) => acc(a, elementwise(&node.value, |gi, y| gi * y * (1.0 - y))),
            Op::Tanh(a) => acc(a, elementwise(&node.value, |gi, y| gi * (1.0 - y * y))),
            Op::Swish(a) => {
                let sig = node.aux.as_ref().expect("swish keeps sigmoid");
                let x = val(a).as_slice();
                let data = g
                    .as_slice()
                    .iter()
                    .zip(x)
                    .zip(sig.as_slice())
                    .map(|((gi, x), s)| gi * (s + x * s * (1.0 - s)))
                    .collect();
                let (r, c) = g.shape();
                acc(a, DenseMatrix::new(r, c, data).expect("shape"));
            }
            Op::Exp(a) => acc(a, elementwise(&node.value, |gi, y| gi * y)),
            Op::Log(a) => acc(a, elementwise(val(a), |gi, x| gi / x)),
            Op::Square(a) => acc(a, elementwise(val(a), |gi, x| 2.0 * gi * x)),
            Op::Sum(a) => {
                let (r, c) = val(a).shape();
                acc(a, DenseMatrix::filled(r, c, g.as_slice()[0]));
            }
            Op::RowSum(a) => {
                let (r, c) = val(a).shape();
                let gs = g.as_slice();
                acc(a, DenseMatrix::from_fn(r, c, |i, _| gs[i]));
            }
        }
    }
}

#[inline]
fn zip_grad(g: &DenseMatrix, x: &DenseMatrix, f: fn(f64, f64) -> f64) -> DenseMatrix {
    g.zip_with(x, f).expect("gradient shape matches value")
}

fn column_sums(m: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}

/// Gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// Gradient for `v`; all zeros when `v` did not influence the output.
    pub fn get(&self, v: Var) -> DenseMatrix {
        self.try_get(v)
            .cloned()
            .unwrap_or_else(|| DenseMatrix::zeros(0, 0))
    }

    pub fn try_get(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled to `shape` when unreachable.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> DenseMatrix {
        self.try_get(v)
            .cloned()
            .unwrap_or_else(|| DenseMatrix::zeros(shape.0, shape.1))
    }
}
