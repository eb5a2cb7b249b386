//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Operations are appended to a [`Tape`] as they are evaluated; [`Tape::backward`]
//! walks the recorded nodes in reverse and accumulates adjoints. Only the
//! operations the objective needs are provided.

use super::matrix::{self, Matrix};
use crate::error::{Error, Result};

/// Floor applied inside [`Tape::log`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTransposeB(Var, Var),
    AddRowBroadcast(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    L2NormalizeRows(Var),
    SoftmaxRows(Var, f64),
    LogSoftmaxRows(Var, f64),
    Log(Var),
    CrossEntropy(Var, Matrix),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Records a computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    watched: Vec<Var>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to a watched parameter; `None` for anything else.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn get_mut(&mut self, var: Var) -> Option<&mut Matrix> {
        self.grads.get_mut(var.0).and_then(|g| g.as_mut())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A parameter whose gradient is reported by [`Tape::backward`].
    pub fn watch(&mut self, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf);
        self.watched.push(v);
        v
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matrix::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_transpose_b(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matrix::matmul_transpose_b(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMulTransposeB(a, b)))
    }

    /// Adds a `1 × n` row vector to every row of `x`.
    pub fn add_row_broadcast(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::dim("add_row_broadcast", xv.shape(), rv.shape()));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddRowBroadcast(x, row)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).scale(factor);
        self.push(value, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v < 0.0 { 0.0 } else { v });
        self.push(value, Op::Relu(x))
    }

    /// Unit-norm rows; zero rows pass through unchanged.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let value = matrix::l2_normalize_rows(self.value(x)).matrix;
        self.push(value, Op::L2NormalizeRows(x))
    }

    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let value = matrix::softmax_rows(self.value(x), temperature)?;
        Ok(self.push(value, Op::SoftmaxRows(x, temperature)))
    }

    pub fn log_softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let value = matrix::log_softmax_rows(self.value(x), temperature)?;
        Ok(self.push(value, Op::LogSoftmaxRows(x, temperature)))
    }

    /// Natural log with inputs clamped below at [`LOG_FLOOR`].
    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(LOG_FLOOR).ln());
        self.push(value, Op::Log(x))
    }

    /// Mean over rows of `-Σ_k targets[b,k] · log_probs[b,k]`.
    ///
    /// `targets` is a constant; no gradient flows into it.
    pub fn cross_entropy(&mut self, log_probs: Var, targets: Matrix) -> Result<Var> {
        let lp = self.value(log_probs);
        if lp.shape() != targets.shape() {
            return Err(Error::dim("cross_entropy", lp.shape(), targets.shape()));
        }
        if lp.rows() == 0 {
            return Err(Error::Input("cross_entropy over an empty batch".into()));
        }
        let mut total = 0.0;
        for r in 0..lp.rows() {
            let mut row_total = 0.0;
            for (q, l) in targets.row(r).iter().zip(lp.row(r)) {
                row_total -= q * l;
            }
            total += row_total;
        }
        let value = Matrix::filled(1, 1, total / lp.rows() as f64);
        Ok(self.push(value, Op::CrossEntropy(log_probs, targets)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    /// Back-propagates from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = matrix::matmul_transpose_b(&g, self.value(*b))?;
                    let gb = matrix::matmul_transpose_a(self.value(*a), &g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulTransposeB(a, b) => {
                    // y = a bᵀ: dA = g b, dB = gᵀ a
                    let ga = matrix::matmul(&g, self.value(*b))?;
                    let gb = matrix::matmul_transpose_a(&g, self.value(*a))?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRowBroadcast(x, row) => {
                    let grow = Matrix::from_vec(1, g.cols(), g.col_sums())?;
                    accumulate(&mut grads, *x, g);
                    accumulate(&mut grads, *row, grow);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(x, factor) => {
                    accumulate(&mut grads, *x, g.scale(*factor));
                }
                Op::Relu(x) => {
                    let gx = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::L2NormalizeRows(x) => {
                    let xv = self.value(*x);
                    let y = &node.value;
                    let mut gx = g.clone();
                    for r in 0..xv.rows() {
                        let norm = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in gx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r))
                        {
                            *o = (gv - yv * dot) / norm;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(x, temperature) => {
                    let s = &node.value;
                    let mut gx = g.clone();
                    for r in 0..s.rows() {
                        let dot: f64 = s.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, &sv), &gv) in gx.row_mut(r).iter_mut().zip(s.row(r)).zip(g.row(r))
                        {
                            *o = sv * (gv - dot) / temperature;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LogSoftmaxRows(x, temperature) => {
                    let lp = &node.value;
                    let mut gx = g.clone();
                    for r in 0..lp.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for ((o, &l), &gv) in gx.row_mut(r).iter_mut().zip(lp.row(r)).zip(g.row(r))
                        {
                            *o = (gv - l.exp() * total) / temperature;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Log(x) => {
                    let gx =
                        g.zip_map(
                            self.value(*x),
                            |gv, xv| {
                                if xv > LOG_FLOOR {
                                    gv / xv
                                } else {
                                    0.0
                                }
                            },
                        )?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::CrossEntropy(x, targets) => {
                    let factor = -g[(0, 0)] / targets.rows() as f64;
                    accumulate(&mut grads, *x, targets.scale(factor));
                }
                Op::Sum(x) => {
                    let (rows, cols) = self.value(*x).shape();
                    accumulate(&mut grads, *x, Matrix::filled(rows, cols, g[(0, 0)]));
                }
            }
        }

        for &w in &self.watched {
            if grads[w.0].is_none() {
                let (rows, cols) = self.value(w).shape();
                grads[w.0] = Some(Matrix::zeros(rows, cols));
            }
        }
        let mut kept: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        for &w in &self.watched {
            kept[w.0] = grads[w.0].take();
        }
        Ok(Gradients { grads: kept })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], target: Var, g: Matrix) {
    match &mut grads[target.0] {
        Some(existing) => {
            for (e, v) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
