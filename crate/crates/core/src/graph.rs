//! Reverse-mode automatic differentiation on a flat tape of tensor ops.
//!
//! A [`Graph`] records every operation as it executes (define-by-run); calling
//! [`Graph::backward`] on a scalar loss walks the tape in reverse and returns
//! exact gradients for every `param` leaf. The op set is the minimum needed by
//! the two training objectives: dense layers, the four activations,
//! elementwise arithmetic, exp/log, square norms, reductions, and the
//! column gather/scatter used by coupling layers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node in the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// Adds a `1 x n` bias row to every row of the input.
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Elu(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    /// Sum of all entries, yielding a `1 x 1` scalar.
    Sum(Var),
    ConcatCols(Var, Var),
    SelectCols(Var, Vec<usize>),
    /// Inverse of two `SelectCols`: places `a`'s columns at `a_cols` and `b`'s
    /// at `b_cols` of a fresh `rows x width` tensor.
    MergeCols {
        a: Var,
        a_cols: Vec<usize>,
        b: Var,
        b_cols: Vec<usize>,
        width: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients for every differentiable node of a graph, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, materializing zeros when `v` never influenced the loss.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(rows, cols),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf: data, targets, noise draws, dropout masks.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf: a model parameter.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        if bv.rows != 1 || bv.cols != xv.cols {
            return Err(Error::Shape(format!(
                "add_bias: bias {}x{} against input {}x{}",
                bv.rows, bv.cols, xv.rows, xv.cols
            )));
        }
        let mut value = xv.clone();
        for r in 0..value.rows {
            for c in 0..value.cols {
                value.data[r * value.cols + c] += bv.data[c];
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddBias(x, bias), ng))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let value = self.nodes[a.0].value.zip(&self.nodes[b.0].value, f)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, crate::math::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { crate::math::exp(x) - 1.0 },
            Op::Elu(a),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, crate::math::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, crate::math::ln, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let ng = self.needs(a);
        self.push(Tensor { rows: 1, cols: 1, data: vec![s] }, Op::Sum(a), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.rows != bv.rows {
            return Err(Error::Shape(format!(
                "concat_cols: {} rows vs {} rows",
                av.rows, bv.rows
            )));
        }
        let cols = av.cols + bv.cols;
        let mut data = Vec::with_capacity(av.rows * cols);
        for r in 0..av.rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let value = Tensor { rows: av.rows, cols, data };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatCols(a, b), ng))
    }

    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if let Some(&bad) = cols.iter().find(|&&c| c >= av.cols) {
            return Err(Error::Contract(format!(
                "select_cols: column {bad} out of {}",
                av.cols
            )));
        }
        let mut value = Tensor::zeros(av.rows, cols.len());
        for r in 0..av.rows {
            let src = av.row(r);
            for (k, &c) in cols.iter().enumerate() {
                value.data[r * cols.len() + k] = src[c];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(value, Op::SelectCols(a, cols.to_vec()), ng))
    }

    pub fn merge_cols(
        &mut self,
        a: Var,
        a_cols: &[usize],
        b: Var,
        b_cols: &[usize],
    ) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let width = a_cols.len() + b_cols.len();
        if av.rows != bv.rows || av.cols != a_cols.len() || bv.cols != b_cols.len() {
            return Err(Error::Shape(format!(
                "merge_cols: a {}x{} into {} slots, b {}x{} into {} slots",
                av.rows,
                av.cols,
                a_cols.len(),
                bv.rows,
                bv.cols,
                b_cols.len()
            )));
        }
        let mut value = Tensor::zeros(av.rows, width);
        for r in 0..av.rows {
            for (k, &c) in a_cols.iter().enumerate() {
                value.data[r * width + c] = av.data[r * av.cols + k];
            }
            for (k, &c) in b_cols.iter().enumerate() {
                value.data[r * width + c] = bv.data[r * bv.cols + k];
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            value,
            Op::MergeCols {
                a,
                a_cols: a_cols.to_vec(),
                b,
                b_cols: b_cols.to_vec(),
                width,
            },
            ng,
        ))
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        match &mut grads[v.0] {
            Some(g) => {
                for (gi, di) in g.data.iter_mut().zip(delta.data.iter()) {
                    *gi += di;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    /// Reverse-mode gradients of a scalar loss with respect to every `param` leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.rows != 1 || lv.cols != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got {}x{}",
                lv.rows, lv.cols
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor { rows: 1, cols: 1, data: vec![1.0] });

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match &self.nodes[i].op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            match &self.nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let da = g.matmul_transpose_b(&self.nodes[b.0].value)?;
                        Self::accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = self.nodes[a.0].value.transpose_a_matmul(&g)?;
                        Self::accumulate(&mut grads, *b, db);
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.needs(*bias) {
                        let mut db = Tensor::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for c in 0..g.cols {
                                db.data[c] += g.data[r * g.cols + c];
                            }
                        }
                        Self::accumulate(&mut grads, *bias, db);
                    }
                    if self.needs(*x) {
                        Self::accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        Self::accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        Self::accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        Self::accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        Self::accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let da = g.zip(&self.nodes[b.0].value, |gi, bi| gi * bi)?;
                        Self::accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = g.zip(&self.nodes[a.0].value, |gi, ai| gi * ai)?;
                        Self::accumulate(&mut grads, *b, db);
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    Self::accumulate(&mut grads, *a, g.map(|v| v * c));
                }
                Op::AddScalar(a) => {
                    Self::accumulate(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let da = g.zip(&self.nodes[i].value, |gi, yi| gi * (1.0 - yi * yi))?;
                    Self::accumulate(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let da = g.zip(&self.nodes[a.0].value, |gi, xi| {
                        if xi > 0.0 {
                            gi
                        } else {
                            0.0
                        }
                    })?;
                    Self::accumulate(&mut grads, *a, da);
                }
                Op::Elu(a) => {
                    // elu'(x) = 1 for x > 0, elu(x) + 1 otherwise.
                    let xv = &self.nodes[a.0].value;
                    let yv = &self.nodes[i].value;
                    let mut da = g.clone();
                    for (k, d) in da.data.iter_mut().enumerate() {
                        if xv.data[k] <= 0.0 {
                            *d *= yv.data[k] + 1.0;
                        }
                    }
                    Self::accumulate(&mut grads, *a, da);
                }
                Op::Exp(a) => {
                    let da = g.zip(&self.nodes[i].value, |gi, yi| gi * yi)?;
                    Self::accumulate(&mut grads, *a, da);
                }
                Op::Ln(a) => {
                    let da = g.zip(&self.nodes[a.0].value, |gi, xi| gi / xi)?;
                    Self::accumulate(&mut grads, *a, da);
                }
                Op::Square(a) => {
                    let da = g.zip(&self.nodes[a.0].value, |gi, xi| gi * 2.0 * xi)?;
                    Self::accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let av = &self.nodes[a.0].value;
                    let da = Tensor::filled(av.rows, av.cols, g.data[0]);
                    Self::accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.nodes[a.0].value.cols;
                    let bc = self.nodes[b.0].value.cols;
                    if self.needs(*a) {
                        let mut da = Tensor::zeros(g.rows, ac);
                        for r in 0..g.rows {
                            da.data[r * ac..(r + 1) * ac]
                                .copy_from_slice(&g.data[r * g.cols..r * g.cols + ac]);
                        }
                        Self::accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = Tensor::zeros(g.rows, bc);
                        for r in 0..g.rows {
                            db.data[r * bc..(r + 1) * bc]
                                .copy_from_slice(&g.data[r * g.cols + ac..(r + 1) * g.cols]);
                        }
                        Self::accumulate(&mut grads, *b, db);
                    }
                }
                Op::SelectCols(a, cols) => {
                    let av = &self.nodes[a.0].value;
                    let mut da = Tensor::zeros(av.rows, av.cols);
                    for r in 0..g.rows {
                        for (k, &c) in cols.iter().enumerate() {
                            da.data[r * av.cols + c] += g.data[r * g.cols + k];
                        }
                    }
                    Self::accumulate(&mut grads, *a, da);
                }
                Op::MergeCols { a, a_cols, b, b_cols, width } => {
                    if self.needs(*a) {
                        let mut da = Tensor::zeros(g.rows, a_cols.len());
                        for r in 0..g.rows {
                            for (k, &c) in a_cols.iter().enumerate() {
                                da.data[r * a_cols.len() + k] = g.data[r * width + c];
                            }
                        }
                        Self::accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = Tensor::zeros(g.rows, b_cols.len());
                        for r in 0..g.rows {
                            for (k, &c) in b_cols.iter().enumerate() {
                                db.data[r * b_cols.len() + k] = g.data[r * width + c];
                            }
                        }
                        Self::accumulate(&mut grads, *b, db);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}
