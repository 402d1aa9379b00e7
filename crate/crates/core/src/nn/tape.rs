//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records one forward computation as a list of nodes in
//! creation order, which is already a topological order; [`Tape::backward`]
//! walks it once in reverse. Nodes that cannot reach a trainable parameter
//! or a marked input are skipped during the backward sweep.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::flow::FlowFieldSpec;
use crate::geom::Vec2;
use crate::nn::{Mat, ParamId, ParamStore};
#[allow(unused_imports)] // test builds link std, whose inherent methods take precedence
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScaled(Var, Var, f64),
    Scale(Var, f64),
    Offset(Var),
    Gelu(Var),
    GeluDeriv(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Softplus(Var),
    Sin(Var),
    Cos(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    RowSum(Var),
    SumAll(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Recip(Var),
    RepeatRows(Var, usize),
    GroupSum(Var, usize),
    BroadcastRow(Var, usize),
    Guardrail { z: Var, radius: f64, alpha: f64 },
    FieldVelocity { z: Var, jac: Vec<[[f64; 2]; 2]> },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        libm::log1p(x.exp())
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Tape variables for every parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Adds this sweep's gradients into the store's gradient buffers.
    pub fn accumulate_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (p, &v) in store.iter_mut().zip(&self.vars) {
            if let Some(g) = grads.get(v) {
                p.grad.add_assign(g);
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Records every parameter of `store` as a leaf; frozen leaves get no gradient.
    pub fn bind(&mut self, store: &ParamStore, trainable: bool) -> Bound {
        let vars = store.iter().map(|p| self.push(p.value.clone(), Op::Leaf, trainable)).collect();
        Bound { vars }
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a + b` with the 1×C row `b` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1, "bias must be a row vector");
        let mut value = self.value(a).clone();
        assert_eq!(value.cols(), bias.cols(), "bias width mismatch");
        let cols = value.cols();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bias.data()[i % cols];
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::AddBias(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a + s · b`, evaluated exactly as [`Mat::add_scaled`].
    pub fn add_scaled(&mut self, a: Var, b: Var, s: f64) -> Var {
        let value = self.value(a).add_scaled(self.value(b), s);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::AddScaled(a, b, s), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    /// Exact GELU `x Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| x * norm_cdf(x))
    }

    /// GELU derivative `Φ(x) + x φ(x)`, itself differentiable.
    pub fn gelu_deriv(&mut self, a: Var) -> Var {
        self.unary(a, Op::GeluDeriv(a), |x| norm_cdf(x) + x * norm_pdf(x))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), |x| x.sin())
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), |x| x.cos())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| 1.0 / x)
    }

    /// Per-row sums, B×C → B×1.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Mat::from_fn(m.rows(), 1, |r, _| m.row(r).iter().sum());
        let ng = self.needs(a);
        self.push(value, Op::RowSum(a), ng)
    }

    /// Sum of every entry as a 1×1 matrix.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).data().len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Mat::hcat(&mats);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::Concat(parts.to_vec()), ng)
    }

    /// Columns `start..start + len`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_cols(start, len);
        let ng = self.needs(a);
        self.push(value, Op::Slice(a, start), ng)
    }

    /// Scales row `i` of `a` (B×C) by `s[i]` (B×1).
    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        let (am, sm) = (self.value(a), self.value(s));
        assert_eq!(sm.shape(), (am.rows(), 1), "mul_col expects a B×1 scale");
        let value = Mat::from_fn(am.rows(), am.cols(), |r, c| am.get(r, c) * sm.get(r, 0));
        let ng = self.needs(a) || self.needs(s);
        self.push(value, Op::MulCol(a, s), ng)
    }

    /// Scales `a` by the 1×1 value `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let value = self.value(a).map(|x| x * k);
        let ng = self.needs(a) || self.needs(s);
        self.push(value, Op::MulScalar(a, s), ng)
    }

    /// Repeats every row `n` times consecutively: row `r·n + j` is row `r`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let m = self.value(a);
        let value = Mat::from_fn(m.rows() * n, m.cols(), |r, c| m.get(r / n, c));
        let ng = self.needs(a);
        self.push(value, Op::RepeatRows(a, n), ng)
    }

    /// Sums consecutive groups of `n` rows, the adjoint of [`Tape::repeat_rows`].
    pub fn group_sum(&mut self, a: Var, n: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows() % n, 0, "group_sum needs a multiple of {n} rows");
        let mut value = Mat::zeros(m.rows() / n, m.cols());
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                let v = value.get(r / n, c) + m.get(r, c);
                value.set(r / n, c, v);
            }
        }
        let ng = self.needs(a);
        self.push(value, Op::GroupSum(a, n), ng)
    }

    /// Row `row` of `a` repeated `n` times.
    pub fn broadcast_row(&mut self, a: Var, row: usize, n: usize) -> Var {
        let r = self.value(a).row(row).to_vec();
        let cols = r.len();
        let value = Mat::from_fn(n, cols, |_, c| r[c]);
        let ng = self.needs(a);
        self.push(value, Op::BroadcastRow(a, row), ng)
    }

    /// Soft validity weight `exp(-α max(‖z‖ - R, 0)²)` per row of a B×2 state.
    pub fn guardrail(&mut self, z: Var, radius: f64, alpha: f64) -> Var {
        let m = self.value(z);
        let value = Mat::from_fn(m.rows(), 1, |r, _| {
            let excess = (m.get(r, 0).hypot(m.get(r, 1)) - radius).max(0.0);
            (-alpha * excess * excess).exp()
        });
        let ng = self.needs(z);
        self.push(value, Op::Guardrail { z, radius, alpha }, ng)
    }

    /// Analytical field velocity at every row of a B×2 state.
    pub fn field_velocity(&mut self, z: Var, field: &FlowFieldSpec) -> Var {
        let m = self.value(z);
        let mut value = Mat::zeros(m.rows(), 2);
        let mut jac = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let p = Vec2::new(m.get(r, 0), m.get(r, 1));
            let u = field.velocity_unchecked(p);
            value.set(r, 0, u.x);
            value.set(r, 1, u.y);
            jac.push(field.velocity_jacobian(p));
        }
        let ng = self.needs(z);
        self.push(value, Op::FieldVelocity { z, jac }, ng)
    }

    /// Backpropagates from the 1×1 node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::NoForward);
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::ShapeMismatch("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Mat::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn elementwise(&self, grads: &mut [Option<Mat>], a: Var, g: &Mat, d: impl Fn(f64, f64) -> f64, out: &Mat) {
        if !self.needs(a) {
            return;
        }
        let x = self.value(a);
        let data = g
            .data()
            .iter()
            .zip(x.data())
            .zip(out.data())
            .map(|((&g, &x), &y)| g * d(x, y))
            .collect();
        self.accumulate(grads, a, Mat::from_vec(x.rows(), x.cols(), data));
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::AddBias(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.col_sums());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |g, y| g * y));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::AddScaled(a, b, s) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    let s = *s;
                    self.accumulate(grads, *b, g.map(|v| v * s));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.elementwise(grads, *a, g, |_, _| s, out);
            }
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Gelu(a) => self.elementwise(grads, *a, g, |x, _| norm_cdf(x) + x * norm_pdf(x), out),
            Op::GeluDeriv(a) => {
                self.elementwise(grads, *a, g, |x, _| norm_pdf(x) * (2.0 - x * x), out)
            }
            Op::Sigmoid(a) => self.elementwise(grads, *a, g, |_, y| y * (1.0 - y), out),
            Op::Tanh(a) => self.elementwise(grads, *a, g, |_, y| 1.0 - y * y, out),
            Op::Exp(a) => self.elementwise(grads, *a, g, |_, y| y, out),
            Op::Softplus(a) => self.elementwise(grads, *a, g, |x, _| sigmoid(x), out),
            Op::Sin(a) => self.elementwise(grads, *a, g, |x, _| x.cos(), out),
            Op::Cos(a) => self.elementwise(grads, *a, g, |x, _| -x.sin(), out),
            Op::Square(a) => self.elementwise(grads, *a, g, |x, _| 2.0 * x, out),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.elementwise(grads, *a, g, |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 }, out)
            }
            Op::Recip(a) => self.elementwise(grads, *a, g, |_, y| -y * y, out),
            Op::RowSum(a) => {
                if self.needs(*a) {
                    let (r, c) = self.shape(*a);
                    self.accumulate(grads, *a, Mat::from_fn(r, c, |i, _| g.get(i, 0)));
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let (r, c) = self.shape(*a);
                    self.accumulate(grads, *a, Mat::filled(r, c, g.item()));
                }
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.needs(p) {
                        self.accumulate(grads, p, g.slice_cols(start, w));
                    }
                    start += w;
                }
            }
            Op::Slice(a, start) => {
                if self.needs(*a) {
                    let (r, c) = self.shape(*a);
                    let (start, w) = (*start, out.cols());
                    let ga = Mat::from_fn(r, c, |i, j| {
                        if j >= start && j < start + w {
                            g.get(i, j - start)
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::MulCol(a, s) => {
                let (am, sm) = (self.value(*a), self.value(*s));
                if self.needs(*a) {
                    let ga = Mat::from_fn(am.rows(), am.cols(), |r, c| g.get(r, c) * sm.get(r, 0));
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*s) {
                    let gs = Mat::from_fn(am.rows(), 1, |r, _| {
                        g.row(r).iter().zip(am.row(r)).map(|(g, x)| g * x).sum()
                    });
                    self.accumulate(grads, *s, gs);
                }
            }
            Op::MulScalar(a, s) => {
                let k = self.value(*s).item();
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.map(|v| v * k));
                }
                if self.needs(*s) {
                    let d = g.data().iter().zip(self.value(*a).data()).map(|(g, x)| g * x).sum();
                    self.accumulate(grads, *s, Mat::scalar(d));
                }
            }
            Op::RepeatRows(a, n) => {
                if self.needs(*a) {
                    let (r, c) = self.shape(*a);
                    let mut ga = Mat::zeros(r, c);
                    for row in 0..g.rows() {
                        for col in 0..c {
                            let v = ga.get(row / n, col) + g.get(row, col);
                            ga.set(row / n, col, v);
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::GroupSum(a, n) => {
                if self.needs(*a) {
                    let (r, c) = self.shape(*a);
                    let n = *n;
                    self.accumulate(grads, *a, Mat::from_fn(r, c, |i, j| g.get(i / n, j)));
                }
            }
            Op::BroadcastRow(a, row) => {
                if self.needs(*a) {
                    let (r, c) = self.shape(*a);
                    let sums = g.col_sums();
                    let row = *row;
                    let ga = Mat::from_fn(r, c, |i, j| if i == row { sums.get(0, j) } else { 0.0 });
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::Guardrail { z, radius, alpha } => {
                if self.needs(*z) {
                    let zm = self.value(*z);
                    let gz = Mat::from_fn(zm.rows(), 2, |r, c| {
                        let norm = zm.get(r, 0).hypot(zm.get(r, 1));
                        let excess = norm - radius;
                        if excess <= 0.0 {
                            return 0.0;
                        }
                        g.get(r, 0) * out.get(r, 0) * (-2.0 * alpha * excess) * zm.get(r, c) / norm
                    });
                    self.accumulate(grads, *z, gz);
                }
            }
            Op::FieldVelocity { z, jac } => {
                if self.needs(*z) {
                    let gz = Mat::from_fn(jac.len(), 2, |r, c| {
                        g.get(r, 0) * jac[r][0][c] + g.get(r, 1) * jac[r][1][c]
                    });
                    self.accumulate(grads, *z, gz);
                }
            }
        }
    }
}
