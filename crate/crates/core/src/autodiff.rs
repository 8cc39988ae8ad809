//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation together with its forward value.
//! Nodes only reference earlier nodes, so a single sweep in reverse
//! construction order propagates the gradient of a scalar loss to every
//! reachable node. Values are `f64` matrices; a batch of points is a batch of
//! rows, so the network layers are plain matrix products.
//!
//! Binary elementwise operations broadcast their right operand when it is a
//! `1x1` scalar, a `1xn` row or an `mx1` column.
//!
//! ```
//! use neural_sl::autodiff::Tape;
//! use ndarray::array;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(array![[1.0, 2.0]]);
//! let w = tape.constant(array![[3.0, -1.0]]);
//! let y = tape.mul(x, w).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x), array![[3.0, -1.0]]);
//! ```

use ndarray::{Array2, Axis, Zip};
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
    Col,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Abs(usize),
    Exp(usize),
    Ln(usize),
    Sin(usize),
    Cos(usize),
    Sigmoid(usize, f64),
    /// Input and the node holding `sigmoid(beta x)`.
    Softplus(usize, usize),
    MaxConst(usize, f64),
    MinConst(usize, f64),
    Select(Vec<bool>, usize, usize),
    Reciprocal(usize),
    Sqrt(usize),
    Scale(usize, f64),
    AddConst(usize),
    Reshape(usize),
    /// Output `(i, j)` depends on `u[i]` and `v[i]` through the given partials.
    Lookup2 { u: usize, v: usize, du: Mat, dv: Mat },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::Abs(_) => "abs",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::MaxConst(..) => "max_const",
            Op::MinConst(..) => "min_const",
            Op::Select(..) => "select",
            Op::Reciprocal(_) => "reciprocal",
            Op::Sqrt(_) => "sqrt",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Reshape(_) => "reshape",
            Op::Lookup2 { .. } => "lookup2",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Select(_, a, b) => vec![*a, *b],
            Op::Lookup2 { u, v, .. } => vec![*u, *v],
            Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::Abs(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Sigmoid(a, _)
            | Op::Softplus(a, _)
            | Op::MaxConst(a, _)
            | Op::MinConst(a, _)
            | Op::Reciprocal(a)
            | Op::Sqrt(a)
            | Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Reshape(a) => vec![*a],
        }
    }
}

struct Node {
    op: Op,
    value: Mat,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Mat> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Mat {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Mat::zeros((var.rows, var.cols)))
    }
}

/// Beyond this `|beta x|` the logistic tails are below `f64` resolution.
const SATURATION: f64 = 36.0;

/// Logistic function, stable for large `|x|`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x > SATURATION {
        1.0
    } else if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(beta x)) / beta` without overflow.
#[inline]
pub fn softplus(x: f64, beta: f64) -> f64 {
    softplus_and_gate(x, beta).0
}

/// Softplus together with its derivative `sigmoid(beta x)`, sharing one
/// exponential. Branch-free so that batch loops vectorize.
#[inline(always)]
pub fn softplus_and_gate(x: f64, beta: f64) -> (f64, f64) {
    let z = beta * x;
    let e = exp_neg(z.abs().min(700.0));
    let sp = x.max(0.0) + log1p_unit(e) / beta;
    let q = 1.0 / (1.0 + e);
    let gate = if z >= 0.0 { q } else { e * q };
    (sp, gate)
}

/// Softplus and gate over contiguous slices of equal length.
pub fn softplus_gate_slice(x: &[f64], beta: f64, sp: &mut [f64], gate: &mut [f64]) {
    assert!(x.len() == sp.len() && x.len() == gate.len());
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { simd::softplus_gate_avx512(x, beta, sp, gate) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { simd::softplus_gate_avx2(x, beta, sp, gate) };
        }
    }
    softplus_gate_kernel(x, beta, sp, gate)
}

/// In-place softplus over a contiguous slice.
pub fn softplus_slice(x: &mut [f64], beta: f64) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { simd::softplus_avx512(x, beta) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { simd::softplus_avx2(x, beta) };
        }
    }
    softplus_kernel(x, beta)
}

#[inline(always)]
fn softplus_gate_kernel(x: &[f64], beta: f64, sp: &mut [f64], gate: &mut [f64]) {
    for ((&x, s), g) in x.iter().zip(sp.iter_mut()).zip(gate.iter_mut()) {
        (*s, *g) = softplus_and_gate(x, beta);
    }
}

#[inline(always)]
fn softplus_kernel(x: &mut [f64], beta: f64) {
    for v in x.iter_mut() {
        *v = softplus_and_gate(*v, beta).0;
    }
}

/// The same kernels compiled for wider vector units. No fused multiply-add
/// is introduced, so every path returns bit-identical results.
#[cfg(target_arch = "x86_64")]
mod simd {
    #[target_feature(enable = "avx512f")]
    pub unsafe fn softplus_gate_avx512(x: &[f64], beta: f64, sp: &mut [f64], gate: &mut [f64]) {
        super::softplus_gate_kernel(x, beta, sp, gate)
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn softplus_gate_avx2(x: &[f64], beta: f64, sp: &mut [f64], gate: &mut [f64]) {
        super::softplus_gate_kernel(x, beta, sp, gate)
    }

    #[target_feature(enable = "avx512f")]
    pub unsafe fn softplus_avx512(x: &mut [f64], beta: f64) {
        super::softplus_kernel(x, beta)
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn softplus_avx2(x: &mut [f64], beta: f64) {
        super::softplus_kernel(x, beta)
    }
}

/// `exp(-a)` for `a` in `[0, 700]`, accurate to a few ulp.
#[inline(always)]
fn exp_neg(a: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    // Adding 1.5 * 2^52 rounds to the nearest integer in the low mantissa bits.
    const ROUND: f64 = 6_755_399_441_055_744.0;
    let x = -a;
    let kf = x * std::f64::consts::LOG2_E + ROUND;
    let k = kf - ROUND;
    let r = x - k * LN2_HI - k * LN2_LO;
    // Taylor series of exp on |r| <= ln2 / 2, truncation below 1e-17.
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    // The integer k sits in the low mantissa bits of kf.
    let bits = kf.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(1023);
    let scale = f64::from_bits(bits << 52);
    p * scale
}

/// `ln(1 + e)` for `e` in `[0, 1]` via `2 atanh(e / (2 + e))`.
#[inline(always)]
fn log1p_unit(e: f64) -> f64 {
    let t = e / (2.0 + e);
    let t2 = t * t;
    // Odd series in t <= 1/3; terms past 1/35 are below 1e-17 relative.
    let mut p = 1.0 / 35.0;
    p = p * t2 + 1.0 / 33.0;
    p = p * t2 + 1.0 / 31.0;
    p = p * t2 + 1.0 / 29.0;
    p = p * t2 + 1.0 / 27.0;
    p = p * t2 + 1.0 / 25.0;
    p = p * t2 + 1.0 / 23.0;
    p = p * t2 + 1.0 / 21.0;
    p = p * t2 + 1.0 / 19.0;
    p = p * t2 + 1.0 / 17.0;
    p = p * t2 + 1.0 / 15.0;
    p = p * t2 + 1.0 / 13.0;
    p = p * t2 + 1.0 / 11.0;
    p = p * t2 + 1.0 / 9.0;
    p = p * t2 + 1.0 / 7.0;
    p = p * t2 + 1.0 / 5.0;
    p = p * t2 + 1.0 / 3.0;
    p = p * t2 + 1.0;
    2.0 * t * p
}

fn bcast_kind(a: (usize, usize), b: (usize, usize)) -> Option<Bcast> {
    if a == b {
        Some(Bcast::Same)
    } else if b == (1, 1) {
        Some(Bcast::Scalar)
    } else if b.0 == 1 && b.1 == a.1 {
        Some(Bcast::Row)
    } else if b.1 == 1 && b.0 == a.0 {
        Some(Bcast::Col)
    } else {
        None
    }
}

/// Sums a gradient of the broadcast output shape back to the operand shape.
fn reduce_bcast(g: &Mat, kind: Bcast) -> Mat {
    match kind {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Mat::from_elem((1, 1), g.sum()),
        Bcast::Row => g.sum_axis(Axis(0)).insert_axis(Axis(0)),
        Bcast::Col => g.sum_axis(Axis(1)).insert_axis(Axis(1)),
    }
}

fn zip_bcast(a: &Mat, b: &Mat, kind: Bcast, f: impl Fn(f64, f64) -> f64) -> Mat {
    match kind {
        Bcast::Same => {
            let mut out = a.clone();
            Zip::from(&mut out).and(b).for_each(|o, &y| *o = f(*o, y));
            out
        }
        Bcast::Scalar => {
            let s = b[[0, 0]];
            a.mapv(|x| f(x, s))
        }
        Bcast::Row | Bcast::Col => {
            let bb = b.broadcast(a.dim()).expect("broadcast checked at construction");
            let mut out = a.clone();
            Zip::from(&mut out).and(&bb).for_each(|o, &y| *o = f(*o, y));
            out
        }
    }
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

    fn push(&mut self, op: Op, value: Mat) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.push_with(op, value, requires_grad)
    }

    fn push_with(&mut self, op: Op, value: Mat, requires_grad: bool) -> Var {
        let (rows, cols) = value.dim();
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var { id, rows, cols }
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push_with(Op::Leaf, value, true)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push_with(Op::Leaf, value, false)
    }

    pub fn scalar_param(&mut self, v: f64) -> Var {
        self.param(Mat::from_elem((1, 1), v))
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.id].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.id].value[[0, 0]]
    }

    fn check_bcast(&self, name: &str, a: Var, b: Var) -> Result<Bcast> {
        bcast_kind(a.shape(), b.shape()).ok_or_else(|| {
            Error::Shape(format!(
                "{name}: cannot combine {:?} with {:?}",
                a.shape(),
                b.shape()
            ))
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let k = self.check_bcast("add", a, b)?;
        let v = zip_bcast(self.value(a), self.value(b), k, |x, y| x + y);
        Ok(self.push(Op::Add(a.id, b.id, k), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let k = self.check_bcast("sub", a, b)?;
        let v = zip_bcast(self.value(a), self.value(b), k, |x, y| x - y);
        Ok(self.push(Op::Sub(a.id, b.id, k), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let k = self.check_bcast("mul", a, b)?;
        let v = zip_bcast(self.value(a), self.value(b), k, |x, y| x * y);
        Ok(self.push(Op::Mul(a.id, b.id, k), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.push(Op::MatMul(a.id, b.id), v))
    }

    /// Sum of all entries as a `1x1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(Op::Sum(a.id), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = (a.rows * a.cols) as f64;
        let v = Mat::from_elem((1, 1), self.value(a).sum() / n);
        self.push(Op::Mean(a.id), v)
    }

    /// Row sums as an `mx1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::SumRows(a.id), v)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).mapv(f);
        self.push(op, v)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a.id), f64::abs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.id), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a.id), f64::ln)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a.id), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a.id), f64::cos)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.sigmoid_scaled(a, 1.0)
    }

    /// `sigmoid(scale * a)`.
    pub fn sigmoid_scaled(&mut self, a: Var, scale: f64) -> Var {
        self.unary(a, Op::Sigmoid(a.id, scale), |x| sigmoid(scale * x))
    }

    /// `ln(1 + exp(beta a)) / beta`.
    pub fn softplus(&mut self, a: Var, beta: f64) -> Var {
        self.softplus_gated(a, beta).0
    }

    /// Softplus and its derivative `sigmoid(beta a)` as two nodes, both
    /// differentiable, computed in one pass.
    pub fn softplus_gated(&mut self, a: Var, beta: f64) -> (Var, Var) {
        let x = self.value(a).as_standard_layout();
        let mut sp = Mat::zeros(x.dim());
        let mut gate = Mat::zeros(x.dim());
        softplus_gate_slice(
            x.as_slice().expect("standard layout"),
            beta,
            sp.as_slice_mut().expect("fresh matrix"),
            gate.as_slice_mut().expect("fresh matrix"),
        );
        let gate = self.push(Op::Sigmoid(a.id, beta), gate);
        let sp = self.push(Op::Softplus(a.id, gate.id), sp);
        (sp, gate)
    }

    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::MaxConst(a.id, c), |x| x.max(c))
    }

    pub fn min_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::MinConst(a.id, c), |x| x.min(c))
    }

    /// Entry-wise `mask ? a : b`, mask in row-major order.
    pub fn select(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        if a.shape() != b.shape() || mask.len() != a.rows * a.cols {
            return Err(Error::Shape(format!(
                "select: mask {} with {:?} and {:?}",
                mask.len(),
                a.shape(),
                b.shape()
            )));
        }
        let mut v = self.value(b).clone();
        let av = self.value(a);
        for (k, (o, &x)) in v.iter_mut().zip(av.iter()).enumerate() {
            if mask[k] {
                *o = x;
            }
        }
        Ok(self.push(Op::Select(mask.to_vec(), a.id, b.id), v))
    }

    pub fn reciprocal(&mut self, a: Var) -> Var {
        self.unary(a, Op::Reciprocal(a.id), |x| 1.0 / x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a.id), f64::sqrt)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a.id, c), |x| c * x)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddConst(a.id), |x| x + c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    /// Row-major reinterpretation with the same number of entries.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        if rows * cols != a.rows * a.cols {
            return Err(Error::Shape(format!(
                "reshape {:?} -> ({rows}, {cols})",
                a.shape()
            )));
        }
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let v = Mat::from_shape_vec((rows, cols), flat).expect("sizes checked");
        Ok(self.push(Op::Reshape(a.id), v))
    }

    /// Records an externally evaluated function `out[i][j] = g_j(u[i], v[i])`
    /// from its values and partial derivatives. `u` and `v` are `mx1` columns.
    pub fn lookup2(&mut self, u: Var, v: Var, value: Mat, du: Mat, dv: Mat) -> Result<Var> {
        if u.cols != 1 || v.shape() != u.shape() || value.nrows() != u.rows || du.dim() != value.dim()
            || dv.dim() != value.dim()
        {
            return Err(Error::Shape("lookup2: inconsistent shapes".into()));
        }
        Ok(self.push(
            Op::Lookup2 {
                u: u.id,
                v: v.id,
                du,
                dv,
            },
            value,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !loss.is_scalar() {
            return Err(Error::Domain(format!(
                "backward needs a scalar loss, got {:?}",
                loss.shape()
            )));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(Mat::ones((1, 1)));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn propagate(&self, id: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, k) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, reduce_bcast(g, *k));
                }
            }
            Op::Sub(a, b, k) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, -reduce_bcast(g, *k));
                }
            }
            Op::Mul(a, b, k) => {
                if self.wants(*a) {
                    accumulate(grads, *a, zip_bcast(g, val(*b), *k, |x, y| x * y));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, reduce_bcast(&(g * val(*a)), *k));
                }
            }
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.dot(&val(*b).t()));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::Sum(a) => {
                let s = g[[0, 0]];
                accumulate(grads, *a, Mat::from_elem(val(*a).dim(), s));
            }
            Op::Mean(a) => {
                let x = val(*a);
                let s = g[[0, 0]] / x.len() as f64;
                accumulate(grads, *a, Mat::from_elem(x.dim(), s));
            }
            Op::SumRows(a) => {
                let x = val(*a);
                let full = g.broadcast(x.dim()).expect("column broadcast").to_owned();
                accumulate(grads, *a, full);
            }
            Op::Abs(a) => {
                accumulate(grads, *a, zip_map(g, val(*a), |g, x| g * sign(x)));
            }
            Op::Exp(a) => accumulate(grads, *a, g * out),
            Op::Ln(a) => accumulate(grads, *a, zip_map(g, val(*a), |g, x| g / x)),
            Op::Sin(a) => accumulate(grads, *a, zip_map(g, val(*a), |g, x| g * x.cos())),
            Op::Cos(a) => accumulate(grads, *a, zip_map(g, val(*a), |g, x| -g * x.sin())),
            Op::Sigmoid(a, s) => {
                let s = *s;
                accumulate(grads, *a, zip_map(g, out, |g, y| g * s * y * (1.0 - y)));
            }
            Op::Softplus(a, gate) => accumulate(grads, *a, g * val(*gate)),
            Op::MaxConst(a, c) => {
                let c = *c;
                accumulate(grads, *a, zip_map(g, val(*a), |g, x| if x > c { g } else { 0.0 }));
            }
            Op::MinConst(a, c) => {
                let c = *c;
                accumulate(grads, *a, zip_map(g, val(*a), |g, x| if x < c { g } else { 0.0 }));
            }
            Op::Select(mask, a, b) => {
                if self.wants(*a) {
                    let mut ga = g.clone();
                    ga.iter_mut().zip(mask).for_each(|(v, &m)| {
                        if !m {
                            *v = 0.0
                        }
                    });
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = g.clone();
                    gb.iter_mut().zip(mask).for_each(|(v, &m)| {
                        if m {
                            *v = 0.0
                        }
                    });
                    accumulate(grads, *b, gb);
                }
            }
            Op::Reciprocal(a) => accumulate(grads, *a, zip_map(g, out, |g, y| -g * y * y)),
            Op::Sqrt(a) => accumulate(grads, *a, zip_map(g, out, |g, y| g * 0.5 / y)),
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::AddConst(a) => accumulate(grads, *a, g.clone()),
            Op::Reshape(a) => {
                let x = val(*a);
                let flat: Vec<f64> = g.iter().copied().collect();
                accumulate(grads, *a, Mat::from_shape_vec(x.dim(), flat).expect("same size"));
            }
            Op::Lookup2 { u, v, du, dv } => {
                if self.wants(*u) {
                    accumulate(grads, *u, (g * du).sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
                if self.wants(*v) {
                    accumulate(grads, *v, (g * dv).sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
        }
    }

    /// Plain-text listing of the recorded operations, one per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (id, n) in self.nodes.iter().enumerate() {
            let (r, c) = n.value.dim();
            let inputs = n.op.inputs();
            let _ = writeln!(
                s,
                "%{id} = {}({}) : {r}x{c}{}",
                n.op.name(),
                inputs.iter().map(|i| format!("%{i}")).collect::<Vec<_>>().join(", "),
                if n.requires_grad { "" } else { " const" }
            );
        }
        s
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(g: &Mat, x: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let mut out = g.clone();
    Zip::from(&mut out).and(x).for_each(|o, &xv| *o = f(*o, xv));
    out
}

fn accumulate(grads: &mut [Option<Mat>], id: usize, g: Mat) {
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradient of `sum(output)` with respect to the leaf `input`. For row-wise
/// independent outputs (one point per row) this is the per-row gradient.
pub fn grad_wrt_input(tape: &mut Tape, output: Var, input: Var) -> Result<Mat> {
    let total = tape.sum(output);
    Ok(tape.backward(total)?.wrt(input))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(lo..hi))
    }

    /// Checks d(sum(w * f(x)))/dx against central differences for every entry.
    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, x0: Mat, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (r, c) = {
            let mut t = Tape::new();
            let xv = t.constant(x0.clone());
            build(&mut t, xv).shape()
        };
        let weights = random_mat(&mut rng, r, c, -1.0, 1.0);
        let eval = |x: &Mat| -> f64 {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let y = build(&mut t, xv);
            (t.value(y) * &weights).sum()
        };
        let mut t = Tape::new();
        let xv = t.param(x0.clone());
        let y = build(&mut t, xv);
        let w = t.constant(weights.clone());
        let prod = t.mul(y, w).unwrap();
        let loss = t.sum(prod);
        let g = t.backward(loss).unwrap().wrt(xv);
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let h = 1e-5 * x0[[r, c]].abs().max(1.0);
            let mut xp = x0.clone();
            xp[[r, c]] += h;
            let mut xm = x0.clone();
            xm[[r, c]] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let an = g[[r, c]];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < tol, "entry {idx}: analytic {an} vs fd {fd}");
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_mat(&mut rng, 4, 3, -2.0, 2.0);
        let pos = random_mat(&mut rng, 4, 3, 0.3, 2.0);
        // Keep kinks away from the probed points.
        let away = x.mapv(|v: f64| if v.abs() < 0.1 { v + 0.3 } else { v });
        check_unary(|t, v| t.exp(v), x.clone(), 1e-4);
        check_unary(|t, v| t.ln(v), pos.clone(), 1e-4);
        check_unary(|t, v| t.sin(v), x.clone(), 1e-4);
        check_unary(|t, v| t.cos(v), x.clone(), 1e-4);
        check_unary(|t, v| t.sigmoid(v), x.clone(), 1e-4);
        check_unary(|t, v| t.sigmoid_scaled(v, 3.0), x.clone(), 1e-4);
        check_unary(|t, v| t.softplus(v, 1.0), x.clone(), 1e-4);
        check_unary(|t, v| t.softplus(v, 10.0), x.clone(), 1e-4);
        check_unary(|t, v| t.abs(v), away.clone(), 1e-4);
        check_unary(|t, v| t.max_const(v, 0.0), away.clone(), 1e-4);
        check_unary(|t, v| t.min_const(v, 0.0), away.clone(), 1e-4);
        check_unary(|t, v| t.reciprocal(v), pos.clone(), 1e-4);
        check_unary(|t, v| t.sqrt(v), pos.clone(), 1e-4);
        check_unary(|t, v| t.scale(v, -2.5), x.clone(), 1e-4);
        check_unary(|t, v| t.add_const(v, 0.7), x.clone(), 1e-4);
        check_unary(|t, v| t.square(v), x.clone(), 1e-4);
        check_unary(|t, v| t.sum_rows(v), x.clone(), 1e-4);
        check_unary(|t, v| t.reshape(v, 2, 6).unwrap(), x.clone(), 1e-4);
        check_unary(|t, v| { let s = t.sum(v); t.exp(s) }, x.clone(), 1e-4);
        check_unary(|t, v| { let s = t.mean(v); t.sin(s) }, x.clone(), 1e-4);
    }

    #[test]
    fn binary_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let other = random_mat(&mut rng, 4, 3, -1.5, 1.5);
        let row = random_mat(&mut rng, 1, 3, -1.5, 1.5);
        let col = random_mat(&mut rng, 4, 1, -1.5, 1.5);
        let sc = random_mat(&mut rng, 1, 1, 0.5, 1.5);
        let wmat = random_mat(&mut rng, 3, 5, -1.0, 1.0);
        let x = random_mat(&mut rng, 4, 3, -2.0, 2.0);
        for b in [other.clone(), row.clone(), col.clone(), sc.clone()] {
            let b1 = b.clone();
            check_unary(move |t, v| { let c = t.constant(b1.clone()); t.add(v, c).unwrap() }, x.clone(), 1e-4);
            let b2 = b.clone();
            check_unary(move |t, v| { let c = t.constant(b2.clone()); t.sub(v, c).unwrap() }, x.clone(), 1e-4);
            let b3 = b.clone();
            check_unary(move |t, v| { let c = t.constant(b3.clone()); t.mul(v, c).unwrap() }, x.clone(), 1e-4);
        }
        // Gradient flowing into the broadcast operand.
        for b in [row, col, sc] {
            let xx = x.clone();
            check_unary(move |t, v| { let c = t.constant(xx.clone()); let p = t.mul(c, v).unwrap(); t.sub(c, p).unwrap() }, b.clone(), 1e-4);
            let xx = x.clone();
            check_unary(move |t, v| { let c = t.constant(xx.clone()); t.add(c, v).unwrap() }, b, 1e-4);
        }
        let w2 = wmat.clone();
        check_unary(move |t, v| { let c = t.constant(w2.clone()); t.matmul(v, c).unwrap() }, x.clone(), 1e-4);
        let xx = x.clone();
        check_unary(move |t, v| { let c = t.constant(xx.clone()); t.matmul(c, v).unwrap() }, wmat, 1e-4);
        let mask: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
        let o2 = other.clone();
        check_unary(move |t, v| { let c = t.constant(o2.clone()); t.select(&mask, v, c).unwrap() }, x.clone(), 1e-4);
        // Product rule through a shared operand.
        check_unary(|t, v| { let s = t.sin(v); t.mul(s, v).unwrap() }, x, 1e-4);
    }

    #[test]
    fn lookup2_uses_given_partials() {
        let mut t = Tape::new();
        let u = t.param(array![[1.0], [2.0]]);
        let v = t.param(array![[3.0], [4.0]]);
        let value = array![[0.1, 0.2], [0.3, 0.4]];
        let du = array![[1.0, 2.0], [3.0, 4.0]];
        let dv = array![[-1.0, 0.5], [0.0, 2.0]];
        let y = t.lookup2(u, v, value, du, dv).unwrap();
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(u), array![[3.0], [7.0]]);
        assert_eq!(g.wrt(v), array![[-0.5], [2.0]]);
    }

    #[test]
    fn fast_softplus_matches_library_functions() {
        let mut worst_sp: f64 = 0.0;
        let mut worst_gate: f64 = 0.0;
        let xs: Vec<f64> = (-20_000..=20_000).map(|i| i as f64 * 1e-4).collect();
        let mut sps = vec![0.0; xs.len()];
        let mut gates = vec![0.0; xs.len()];
        softplus_gate_slice(&xs, 100.0, &mut sps, &mut gates);
        let mut in_place = xs.clone();
        softplus_slice(&mut in_place, 100.0);
        assert_eq!(in_place, sps);
        for (i, &x) in xs.iter().enumerate() {
            let (sp, gate) = softplus_and_gate(x, 100.0);
            assert_eq!((sp.to_bits(), gate.to_bits()), (sps[i].to_bits(), gates[i].to_bits()));
            let z = 100.0 * x;
            let sp_ref = if z > 0.0 {
                x + (-z).exp().ln_1p() / 100.0
            } else {
                z.exp().ln_1p() / 100.0
            };
            let gate_ref = 1.0 / (1.0 + (-z).exp());
            worst_sp = worst_sp.max((sp - sp_ref).abs() / sp_ref.abs().max(1e-300));
            worst_gate = worst_gate.max((gate - gate_ref).abs() / gate_ref.max(1e-300));
        }
        assert!(worst_sp < 1e-14, "softplus {worst_sp}");
        assert!(worst_gate < 1e-14, "gate {worst_gate}");
    }

    #[test]
    fn sigmoid_and_softplus_at_zero() {
        let mut t = Tape::new();
        let x = t.scalar_param(0.0);
        let s = t.sigmoid(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x)[[0, 0]], 0.25);

        let mut t = Tape::new();
        let x = t.scalar_param(0.0);
        let s = t.softplus(x, 100.0);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x)[[0, 0]], 0.5);
    }

    #[test]
    fn weighted_sum_gradient_is_exact() {
        let mut t = Tape::new();
        let w = array![[0.3, -1.25, 7.0]];
        let x = t.param(array![[1.0, 2.0, 3.0]]);
        let wc = t.constant(w.clone());
        let p = t.mul(wc, x).unwrap();
        let loss = t.sum(p);
        assert_eq!(t.backward(loss).unwrap().wrt(x), w);
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut t = Tape::new();
            let x = t.param(random_mat(&mut rng, 50, 8, -1.0, 1.0));
            let w = t.param(random_mat(&mut rng, 8, 4, -1.0, 1.0));
            let h = t.matmul(x, w).unwrap();
            let a = t.softplus(h, 100.0);
            let l = t.mean(a);
            let g = t.backward(l).unwrap();
            (g.wrt(x), g.wrt(w))
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn errors_on_bad_shapes_and_non_scalar_loss() {
        let mut t = Tape::new();
        let a = t.param(Mat::zeros((3, 2)));
        let b = t.param(Mat::zeros((2, 3)));
        assert!(matches!(t.add(a, b), Err(Error::Shape(_))));
        assert!(matches!(t.matmul(a, a), Err(Error::Shape(_))));
        assert!(t.matmul(a, b).is_ok());
        assert!(matches!(t.backward(a), Err(Error::Domain(_))));
        assert!(t.reshape(a, 4, 2).is_err());
    }

    #[test]
    fn grad_wrt_input_of_linear_and_constant_functions() {
        let n = [0.6, 0.0, 0.8];
        let mut t = Tape::new();
        let x = t.param(array![[0.1, 0.2, 0.3], [1.0, -1.0, 2.0]]);
        let nv = t.constant(array![[n[0]], [n[1]], [n[2]]]);
        let f = t.matmul(x, nv).unwrap();
        let g = grad_wrt_input(&mut t, f, x).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((g[[r, c]] - n[c]).abs() < 1e-15);
            }
            let norm = (0..3).map(|c| g[[r, c]].powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-15);
        }

        let mut t = Tape::new();
        let x = t.param(array![[0.1, 0.2, 0.3]]);
        let zero = t.scale(x, 0.0);
        let f = t.add_const(zero, 4.0);
        let g = grad_wrt_input(&mut t, f, x).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(array![[1.0, 2.0]]);
        let p = t.param(array![[3.0, 4.0]]);
        let y = t.mul(c, p).unwrap();
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert!(t.dump().contains("%2 = mul(%0, %1) : 1x2"));
    }
}
