use std::f64::consts::LN_10;
use std::sync::Arc;

use realfft::num_complex::Complex64;

use crate::error::{invalid_input, Result};
use crate::matrix::{matmul_nt_acc, matmul_tn_acc, Matrix};
use crate::signal::StftPlan;

/// Forward value or adjoint of a tape node.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Real(Matrix<f64>),
    Complex(Matrix<Complex64>),
}

impl Value {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Value::Real(m) => m.shape(),
            Value::Complex(m) => m.shape(),
        }
    }

    fn zeros_like(&self) -> Value {
        let (r, c) = self.shape();
        match self {
            Value::Real(_) => Value::Real(Matrix::zeros(r, c)),
            Value::Complex(_) => Value::Complex(Matrix::zeros(r, c)),
        }
    }

    pub fn as_real(&self) -> Option<&Matrix<f64>> {
        match self {
            Value::Real(m) => Some(m),
            Value::Complex(_) => None,
        }
    }

    pub fn as_complex(&self) -> Option<&Matrix<Complex64>> {
        match self {
            Value::Complex(m) => Some(m),
            Value::Real(_) => None,
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Input,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log10(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    NormSq(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Row(Var, usize),
    AffineCols(Var, Arc<Vec<f64>>),
    ToComplex(Var),
    Modulus(Var),
    Phasor(Var),
    Polar(Var, Var),
    Rfft(Var, Arc<StftPlan>),
    Irfft(Var, Arc<StftPlan>),
    Frame(Var, Arc<StftPlan>),
    OverlapAdd(Var, Arc<StftPlan>),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive operations for reverse-mode
/// differentiation. Nodes are pushed in evaluation order, so every node's
/// inputs precede it and a single reverse sweep visits them topologically.
///
/// Constants never receive adjoints, and nodes that depend only on constants
/// are skipped during the backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Value>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Value> {
        self.adjoints.get(v.0).and_then(|a| a.as_ref())
    }

    /// Real adjoint of `v`; zero when `v` does not influence the loss.
    pub fn real(&self, v: Var) -> Matrix<f64> {
        match self.get(v) {
            Some(Value::Real(m)) => m.clone(),
            _ => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn complex(&self, v: Var) -> Matrix<Complex64> {
        match self.get(v) {
            Some(Value::Complex(m)) => m.clone(),
            _ => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn shape_err<T>(op: &str, a: (usize, usize), b: (usize, usize)) -> Result<T> {
    Err(invalid_input!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn zip_map(a: &Matrix<f64>, b: &Matrix<f64>, f: impl Fn(f64, f64) -> f64) -> Matrix<f64> {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn scalar(x: f64) -> Matrix<f64> {
    Matrix::from_vec(1, 1, vec![x]).expect("1x1")
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

    fn push(&mut self, value: Value, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn input(&mut self, m: Matrix<f64>) -> Var {
        self.push(Value::Real(m), Op::Input, true)
    }

    /// Differentiable complex leaf.
    pub fn input_complex(&mut self, m: Matrix<Complex64>) -> Var {
        self.push(Value::Complex(m), Op::Input, true)
    }

    pub fn constant(&mut self, m: Matrix<f64>) -> Var {
        self.push(Value::Real(m), Op::Constant, false)
    }

    pub fn constant_complex(&mut self, m: Matrix<Complex64>) -> Var {
        self.push(Value::Complex(m), Op::Constant, false)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(scalar(x))
    }

    pub fn value(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    pub fn real(&self, v: Var) -> Result<&Matrix<f64>> {
        self.value(v)
            .as_real()
            .ok_or_else(|| invalid_input!("node {} is complex, expected real", v.0))
    }

    pub fn complex(&self, v: Var) -> Result<&Matrix<Complex64>> {
        self.value(v)
            .as_complex()
            .ok_or_else(|| invalid_input!("node {} is real, expected complex", v.0))
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let m = self.real(v)?;
        if m.shape() != (1, 1) {
            return Err(invalid_input!("node {} has shape {:?}, expected scalar", v.0, m.shape()));
        }
        Ok(m.as_slice()[0])
    }

    fn binary_real(&mut self, name: &str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (x, y) = (self.real(a)?, self.real(b)?);
        if x.shape() != y.shape() {
            return shape_err(name, x.shape(), y.shape());
        }
        let out = zip_map(x, y, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Value::Real(out), op, rg))
    }

    fn unary_real(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.real(a)?.map(|&x| f(x));
        let rg = self.rg(a);
        Ok(self.push(Value::Real(out), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_real("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_real("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_real("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Element-wise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_real("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary_real(a, Op::Scale(a, c), |x| c * x)
    }

    /// `s · x` for a 1×1 node `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        let k = self.scalar(s)?;
        let out = self.real(x)?.map(|&v| k * v);
        let rg = self.rg(s) || self.rg(x);
        Ok(self.push(Value::Real(out), Op::ScaleBy(s, x), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.real(a)?.matmul(self.real(b)?)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Value::Real(out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.real(a)?.transpose();
        let rg = self.rg(a);
        Ok(self.push(Value::Real(out), Op::Transpose(a), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary_real(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary_real(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary_real(a, Op::Exp(a), f64::exp)
    }

    pub fn log10(&mut self, a: Var) -> Result<Var> {
        self.unary_real(a, Op::Log10(a), f64::log10)
    }

    /// Element-wise clamp to `[lo, hi]`; the adjoint passes only strictly
    /// inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(invalid_input!("clamp bounds reversed: {lo} > {hi}"));
        }
        self.unary_real(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.real(a)?.sum();
        let rg = self.rg(a);
        Ok(self.push(Value::Real(scalar(s)), Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.real(a)?;
        if m.is_empty() {
            return Err(invalid_input!("mean of an empty tensor"));
        }
        let s = m.sum() / m.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Value::Real(scalar(s)), Op::Mean(a), rg))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.real(a)?, self.real(b)?);
        if x.shape() != y.shape() {
            return shape_err("dot", x.shape(), y.shape());
        }
        let s = x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p * q).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Value::Real(scalar(s)), Op::Dot(a, b), rg))
    }

    pub fn norm_sq(&mut self, a: Var) -> Result<Var> {
        let s = self.real(a)?.norm_sq();
        let rg = self.rg(a);
        Ok(self.push(Value::Real(scalar(s)), Op::NormSq(a), rg))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.real(a)?;
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Value::Real(out), Op::Softmax(a), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.real(p)?.rows(),
            None => return Err(invalid_input!("concat of zero tensors")),
        };
        let mut cols = 0;
        for &p in parts {
            let m = self.real(p)?;
            if m.rows() != rows {
                return shape_err("concat_cols", (rows, cols), m.shape());
            }
            cols += m.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.real(p)?;
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Value::Real(out), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.real(p)?.cols(),
            None => return Err(invalid_input!("stack of zero tensors")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.real(p)?;
            if m.cols() != cols {
                return shape_err("stack_rows", (rows, cols), m.shape());
            }
            data.extend_from_slice(m.as_slice());
            rows += m.rows();
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Value::Real(out), Op::StackRows(parts.to_vec()), rg))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let m = self.real(a)?;
        if r >= m.rows() {
            return Err(invalid_input!("row {r} out of range for {} rows", m.rows()));
        }
        let out = Matrix::from_vec(1, m.cols(), m.row(r).to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(Value::Real(out), Op::Row(a, r), rg))
    }

    /// `x[:, c] * scale[c] + shift[c]` with constant per-column coefficients.
    pub fn affine_cols(&mut self, a: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let m = self.real(a)?;
        if scale.len() != m.cols() || shift.len() != m.cols() {
            return shape_err("affine_cols", m.shape(), (scale.len(), shift.len()));
        }
        let mut out = m.clone();
        for r in 0..out.rows() {
            for ((v, s), b) in out.row_mut(r).iter_mut().zip(scale).zip(shift) {
                *v = *v * s + b;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Value::Real(out), Op::AffineCols(a, Arc::new(scale.to_vec())), rg))
    }

    pub fn to_complex(&mut self, a: Var) -> Result<Var> {
        let out = self.real(a)?.map(|&x| Complex64::new(x, 0.0));
        let rg = self.rg(a);
        Ok(self.push(Value::Complex(out), Op::ToComplex(a), rg))
    }

    pub fn modulus(&mut self, z: Var) -> Result<Var> {
        let out = self.complex(z)?.map(|c| c.norm());
        let rg = self.rg(z);
        Ok(self.push(Value::Real(out), Op::Modulus(z), rg))
    }

    /// `z / |z|`, with `1` where `z = 0`.
    pub fn phasor(&mut self, z: Var) -> Result<Var> {
        let out = self.complex(z)?.map(|&c| {
            let r = c.norm();
            if r > 0.0 {
                c / r
            } else {
                Complex64::new(1.0, 0.0)
            }
        });
        let rg = self.rg(z);
        Ok(self.push(Value::Complex(out), Op::Phasor(z), rg))
    }

    /// Complex value from a real magnitude and a complex phasor: `m · u`.
    pub fn polar(&mut self, magnitude: Var, phasor: Var) -> Result<Var> {
        let (m, u) = (self.real(magnitude)?, self.complex(phasor)?);
        if m.shape() != u.shape() {
            return shape_err("polar", m.shape(), u.shape());
        }
        let data = m.as_slice().iter().zip(u.as_slice()).map(|(&r, &p)| p * r).collect();
        let out = Matrix::from_vec(m.rows(), m.cols(), data)?;
        let rg = self.rg(magnitude) || self.rg(phasor);
        Ok(self.push(Value::Complex(out), Op::Polar(magnitude, phasor), rg))
    }

    /// Real FFT of each row (`frames × fft_size` → `frames × bins`).
    pub fn rfft(&mut self, a: Var, plan: &Arc<StftPlan>) -> Result<Var> {
        let m = self.real(a)?;
        if m.cols() != plan.config().fft_size {
            return shape_err("rfft", m.shape(), (m.rows(), plan.config().fft_size));
        }
        let out = plan.rfft_rows(m);
        let rg = self.rg(a);
        Ok(self.push(Value::Complex(out), Op::Rfft(a, plan.clone()), rg))
    }

    /// Normalized inverse real FFT of each row.
    pub fn irfft(&mut self, z: Var, plan: &Arc<StftPlan>) -> Result<Var> {
        let m = self.complex(z)?;
        if m.cols() != plan.config().bins() {
            return shape_err("irfft", m.shape(), (m.rows(), plan.config().bins()));
        }
        let out = plan.irfft_rows(m);
        let rg = self.rg(z);
        Ok(self.push(Value::Real(out), Op::Irfft(z, plan.clone()), rg))
    }

    /// Windowed framing of a `1 × len` signal.
    pub fn frame(&mut self, signal: Var, plan: &Arc<StftPlan>) -> Result<Var> {
        let m = self.real(signal)?;
        if m.rows() != 1 {
            return Err(invalid_input!("frame expects a 1 x len signal, got {:?}", m.shape()));
        }
        let out = plan.frame_signal(m.as_slice())?;
        let rg = self.rg(signal);
        Ok(self.push(Value::Real(out), Op::Frame(signal, plan.clone()), rg))
    }

    /// Windowed overlap-add of `frames × fft_size` into a `1 × len` signal.
    pub fn overlap_add(&mut self, frames: Var, plan: &Arc<StftPlan>) -> Result<Var> {
        let m = self.real(frames)?;
        if m.cols() != plan.config().fft_size {
            return shape_err("overlap_add", m.shape(), (m.rows(), plan.config().fft_size));
        }
        let out = plan.overlap_add(m);
        let out = Matrix::from_vec(1, out.len(), out)?;
        let rg = self.rg(frames);
        Ok(self.push(Value::Real(out), Op::OverlapAdd(frames, plan.clone()), rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(invalid_input!("loss node {} is not on this tape", loss.0));
        }
        let v = &self.nodes[loss.0].value;
        if v.shape() != (1, 1) || v.as_real().is_none() {
            return Err(invalid_input!("backward needs a real scalar loss, got shape {:?}", v.shape()));
        }
        self.backward_from(loss, Value::Real(scalar(1.0)))
    }

    /// Vector-Jacobian product: propagates `seed` as the adjoint of `output`.
    pub fn backward_from(&self, output: Var, seed: Value) -> Result<Gradients> {
        let n = self.nodes.len();
        if output.0 >= n {
            return Err(invalid_input!("node {} is not on this tape", output.0));
        }
        let out = &self.nodes[output.0].value;
        let same_kind = matches!((out, &seed), (Value::Real(_), Value::Real(_)) | (Value::Complex(_), Value::Complex(_)));
        if !same_kind || out.shape() != seed.shape() {
            return Err(invalid_input!("seed does not match the output node's shape or kind"));
        }
        let mut adj: Vec<Option<Value>> = vec![None; n];
        adj[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (before, rest) = adj.split_at_mut(i);
            let Some(g) = rest[0].as_ref() else { continue };
            self.propagate(i, g, before);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Value, adj: &mut [Option<Value>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let rval = |v: Var| self.nodes[v.0].value.as_real().expect("real by construction");
        let cval = |v: Var| self.nodes[v.0].value.as_complex().expect("complex by construction");
        let out_r = || node.value.as_real().expect("real output");

        // Lazily zero-initialised adjoint slot for an input, skipping constants.
        macro_rules! slot_r {
            ($v:expr) => {{
                let v: Var = $v;
                if !self.nodes[v.0].requires_grad {
                    None
                } else {
                    let s = adj[v.0].get_or_insert_with(|| val(v).zeros_like());
                    match s {
                        Value::Real(m) => Some(m.as_mut_slice()),
                        Value::Complex(_) => unreachable!("real adjoint for real node"),
                    }
                }
            }};
        }
        macro_rules! slot_c {
            ($v:expr) => {{
                let v: Var = $v;
                if !self.nodes[v.0].requires_grad {
                    None
                } else {
                    let s = adj[v.0].get_or_insert_with(|| val(v).zeros_like());
                    match s {
                        Value::Complex(m) => Some(m.as_mut_slice()),
                        Value::Real(_) => unreachable!("complex adjoint for complex node"),
                    }
                }
            }};
        }
        macro_rules! slot_rm {
            ($v:expr) => {{
                let v: Var = $v;
                if !self.nodes[v.0].requires_grad {
                    None
                } else {
                    let s = adj[v.0].get_or_insert_with(|| val(v).zeros_like());
                    match s {
                        Value::Real(m) => Some(m),
                        Value::Complex(_) => unreachable!("real adjoint for real node"),
                    }
                }
            }};
        }

        match (&node.op, g) {
            (Op::Input | Op::Constant, _) => {}
            (Op::Add(a, b), Value::Real(g)) => {
                if let Some(s) = slot_r!(*a) {
                    s.iter_mut().zip(g.as_slice()).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = slot_r!(*b) {
                    s.iter_mut().zip(g.as_slice()).for_each(|(s, g)| *s += g);
                }
            }
            (Op::Sub(a, b), Value::Real(g)) => {
                if let Some(s) = slot_r!(*a) {
                    s.iter_mut().zip(g.as_slice()).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = slot_r!(*b) {
                    s.iter_mut().zip(g.as_slice()).for_each(|(s, g)| *s -= g);
                }
            }
            (Op::Mul(a, b), Value::Real(g)) => {
                let (x, y) = (rval(*a), rval(*b));
                if let Some(s) = slot_r!(*a) {
                    for ((s, g), y) in s.iter_mut().zip(g.as_slice()).zip(y.as_slice()) {
                        *s += g * y;
                    }
                }
                if let Some(s) = slot_r!(*b) {
                    for ((s, g), x) in s.iter_mut().zip(g.as_slice()).zip(x.as_slice()) {
                        *s += g * x;
                    }
                }
            }
            (Op::Div(a, b), Value::Real(g)) => {
                let (x, y) = (rval(*a), rval(*b));
                if let Some(s) = slot_r!(*a) {
                    for ((s, g), y) in s.iter_mut().zip(g.as_slice()).zip(y.as_slice()) {
                        *s += g / y;
                    }
                }
                if let Some(s) = slot_r!(*b) {
                    for (((s, g), x), y) in s.iter_mut().zip(g.as_slice()).zip(x.as_slice()).zip(y.as_slice()) {
                        *s -= g * x / (y * y);
                    }
                }
            }
            (Op::Scale(a, c), Value::Real(g)) => {
                if let Some(s) = slot_r!(*a) {
                    s.iter_mut().zip(g.as_slice()).for_each(|(s, g)| *s += c * g);
                }
            }
            (Op::ScaleBy(k, x), Value::Real(g)) => {
                let kv = rval(*k).as_slice()[0];
                let xv = rval(*x);
                if let Some(s) = slot_r!(*k) {
                    s[0] += g.as_slice().iter().zip(xv.as_slice()).map(|(g, x)| g * x).sum::<f64>();
                }
                if let Some(s) = slot_r!(*x) {
                    s.iter_mut().zip(g.as_slice()).for_each(|(s, g)| *s += kv * g);
                }
            }
            (Op::MatMul(a, b), Value::Real(g)) => {
                let (x, y) = (rval(*a), rval(*b));
                if let Some(s) = slot_rm!(*a) {
                    matmul_nt_acc(g, y, s);
                }
                if let Some(s) = slot_rm!(*b) {
                    matmul_tn_acc(x, g, s);
                }
            }
            (Op::Transpose(a), Value::Real(g)) => {
                if let Some(s) = slot_rm!(*a) {
                    let gt = g.transpose();
                    s.as_mut_slice().iter_mut().zip(gt.as_slice()).for_each(|(s, g)| *s += g);
                }
            }
            (Op::Tanh(a), Value::Real(g)) => {
                let y = out_r();
                if let Some(s) = slot_r!(*a) {
                    for ((s, g), y) in s.iter_mut().zip(g.as_slice()).zip(y.as_slice()) {
                        *s += g * (1.0 - y * y);
                    }
                }
            }
            (Op::Sigmoid(a), Value::Real(g)) => {
                let y = out_r();
                if let Some(s) = slot_r!(*a) {
                    for ((s, g), y) in s.iter_mut().zip(g.as_slice()).zip(y.as_slice()) {
                        *s += g * y * (1.0 - y);
                    }
                }
            }
            (Op::Exp(a), Value::Real(g)) => {
                let y = out_r();
                if let Some(s) = slot_r!(*a) {
                    for ((s, g), y) in s.iter_mut().zip(g.as_slice()).zip(y.as_slice()) {
                        *s += g * y;
                    }
                }
            }
            (Op::Log10(a), Value::Real(g)) => {
                let x = rval(*a);
                if let Some(s) = slot_r!(*a) {
                    for ((s, &g), x) in s.iter_mut().zip(g.as_slice()).zip(x.as_slice()) {
                        // a zero adjoint must not meet log10'(0) = inf
                        if g != 0.0 {
                            *s += g / (x * LN_10);
                        }
                    }
                }
            }
            (Op::Clamp(a, lo, hi), Value::Real(g)) => {
                let x = rval(*a);
                if let Some(s) = slot_r!(*a) {
                    for ((s, g), &x) in s.iter_mut().zip(g.as_slice()).zip(x.as_slice()) {
                        if x > *lo && x < *hi {
                            *s += g;
                        }
                    }
                }
            }
            (Op::Sum(a), Value::Real(g)) => {
                let g = g.as_slice()[0];
                if let Some(s) = slot_r!(*a) {
                    s.iter_mut().for_each(|s| *s += g);
                }
            }
            (Op::Mean(a), Value::Real(g)) => {
                let n = rval(*a).len() as f64;
                let g = g.as_slice()[0] / n;
                if let Some(s) = slot_r!(*a) {
                    s.iter_mut().for_each(|s| *s += g);
                }
            }
            (Op::Dot(a, b), Value::Real(g)) => {
                let g = g.as_slice()[0];
                let (x, y) = (rval(*a), rval(*b));
                if let Some(s) = slot_r!(*a) {
                    s.iter_mut().zip(y.as_slice()).for_each(|(s, y)| *s += g * y);
                }
                if let Some(s) = slot_r!(*b) {
                    s.iter_mut().zip(x.as_slice()).for_each(|(s, x)| *s += g * x);
                }
            }
            (Op::NormSq(a), Value::Real(g)) => {
                let g = g.as_slice()[0];
                let x = rval(*a);
                if let Some(s) = slot_r!(*a) {
                    s.iter_mut().zip(x.as_slice()).for_each(|(s, x)| *s += 2.0 * g * x);
                }
            }
            (Op::Softmax(a), Value::Real(g)) => {
                let y = out_r();
                if let Some(s) = slot_rm!(*a) {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((s, y), g) in s.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *s += y * (g - inner);
                        }
                    }
                }
            }
            (Op::ConcatCols(parts), Value::Real(g)) => {
                let mut off = 0;
                for &p in parts {
                    let w = rval(p).cols();
                    if let Some(s) = slot_rm!(p) {
                        for r in 0..g.rows() {
                            let src = &g.row(r)[off..off + w];
                            s.row_mut(r).iter_mut().zip(src).for_each(|(s, g)| *s += g);
                        }
                    }
                    off += w;
                }
            }
            (Op::StackRows(parts), Value::Real(g)) => {
                let mut off = 0;
                for &p in parts {
                    let len = rval(p).len();
                    if let Some(s) = slot_r!(p) {
                        let src = &g.as_slice()[off..off + len];
                        s.iter_mut().zip(src).for_each(|(s, g)| *s += g);
                    }
                    off += len;
                }
            }
            (Op::Row(a, r), Value::Real(g)) => {
                if let Some(s) = slot_rm!(*a) {
                    s.row_mut(*r).iter_mut().zip(g.as_slice()).for_each(|(s, g)| *s += g);
                }
            }
            (Op::AffineCols(a, scale), Value::Real(g)) => {
                if let Some(s) = slot_rm!(*a) {
                    for r in 0..g.rows() {
                        for ((s, g), k) in s.row_mut(r).iter_mut().zip(g.row(r)).zip(scale.iter()) {
                            *s += g * k;
                        }
                    }
                }
            }
            (Op::ToComplex(a), Value::Complex(g)) => {
                if let Some(s) = slot_r!(*a) {
                    s.iter_mut().zip(g.as_slice()).for_each(|(s, g)| *s += g.re);
                }
            }
            (Op::Modulus(z), Value::Real(g)) => {
                let zv = cval(*z);
                if let Some(s) = slot_c!(*z) {
                    for ((s, &g), &c) in s.iter_mut().zip(g.as_slice()).zip(zv.as_slice()) {
                        let r = c.norm();
                        if r > 0.0 {
                            *s += c * (g / r);
                        }
                    }
                }
            }
            (Op::Phasor(z), Value::Complex(g)) => {
                let zv = cval(*z);
                if let Some(s) = slot_c!(*z) {
                    for ((s, g), c) in s.iter_mut().zip(g.as_slice()).zip(zv.as_slice()) {
                        let r = c.norm();
                        if r > 0.0 {
                            // d(z/|z|): tangential component of g scaled by 1/|z|
                            let cross = (g.re * c.im - g.im * c.re) / (r * r * r);
                            *s += Complex64::new(c.im * cross, -c.re * cross);
                        }
                    }
                }
            }
            (Op::Polar(m, u), Value::Complex(g)) => {
                let (mv, uv) = (rval(*m), cval(*u));
                if let Some(s) = slot_r!(*m) {
                    for ((s, g), p) in s.iter_mut().zip(g.as_slice()).zip(uv.as_slice()) {
                        *s += g.re * p.re + g.im * p.im;
                    }
                }
                if let Some(s) = slot_c!(*u) {
                    for ((s, g), &r) in s.iter_mut().zip(g.as_slice()).zip(mv.as_slice()) {
                        *s += g * r;
                    }
                }
            }
            (Op::Rfft(a, plan), Value::Complex(g)) => {
                if let Some(s) = slot_r!(*a) {
                    let n = plan.config().fft_size as f64;
                    let last = g.cols() - 1;
                    let half = Matrix::from_fn(g.rows(), g.cols(), |r, k| {
                        let v = g[(r, k)];
                        if k == 0 || k == last {
                            v
                        } else {
                            v * 0.5
                        }
                    });
                    let back = plan.irfft_rows(&half);
                    s.iter_mut().zip(back.as_slice()).for_each(|(s, b)| *s += n * b);
                }
            }
            (Op::Irfft(z, plan), Value::Real(g)) => {
                if let Some(s) = slot_c!(*z) {
                    let n = plan.config().fft_size as f64;
                    let spec = plan.rfft_rows(g);
                    let bins = spec.cols();
                    for (r, row) in spec.iter_rows().enumerate() {
                        for (k, v) in row.iter().enumerate() {
                            let w = if k == 0 || k + 1 == bins { 1.0 } else { 2.0 };
                            let mut add = v * (w / n);
                            if k == 0 || k + 1 == bins {
                                add.im = 0.0;
                            }
                            s[r * bins + k] += add;
                        }
                    }
                }
            }
            (Op::Frame(sig, plan), Value::Real(g)) => {
                if let Some(s) = slot_r!(*sig) {
                    let back = plan.overlap_add(g);
                    s.iter_mut().zip(&back).for_each(|(s, b)| *s += b);
                }
            }
            (Op::OverlapAdd(frames, plan), Value::Real(g)) => {
                if let Some(s) = slot_r!(*frames) {
                    let back = plan.frame_signal(g.as_slice()).expect("adjoint length matches");
                    s.iter_mut().zip(back.as_slice()).for_each(|(s, b)| *s += b);
                }
            }
            _ => unreachable!("adjoint kind does not match node kind"),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
