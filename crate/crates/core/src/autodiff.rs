//! Minimal reverse-mode autodiff over `f64` matrices.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Tape::backward`] walks it once in reverse.
//! Quantizer nodes carry straight-through backward rules. A tape built with
//! [`Tape::surrogate`] evaluates those nodes as their surrogate functions
//! instead, which makes finite differences comparable with the analytic
//! gradients.

use crate::error::{Error, Result};
use crate::quantize::{abs_mean, act_code, qmax, ternary_code, ACT_BITS};
use crate::tensor::Matrix;

pub(crate) const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        weight: Var,
        bias: Var,
        xhat: Matrix<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    SoftmaxRows(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    TernaryBlend {
        w: Var,
        lambda: f64,
        gamma: f64,
    },
    /// Identity backward (activation quantizer and sign STE).
    PassThrough(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SumAll(Var),
    /// Scalar with a precomputed local gradient.
    Scalar {
        x: Var,
        grad: Matrix<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Matrix<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    surrogate: bool,
}

/// Gradients indexed by [`Var`]. Nodes that do not depend on any parameter
/// have none.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Matrix<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix<f64>> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Matrix<f64> {
        self.0[v.0]
            .take()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

fn accumulate(slot: &mut Option<Matrix<f64>>, g: Matrix<f64>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn col_sums(g: &Matrix<f64>) -> Matrix<f64> {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Per-row symmetric `ACT_BITS` quantize-dequantize.
pub(crate) fn act_roundtrip(x: &Matrix<f64>) -> Matrix<f64> {
    let q = qmax(ACT_BITS);
    let mut out = x.clone();
    for r in 0..x.rows() {
        let max_abs = x.row(r).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for v in out.row_mut(r) {
            *v = max_abs * act_code(*v, max_abs, q) as f64 / q;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Quantizer nodes evaluate their straight-through surrogates: clamp
    /// to `[-γ, γ]` for ternary weights, identity for activations and sign.
    pub fn surrogate() -> Self {
        Self {
            nodes: Vec::new(),
            surrogate: true,
        }
    }

    pub fn is_surrogate(&self) -> bool {
        self.surrogate
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<f64> {
        &self.nodes[v.0].value
    }

    /// The single entry of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    fn push(&mut self, value: Matrix<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Matrix<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Matrix<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let n = self.needs(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), n))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        let n = self.needs(&[a, b]);
        Ok(self.push(v, Op::MatMulT(a, b), n))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let n = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), n))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let n = self.needs(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), n))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        if self.value(bias).rows() != 1 {
            return Err(Error::shape("add_row", "bias must be a single row".to_string()));
        }
        let v = self.value(a).add_row(self.value(bias).as_slice())?;
        let n = self.needs(&[a, bias]);
        Ok(self.push(v, Op::AddRow(a, bias), n))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let n = self.needs(&[a]);
        self.push(v, Op::Scale(a, c), n)
    }

    /// Row-wise LayerNorm with `1×c` weight and bias.
    pub fn layer_norm(&mut self, x: Var, weight: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        if self.value(weight).shape() != (1, cols) || self.value(bias).shape() != (1, cols) {
            return Err(Error::shape(
                "layer_norm",
                format!("input {:?}, weight {:?}", xv.shape(), self.value(weight).shape()),
            ));
        }
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let w = self.value(weight).as_slice();
        let b = self.value(bias).as_slice();
        let out = Matrix::from_fn(rows, cols, |r, c| xhat.get(r, c) * w[c] + b[c]);
        let n = self.needs(&[x, weight, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                weight,
                bias,
                xhat,
                inv_std,
            },
            n,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let n = self.needs(&[a]);
        self.push(v, Op::Gelu(a), n)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            row.iter_mut().for_each(|x| *x /= sum);
        }
        let n = self.needs(&[a]);
        self.push(v, Op::SoftmaxRows(a), n)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_rows(start, end);
        let n = self.needs(&[a]);
        self.push(v, Op::SliceRows(a, start), n)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_cols(start, end);
        let n = self.needs(&[a]);
        self.push(v, Op::SliceCols(a, start), n)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let v = Matrix::concat_rows(&vals)?;
        let n = self.needs(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), n))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let v = Matrix::concat_cols(&vals)?;
        let n = self.needs(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), n))
    }

    /// `(1-λ)·W + λ·γ·code(W)` with `γ` supplied by the caller. Backward
    /// passes `(1-λ)·g + λ·g·[|W| <= γ]`, holding `γ` constant.
    pub fn ternary_blend(&mut self, w: Var, lambda: f64, gamma: f64) -> Var {
        let surrogate = self.surrogate;
        let v = self.value(w).map(|x| {
            let q = if surrogate {
                x.clamp(-gamma, gamma)
            } else {
                gamma * ternary_code(x, gamma) as f64
            };
            (1.0 - lambda) * x + lambda * q
        });
        let n = self.needs(&[w]);
        self.push(v, Op::TernaryBlend { w, lambda, gamma }, n)
    }

    /// [`Tape::ternary_blend`] with `γ = mean|W|`.
    pub fn ternary_blend_auto(&mut self, w: Var, lambda: f64) -> Var {
        let gamma = abs_mean(self.value(w).as_slice());
        self.ternary_blend(w, lambda, gamma)
    }

    /// `(1-λ)·x + λ·deq(Q(x))` per token row; identity backward.
    pub fn act_quant_blend(&mut self, x: Var, lambda: f64) -> Var {
        let xv = self.value(x);
        let v = if self.surrogate || lambda == 0.0 {
            xv.clone()
        } else {
            let q = act_roundtrip(xv);
            xv.zip_with(&q, "act_quant_blend", |a, b| (1.0 - lambda) * a + lambda * b)
                .expect("same shape")
        };
        let n = self.needs(&[x]);
        self.push(v, Op::PassThrough(x), n)
    }

    /// `+1` where `x > 0`, else `-1`; identity backward.
    pub fn sign_ste(&mut self, x: Var) -> Var {
        let v = if self.surrogate {
            self.value(x).clone()
        } else {
            self.value(x).map(|v| if v > 0.0 { 1.0 } else { -1.0 })
        };
        let n = self.needs(&[x]);
        self.push(v, Op::PassThrough(x), n)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt().max(NORM_FLOOR);
            row.iter_mut().for_each(|a| *a /= n);
            norms.push(n);
        }
        let n = self.needs(&[x]);
        self.push(v, Op::L2NormalizeRows { x, norms }, n)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().sum::<f64>();
        let n = self.needs(&[a]);
        self.push(Matrix::from_fn(1, 1, |_, _| s), Op::SumAll(a), n)
    }

    /// A scalar function of `x` whose value and gradient were computed
    /// outside the tape.
    pub fn scalar_fn(&mut self, x: Var, value: f64, grad: Matrix<f64>) -> Result<Var> {
        if grad.shape() != self.value(x).shape() {
            return Err(Error::shape(
                "scalar_fn",
                format!("gradient {:?} for input {:?}", grad.shape(), self.value(x).shape()),
            ));
        }
        let n = self.needs(&[x]);
        Ok(self.push(Matrix::from_fn(1, 1, |_, _| value), Op::Scalar { x, grad }, n))
    }

    /// `weight · Σ (x - target)²`.
    pub fn sq_diff_sum(&mut self, x: Var, target: &Matrix<f64>, weight: f64) -> Result<Var> {
        let d = self.value(x).sub(target)?;
        let value = weight * d.as_slice().iter().map(|v| v * v).sum::<f64>();
        self.scalar_fn(x, value, d.map(|v| 2.0 * weight * v))
    }

    /// `weight · Σ_rows KL(p ‖ q)` for a constant `p`, with `q` floored at
    /// `1e-12`.
    pub fn kl_rows(&mut self, q: Var, p: &Matrix<f64>, weight: f64) -> Result<Var> {
        let (value, grad) = kl_rows_with_grad(p, self.value(q))?;
        self.scalar_fn(q, weight * value, grad.map(|g| weight * g))
    }

    /// `Σ w_i · s_i` over `1×1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, w) in terms {
            if self.value(v).shape() != (1, 1) {
                return Err(Error::shape("weighted_sum", "terms must be scalars".to_string()));
            }
            s += w * self.scalar(v);
        }
        let vars: Vec<_> = terms.iter().map(|t| t.0).collect();
        let n = self.needs(&vars);
        Ok(self.push(Matrix::from_fn(1, 1, |_, _| s), Op::WeightedSum(terms.to_vec()), n))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be a 1x1 scalar, got {shape:?}"),
            ));
        }
        let mut grads: Vec<Option<Matrix<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::from_fn(1, 1, |_, _| 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients(grads))
    }

    fn propagate(&self, node: &Node, g: &Matrix<f64>, grads: &mut [Option<Matrix<f64>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut send = |v: Var, m: Matrix<f64>| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], m);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    send(*a, g.matmul_t(val(*b))?);
                }
                if wants(*b) {
                    send(*b, val(*a).transpose().matmul(g)?);
                }
            }
            Op::MatMulT(a, b) => {
                if wants(*a) {
                    send(*a, g.matmul(val(*b))?);
                }
                if wants(*b) {
                    send(*b, g.transpose().matmul(val(*a))?);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::AddRow(a, bias) => {
                send(*a, g.clone());
                if wants(*bias) {
                    send(*bias, col_sums(g));
                }
            }
            Op::Scale(a, c) => send(*a, g.map(|v| v * c)),
            Op::LayerNorm {
                x,
                weight,
                bias,
                xhat,
                inv_std,
            } => {
                let w = val(*weight).as_slice();
                if wants(*weight) {
                    send(*weight, col_sums(&g.zip_with(xhat, "ln_backward", |a, b| a * b)?));
                }
                if wants(*bias) {
                    send(*bias, col_sums(g));
                }
                if wants(*x) {
                    let (rows, cols) = g.shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let dxhat: Vec<f64> = gr.iter().zip(w).map(|(a, b)| a * b).collect();
                        let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                        let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dxhat[c] - m1 - xr[c] * m2);
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::Gelu(a) => send(*a, g.zip_with(val(*a), "gelu_backward", |g, x| g * gelu_grad(x))?),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yv * (gv - dot);
                    }
                }
                send(*a, dx);
            }
            Op::SliceRows(a, start) => {
                let (rows, cols) = val(*a).shape();
                let mut full = Matrix::zeros(rows, cols);
                for r in 0..g.rows() {
                    full.row_mut(start + r).copy_from_slice(g.row(r));
                }
                send(*a, full);
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = val(*a).shape();
                let mut full = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    full.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                send(*a, full);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = val(p).rows();
                    send(p, g.slice_rows(at, at + n));
                    at += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = val(p).cols();
                    send(p, g.slice_cols(at, at + n));
                    at += n;
                }
            }
            Op::TernaryBlend { w, lambda, gamma } => {
                let dw = g.zip_with(val(*w), "ste_backward", |g, x| {
                    let pass = if x.abs() <= *gamma { 1.0 } else { 0.0 };
                    g * ((1.0 - lambda) + lambda * pass)
                })?;
                send(*w, dw);
            }
            Op::PassThrough(a) => send(*a, g.clone()),
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = (gv - yv * dot) / norms[r];
                    }
                }
                send(*x, dx);
            }
            Op::SumAll(a) => {
                let s = g.as_slice()[0];
                let (rows, cols) = val(*a).shape();
                send(*a, Matrix::from_fn(rows, cols, |_, _| s));
            }
            Op::Scalar { x, grad } => {
                let s = g.as_slice()[0];
                send(*x, grad.map(|v| v * s));
            }
            Op::WeightedSum(terms) => {
                let s = g.as_slice()[0];
                for &(v, w) in terms {
                    send(v, Matrix::from_fn(1, 1, |_, _| w * s));
                }
            }
        }
        Ok(())
    }
}

/// `Σ_rows KL(p ‖ q)` and its gradient with respect to `q`. Entries with
/// `p = 0` contribute nothing; `q` is floored at `1e-12`.
pub(crate) fn kl_rows_with_grad(p: &Matrix<f64>, q: &Matrix<f64>) -> Result<(f64, Matrix<f64>)> {
    if p.shape() != q.shape() {
        return Err(Error::shape(
            "kl_rows",
            format!("{:?} vs {:?}", p.shape(), q.shape()),
        ));
    }
    let mut value = 0.0;
    let mut grad = Matrix::zeros(p.rows(), p.cols());
    for ((g, &pv), &qv) in grad.as_mut_slice().iter_mut().zip(p.as_slice()).zip(q.as_slice()) {
        if pv <= 0.0 {
            continue;
        }
        value += pv * (pv / qv.max(NORM_FLOOR)).ln();
        if qv > NORM_FLOOR {
            *g = -pv / qv;
        }
    }
    Ok((value, grad))
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

/// Relative error with an absolute floor so that gradients near zero are
/// compared on an absolute scale.
pub fn grad_rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward-pass gradients with central differences of step `h`.
///
/// `build` constructs the loss from parameter leaves on the given tape and
/// is evaluated on surrogate tapes. `skip(param, element)` excludes entries
/// (e.g. near a clamp boundary).
pub fn gradient_check(
    params: &[Matrix<f64>],
    h: f64,
    floor: f64,
    mut build: impl FnMut(&mut Tape, &[Var]) -> Result<Var>,
    skip: impl Fn(usize, usize) -> bool,
) -> Result<GradCheck> {
    let eval = |build: &mut dyn FnMut(&mut Tape, &[Var]) -> Result<Var>,
                ps: &[Matrix<f64>]|
     -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::surrogate();
        let vars: Vec<_> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };
    let (tape, vars, loss) = eval(&mut build, params)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<_> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take_or_zeros(v, p.shape()))
        .collect();
    let mut report = GradCheck {
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
    };
    let mut work = params.to_vec();
    for (pi, a) in analytic.iter().enumerate() {
        for e in 0..a.len() {
            if skip(pi, e) {
                report.skipped += 1;
                continue;
            }
            let orig = work[pi].as_slice()[e];
            work[pi].as_mut_slice()[e] = orig + h;
            let (t, _, l) = eval(&mut build, &work)?;
            let up = t.scalar(l);
            work[pi].as_mut_slice()[e] = orig - h;
            let (t, _, l) = eval(&mut build, &work)?;
            let down = t.scalar(l);
            work[pi].as_mut_slice()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = grad_rel_err(a.as_slice()[e], numeric, floor);
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::new();
        let w = t.param(Matrix::from_fn(2, 3, |r, c| (r * 3 + c) as f64));
        let s = t.sum_all(w);
        assert_eq!(t.scalar(s), 15.0);
        let g = t.backward(s).unwrap();
        assert!(g.get(w).unwrap().as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let w = t.param(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(w), Err(Error::Shape { .. })));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::from_fn(2, 2, |_, _| 1.0));
        let b = t.param(Matrix::from_fn(2, 2, |_, _| 2.0));
        let c = t.matmul(a, b).unwrap();
        let s = t.sum_all(c);
        let g = t.backward(s).unwrap();
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }

    #[test]
    fn mse_through_linear_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_matrix(&mut rng, 4, 5);
        let target = rand_matrix(&mut rng, 4, 3);
        let params = [rand_matrix(&mut rng, 3, 5), rand_matrix(&mut rng, 1, 3)];
        let r = gradient_check(
            &params,
            1e-5,
            1e-6,
            |t, v| {
                let xi = t.constant(x.clone());
                let y = t.matmul_t(xi, v[0])?;
                let y = t.add_row(y, v[1])?;
                t.sq_diff_sum(y, &target, 1.0 / 12.0)
            },
            |_, _| false,
        )
        .unwrap();
        assert_eq!(r.checked, 18);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn blend_gradient_is_mix_of_direct_and_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_matrix(&mut rng, 4, 4);
        let gamma = abs_mean(w.as_slice());
        let mut t = Tape::new();
        let wv = t.param(w.clone());
        let b = t.ternary_blend(wv, 0.5, gamma);
        let s = t.sum_all(b);
        let g = t.backward(s).unwrap();
        for (gi, wi) in g.get(wv).unwrap().as_slice().iter().zip(w.as_slice()) {
            let masked = if wi.abs() <= gamma { 1.0 } else { 0.0 };
            assert_eq!(*gi, 0.5 * 1.0 + 0.5 * masked);
        }
    }

    #[test]
    fn quantizer_forward_values() {
        let mut t = Tape::new();
        let w = t.param(Matrix::from_vec(1, 4, vec![0.9, -0.05, 0.3, -0.6]).unwrap());
        let q = t.ternary_blend_auto(w, 1.0);
        let gamma = (0.9 + 0.05 + 0.3 + 0.6) / 4.0;
        let want = [gamma, 0.0, gamma, -gamma];
        for (a, b) in t.value(q).as_slice().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let s = t.sign_ste(w);
        assert_eq!(t.value(s).as_slice(), &[1.0, -1.0, 1.0, -1.0]);
        let z = t.param(Matrix::zeros(1, 2));
        let zs = t.sign_ste(z);
        assert_eq!(t.value(zs).as_slice(), &[-1.0, -1.0]);
    }

    #[test]
    fn kl_identity_and_example() {
        let p = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let q = Matrix::from_vec(1, 2, vec![0.5, 0.5]).unwrap();
        let (v, _) = kl_rows_with_grad(&p, &q).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        let (v, _) = kl_rows_with_grad(&q, &q).unwrap();
        assert_eq!(v, 0.0);
    }

    /// Random small graph touching every differentiable op.
    fn mixed_graph(t: &mut Tape, v: &[Var], x: &Matrix<f64>, lambda: f64, gammas: &[f64]) -> Result<Var> {
        let xi = t.constant(x.clone());
        let xa = t.act_quant_blend(xi, lambda);
        let w = t.ternary_blend(v[0], lambda, gammas[0]);
        let h = t.matmul_t(xa, w)?;
        let h = t.add_row(h, v[1])?;
        let h = t.layer_norm(h, v[2], v[3], 1e-5)?;
        let h = t.gelu(h);
        let left = t.slice_cols(h, 0, 2);
        let right = t.slice_cols(h, 2, 4);
        let att = t.matmul_t(left, right)?;
        let att = t.softmax_rows(att);
        let mixed = t.matmul(att, h)?;
        let top = t.slice_rows(mixed, 0, 1);
        let rest = t.slice_rows(mixed, 1, 3);
        let cat = t.concat_rows(&[rest, top])?;
        let cc = t.concat_cols(&[cat, h])?;
        let n = t.l2_normalize_rows(cc);
        let s = t.sign_ste(n);
        let a = t.sq_diff_sum(s, &Matrix::from_fn(3, 8, |r, c| ((r + c) % 3) as f64 * 0.1), 0.5)?;
        let p = Matrix::from_fn(3, 3, |_, _| 1.0 / 3.0);
        let b = t.kl_rows(att, &p, 0.7)?;
        let sc = t.scale(n, 2.0);
        let c = t.sum_all(sc);
        t.weighted_sum(&[(a, 1.0), (b, 1.0), (c, 0.3)])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gradients_match_surrogate_finite_differences(seed in any::<u64>(), lambda in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_matrix(&mut rng, 3, 5);
            let params = vec![
                rand_matrix(&mut rng, 4, 5),
                rand_matrix(&mut rng, 1, 4),
                rand_matrix(&mut rng, 1, 4).map(|v| 1.0 + 0.5 * v),
                rand_matrix(&mut rng, 1, 4),
            ];
            let gammas = vec![abs_mean(params[0].as_slice())];
            let w0 = params[0].clone();
            let g0 = gammas[0];
            let r = gradient_check(
                &params,
                1e-5,
                1e-6,
                |t, v| mixed_graph(t, v, &x, lambda, &gammas),
                |p, e| p == 0 && (w0.as_slice()[e].abs() - g0).abs() < 1e-3,
            ).unwrap();
            prop_assert!(r.max_rel_err < 1e-3, "{:?}", r);
        }
    }
}
