//! Distillation and metric-learning objectives.

use crate::autodiff::{kl_rows_with_grad, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{attention_rows_are_stochastic, ForwardTrace};
use crate::tensor::Matrix;

/// Row-sum tolerance for attention maps fed to [`loss_attn`].
pub const STOCHASTIC_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillWeights {
    pub cls: f64,
    pub tok: f64,
    pub attn: f64,
    /// How many trailing layers enter the attention term.
    pub attn_layers: usize,
}

impl Default for DistillWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            tok: 1.0,
            attn: 0.1,
            attn_layers: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PretrainLoss {
    pub cls: f64,
    pub tok: f64,
    pub attn: f64,
}

impl PretrainLoss {
    pub fn total(&self) -> f64 {
        self.cls + self.tok + self.attn
    }

    pub(crate) fn add(&mut self, other: &PretrainLoss) {
        self.cls += other.cls;
        self.tok += other.tok;
        self.attn += other.attn;
    }

    pub(crate) fn scaled(&self, c: f64) -> PretrainLoss {
        PretrainLoss {
            cls: self.cls * c,
            tok: self.tok * c,
            attn: self.attn * c,
        }
    }
}

fn check_weight(w: f64) -> Result<()> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::InvalidArgument(format!("loss weight {w} must be >= 0")));
    }
    Ok(())
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum()
}

/// `weight · ‖T − S‖²` over class tokens.
pub fn loss_cls(teacher: &[f32], student: &[f32], weight: f64) -> Result<f64> {
    check_weight(weight)?;
    if teacher.len() != student.len() {
        return Err(Error::shape(
            "loss_cls",
            format!("{} vs {}", teacher.len(), student.len()),
        ));
    }
    Ok(weight * sq_dist(teacher, student))
}

/// `weight · Σ_i ‖T_i − S_i‖²` over patch tokens.
pub fn loss_tok(teacher: &Matrix<f32>, student: &Matrix<f32>, weight: f64) -> Result<f64> {
    check_weight(weight)?;
    if teacher.shape() != student.shape() {
        return Err(Error::shape(
            "loss_tok",
            format!("{:?} vs {:?}", teacher.shape(), student.shape()),
        ));
    }
    Ok(weight * sq_dist(teacher.as_slice(), student.as_slice()))
}

/// `weight · Σ_l Σ_rows KL(A^T_l ‖ A^S_l)` over the last `layers` maps.
pub fn loss_attn(
    teacher: &[Matrix<f32>],
    student: &[Matrix<f32>],
    weight: f64,
    layers: usize,
) -> Result<f64> {
    check_weight(weight)?;
    if teacher.len() != student.len() {
        return Err(Error::shape(
            "loss_attn",
            format!("{} vs {} layers", teacher.len(), student.len()),
        ));
    }
    let from = teacher.len().saturating_sub(layers);
    let mut total = 0.0;
    for (t, s) in teacher[from..].iter().zip(&student[from..]) {
        if !attention_rows_are_stochastic(t, STOCHASTIC_TOL)
            || !attention_rows_are_stochastic(s, STOCHASTIC_TOL)
        {
            return Err(Error::Numeric("attention rows are not stochastic".into()));
        }
        total += kl_rows_with_grad(&t.cast(), &s.cast())?.0;
    }
    Ok(weight * total)
}

pub fn pretrain_loss(
    teacher: &ForwardTrace,
    student: &ForwardTrace,
    w: &DistillWeights,
) -> Result<PretrainLoss> {
    Ok(PretrainLoss {
        cls: loss_cls(&teacher.cls, &student.cls, w.cls)?,
        tok: loss_tok(&teacher.patches, &student.patches, w.tok)?,
        attn: loss_attn(&teacher.attention, &student.attention, w.attn, w.attn_layers)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsParams {
    pub alpha: f64,
    pub beta: f64,
    pub base: f64,
    /// Pair-mining margin; `None` keeps every pair.
    pub margin: Option<f64>,
}

impl Default for MsParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 50.0,
            base: 0.0,
            margin: Some(0.1),
        }
    }
}

/// Multi-similarity loss on an `anchors × candidates` similarity matrix
/// and its gradient with respect to that matrix.
///
/// With `skip_self`, entry `(i, i)` is not a pair (square batch
/// similarity). Anchors without any positive are skipped; the loss is the
/// mean over the rest. Mining keeps negatives with `S > min_pos − ε` and
/// positives with `S < max_neg + ε`; a set that mines empty contributes 0.
pub fn multi_similarity(
    s: &Matrix<f64>,
    anchor_labels: &[u64],
    candidate_labels: &[u64],
    skip_self: bool,
    p: &MsParams,
) -> Result<(f64, Matrix<f64>)> {
    if s.shape() != (anchor_labels.len(), candidate_labels.len()) {
        return Err(Error::shape(
            "multi_similarity",
            format!(
                "{:?} for {} anchors x {} candidates",
                s.shape(),
                anchor_labels.len(),
                candidate_labels.len()
            ),
        ));
    }
    if !(p.alpha > 0.0 && p.beta > 0.0) {
        return Err(Error::InvalidArgument("alpha and beta must be positive".into()));
    }
    let mut grad = Matrix::zeros(s.rows(), s.cols());
    let mut total = 0.0;
    let mut used = 0usize;
    for i in 0..s.rows() {
        let row = s.row(i);
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (k, &lab) in candidate_labels.iter().enumerate() {
            if skip_self && k == i {
                continue;
            }
            if lab == anchor_labels[i] {
                pos.push(k);
            } else {
                neg.push(k);
            }
        }
        if pos.is_empty() {
            continue;
        }
        used += 1;
        if let Some(eps) = p.margin {
            let min_pos = pos.iter().map(|&k| row[k]).fold(f64::INFINITY, f64::min);
            let max_neg = neg.iter().map(|&k| row[k]).fold(f64::NEG_INFINITY, f64::max);
            neg.retain(|&k| row[k] > min_pos - eps);
            if max_neg.is_finite() {
                pos.retain(|&k| row[k] < max_neg + eps);
            }
        }
        let ep: Vec<f64> = pos.iter().map(|&k| (-p.alpha * (row[k] - p.base)).exp()).collect();
        let en: Vec<f64> = neg.iter().map(|&k| (p.beta * (row[k] - p.base)).exp()).collect();
        let sp: f64 = ep.iter().sum();
        let sn: f64 = en.iter().sum();
        total += sp.ln_1p() / p.alpha + sn.ln_1p() / p.beta;
        let g = grad.row_mut(i);
        for (&k, e) in pos.iter().zip(&ep) {
            g[k] = -e / (1.0 + sp);
        }
        for (&k, e) in neg.iter().zip(&en) {
            g[k] = e / (1.0 + sn);
        }
    }
    if used == 0 {
        return Err(Error::InvalidArgument(
            "multi-similarity batch has no anchor with a positive".into(),
        ));
    }
    let inv = 1.0 / used as f64;
    Ok((total * inv, grad.map(|g| g * inv)))
}

/// Value-only [`multi_similarity`] over a rectangular similarity matrix.
pub fn multi_similarity_loss(
    s: &Matrix<f64>,
    anchor_labels: &[u64],
    candidate_labels: &[u64],
    p: &MsParams,
) -> Result<f64> {
    Ok(multi_similarity(s, anchor_labels, candidate_labels, false, p)?.0)
}

/// Batch multi-similarity on cosine similarities of the rows of `y`.
pub fn tape_ms_loss(tape: &mut Tape, y: Var, labels: &[u64], p: &MsParams) -> Result<Var> {
    let n = tape.l2_normalize_rows(y);
    let s = tape.matmul_t(n, n)?;
    let (value, grad) = multi_similarity(tape.value(s), labels, labels, true, p)?;
    tape.scalar_fn(s, value, grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneLoss {
    pub continuous: f64,
    pub binary: f64,
    pub lambda: f64,
}

impl FinetuneLoss {
    pub fn total(&self) -> f64 {
        (1.0 - self.lambda) * self.continuous + self.lambda * self.binary
    }
}

/// `(1−λ)·L(ŷ) + λ·L(sgn ŷ)` on the tape; the sign uses the
/// straight-through estimator.
pub fn tape_finetune_loss(
    tape: &mut Tape,
    y: Var,
    labels: &[u64],
    lambda: f64,
    p: &MsParams,
) -> Result<(Var, FinetuneLoss)> {
    let cont = tape_ms_loss(tape, y, labels, p)?;
    let signs = tape.sign_ste(y);
    let bin = tape_ms_loss(tape, signs, labels, p)?;
    let parts = FinetuneLoss {
        continuous: tape.scalar(cont),
        binary: tape.scalar(bin),
        lambda,
    };
    let total = tape.weighted_sum(&[(cont, 1.0 - lambda), (bin, lambda)])?;
    Ok((total, parts))
}

/// Value-only finetune loss for a batch of embeddings (one per row).
pub fn finetune_loss(y: &Matrix<f64>, labels: &[u64], lambda: f64, p: &MsParams) -> Result<FinetuneLoss> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut tape = Tape::new();
    let yv = tape.constant(y.clone());
    Ok(tape_finetune_loss(&mut tape, yv, labels, lambda, p)?.1)
}
