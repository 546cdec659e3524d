//! Quantization primitives.
//!
//! * ternary weights with a per-tensor abs-mean scale,
//! * per-token symmetric activation quantization,
//! * sign binarization of embeddings,
//! * the straight-through gradient mask and the sigmoid blend schedule.
//!
//! Rounding is half-away-from-zero everywhere (`f64::round`).

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Offset added to the ternary scale before division.
pub const TERNARY_EPS: f64 = 1e-6;

/// Default activation bit width.
pub const ACT_BITS: u32 = 8;

/// Ternary weights: `value_i = gamma * code_i`, `code_i ∈ {-1, 0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryTensor {
    rows: usize,
    cols: usize,
    codes: Vec<i8>,
    gamma: f32,
}

impl TernaryTensor {
    pub fn new(rows: usize, cols: usize, codes: Vec<i8>, gamma: f32) -> Result<Self> {
        if codes.len() != rows * cols {
            return Err(Error::shape(
                "TernaryTensor::new",
                format!("{} codes for {rows}x{cols}", codes.len()),
            ));
        }
        if let Some(index) = codes.iter().position(|c| !(-1..=1).contains(c)) {
            return Err(Error::InvalidArgument(format!(
                "code {} at {index} is not ternary",
                codes[index]
            )));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma {gamma} must be finite and >= 0")));
        }
        Ok(Self {
            rows,
            cols,
            codes,
            gamma,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn gamma(&self) -> f32 {
        self.gamma
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Per-token INT8 (or narrower) activations with one scale per row.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedActivation {
    tokens: usize,
    channels: usize,
    codes: Vec<i8>,
    scales: Vec<f32>,
}

impl QuantizedActivation {
    pub fn new(tokens: usize, channels: usize, codes: Vec<i8>, scales: Vec<f32>) -> Result<Self> {
        if codes.len() != tokens * channels || scales.len() != tokens {
            return Err(Error::shape(
                "QuantizedActivation::new",
                format!(
                    "{} codes / {} scales for {tokens}x{channels}",
                    codes.len(),
                    scales.len()
                ),
            ));
        }
        if codes.contains(&i8::MIN) {
            return Err(Error::InvalidArgument("activation code -128 is out of range".into()));
        }
        Ok(Self {
            tokens,
            channels,
            codes,
            scales,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn token_codes(&self, j: usize) -> &[i8] {
        &self.codes[j * self.channels..(j + 1) * self.channels]
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }
}

/// Sigmoid schedule `λ(t) = 1 / (1 + exp(-α t + β))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantSchedule {
    pub alpha: f64,
    pub beta: f64,
    pub step: u64,
}

impl QuantSchedule {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) || !beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "schedule needs finite alpha > 0 and finite beta, got ({alpha}, {beta})"
            )));
        }
        Ok(Self {
            alpha,
            beta,
            step: 0,
        })
    }

    /// Schedule with `λ(0) = start` and `λ(at_step) = end`.
    pub fn spanning(start: f64, end: f64, at_step: f64) -> Result<Self> {
        if !(0.0 < start && start < end && end < 1.0 && at_step > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cannot span lambda {start} -> {end} over {at_step} steps"
            )));
        }
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let beta = -logit(start);
        let alpha = (logit(end) + beta) / at_step;
        Self::new(alpha, beta)
    }

    pub fn at(self, step: u64) -> Self {
        Self { step, ..self }
    }

    /// λ at the current step.
    pub fn lambda(&self) -> f64 {
        self.lambda_at(self.step as f64)
    }

    /// λ at a real-valued step. Evaluated as `σ(α (t - β/α))`, which is the
    /// same function but hits 0.5 exactly at `t = β/α`.
    pub fn lambda_at(&self, t: f64) -> f64 {
        let midpoint = self.beta / self.alpha;
        1.0 / (1.0 + (-self.alpha * (t - midpoint)).exp())
    }
}

/// λ for a schedule; rejects non-positive slopes.
pub fn lambda_schedule(sched: &QuantSchedule) -> Result<f64> {
    if !(sched.alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "schedule alpha must be > 0, got {}",
            sched.alpha
        )));
    }
    Ok(sched.lambda())
}

/// Sign-packed embedding: bit `i` lives in word `i / 64` at position
/// `i % 64`; a set bit means `+1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryEmbedding {
    dim: usize,
    words: Vec<u64>,
}

impl BinaryEmbedding {
    pub fn words_for(dim: usize) -> usize {
        dim.div_ceil(64)
    }

    pub fn from_words(dim: usize, words: Vec<u64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Empty("binary embedding"));
        }
        if words.len() != Self::words_for(dim) {
            return Err(Error::shape(
                "BinaryEmbedding::from_words",
                format!("{} words for {dim} bits", words.len()),
            ));
        }
        let tail = dim % 64;
        if tail != 0 && words[words.len() - 1] >> tail != 0 {
            return Err(Error::malformed("binary embedding", "nonzero padding bits"));
        }
        Ok(Self { dim, words })
    }

    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Empty("binary embedding"));
        }
        let mut words = vec![0u64; Self::words_for(bits.len())];
        for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            words[i / 64] |= 1 << (i % 64);
        }
        Ok(Self {
            dim: bits.len(),
            words,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    /// The `±1` vector this embedding encodes.
    pub fn to_signs<T: Float>(&self) -> Vec<T> {
        (0..self.dim)
            .map(|i| if self.bit(i) { T::one() } else { -T::one() })
            .collect()
    }
}

pub(crate) fn abs_mean<T: Float>(values: &[T]) -> f64 {
    let sum: f64 = values.iter().map(|v| v.abs().to_f64().unwrap()).sum();
    sum / values.len() as f64
}

/// `round(clamp(w / (gamma + eps), -1, 1))`.
#[inline]
pub(crate) fn ternary_code(w: f64, gamma: f64) -> i8 {
    (w / (gamma + TERNARY_EPS)).clamp(-1.0, 1.0).round() as i8
}

/// Largest code magnitude for a symmetric `bits`-wide integer.
#[inline]
pub(crate) fn qmax(bits: u32) -> f64 {
    ((1i32 << (bits - 1)) - 1) as f64
}

/// Code for `x` in a row whose largest magnitude is `max_abs`.
///
/// `x / s` with `s = max_abs / qmax` is evaluated as `x * qmax / max_abs`
/// so that exact ties stay exact.
#[inline]
pub(crate) fn act_code(x: f64, max_abs: f64, qmax: f64) -> i8 {
    if max_abs == 0.0 {
        return 0;
    }
    (x * qmax / max_abs).round().clamp(-qmax, qmax) as i8
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "activation bit width {bits} outside [2, 8]"
        )));
    }
    Ok(())
}

/// Abs-mean ternary quantization of a whole weight matrix.
pub fn ternary_quantize(w: &Matrix<f32>) -> Result<TernaryTensor> {
    if w.is_empty() {
        return Err(Error::Empty("weight matrix"));
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("weight matrix"));
    }
    let gamma = abs_mean(w.as_slice());
    let codes = w
        .as_slice()
        .iter()
        .map(|&v| ternary_code(v as f64, gamma))
        .collect();
    Ok(TernaryTensor {
        rows: w.rows(),
        cols: w.cols(),
        codes,
        gamma: gamma as f32,
    })
}

pub fn ternary_dequantize(t: &TernaryTensor) -> Matrix<f32> {
    let data = t.codes.iter().map(|&c| t.gamma * c as f32).collect();
    Matrix::from_vec(t.rows, t.cols, data).expect("shape checked at construction")
}

/// Per-token symmetric quantization; one scale per row of `x`.
pub fn act_quantize(x: &Matrix<f32>, bits: u32) -> Result<QuantizedActivation> {
    check_bits(bits)?;
    if !x.is_finite() {
        return Err(Error::NonFinite("activation matrix"));
    }
    let q = qmax(bits);
    let mut codes = Vec::with_capacity(x.len());
    let mut scales = Vec::with_capacity(x.rows());
    for j in 0..x.rows() {
        let row = x.row(j);
        let max_abs = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        scales.push(max_abs / q as f32);
        codes.extend(row.iter().map(|&v| act_code(v as f64, max_abs as f64, q)));
    }
    Ok(QuantizedActivation {
        tokens: x.rows(),
        channels: x.cols(),
        codes,
        scales,
    })
}

pub fn act_dequantize(q: &QuantizedActivation) -> Matrix<f32> {
    Matrix::from_fn(q.tokens, q.channels, |j, c| {
        q.scales[j] * q.codes[j * q.channels + c] as f32
    })
}

/// `(1 - λ) W + λ Q(W)`.
pub fn blend_weights(w: &Matrix<f32>, lambda: f32) -> Result<Matrix<f32>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "blend lambda {lambda} outside [0, 1]"
        )));
    }
    let q = ternary_dequantize(&ternary_quantize(w)?);
    w.zip_with(&q, "blend_weights", |a, b| (1.0 - lambda) * a + lambda * b)
}

/// Straight-through gradient: passes `grad_out` where `|W| <= gamma`.
pub fn ste_weight_grad(
    grad_out: &Matrix<f32>,
    w: &Matrix<f32>,
    gamma: f32,
) -> Result<Matrix<f32>> {
    grad_out.zip_with(w, "ste_weight_grad", |g, wi| {
        if wi.abs() <= gamma {
            g
        } else {
            0.0
        }
    })
}

/// Bit `i` is set iff `y_i > 0`; zero maps to `-1`.
pub fn sign_binarize<T: Float>(y: &[T]) -> Result<BinaryEmbedding> {
    if y.is_empty() {
        return Err(Error::Empty("embedding vector"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding vector"));
    }
    let bits: Vec<bool> = y.iter().map(|&v| v > T::zero()).collect();
    BinaryEmbedding::from_bits(&bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(v: &[f32]) -> Matrix<f32> {
        Matrix::from_vec(1, v.len(), v.to_vec()).unwrap()
    }

    /// Scalar transcription of abs-mean ternarization, used as the oracle.
    fn ternary_oracle(w: &[f64]) -> (f64, Vec<i8>) {
        let gamma = w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64;
        let codes = w
            .iter()
            .map(|&v| {
                let x = (v / (gamma + 1e-6)).max(-1.0).min(1.0);
                let r = if x >= 0.0 { (x + 0.5).floor() } else { -((-x + 0.5).floor()) };
                r as i8
            })
            .collect();
        (gamma, codes)
    }

    #[test]
    fn ternary_worked_example() {
        let w = [0.5, -0.2, 1.5, -1.0];
        let (g, c) = ternary_oracle(&w);
        assert!((g - 0.8).abs() < 1e-12);
        assert_eq!(c, vec![1, 0, 1, -1]);

        let t = ternary_quantize(&row(&[0.5, -0.2, 1.5, -1.0])).unwrap();
        assert!((t.gamma() - 0.8).abs() < 1e-7);
        assert_eq!(t.codes(), &c[..]);
        let d = ternary_dequantize(&t);
        assert_eq!(d.as_slice(), &[0.8, 0.0, 0.8, -0.8]);
    }

    #[test]
    fn ternary_zero_and_symmetric() {
        let t = ternary_quantize(&row(&[0.0; 4])).unwrap();
        assert_eq!(t.gamma(), 0.0);
        assert_eq!(t.codes(), &[0, 0, 0, 0]);
        assert!(ternary_dequantize(&t).as_slice().iter().all(|&v| v == 0.0));

        for c in [1e-3f32, 0.7, 5.0, 123.0] {
            let t = ternary_quantize(&row(&[c, -c])).unwrap();
            assert_eq!(t.gamma(), c);
            assert_eq!(t.codes(), &[1, -1]);
        }
    }

    #[test]
    fn ternary_errors() {
        assert!(matches!(
            ternary_quantize(&Matrix::zeros(0, 3)),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            ternary_quantize(&row(&[1.0, f32::NAN])),
            Err(Error::NonFinite(_))
        ));
        assert!(TernaryTensor::new(1, 2, vec![2, 0], 1.0).is_err());
    }

    #[test]
    fn dequantize_examples() {
        let t = TernaryTensor::new(1, 3, vec![1, 0, -1], 0.8).unwrap();
        assert_eq!(ternary_dequantize(&t).as_slice(), &[0.8, 0.0, -0.8]);
        let z = TernaryTensor::new(1, 3, vec![1, 1, -1], 0.0).unwrap();
        assert_eq!(ternary_dequantize(&z).as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn act_quantize_examples() {
        let q = act_quantize(&row(&[127.0, -64.0, 1.0]), 8).unwrap();
        assert_eq!(q.scales(), &[1.0]);
        assert_eq!(q.codes(), &[127, -64, 1]);
        assert_eq!(act_dequantize(&q).as_slice(), &[127.0, -64.0, 1.0]);

        let q = act_quantize(&row(&[0.0, 0.0, 0.0]), 8).unwrap();
        assert_eq!(q.scales(), &[0.0]);
        assert_eq!(q.codes(), &[0, 0, 0]);
        assert_eq!(act_dequantize(&q).as_slice(), &[0.0, 0.0, 0.0]);

        // X/s = [127, -63.5, 31.75]; the tie rounds away from zero.
        let q = act_quantize(&row(&[2.54, -1.27, 0.635]), 8).unwrap();
        assert!((q.scales()[0] - 0.02).abs() < 1e-9);
        assert_eq!(q.codes(), &[127, -64, 32]);
        let d = act_dequantize(&q);
        for (got, want) in d.as_slice().iter().zip([2.54f32, -1.28, 0.64]) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn act_quantize_errors() {
        assert!(act_quantize(&row(&[1.0]), 1).is_err());
        assert!(act_quantize(&row(&[1.0]), 9).is_err());
        assert!(matches!(
            act_quantize(&row(&[f32::INFINITY]), 8),
            Err(Error::NonFinite(_))
        ));
        let q = act_quantize(&row(&[3.0, -1.0]), 2).unwrap();
        assert_eq!(q.codes(), &[1, 0]);
    }

    #[test]
    fn schedule_examples() {
        let s = QuantSchedule::new(1.0, 5.0).unwrap();
        assert!((s.lambda() - 1.0 / (1.0 + 5f64.exp())).abs() < 1e-15);
        assert!((s.lambda() - 0.006693).abs() < 1e-6);
        assert_eq!(s.lambda_at(5.0), 0.5);
        let s = QuantSchedule::new(0.37, 2.9).unwrap();
        assert_eq!(s.lambda_at(2.9 / 0.37), 0.5);
        assert!((1.0 - s.lambda_at((40.0 + 2.9) / 0.37)).abs() <= 1e-15);
        assert!(QuantSchedule::new(0.0, 1.0).is_err());
        let bad = QuantSchedule {
            alpha: -1.0,
            beta: 0.0,
            step: 3,
        };
        assert!(lambda_schedule(&bad).is_err());
    }

    #[test]
    fn schedule_spanning_hits_endpoints() {
        let s = QuantSchedule::spanning(0.01, 0.99, 60.0).unwrap();
        assert!((s.lambda_at(0.0) - 0.01).abs() < 1e-12);
        assert!((s.lambda_at(60.0) - 0.99).abs() < 1e-12);
    }

    #[test]
    fn blend_examples() {
        let w = row(&[0.5, -0.2, 1.5, -1.0]);
        assert_eq!(blend_weights(&w, 0.0).unwrap(), w);
        assert_eq!(
            blend_weights(&w, 1.0).unwrap().as_slice(),
            &[0.8, 0.0, 0.8, -0.8]
        );
        let half = blend_weights(&w, 0.5).unwrap();
        for (got, want) in half.as_slice().iter().zip([0.65f32, -0.1, 1.15, -0.9]) {
            assert!((got - want).abs() < 1e-6);
        }
        assert!(blend_weights(&w, 1.5).is_err());
        assert!(blend_weights(&w, -0.1).is_err());
    }

    #[test]
    fn ste_mask_examples() {
        let g = row(&[3.0, 4.0]);
        let w = row(&[0.5, 2.0]);
        assert_eq!(ste_weight_grad(&g, &w, 1.0).unwrap().as_slice(), &[3.0, 0.0]);
        assert_eq!(
            ste_weight_grad(&g, &w, f32::INFINITY).unwrap().as_slice(),
            &[3.0, 4.0]
        );
        let b = ste_weight_grad(&row(&[7.0]), &row(&[-1.0]), 1.0).unwrap();
        assert_eq!(b.as_slice(), &[7.0]);
        assert!(ste_weight_grad(&g, &row(&[1.0]), 1.0).is_err());
    }

    #[test]
    fn ste_matches_surrogate_finite_differences() {
        // Surrogate γ·clamp(W/(γ+ε), -1, 1) with γ held constant.
        let gamma = 0.6f64;
        let surrogate = |w: f64| gamma * (w / (gamma + TERNARY_EPS)).clamp(-1.0, 1.0);
        let h = 1e-4;
        for &w in &[-1.3, -0.59, -0.2, 0.0, 0.31, 0.55, 0.9, 2.0] {
            let fd = (surrogate(w + h) - surrogate(w - h)) / (2.0 * h);
            let ste = ste_weight_grad(
                &row(&[1.0]),
                &row(&[w as f32]),
                gamma as f32,
            )
            .unwrap()
            .as_slice()[0] as f64;
            assert!((fd - ste).abs() <= 1e-4 * ste.abs().max(1.0), "w={w} fd={fd} ste={ste}");
        }
    }

    #[test]
    fn sign_examples() {
        let e = sign_binarize(&[0.3f32, -0.1, 0.0]).unwrap();
        assert_eq!(e.dim(), 3);
        assert_eq!((e.bit(0), e.bit(1), e.bit(2)), (true, false, false));
        let all = sign_binarize(&[0.1f64; 70]).unwrap();
        assert!((0..70).all(|i| all.bit(i)));
        assert_eq!(all.words()[1], (1u64 << 6) - 1);
        assert!(sign_binarize::<f32>(&[]).is_err());
        assert!(sign_binarize(&[f32::NAN]).is_err());
    }

    #[test]
    fn embedding_padding_is_validated() {
        assert!(BinaryEmbedding::from_words(3, vec![0b111]).is_ok());
        assert!(BinaryEmbedding::from_words(3, vec![0b1000]).is_err());
        assert!(BinaryEmbedding::from_words(64, vec![u64::MAX]).is_ok());
        assert!(BinaryEmbedding::from_words(65, vec![0]).is_err());
    }

    proptest! {
        #[test]
        fn code_idempotence(w in prop::collection::vec(-5.0f32..5.0, 1..64)) {
            let m = row(&w);
            let t = ternary_quantize(&m).unwrap();
            let again = ternary_quantize(&ternary_dequantize(&t)).unwrap();
            prop_assert_eq!(t.codes(), again.codes());
        }

        #[test]
        fn activation_error_within_half_scale(x in prop::collection::vec(-100.0f32..100.0, 1..48)) {
            let m = row(&x);
            let q = act_quantize(&m, 8).unwrap();
            let s = q.scales()[0] as f64;
            let d = act_dequantize(&q);
            for (a, b) in d.as_slice().iter().zip(&x) {
                prop_assert!(((*a as f64) - (*b as f64)).abs() <= s / 2.0 * (1.0 + 1e-5));
            }
        }

        #[test]
        fn blend_is_affine(w in prop::collection::vec(-3.0f32..3.0, 1..32), lambda in 0.0f32..=1.0) {
            let m = row(&w);
            let q = ternary_dequantize(&ternary_quantize(&m).unwrap());
            let b = blend_weights(&m, lambda).unwrap();
            for ((bi, wi), qi) in b.as_slice().iter().zip(&w).zip(q.as_slice()) {
                let affine = wi + lambda * (qi - wi);
                prop_assert!((bi - affine).abs() <= 4.0 * f32::EPSILON * wi.abs().max(qi.abs()).max(1.0));
            }
        }

        #[test]
        fn schedule_strictly_monotone(alpha in 0.01f64..2.0, beta in -5.0f64..5.0, t1 in 0.0f64..100.0, dt in 0.01f64..10.0) {
            let s = QuantSchedule::new(alpha, beta).unwrap();
            let z = alpha * (t1 + dt) - beta;
            prop_assume!(z < 30.0 && alpha * t1 - beta > -30.0);
            prop_assert!(s.lambda_at(t1) < s.lambda_at(t1 + dt));
        }

        #[test]
        fn sign_round_trip(bits in prop::collection::vec(any::<bool>(), 1..300), c in 0.01f32..100.0) {
            let e = BinaryEmbedding::from_bits(&bits).unwrap();
            let signs: Vec<f32> = e.to_signs();
            prop_assert_eq!(&sign_binarize(&signs).unwrap(), &e);
            let scaled: Vec<f32> = signs.iter().map(|v| v * c).collect();
            prop_assert_eq!(&sign_binarize(&scaled).unwrap(), &e);
        }
    }
}
