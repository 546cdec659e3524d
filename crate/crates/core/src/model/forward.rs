use crate::error::{Error, Result};
use crate::image::Image;
use crate::kernels::ternary_linear;
use crate::quantize::{act_quantize, sign_binarize, BinaryEmbedding, ACT_BITS};
use crate::tensor::Matrix;

use super::{BlockWeights, LayerNorm, Mode, Projection, ViT, ViTConfig};

pub(crate) const LN_EPS: f64 = 1e-5;

/// How a projection is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Linear {
    Float,
    Blend(f32),
    /// Packed ternary weights, int8 activations, integer accumulation.
    Integer,
    /// Dequantized ternary weights times quantize-dequantized activations
    /// in float. Same math as `Integer` without the integer kernel.
    Simulated,
}

impl From<Mode> for Linear {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Float => Linear::Float,
            Mode::Blend(l) => Linear::Blend(l),
            Mode::Quantized => Linear::Integer,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Class token after the last block (before the head).
    pub cls: Vec<f32>,
    /// Patch tokens after the last block, `(num_patches, hidden)`.
    pub patches: Matrix<f32>,
    /// Per-layer attention maps averaged over heads, `(tokens, tokens)`.
    pub attention: Vec<Matrix<f32>>,
}

/// Row-wise LayerNorm. A constant row normalizes to zero, so the output is
/// the shift vector.
pub fn layer_norm(x: &Matrix<f32>, ln: &LayerNorm) -> Result<Matrix<f32>> {
    if ln.dim() != x.cols() {
        return Err(Error::shape(
            "layer_norm",
            format!("{} features vs norm of {}", x.cols(), ln.dim()),
        ));
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let n = x.cols() as f64;
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            let z = (row[c] as f64 - mean) * inv;
            *o = (z * ln.weight[c] as f64 + ln.bias[c] as f64) as f32;
        }
    }
    Ok(out)
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let k = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())) as f32
}

fn ternary_f64(w: &Projection) -> Result<Matrix<f64>> {
    let t = w.ternary()?;
    let gamma = t.gamma() as f64;
    Matrix::from_vec(t.rows(), t.cols(), t.codes().iter().map(|&c| gamma * c as f64).collect())
}

/// `s_j * code` without rounding back to `f32`, so every float path sees the
/// same dequantized values the integer kernel accumulates.
fn act_roundtrip_f64(x: &Matrix<f32>) -> Result<Matrix<f64>> {
    let q = act_quantize(x, ACT_BITS)?;
    Ok(Matrix::from_fn(q.tokens(), q.channels(), |j, c| {
        q.scales()[j] as f64 * q.token_codes(j)[c] as f64
    }))
}

fn lerp(a: &Matrix<f64>, b: &Matrix<f64>, lambda: f64) -> Result<Matrix<f64>> {
    a.zip_with(b, "blend", |x, y| (1.0 - lambda) * x + lambda * y)
}

/// `x · Wᵀ` for token-major `x` under the given evaluation. Float paths
/// accumulate in `f64` and round once.
pub(crate) fn project(x: &Matrix<f32>, w: &Projection, how: Linear) -> Result<Matrix<f32>> {
    let out = match how {
        Linear::Float => x.cast::<f64>().matmul_t(&w.to_float()?.cast())?,
        Linear::Blend(lambda) if lambda == 0.0 => {
            x.cast::<f64>().matmul_t(&w.to_float()?.cast())?
        }
        Linear::Blend(lambda) => {
            let lambda = lambda as f64;
            let weights = match w {
                Projection::Float(m) => lerp(&m.cast(), &ternary_f64(w)?, lambda)?,
                Projection::Packed(_) => ternary_f64(w)?,
            };
            let acts = lerp(&x.cast(), &act_roundtrip_f64(x)?, lambda)?;
            acts.matmul_t(&weights)?
        }
        Linear::Simulated => act_roundtrip_f64(x)?.matmul_t(&ternary_f64(w)?)?,
        Linear::Integer => {
            let q = act_quantize(x, ACT_BITS)?;
            return ternary_linear(&q, &w.packed()?);
        }
    };
    Ok(out.cast())
}

fn softmax_rows(x: &mut Matrix<f32>) {
    for r in 0..x.rows() {
        let row = x.row_mut(r);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            let e = ((*v - max) as f64).exp();
            *v = e as f32;
            sum += e;
        }
        for v in row.iter_mut() {
            *v = (*v as f64 / sum) as f32;
        }
    }
}

/// Multi-head self-attention on `x` (already pre-normed by the caller):
/// per-head softmax attention, concatenation, LayerNorm, output
/// projection. Returns the output and the head-averaged attention map.
pub fn mhsa_forward(
    x: &Matrix<f32>,
    block: &BlockWeights,
    heads: usize,
    how: Linear,
) -> Result<(Matrix<f32>, Matrix<f32>)> {
    let d = block.wq.shape().1;
    if x.cols() != d || heads == 0 || d % heads != 0 {
        return Err(Error::shape(
            "mhsa_forward",
            format!("input {:?} for hidden {d} / {heads} heads", x.shape()),
        ));
    }
    let q = project(x, &block.wq, how)?;
    let k = project(x, &block.wk, how)?;
    let v = project(x, &block.wv, how)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let n = x.rows();
    let mut mean_attn = Matrix::zeros(n, n);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(lo, hi);
        let kh = k.slice_cols(lo, hi);
        let mut scores = qh.matmul_t(&kh)?.map(|s| s * scale);
        softmax_rows(&mut scores);
        outs.push(scores.matmul(&v.slice_cols(lo, hi))?);
        for (m, a) in mean_attn.as_mut_slice().iter_mut().zip(scores.as_slice()) {
            *m += a / heads as f32;
        }
    }
    let concat = layer_norm(&Matrix::concat_cols(&outs)?, &block.attn_norm)?;
    Ok((project(&concat, &block.wo, how)?, mean_attn))
}

/// `LN(GELU(x W1ᵀ + b1)) W2ᵀ + b2`.
pub fn ffn_forward(x: &Matrix<f32>, block: &BlockWeights, how: Linear) -> Result<Matrix<f32>> {
    if x.cols() != block.w1.shape().1 {
        return Err(Error::shape(
            "ffn_forward",
            format!("input {:?} for w1 {:?}", x.shape(), block.w1.shape()),
        ));
    }
    let h = project(x, &block.w1, how)?.add_row(&block.b1)?.map(gelu);
    let h = layer_norm(&h, &block.ffn_norm)?;
    project(&h, &block.w2, how)?.add_row(&block.b2)
}

/// Pre-norm residual block. Returns the new tokens and the attention map.
pub(crate) fn block_forward(
    x: &Matrix<f32>,
    block: &BlockWeights,
    heads: usize,
    how: Linear,
) -> Result<(Matrix<f32>, Matrix<f32>)> {
    let (a, attn) = mhsa_forward(&layer_norm(x, &block.norm1)?, block, heads, how)?;
    let x = x.add(&a)?;
    let f = ffn_forward(&layer_norm(&x, &block.norm2)?, block, how)?;
    Ok((x.add(&f)?, attn))
}

/// Every row sums to one within `tol` and has no negative entries.
pub fn attention_rows_are_stochastic(m: &Matrix<f32>, tol: f64) -> bool {
    (0..m.rows()).all(|r| {
        let row = m.row(r);
        row.iter().all(|&v| v >= 0.0)
            && (row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() <= tol
    })
}

impl ViTConfig {
    pub fn check_image(&self, image: &Image) -> Result<()> {
        if image.dims() != (self.channels, self.image, self.image) {
            return Err(Error::shape(
                "vit_forward",
                format!(
                    "image {:?}, model expects ({}, {}, {})",
                    image.dims(),
                    self.channels,
                    self.image,
                    self.image
                ),
            ));
        }
        Ok(())
    }

    /// Flattens non-overlapping patches in raster order; each patch vector
    /// is ordered `(channel, dy, dx)`.
    pub fn patchify(&self, image: &Image) -> Result<Matrix<f32>> {
        self.check_image(image)?;
        let p = self.patch;
        let g = self.grid();
        Ok(Matrix::from_fn(g * g, self.patch_dim(), |i, j| {
            let (py, px) = (i / g, i % g);
            let c = j / (p * p);
            let (dy, dx) = ((j / p) % p, j % p);
            image.get(c, py * p + dy, px * p + dx)
        }))
    }
}

impl ViT {
    pub fn patchify(&self, image: &Image) -> Result<Matrix<f32>> {
        self.config.patchify(image)
    }

    fn patch_linear(&self, how: Linear) -> Linear {
        if self.config.quantize_patch_embed {
            how
        } else {
            Linear::Float
        }
    }

    /// Patch embedding, class token and positional embedding:
    /// `(tokens, hidden)` with the class token in row 0.
    pub fn embed_tokens(&self, image: &Image, how: Linear) -> Result<Matrix<f32>> {
        let w = &self.weights;
        let patches = project(&self.patchify(image)?, &w.patch_embed, self.patch_linear(how))?
            .add_row(&w.patch_bias)?;
        let cls = Matrix::from_vec(1, w.cls_token.len(), w.cls_token.clone())?;
        Matrix::concat_rows(&[cls, patches])?.add(&w.pos_embed)
    }

    /// Runs blocks `range` on a token matrix, collecting attention maps.
    pub fn run_blocks(
        &self,
        mut x: Matrix<f32>,
        range: std::ops::Range<usize>,
        how: Linear,
    ) -> Result<(Matrix<f32>, Vec<Matrix<f32>>)> {
        let mut maps = Vec::with_capacity(range.len());
        for block in &self.weights.blocks[range] {
            let (next, attn) = block_forward(&x, block, self.config.heads, how)?;
            x = next;
            maps.push(attn);
        }
        Ok((x, maps))
    }

    pub fn trace_from_tokens(x: Matrix<f32>, attention: Vec<Matrix<f32>>) -> ForwardTrace {
        ForwardTrace {
            cls: x.row(0).to_vec(),
            patches: x.slice_rows(1, x.rows()),
            attention,
        }
    }

    /// Forward pass in the configured mode.
    pub fn forward(&self, image: &Image) -> Result<ForwardTrace> {
        self.forward_with(image, self.config.mode.into())
    }

    pub fn forward_with(&self, image: &Image, how: Linear) -> Result<ForwardTrace> {
        let x = self.embed_tokens(image, how)?;
        let (x, attention) = self.run_blocks(x, 0..self.config.layers, how)?;
        Ok(Self::trace_from_tokens(x, attention))
    }

    /// Continuous head output for a class token.
    pub fn head(&self, cls: &[f32]) -> Result<Vec<f32>> {
        let x = Matrix::from_vec(1, cls.len(), cls.to_vec())?;
        let z = layer_norm(&x, &self.weights.head.norm)?;
        Ok(z.matmul_t(&self.weights.head.proj)?.into_vec())
    }

    pub fn embedding(&self, image: &Image) -> Result<Vec<f32>> {
        self.head(&self.forward(image)?.cls)
    }

    pub fn binary_embedding(&self, image: &Image) -> Result<BinaryEmbedding> {
        sign_binarize(&self.embedding(image)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: &ViTConfig, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = c.channels * c.image * c.image;
        Image::new(c.channels, c.image, c.image, (0..n).map(|_| rng.random()).collect()).unwrap()
    }

    fn random_tokens(n: usize, d: usize, seed: u64) -> Matrix<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
    }

    fn small() -> ViTConfig {
        ViTConfig {
            layers: 2,
            heads: 2,
            hidden: 16,
            ffn: 32,
            patch: 4,
            image: 8,
            channels: 3,
            embed_dim: 64,
            ..ViTConfig::default()
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158808).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_of_constant_row_is_shift() {
        let ln = LayerNorm {
            weight: vec![2.0; 3],
            bias: vec![0.5, -1.0, 3.0],
        };
        let out = layer_norm(&Matrix::zeros(2, 3), &ln).unwrap();
        assert_eq!(out.row(0), &[0.5, -1.0, 3.0]);
        assert!(layer_norm(&Matrix::zeros(1, 4), &ln).is_err());
    }

    #[test]
    fn single_token_attention_is_one() {
        let m = ViT::init(small(), 3).unwrap();
        let x = random_tokens(1, 16, 1);
        let (_, attn) = mhsa_forward(&x, &m.weights.blocks[0], 2, Linear::Float).unwrap();
        assert_eq!(attn.shape(), (1, 1));
        assert!((attn.get(0, 0) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn float_equals_blend_at_zero() {
        let m = ViT::init(small(), 4).unwrap();
        let x = random_tokens(5, 16, 2);
        let b = &m.weights.blocks[0];
        let (f, fa) = mhsa_forward(&x, b, 2, Linear::Float).unwrap();
        let (g, ga) = mhsa_forward(&x, b, 2, Linear::Blend(0.0)).unwrap();
        assert!(f.max_abs_diff(&g) <= 1e-6 && fa.max_abs_diff(&ga) <= 1e-6);
        let f = ffn_forward(&x, b, Linear::Float).unwrap();
        let g = ffn_forward(&x, b, Linear::Blend(0.0)).unwrap();
        assert!(f.max_abs_diff(&g) <= 1e-6);
    }

    #[test]
    fn integer_matches_simulated_per_op() {
        let m = ViT::init(small(), 5).unwrap();
        let x = random_tokens(6, 16, 3);
        let b = &m.weights.blocks[1];
        let (i, ia) = mhsa_forward(&x, b, 2, Linear::Integer).unwrap();
        let (s, sa) = mhsa_forward(&x, b, 2, Linear::Simulated).unwrap();
        assert!(i.max_abs_diff(&s) <= 1e-4, "{}", i.max_abs_diff(&s));
        assert!(ia.max_abs_diff(&sa) <= 1e-4);
        let i = ffn_forward(&x, b, Linear::Integer).unwrap();
        let s = ffn_forward(&x, b, Linear::Simulated).unwrap();
        assert!(i.max_abs_diff(&s) <= 1e-4);
        let bl = ffn_forward(&x, b, Linear::Blend(1.0)).unwrap();
        assert!(bl.max_abs_diff(&s) <= 1e-4);
    }

    #[test]
    fn ffn_zero_weights_give_b2() {
        let mut m = ViT::init(small(), 6).unwrap();
        let b = &mut m.weights.blocks[0];
        b.w1 = Projection::Float(Matrix::zeros(32, 16));
        b.b1 = vec![0.0; 32];
        b.b2 = (0..16).map(|i| i as f32 * 0.1).collect();
        let x = random_tokens(3, 16, 4);
        for how in [Linear::Float, Linear::Blend(0.3)] {
            let out = ffn_forward(&x, &m.weights.blocks[0], how).unwrap();
            for r in 0..3 {
                for (c, &v) in out.row(r).iter().enumerate() {
                    assert!((v - c as f32 * 0.1).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zeroed_blocks_are_identity() {
        let mut m = ViT::init(small(), 7).unwrap();
        for b in &mut m.weights.blocks {
            for p in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo] {
                *p = Projection::Float(Matrix::zeros(16, 16));
            }
            b.w1 = Projection::Float(Matrix::zeros(32, 16));
            b.w2 = Projection::Float(Matrix::zeros(16, 32));
        }
        let img = random_image(&m.config, 1);
        let x = m.embed_tokens(&img, Linear::Float).unwrap();
        let (y, _) = m.run_blocks(x.clone(), 0..2, Linear::Float).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn forward_is_deterministic_and_stochastic() {
        let m = ViT::init(ViTConfig::default(), 8).unwrap();
        let img = random_image(&m.config, 2);
        let a = m.forward(&img).unwrap();
        let b = m.forward(&img).unwrap();
        assert_eq!(a, b);
        assert!(a.cls.iter().all(|v| v.is_finite()));
        assert_eq!(a.attention.len(), 4);
        assert!(a.attention.iter().all(|m| attention_rows_are_stochastic(m, 1e-5)));
        assert_eq!(a.patches.shape(), (16, 64));
    }

    #[test]
    fn patch_permutation_equivariance_without_positions() {
        let mut m = ViT::init(small(), 9).unwrap();
        m.weights.pos_embed = Matrix::zeros(5, 16);
        let img = random_image(&m.config, 3);
        // swap patch (0,0) with patch (1,1)
        let mut swapped = img.clone();
        for c in 0..3 {
            for dy in 0..4 {
                for dx in 0..4 {
                    let a = img.get(c, dy, dx);
                    let b = img.get(c, 4 + dy, 4 + dx);
                    swapped.set(c, dy, dx, b);
                    swapped.set(c, 4 + dy, 4 + dx, a);
                }
            }
        }
        let t1 = m.forward(&img).unwrap();
        let t2 = m.forward(&swapped).unwrap();
        assert!(t1.cls.iter().zip(&t2.cls).all(|(a, b)| (a - b).abs() < 1e-5));
        for (i, j) in [(0, 3), (1, 1), (2, 2), (3, 0)] {
            for (a, b) in t1.patches.row(i).iter().zip(t2.patches.row(j)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn image_dimension_mismatch_errors() {
        let m = ViT::init(small(), 1).unwrap();
        let img = Image::filled(3, 16, 16, 0.5);
        assert!(m.forward(&img).is_err());
        assert!(mhsa_forward(&random_tokens(2, 8, 1), &m.weights.blocks[0], 2, Linear::Float).is_err());
        assert!(ffn_forward(&random_tokens(2, 8, 1), &m.weights.blocks[0], Linear::Float).is_err());
    }
}
