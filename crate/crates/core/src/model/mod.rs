//! A small vision transformer with extra LayerNorms before the attention
//! output projection and before the FFN down-projection, runnable in float,
//! progressive-blend, and ternary inference modes.

mod forward;
mod io;

pub use forward::{
    attention_rows_are_stochastic, ffn_forward, gelu, layer_norm, mhsa_forward, ForwardTrace,
    Linear,
};
pub use io::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels::{pack, unpack, PackedTernary};
use crate::quantize::{ternary_dequantize, ternary_quantize, TernaryTensor};
use crate::tensor::Matrix;

/// How projections and their inputs are evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Float,
    /// `(1-λ)·x + λ·Q(x)` for both weights and projection inputs.
    Blend(f32),
    /// Ternary weights and 8-bit per-token activations through the packed
    /// integer kernel.
    Quantized,
}

impl Mode {
    pub fn parse(s: &str, lambda: f32) -> Result<Self> {
        match s {
            "float" => Ok(Mode::Float),
            "blend" => Ok(Mode::Blend(lambda)),
            "quantized" => Ok(Mode::Quantized),
            _ => Err(Error::InvalidArgument(format!(
                "mode {s:?} (expected float, blend or quantized)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub patch: usize,
    pub image: usize,
    pub channels: usize,
    /// Output embedding width (bits after binarization).
    pub embed_dim: usize,
    pub mode: Mode,
    /// Ternarize the patch-embedding projection as well as the blocks.
    pub quantize_patch_embed: bool,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            hidden: 64,
            ffn: 256,
            patch: 8,
            image: 32,
            channels: 3,
            embed_dim: 256,
            mode: Mode::Float,
            quantize_patch_embed: false,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.layers,
            self.heads,
            self.hidden,
            self.ffn,
            self.patch,
            self.image,
            self.channels,
            self.embed_dim,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.image % self.patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch {} does not tile image {}",
                self.patch, self.image
            )));
        }
        if let Mode::Blend(l) = self.mode {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::InvalidArgument(format!("blend lambda {l} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn grid(&self) -> usize {
        self.image / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// A projection weight `(out, in)`, either latent float or packed ternary.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Float(Matrix<f32>),
    Packed(PackedTernary),
}

impl Projection {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Projection::Float(m) => m.shape(),
            Projection::Packed(p) => (p.rows(), p.cols()),
        }
    }

    pub fn is_packed(&self) -> bool {
        matches!(self, Projection::Packed(_))
    }

    pub fn ternary(&self) -> Result<TernaryTensor> {
        match self {
            Projection::Float(m) => ternary_quantize(m),
            Projection::Packed(p) => unpack(p),
        }
    }

    /// The float weights the projection stands for: the latent matrix, or
    /// the dequantized ternary values.
    pub fn to_float(&self) -> Result<Matrix<f32>> {
        match self {
            Projection::Float(m) => Ok(m.clone()),
            Projection::Packed(p) => Ok(ternary_dequantize(&unpack(p)?)),
        }
    }

    pub fn packed(&self) -> Result<PackedTernary> {
        match self {
            Projection::Float(m) => Ok(pack(&ternary_quantize(m)?)),
            Projection::Packed(p) => Ok(p.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            weight: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }
}

/// One transformer block. All LayerNorms and biases stay in float.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub norm1: LayerNorm,
    pub wq: Projection,
    pub wk: Projection,
    pub wv: Projection,
    pub attn_norm: LayerNorm,
    pub wo: Projection,
    pub norm2: LayerNorm,
    pub w1: Projection,
    pub b1: Vec<f32>,
    pub ffn_norm: LayerNorm,
    pub w2: Projection,
    pub b2: Vec<f32>,
}

impl BlockWeights {
    pub fn projections(&self) -> [&Projection; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.w2]
    }

    fn projections_mut(&mut self) -> [&mut Projection; 6] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.w2,
        ]
    }
}

/// Aggregation head: LayerNorm on the class token, then a float linear map
/// to `embed_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub norm: LayerNorm,
    pub proj: Matrix<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTWeights {
    pub patch_embed: Projection,
    pub patch_bias: Vec<f32>,
    pub cls_token: Vec<f32>,
    pub pos_embed: Matrix<f32>,
    pub blocks: Vec<BlockWeights>,
    pub head: HeadWeights,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Matrix<f32> {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

impl ViTWeights {
    /// Random initialization: projections `N(0, 1/fan_in)`, embeddings
    /// `N(0, 0.02²)`, LayerNorms identity, biases zero.
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let f = config.ffn;
        let proj = |rng: &mut ChaCha8Rng, out: usize, inp: usize| {
            Projection::Float(normal_matrix(rng, out, inp, 1.0 / (inp as f32).sqrt()))
        };
        let patch_embed = proj(&mut rng, d, config.patch_dim());
        let cls_token = normal_matrix(&mut rng, 1, d, 0.02).into_vec();
        let pos_embed = normal_matrix(&mut rng, config.tokens(), d, 0.02);
        let blocks = (0..config.layers)
            .map(|_| BlockWeights {
                norm1: LayerNorm::identity(d),
                wq: proj(&mut rng, d, d),
                wk: proj(&mut rng, d, d),
                wv: proj(&mut rng, d, d),
                attn_norm: LayerNorm::identity(d),
                wo: proj(&mut rng, d, d),
                norm2: LayerNorm::identity(d),
                w1: proj(&mut rng, f, d),
                b1: vec![0.0; f],
                ffn_norm: LayerNorm::identity(f),
                w2: proj(&mut rng, d, f),
                b2: vec![0.0; d],
            })
            .collect();
        let head = HeadWeights {
            norm: LayerNorm::identity(d),
            proj: normal_matrix(&mut rng, config.embed_dim, d, 1.0 / (d as f32).sqrt()),
        };
        Ok(Self {
            patch_embed,
            patch_bias: vec![0.0; d],
            cls_token,
            pos_embed,
            blocks,
            head,
        })
    }

    /// Checks every tensor shape against `config`.
    pub fn check(&self, config: &ViTConfig) -> Result<()> {
        let d = config.hidden;
        let f = config.ffn;
        let bad = |name: &str, got: String| {
            Err(Error::shape("ViTWeights::check", format!("{name}: {got}")))
        };
        if self.patch_embed.shape() != (d, config.patch_dim()) {
            return bad("patch_embed", format!("{:?}", self.patch_embed.shape()));
        }
        if self.patch_bias.len() != d || self.cls_token.len() != d {
            return bad("patch_bias/cls_token", "length".into());
        }
        if self.pos_embed.shape() != (config.tokens(), d) {
            return bad("pos_embed", format!("{:?}", self.pos_embed.shape()));
        }
        if self.blocks.len() != config.layers {
            return bad("blocks", format!("{} blocks", self.blocks.len()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let shapes = [(d, d), (d, d), (d, d), (d, d), (f, d), (d, f)];
            for (p, s) in b.projections().iter().zip(shapes) {
                if p.shape() != s {
                    return bad("block projection", format!("block {i}: {:?} != {s:?}", p.shape()));
                }
            }
            let norms = [
                (&b.norm1, d),
                (&b.attn_norm, d),
                (&b.norm2, d),
                (&b.ffn_norm, f),
            ];
            for (n, want) in norms {
                if n.weight.len() != want || n.bias.len() != want {
                    return bad("layer norm", format!("block {i}"));
                }
            }
            if b.b1.len() != f || b.b2.len() != d {
                return bad("ffn bias", format!("block {i}"));
            }
        }
        if self.head.norm.dim() != d || self.head.proj.shape() != (config.embed_dim, d) {
            return bad("head", format!("{:?}", self.head.proj.shape()));
        }
        if config.mode == Mode::Quantized {
            let all_packed = self
                .blocks
                .iter()
                .all(|b| b.projections().iter().all(|p| p.is_packed()));
            if !all_packed || (config.quantize_patch_embed && !self.patch_embed.is_packed()) {
                return Err(Error::malformed(
                    "model",
                    "quantized mode requires packed projection weights",
                ));
            }
        }
        Ok(())
    }

    /// Replaces every ternarizable projection with its packed form.
    pub fn quantized(&self, quantize_patch_embed: bool) -> Result<Self> {
        let mut out = self.clone();
        for b in &mut out.blocks {
            for p in b.projections_mut() {
                *p = Projection::Packed(p.packed()?);
            }
        }
        if quantize_patch_embed {
            out.patch_embed = Projection::Packed(out.patch_embed.packed()?);
        }
        Ok(out)
    }

    /// `(float parameters, ternary parameters)` counts.
    pub fn parameter_census(&self) -> (usize, usize) {
        let mut float = self.patch_bias.len() + self.cls_token.len() + self.pos_embed.len();
        let mut ternary = 0;
        let mut count = |p: &Projection| {
            let (r, c) = p.shape();
            match p {
                Projection::Float(_) => float += r * c,
                Projection::Packed(_) => ternary += r * c,
            }
        };
        count(&self.patch_embed);
        for b in &self.blocks {
            b.projections().into_iter().for_each(&mut count);
        }
        for b in &self.blocks {
            float += [&b.norm1, &b.attn_norm, &b.norm2, &b.ffn_norm]
                .iter()
                .map(|n| 2 * n.dim())
                .sum::<usize>();
            float += b.b1.len() + b.b2.len();
        }
        float += 2 * self.head.norm.dim() + self.head.proj.len();
        (float, ternary)
    }
}

/// Configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ViT {
    pub config: ViTConfig,
    pub weights: ViTWeights,
}

impl ViT {
    pub fn new(config: ViTConfig, weights: ViTWeights) -> Result<Self> {
        config.validate()?;
        weights.check(&config)?;
        Ok(Self { config, weights })
    }

    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        let weights = ViTWeights::init(&config, seed)?;
        Self::new(config, weights)
    }

    /// Packed ternary copy running in [`Mode::Quantized`].
    pub fn to_quantized(&self) -> Result<Self> {
        let weights = self.weights.quantized(self.config.quantize_patch_embed)?;
        let config = ViTConfig {
            mode: Mode::Quantized,
            ..self.config.clone()
        };
        Self::new(config, weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_desk_scale() {
        let c = ViTConfig::default();
        c.validate().unwrap();
        assert_eq!((c.layers, c.heads, c.hidden, c.ffn), (4, 4, 64, 256));
        assert_eq!((c.patch, c.image, c.embed_dim), (8, 32, 256));
        assert_eq!(c.tokens(), 17);
        assert_eq!(c.patch_dim(), 192);
    }

    #[test]
    fn config_validation() {
        let bad_heads = ViTConfig {
            heads: 3,
            ..ViTConfig::default()
        };
        assert!(bad_heads.validate().is_err());
        let bad_patch = ViTConfig {
            patch: 5,
            ..ViTConfig::default()
        };
        assert!(bad_patch.validate().is_err());
        let zero = ViTConfig {
            layers: 0,
            ..ViTConfig::default()
        };
        assert!(zero.validate().is_err());
        let blend = ViTConfig {
            mode: Mode::Blend(1.5),
            ..ViTConfig::default()
        };
        assert!(blend.validate().is_err());
    }

    #[test]
    fn quantized_model_packs_every_block_projection() {
        let m = ViT::init(ViTConfig::default(), 1).unwrap();
        let q = m.to_quantized().unwrap();
        assert_eq!(q.config.mode, Mode::Quantized);
        assert!(q.weights.blocks.iter().all(|b| b.projections().iter().all(|p| p.is_packed())));
        assert!(!q.weights.patch_embed.is_packed());
        let (float, ternary) = q.weights.parameter_census();
        assert_eq!(ternary, 4 * (4 * 64 * 64 + 2 * 64 * 256));
        assert_eq!(float + ternary, {
            let (f, t) = m.weights.parameter_census();
            f + t
        });
    }

    #[test]
    fn quantized_mode_rejects_float_weights() {
        let m = ViT::init(ViTConfig::default(), 1).unwrap();
        let config = ViTConfig {
            mode: Mode::Quantized,
            ..ViTConfig::default()
        };
        assert!(ViT::new(config, m.weights).is_err());
    }
}
