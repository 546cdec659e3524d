//! The ViT forward pass recorded on a [`Tape`], over `f64` copies of the
//! model parameters.

use std::ops::Range;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{
    BlockWeights, HeadWeights, LayerNorm, Mode, Projection, ViT, ViTConfig, ViTWeights,
};
use crate::tensor::Matrix;

const PATCH_EMBED: usize = 0;
const PATCH_BIAS: usize = 1;
const CLS: usize = 2;
const POS: usize = 3;
const BLOCK_BASE: usize = 4;
const PER_BLOCK: usize = 16;

// offsets inside a block
const NORM1: usize = 0;
const WQ: usize = 2;
const WK: usize = 3;
const WV: usize = 4;
const ATTN_NORM: usize = 5;
const WO: usize = 7;
const NORM2: usize = 8;
const W1: usize = 10;
const B1: usize = 11;
const FFN_NORM: usize = 12;
const W2: usize = 14;
const B2: usize = 15;

const LN_EPS: f64 = 1e-5;

/// Flat list of model tensors in `f64`; vectors are `1×n` rows.
/// Projections hold latent float weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tensors: Vec<Matrix<f64>>,
    layers: usize,
}

fn row(v: &[f32]) -> Matrix<f64> {
    Matrix::from_fn(1, v.len(), |_, c| v[c] as f64)
}

fn unrow(m: &Matrix<f64>) -> Vec<f32> {
    m.as_slice().iter().map(|&v| v as f32).collect()
}

impl Params {
    pub fn from_vit(model: &ViT) -> Result<Self> {
        let w = &model.weights;
        let proj = |p: &Projection| -> Result<Matrix<f64>> { Ok(p.to_float()?.cast()) };
        let mut t = vec![proj(&w.patch_embed)?, row(&w.patch_bias), row(&w.cls_token), w.pos_embed.cast()];
        for b in &w.blocks {
            let norm = |n: &LayerNorm| [row(&n.weight), row(&n.bias)];
            t.extend(norm(&b.norm1));
            t.extend([proj(&b.wq)?, proj(&b.wk)?, proj(&b.wv)?]);
            t.extend(norm(&b.attn_norm));
            t.push(proj(&b.wo)?);
            t.extend(norm(&b.norm2));
            t.extend([proj(&b.w1)?, row(&b.b1)]);
            t.extend(norm(&b.ffn_norm));
            t.extend([proj(&b.w2)?, row(&b.b2)]);
        }
        t.extend([row(&w.head.norm.weight), row(&w.head.norm.bias), w.head.proj.cast()]);
        Ok(Self {
            tensors: t,
            layers: w.blocks.len(),
        })
    }

    /// Rebuilds a float model with the given evaluation mode.
    pub fn to_vit(&self, config: &ViTConfig, mode: Mode) -> Result<ViT> {
        let t = &self.tensors;
        let m = |i: usize| -> Matrix<f32> { t[i].cast() };
        let p = |i: usize| Projection::Float(m(i));
        let ln = |i: usize| LayerNorm {
            weight: unrow(&t[i]),
            bias: unrow(&t[i + 1]),
        };
        let blocks = (0..self.layers)
            .map(|l| {
                let b = BLOCK_BASE + l * PER_BLOCK;
                BlockWeights {
                    norm1: ln(b + NORM1),
                    wq: p(b + WQ),
                    wk: p(b + WK),
                    wv: p(b + WV),
                    attn_norm: ln(b + ATTN_NORM),
                    wo: p(b + WO),
                    norm2: ln(b + NORM2),
                    w1: p(b + W1),
                    b1: unrow(&t[b + B1]),
                    ffn_norm: ln(b + FFN_NORM),
                    w2: p(b + W2),
                    b2: unrow(&t[b + B2]),
                }
            })
            .collect();
        let h = self.head_range().start;
        let weights = ViTWeights {
            patch_embed: p(PATCH_EMBED),
            patch_bias: unrow(&t[PATCH_BIAS]),
            cls_token: unrow(&t[CLS]),
            pos_embed: m(POS),
            blocks,
            head: HeadWeights {
                norm: ln(h),
                proj: m(h + 2),
            },
        };
        ViT::new(
            ViTConfig {
                mode,
                ..config.clone()
            },
            weights,
        )
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors.iter().map(|t| t.shape()).collect()
    }

    pub fn block_range(&self, layer: usize) -> Range<usize> {
        let b = BLOCK_BASE + layer * PER_BLOCK;
        b..b + PER_BLOCK
    }

    pub fn head_range(&self) -> Range<usize> {
        let h = BLOCK_BASE + self.layers * PER_BLOCK;
        h..h + 3
    }

    /// Puts every tensor on the tape; `trainable(i)` selects parameters,
    /// the rest become constants.
    pub fn load(&self, tape: &mut Tape, trainable: impl Fn(usize) -> bool) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if trainable(i) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone)]
pub struct TapeTrace {
    pub tokens: Var,
    pub cls: Var,
    pub patches: Var,
    pub attention: Vec<Var>,
}

/// Records the ViT on a tape. `lambda` blends every ternarized projection
/// and its input activations; `lambda = 0` is the float model.
pub struct TapeViT<'a> {
    pub config: &'a ViTConfig,
    pub vars: &'a [Var],
    pub lambda: f64,
    /// Fixed per-parameter ternary scales; `None` recomputes `mean|W|`.
    pub gammas: Option<&'a [f64]>,
}

impl TapeViT<'_> {
    fn proj(&self, tape: &mut Tape, x: Var, at: usize, quantize: bool) -> Result<Var> {
        let w = self.vars[at];
        if !quantize || self.lambda == 0.0 {
            return tape.matmul_t(x, w);
        }
        let xq = tape.act_quant_blend(x, self.lambda);
        let wq = match self.gammas {
            Some(g) => tape.ternary_blend(w, self.lambda, g[at]),
            None => tape.ternary_blend_auto(w, self.lambda),
        };
        tape.matmul_t(xq, wq)
    }

    fn norm(&self, tape: &mut Tape, x: Var, at: usize) -> Result<Var> {
        tape.layer_norm(x, self.vars[at], self.vars[at + 1], LN_EPS)
    }

    /// Patch embedding, class token and positions for patch rows `patches`.
    pub fn embed(&self, tape: &mut Tape, patches: &Matrix<f64>) -> Result<Var> {
        let v = self.vars;
        let x = tape.constant(patches.clone());
        let e = self.proj(tape, x, PATCH_EMBED, self.config.quantize_patch_embed)?;
        let e = tape.add_row(e, v[PATCH_BIAS])?;
        let t = tape.concat_rows(&[v[CLS], e])?;
        tape.add(t, v[POS])
    }

    /// One pre-norm block; returns new tokens and the head-mean attention.
    pub fn block(&self, tape: &mut Tape, x: Var, layer: usize) -> Result<(Var, Var)> {
        if layer >= self.config.layers {
            return Err(Error::InvalidArgument(format!("no block {layer}")));
        }
        let v = self.vars;
        let b = BLOCK_BASE + layer * PER_BLOCK;
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let h = self.norm(tape, x, b + NORM1)?;
        let q = self.proj(tape, h, b + WQ, true)?;
        let k = self.proj(tape, h, b + WK, true)?;
        let vv = self.proj(tape, h, b + WV, true)?;
        let mut outs = Vec::with_capacity(heads);
        let mut attn_sum: Option<Var> = None;
        for hd in 0..heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(vv, lo, hi);
            let s = tape.matmul_t(qh, kh)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            let a = tape.softmax_rows(s);
            outs.push(tape.matmul(a, vh)?);
            attn_sum = Some(match attn_sum {
                None => a,
                Some(acc) => tape.add(acc, a)?,
            });
        }
        let attn = tape.scale(attn_sum.expect("at least one head"), 1.0 / heads as f64);
        let cat = tape.concat_cols(&outs)?;
        let cat = self.norm(tape, cat, b + ATTN_NORM)?;
        let a = self.proj(tape, cat, b + WO, true)?;
        let x = tape.add(x, a)?;
        let h = self.norm(tape, x, b + NORM2)?;
        let f = self.proj(tape, h, b + W1, true)?;
        let f = tape.add_row(f, v[b + B1])?;
        let f = tape.gelu(f);
        let f = self.norm(tape, f, b + FFN_NORM)?;
        let f = self.proj(tape, f, b + W2, true)?;
        let f = tape.add_row(f, v[b + B2])?;
        Ok((tape.add(x, f)?, attn))
    }

    /// Runs `layers` blocks starting from token matrix `x`.
    pub fn blocks(&self, tape: &mut Tape, mut x: Var, layers: Range<usize>) -> Result<TapeTrace> {
        let mut attention = Vec::with_capacity(layers.len());
        for l in layers {
            let (nx, a) = self.block(tape, x, l)?;
            x = nx;
            attention.push(a);
        }
        let n = tape.value(x).rows();
        Ok(TapeTrace {
            tokens: x,
            cls: tape.slice_rows(x, 0, 1),
            patches: tape.slice_rows(x, 1, n),
            attention,
        })
    }

    pub fn forward(&self, tape: &mut Tape, patches: &Matrix<f64>) -> Result<TapeTrace> {
        let x = self.embed(tape, patches)?;
        self.blocks(tape, x, 0..self.config.layers)
    }

    /// Head output `1×embed_dim` for a `1×hidden` class token.
    pub fn head(&self, tape: &mut Tape, cls: Var) -> Result<Var> {
        let h = BLOCK_BASE + self.config.layers * PER_BLOCK;
        let z = self.norm(tape, cls, h)?;
        tape.matmul_t(z, self.vars[h + 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use crate::image::Image;
    use crate::model::Linear;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ViTConfig {
        ViTConfig {
            layers: 2,
            heads: 2,
            hidden: 8,
            ffn: 16,
            patch: 2,
            image: 4,
            channels: 1,
            embed_dim: 6,
            ..ViTConfig::default()
        }
    }

    fn image(c: &ViTConfig, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = c.channels * c.image * c.image;
        Image::new(c.channels, c.image, c.image, (0..n).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn params_round_trip() {
        let m = ViT::init(ViTConfig::default(), 1).unwrap();
        let p = Params::from_vit(&m).unwrap();
        assert_eq!(p.len(), 4 + 16 * 4 + 3);
        assert_eq!(p.to_vit(&m.config, Mode::Float).unwrap(), m);
    }

    #[test]
    fn tape_forward_matches_inference() {
        let m = ViT::init(ViTConfig::default(), 2).unwrap();
        let img = image(&m.config, 3);
        let p = Params::from_vit(&m).unwrap();
        let patches = m.patchify(&img).unwrap().cast();
        for (lambda, how) in [(0.0, Linear::Float), (0.4, Linear::Blend(0.4)), (1.0, Linear::Simulated)] {
            let mut tape = Tape::new();
            let vars = p.load(&mut tape, |_| false);
            let g = TapeViT {
                config: &m.config,
                vars: &vars,
                lambda,
                gammas: None,
            };
            let tr = g.forward(&mut tape, &patches).unwrap();
            let y = g.head(&mut tape, tr.cls).unwrap();
            let want = m.forward_with(&img, how).unwrap();
            let cls: Matrix<f32> = tape.value(tr.cls).cast();
            let err = cls
                .as_slice()
                .iter()
                .zip(&want.cls)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(err < 1e-3, "lambda {lambda}: {err}");
            assert_eq!(tape.value(y).cols(), 256);
            for (a, b) in tr.attention.iter().zip(&want.attention) {
                assert!(tape.value(*a).cast::<f32>().max_abs_diff(b) < 1e-4);
            }
        }
    }

    #[test]
    fn full_graph_gradient_check() {
        let c = tiny();
        let m = ViT::init(c.clone(), 4).unwrap();
        let p = Params::from_vit(&m).unwrap();
        let patches: Matrix<f64> = m.patchify(&image(&c, 5)).unwrap().cast();
        let target = Matrix::from_fn(1, 6, |_, j| j as f64 * 0.1);
        let gammas: Vec<f64> = p
            .tensors
            .iter()
            .map(|t| crate::quantize::abs_mean(t.as_slice()))
            .collect();
        let report = gradient_check(
            &p.tensors,
            1e-5,
            1e-6,
            |tape, vars| {
                let g = TapeViT {
                    config: &c,
                    vars,
                    lambda: 0.5,
                    gammas: Some(&gammas),
                };
                let tr = g.forward(tape, &patches)?;
                let y = g.head(tape, tr.cls)?;
                tape.sq_diff_sum(y, &target, 1.0)
            },
            |pi, e| (p.tensors[pi].as_slice()[e].abs() - gammas[pi]).abs() < 1e-3,
        )
        .unwrap();
        assert!(report.checked > 500);
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}
