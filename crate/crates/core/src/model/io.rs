//! Model weight file.
//!
//! ```text
//! "TTRA" | version u16
//! layers heads hidden ffn patch image channels embed_dim : u32 × 8
//! mode u8 (0 float, 1 blend, 2 quantized) | lambda f32 | quantize_patch_embed u8
//! count u32
//! count × { name_len u16 | name | dtype u8 | ndim u8 | dims u32 × ndim | payload }
//! ```
//!
//! dtype 0 is `f32`; dtype 1 is packed ternary, payload `gamma f32` then
//! `ceil(n/4)` bytes of 2-bit codes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::formats::{put_f32s, Reader};
use crate::kernels::PackedTernary;
use crate::tensor::Matrix;

use super::{BlockWeights, HeadWeights, LayerNorm, Mode, Projection, ViT, ViTConfig, ViTWeights};

pub const MODEL_MAGIC: [u8; 4] = *b"TTRA";
pub const MODEL_VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_TERNARY: u8 = 1;

enum Record {
    Float { dims: Vec<usize>, data: Vec<f32> },
    Ternary(PackedTernary),
}

fn put_header(out: &mut Vec<u8>, name: &str, dtype: u8, dims: &[usize]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

struct Writer {
    out: Vec<u8>,
    count: u32,
}

impl Writer {
    fn floats(&mut self, name: &str, dims: &[usize], data: &[f32]) {
        put_header(&mut self.out, name, DTYPE_F32, dims);
        put_f32s(&mut self.out, data);
        self.count += 1;
    }

    fn vector(&mut self, name: &str, v: &[f32]) {
        self.floats(name, &[v.len()], v);
    }

    fn matrix(&mut self, name: &str, m: &Matrix<f32>) {
        self.floats(name, &[m.rows(), m.cols()], m.as_slice());
    }

    fn norm(&mut self, name: &str, ln: &LayerNorm) {
        self.vector(&format!("{name}.weight"), &ln.weight);
        self.vector(&format!("{name}.bias"), &ln.bias);
    }

    fn projection(&mut self, name: &str, p: &Projection) {
        match p {
            Projection::Float(m) => self.matrix(name, m),
            Projection::Packed(t) => {
                put_header(&mut self.out, name, DTYPE_TERNARY, &[t.rows(), t.cols()]);
                self.out.extend_from_slice(&t.gamma().to_le_bytes());
                self.out.extend_from_slice(t.bytes());
                self.count += 1;
            }
        }
    }
}

fn mode_tag(mode: Mode) -> (u8, f32) {
    match mode {
        Mode::Float => (0, 0.0),
        Mode::Blend(l) => (1, l),
        Mode::Quantized => (2, 1.0),
    }
}

pub fn encode_model(model: &ViT) -> Vec<u8> {
    let c = &model.config;
    let mut w = Writer {
        out: Vec::new(),
        count: 0,
    };
    let weights = &model.weights;
    w.projection("patch_embed", &weights.patch_embed);
    w.vector("patch_bias", &weights.patch_bias);
    w.vector("cls_token", &weights.cls_token);
    w.matrix("pos_embed", &weights.pos_embed);
    for (i, b) in weights.blocks.iter().enumerate() {
        let p = |s: &str| format!("blocks.{i}.{s}");
        w.norm(&p("norm1"), &b.norm1);
        w.projection(&p("wq"), &b.wq);
        w.projection(&p("wk"), &b.wk);
        w.projection(&p("wv"), &b.wv);
        w.norm(&p("attn_norm"), &b.attn_norm);
        w.projection(&p("wo"), &b.wo);
        w.norm(&p("norm2"), &b.norm2);
        w.projection(&p("w1"), &b.w1);
        w.vector(&p("b1"), &b.b1);
        w.norm(&p("ffn_norm"), &b.ffn_norm);
        w.projection(&p("w2"), &b.w2);
        w.vector(&p("b2"), &b.b2);
    }
    w.norm("head.norm", &weights.head.norm);
    w.matrix("head.proj", &weights.head.proj);

    let mut out = Vec::with_capacity(w.out.len() + 64);
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    for d in [
        c.layers, c.heads, c.hidden, c.ffn, c.patch, c.image, c.channels, c.embed_dim,
    ] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let (tag, lambda) = mode_tag(c.mode);
    out.push(tag);
    out.extend_from_slice(&lambda.to_le_bytes());
    out.push(c.quantize_patch_embed as u8);
    out.extend_from_slice(&w.count.to_le_bytes());
    out.extend_from_slice(&w.out);
    out
}

fn read_config(r: &mut Reader) -> Result<ViTConfig> {
    let mut d = [0usize; 8];
    for v in &mut d {
        *v = r.u32()? as usize;
    }
    let tag = r.u8()?;
    let lambda = r.f32()?;
    let mode = match tag {
        0 => Mode::Float,
        1 => Mode::Blend(lambda),
        2 => Mode::Quantized,
        t => return Err(Error::malformed("model", format!("mode tag {t}"))),
    };
    let qpe = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(Error::malformed("model", format!("patch-embed flag {v}"))),
    };
    let config = ViTConfig {
        layers: d[0],
        heads: d[1],
        hidden: d[2],
        ffn: d[3],
        patch: d[4],
        image: d[5],
        channels: d[6],
        embed_dim: d[7],
        mode,
        quantize_patch_embed: qpe,
    };
    config
        .validate()
        .map_err(|e| Error::malformed("model", format!("config: {e}")))?;
    Ok(config)
}

fn read_record(r: &mut Reader) -> Result<(String, Record)> {
    let len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::malformed("model", "tensor name is not UTF-8"))?
        .to_string();
    let dtype = r.u8()?;
    let ndim = r.u8()? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u32()? as usize);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or(Error::Truncated("model"))?;
    let record = match dtype {
        DTYPE_F32 => Record::Float {
            data: r.f32s(n)?,
            dims,
        },
        DTYPE_TERNARY => {
            if ndim != 2 {
                return Err(Error::malformed("model", format!("{name}: ternary rank {ndim}")));
            }
            let gamma = r.f32()?;
            let bytes = r.take(n.div_ceil(4))?.to_vec();
            let p = PackedTernary::from_raw(dims[0], dims[1], bytes, gamma)?;
            p.validate()?;
            Record::Ternary(p)
        }
        t => return Err(Error::malformed("model", format!("{name}: dtype {t}"))),
    };
    Ok((name, record))
}

struct Tensors(BTreeMap<String, Record>);

impl Tensors {
    fn take(&mut self, name: &str) -> Result<Record> {
        self.0
            .remove(name)
            .ok_or_else(|| Error::malformed("model", format!("missing tensor {name}")))
    }

    fn floats(&mut self, name: &str, want: &[usize]) -> Result<Vec<f32>> {
        match self.take(name)? {
            Record::Float { dims, data } if dims == want => Ok(data),
            Record::Float { dims, .. } => Err(Error::malformed(
                "model",
                format!("{name}: dims {dims:?}, expected {want:?}"),
            )),
            Record::Ternary(_) => Err(Error::malformed("model", format!("{name}: expected f32"))),
        }
    }

    fn vector(&mut self, name: &str, n: usize) -> Result<Vec<f32>> {
        self.floats(name, &[n])
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix<f32>> {
        Matrix::from_vec(rows, cols, self.floats(name, &[rows, cols])?)
    }

    fn norm(&mut self, name: &str, n: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            weight: self.vector(&format!("{name}.weight"), n)?,
            bias: self.vector(&format!("{name}.bias"), n)?,
        })
    }

    fn projection(&mut self, name: &str, rows: usize, cols: usize) -> Result<Projection> {
        match self.take(name)? {
            Record::Ternary(p) if (p.rows(), p.cols()) == (rows, cols) => {
                Ok(Projection::Packed(p))
            }
            Record::Float { dims, data } if dims == [rows, cols] => {
                Ok(Projection::Float(Matrix::from_vec(rows, cols, data)?))
            }
            _ => Err(Error::malformed(
                "model",
                format!("{name}: expected {rows}x{cols} projection"),
            )),
        }
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ViT> {
    let mut r = Reader::new(bytes, "model");
    r.magic(MODEL_MAGIC)?;
    let version = r.u16()?;
    if version != MODEL_VERSION {
        return Err(Error::Version {
            format: "model",
            expected: MODEL_VERSION,
            found: version,
        });
    }
    let config = read_config(&mut r)?;
    let count = r.u32()?;
    let mut tensors = Tensors(BTreeMap::new());
    for _ in 0..count {
        let (name, rec) = read_record(&mut r)?;
        if tensors.0.insert(name.clone(), rec).is_some() {
            return Err(Error::malformed("model", format!("duplicate tensor {name}")));
        }
    }
    r.finish()?;

    let d = config.hidden;
    let f = config.ffn;
    let t = &mut tensors;
    let patch_embed = t.projection("patch_embed", d, config.patch_dim())?;
    let patch_bias = t.vector("patch_bias", d)?;
    let cls_token = t.vector("cls_token", d)?;
    let pos_embed = t.matrix("pos_embed", config.tokens(), d)?;
    let mut blocks = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        let p = |s: &str| format!("blocks.{i}.{s}");
        blocks.push(BlockWeights {
            norm1: t.norm(&p("norm1"), d)?,
            wq: t.projection(&p("wq"), d, d)?,
            wk: t.projection(&p("wk"), d, d)?,
            wv: t.projection(&p("wv"), d, d)?,
            attn_norm: t.norm(&p("attn_norm"), d)?,
            wo: t.projection(&p("wo"), d, d)?,
            norm2: t.norm(&p("norm2"), d)?,
            w1: t.projection(&p("w1"), f, d)?,
            b1: t.vector(&p("b1"), f)?,
            ffn_norm: t.norm(&p("ffn_norm"), f)?,
            w2: t.projection(&p("w2"), d, f)?,
            b2: t.vector(&p("b2"), d)?,
        });
    }
    let head = HeadWeights {
        norm: t.norm("head.norm", d)?,
        proj: t.matrix("head.proj", config.embed_dim, d)?,
    };
    if let Some(extra) = t.0.keys().next() {
        return Err(Error::malformed("model", format!("unexpected tensor {extra}")));
    }
    let weights = ViTWeights {
        patch_embed,
        patch_bias,
        cls_token,
        pos_embed,
        blocks,
        head,
    };
    ViT::new(config, weights)
}

pub fn save_model(path: impl AsRef<Path>, model: &ViT) -> Result<()> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ViT> {
    decode_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_float_and_quantized() {
        let m = ViT::init(ViTConfig::default(), 11).unwrap();
        let bytes = encode_model(&m);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back), bytes);

        let q = m.to_quantized().unwrap();
        let qbytes = encode_model(&q);
        assert_eq!(decode_model(&qbytes).unwrap(), q);
        // the head and embeddings stay float, so the ratio is well below 16
        assert!(qbytes.len() * 4 < bytes.len(), "{} vs {}", qbytes.len(), bytes.len());
    }

    #[test]
    fn rejects_corruption() {
        let q = ViT::init(ViTConfig::default(), 12).unwrap().to_quantized().unwrap();
        let bytes = encode_model(&q);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_model(&bad), Err(Error::Version { .. })));

        assert!(matches!(
            decode_model(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));

        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_model(&long).is_err());

        // first packed tensor is blocks.0.wq; its payload follows the name
        let key = b"blocks.0.wq";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
        let payload = at + key.len() + 1 + 1 + 8 + 4;
        let mut bad = bytes.clone();
        bad[payload] = 0b10;
        assert!(matches!(decode_model(&bad), Err(Error::CorruptCode { .. })));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ttra");
        let m = ViT::init(ViTConfig::default(), 13).unwrap();
        save_model(&path, &m).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
        assert!(load_model(dir.path().join("missing")).is_err());
    }
}
