//! On-disk formats other than the model file: `TNSR` tensors, binary PPM
//! images, and `BEMB` embedding databases. All integers little-endian.
//!
//! ```text
//! TNSR: "TNSR" | dtype u8 (0 = f32) | ndim u8 | dims u32 × ndim | payload
//! BEMB: "BEMB" | version u16 | dim u32 | count u64 | (id u64, words u64 × ceil(dim/64)) × count
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::quantize::BinaryEmbedding;

pub const TNSR_MAGIC: [u8; 4] = *b"TNSR";
pub const BEMB_MAGIC: [u8; 4] = *b"BEMB";
pub const BEMB_VERSION: u16 = 1;
/// Bytes before the first BEMB entry.
pub const BEMB_HEADER_BYTES: usize = 4 + 2 + 4 + 8;

const DTYPE_F32: u8 = 0;

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(self.what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = match self.take(4) {
            Ok(b) => b.try_into().unwrap(),
            Err(_) => {
                let rest = &self.buf[self.pos..];
                let mut found = [0u8; 4];
                found[..rest.len()].copy_from_slice(rest);
                return Err(Error::BadMagic { expected, found });
            }
        };
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// `n` f32 values; the length is checked against the remaining input
    /// before allocating.
    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n.checked_mul(4).ok_or(Error::Truncated(self.what))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::malformed(
                self.what,
                format!("{} trailing bytes", self.remaining()),
            ));
        }
        Ok(())
    }
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Raw `TNSR` contents.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode_tensor(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    if dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::InvalidArgument("tensor rank or dimension too large".into()));
    }
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::shape("encode_tensor", "dims do not match payload"));
    }
    let mut out = Vec::with_capacity(6 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(&TNSR_MAGIC);
    out.push(DTYPE_F32);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    put_f32s(&mut out, data);
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<TensorFile> {
    let mut r = Reader::new(bytes, "tensor file");
    r.magic(TNSR_MAGIC)?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::malformed("tensor file", format!("unsupported dtype {dtype}")));
    }
    let ndim = r.u8()? as usize;
    let dims = (0..ndim)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::malformed("tensor file", "dimension product overflows"))?;
    let data = r.f32s(n)?;
    r.finish()?;
    Ok(TensorFile { dims, data })
}

pub fn encode_image(img: &Image) -> Vec<u8> {
    let (c, h, w) = img.dims();
    encode_tensor(&[c, h, w], img.data()).expect("image dims are consistent")
}

pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    fs::write(path, encode_image(img))?;
    Ok(())
}

/// Parses a binary (`P6`) PPM into a 3-channel image scaled to [0, 1].
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let bad = |d: &str| Error::malformed("PPM image", d.to_string());
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(bad("expected P6 header"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Truncated("PPM image")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing separator after header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(bad("zero dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| bad("dimensions overflow"))?;
    let payload = bytes.get(pos..pos + n).ok_or(Error::Truncated("PPM image"))?;
    let mut data = vec![0f32; n];
    let plane = width * height;
    for (i, px) in payload.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / maxval as f32;
        }
    }
    Image::new(3, height, width, data)
}

/// Reads a `TNSR` (rank 3, `C×H×W`) or `P6` PPM image.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P6") {
        return decode_ppm(&bytes);
    }
    let t = decode_tensor(&bytes)?;
    if t.dims.len() != 3 {
        return Err(Error::malformed(
            "image tensor",
            format!("expected rank 3 (C, H, W), got rank {}", t.dims.len()),
        ));
    }
    Image::new(t.dims[0], t.dims[1], t.dims[2], t.data)
}

pub fn encode_embeddings(dim: usize, entries: &[(u64, BinaryEmbedding)]) -> Result<Vec<u8>> {
    if dim == 0 || dim > u32::MAX as usize {
        return Err(Error::InvalidArgument(format!("embedding dimension {dim}")));
    }
    let words = BinaryEmbedding::words_for(dim);
    let mut out = Vec::with_capacity(BEMB_HEADER_BYTES + entries.len() * (8 + 8 * words));
    out.extend_from_slice(&BEMB_MAGIC);
    out.extend_from_slice(&BEMB_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (id, e) in entries {
        if e.dim() != dim {
            return Err(Error::shape(
                "encode_embeddings",
                format!("{}-bit entry in a {dim}-bit file", e.dim()),
            ));
        }
        out.extend_from_slice(&id.to_le_bytes());
        for w in e.words() {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    Ok(out)
}

/// Embedding database: the bit width and `(id, embedding)` entries in file
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub entries: Vec<(u64, BinaryEmbedding)>,
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingFile> {
    let mut r = Reader::new(bytes, "embedding file");
    r.magic(BEMB_MAGIC)?;
    let version = r.u16()?;
    if version != BEMB_VERSION {
        return Err(Error::Version {
            format: "BEMB",
            expected: BEMB_VERSION,
            found: version,
        });
    }
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(Error::malformed("embedding file", "zero dimension"));
    }
    let count = r.u64()?;
    let words = BinaryEmbedding::words_for(dim);
    let entry_bytes = 8 + 8 * words as u64;
    if count.checked_mul(entry_bytes) != Some(r.remaining() as u64) {
        return Err(if count.saturating_mul(entry_bytes) > r.remaining() as u64 {
            Error::Truncated("embedding file")
        } else {
            Error::malformed("embedding file", "trailing bytes")
        });
    }
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let id = r.u64()?;
        let w = (0..words).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        entries.push((id, BinaryEmbedding::from_words(dim, w)?));
    }
    Ok(EmbeddingFile { dim, entries })
}

pub fn write_embeddings(
    path: impl AsRef<Path>,
    dim: usize,
    entries: &[(u64, BinaryEmbedding)],
) -> Result<()> {
    fs::write(path, encode_embeddings(dim, entries)?)?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingFile> {
    decode_embeddings(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tensor_round_trip_and_errors() {
        let bytes = encode_tensor(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(bytes.len(), 4 + 1 + 1 + 8 + 24);
        let t = decode_tensor(&bytes).unwrap();
        assert_eq!(t.dims, vec![2, 3]);
        assert_eq!(t.data[5], 6.0);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_tensor(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_tensor(&extra).is_err());
        assert!(matches!(decode_tensor(b"TN"), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn ppm_decodes_to_unit_range() {
        let mut ppm = b"P6\n# comment\n2 1\n255\n".to_vec();
        ppm.extend_from_slice(&[255, 0, 51, 0, 255, 102]);
        let img = decode_ppm(&ppm).unwrap();
        assert_eq!(img.dims(), (3, 1, 2));
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(1, 0, 1), 1.0);
        assert!((img.get(2, 0, 0) - 0.2).abs() < 1e-6);
        assert!(decode_ppm(&ppm[..ppm.len() - 1]).is_err());
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn embedding_file_size_matches_format_arithmetic() {
        let dim = 256;
        let entries: Vec<_> = (0..5u64)
            .map(|i| (i, BinaryEmbedding::from_bits(&vec![i % 2 == 0; dim]).unwrap()))
            .collect();
        let bytes = encode_embeddings(dim, &entries).unwrap();
        assert_eq!(bytes.len(), BEMB_HEADER_BYTES + 5 * (8 + dim / 8));
        let f = decode_embeddings(&bytes).unwrap();
        assert_eq!((f.dim, f.entries), (dim, entries));

        let empty = encode_embeddings(dim, &[]).unwrap();
        assert_eq!(empty.len(), BEMB_HEADER_BYTES);
        assert!(decode_embeddings(&empty).unwrap().entries.is_empty());
    }

    #[test]
    fn embedding_file_errors() {
        let e = BinaryEmbedding::from_bits(&[true; 10]).unwrap();
        let bytes = encode_embeddings(10, &[(3, e)]).unwrap();
        assert!(matches!(decode_embeddings(&bytes[..bytes.len() - 2]), Err(Error::Truncated(_))));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(decode_embeddings(&v), Err(Error::Version { .. })));
        let mut pad = bytes.clone();
        let last = pad.len() - 1;
        pad[last] = 0x80;
        assert!(decode_embeddings(&pad).is_err());
        let mut wrong = bytes.clone();
        wrong[..4].copy_from_slice(b"TTRA");
        assert!(matches!(decode_embeddings(&wrong), Err(Error::BadMagic { .. })));
    }

    proptest! {
        #[test]
        fn corrupt_inputs_never_panic(data in prop::collection::vec(any::<u8>(), 0..200), which in 0u8..3) {
            let mut data = data;
            match which {
                0 => { if data.len() >= 4 { data[..4].copy_from_slice(b"TNSR"); } let _ = decode_tensor(&data); }
                1 => { if data.len() >= 4 { data[..4].copy_from_slice(b"BEMB"); } let _ = decode_embeddings(&data); }
                _ => { if data.len() >= 2 { data[..2].copy_from_slice(b"P6"); } let _ = decode_ppm(&data); }
            }
        }
    }
}
