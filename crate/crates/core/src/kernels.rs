//! 2-bit packed ternary weights and the integer matmul that consumes them.
//!
//! Packing layout: element `i` (row-major) occupies bits `2 * (i % 4)` of
//! byte `i / 4`. Field values: `0b00 → 0`, `0b01 → +1`, `0b11 → -1`;
//! `0b10` never appears in a valid buffer and is reported as corruption.
//!
//! A weight matrix is stored `(out, in)` so the reduction dimension is the
//! contiguous one, and activations are token-major with one scale per
//! token. The output element `(m, n)` is
//! `gamma * s_n * Σ_k code[m][k] * act[n][k]`, accumulated exactly in `i32`
//! and scaled once at the end.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::TimingStats;
use crate::error::{Error, Result};
use crate::quantize::{QuantizedActivation, TernaryTensor};
use crate::tensor::Matrix;

/// Largest reduction length for which `K * 127` cannot overflow an `i32`
/// accumulator with int8 activations.
pub const MAX_INNER_DIM: usize = 1 << 23;

const FIELD_ZERO: u8 = 0b00;
const FIELD_POS: u8 = 0b01;
const FIELD_NEG: u8 = 0b11;
const FIELD_INVALID: u8 = 0b10;

#[derive(Debug, Clone, PartialEq)]
pub struct PackedTernary {
    rows: usize,
    cols: usize,
    bytes: Vec<u8>,
    gamma: f32,
}

/// Raw `i32` matmul result before the scale multiply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntAccumulator {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
}

impl IntAccumulator {
    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }
}

#[inline]
fn encode(code: i8) -> u8 {
    match code {
        1 => FIELD_POS,
        -1 => FIELD_NEG,
        _ => FIELD_ZERO,
    }
}

#[inline]
fn decode(field: u8) -> Option<i8> {
    match field {
        FIELD_ZERO => Some(0),
        FIELD_POS => Some(1),
        FIELD_NEG => Some(-1),
        _ => None,
    }
}

/// Byte → four codes; `None` if any field is `0b10`.
struct Lut([Option<[i8; 4]>; 256]);

impl Lut {
    fn build() -> Self {
        let mut table = [None; 256];
        for (b, slot) in table.iter_mut().enumerate() {
            let mut codes = [0i8; 4];
            let mut ok = true;
            for (j, c) in codes.iter_mut().enumerate() {
                match decode((b as u8 >> (2 * j)) & 0b11) {
                    Some(v) => *c = v,
                    None => ok = false,
                }
            }
            if ok {
                *slot = Some(codes);
            }
        }
        Lut(table)
    }
}

fn lut() -> &'static Lut {
    static LUT: std::sync::OnceLock<Lut> = std::sync::OnceLock::new();
    LUT.get_or_init(Lut::build)
}

impl PackedTernary {
    /// Wraps an existing buffer. Only the length is checked here; code
    /// validity is checked by [`PackedTernary::validate`] and on decode.
    pub fn from_raw(rows: usize, cols: usize, bytes: Vec<u8>, gamma: f32) -> Result<Self> {
        let expected = (rows * cols).div_ceil(4);
        if bytes.len() != expected {
            return Err(Error::shape(
                "PackedTernary::from_raw",
                format!("{} bytes for {rows}x{cols}, expected {expected}", bytes.len()),
            ));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::malformed("packed ternary", format!("gamma {gamma}")));
        }
        Ok(Self {
            rows,
            cols,
            bytes,
            gamma,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn gamma(&self) -> f32 {
        self.gamma
    }

    /// Weight payload plus the 32-bit scale.
    pub fn footprint_bytes(&self) -> usize {
        self.bytes.len() + std::mem::size_of::<f32>()
    }

    /// Checks for `0b10` fields and nonzero padding.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        for (bi, &b) in self.bytes.iter().enumerate() {
            for j in 0..4 {
                let i = bi * 4 + j;
                let field = (b >> (2 * j)) & 0b11;
                if i < n {
                    if field == FIELD_INVALID {
                        return Err(Error::CorruptCode { index: i });
                    }
                } else if field != FIELD_ZERO {
                    return Err(Error::malformed(
                        "packed ternary",
                        format!("nonzero padding field at element {i}"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Decodes into one `i8` per element.
    fn decode_codes(&self) -> Result<Vec<i8>> {
        let n = self.len();
        let table = lut();
        let mut out = Vec::with_capacity(self.bytes.len() * 4);
        for (bi, &b) in self.bytes.iter().enumerate() {
            match table.0[b as usize] {
                Some(codes) => out.extend_from_slice(&codes),
                None => {
                    let j = (0..4).find(|j| (b >> (2 * j)) & 0b11 == FIELD_INVALID).unwrap();
                    return Err(Error::CorruptCode { index: bi * 4 + j });
                }
            }
        }
        if out[n..].iter().any(|&c| c != 0) {
            return Err(Error::malformed("packed ternary", "nonzero padding"));
        }
        out.truncate(n);
        Ok(out)
    }
}

pub fn pack(t: &TernaryTensor) -> PackedTernary {
    let mut bytes = vec![0u8; t.len().div_ceil(4)];
    for (i, &c) in t.codes().iter().enumerate() {
        bytes[i / 4] |= encode(c) << (2 * (i % 4));
    }
    PackedTernary {
        rows: t.rows(),
        cols: t.cols(),
        bytes,
        gamma: t.gamma(),
    }
}

pub fn unpack(p: &PackedTernary) -> Result<TernaryTensor> {
    let codes = p.decode_codes()?;
    TernaryTensor::new(p.rows, p.cols, codes, p.gamma)
}

fn check_dims(p: &PackedTernary, a: &QuantizedActivation) -> Result<()> {
    if p.cols > MAX_INNER_DIM {
        return Err(Error::AccumulatorBound {
            inner: p.cols,
            limit: MAX_INNER_DIM,
        });
    }
    if p.cols != a.channels() {
        return Err(Error::shape(
            "ternary_matmul",
            format!(
                "weights {}x{} vs activations {}x{}",
                p.rows,
                p.cols,
                a.tokens(),
                a.channels()
            ),
        ));
    }
    Ok(())
}

#[inline]
fn dot_i8(w: &[i8], x: &[i8]) -> i32 {
    w.iter().zip(x).map(|(&a, &b)| a as i32 * b as i32).sum()
}

/// Integer accumulation `Σ_k code[m][k] * act[n][k]`, shape `(M, N)`.
pub fn ternary_matmul_acc(p: &PackedTernary, a: &QuantizedActivation) -> Result<IntAccumulator> {
    check_dims(p, a)?;
    let codes = p.decode_codes()?;
    let k = p.cols;
    let mut data = vec![0i32; p.rows * a.tokens()];
    for m in 0..p.rows {
        let w = &codes[m * k..(m + 1) * k];
        for n in 0..a.tokens() {
            data[m * a.tokens() + n] = dot_i8(w, a.token_codes(n));
        }
    }
    Ok(IntAccumulator {
        rows: p.rows,
        cols: a.tokens(),
        data,
    })
}

/// Add/subtract/skip reference: walks the packed fields directly and never
/// multiplies. Must agree exactly with [`ternary_matmul_acc`].
pub fn ternary_matmul_acc_addonly(
    p: &PackedTernary,
    a: &QuantizedActivation,
) -> Result<IntAccumulator> {
    check_dims(p, a)?;
    let k = p.cols;
    let mut data = vec![0i32; p.rows * a.tokens()];
    for m in 0..p.rows {
        for n in 0..a.tokens() {
            let x = a.token_codes(n);
            let mut acc = 0i32;
            for (kk, &xv) in x.iter().enumerate() {
                let i = m * k + kk;
                match (p.bytes[i / 4] >> (2 * (i % 4))) & 0b11 {
                    FIELD_ZERO => {}
                    FIELD_POS => acc += xv as i32,
                    FIELD_NEG => acc -= xv as i32,
                    _ => return Err(Error::CorruptCode { index: i }),
                }
            }
            data[m * a.tokens() + n] = acc;
        }
    }
    Ok(IntAccumulator {
        rows: p.rows,
        cols: a.tokens(),
        data,
    })
}

#[inline]
fn scale(acc: i32, gamma: f32, s: f32) -> f32 {
    (gamma as f64 * s as f64 * acc as f64) as f32
}

/// `(M, N)` output: `out[m][n] = gamma * s_n * acc[m][n]`.
pub fn ternary_matmul(p: &PackedTernary, a: &QuantizedActivation) -> Result<Matrix<f32>> {
    let acc = ternary_matmul_acc(p, a)?;
    let scales = a.scales();
    Ok(Matrix::from_fn(acc.rows, acc.cols, |m, n| {
        scale(acc.get(m, n), p.gamma, scales[n])
    }))
}

/// Token-major linear layer: `(N, M)` output for `N` tokens, i.e. the
/// transpose of [`ternary_matmul`].
pub fn ternary_linear(a: &QuantizedActivation, p: &PackedTernary) -> Result<Matrix<f32>> {
    check_dims(p, a)?;
    let codes = p.decode_codes()?;
    let k = p.cols;
    let mut out = Matrix::zeros(a.tokens(), p.rows);
    for n in 0..a.tokens() {
        let x = a.token_codes(n);
        let s = a.scales()[n];
        let row = out.row_mut(n);
        for (m, o) in row.iter_mut().enumerate() {
            *o = scale(dot_i8(&codes[m * k..(m + 1) * k], x), p.gamma, s);
        }
    }
    Ok(out)
}

/// One timing row of the matmul benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct MatmulRecord {
    pub kernel: &'static str,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub stats: TimingStats,
    pub bytes_weights: usize,
}

pub const MATMUL_CSV_HEADER: &str = "kernel,m,k,n,median_ns,p10_ns,p90_ns,bytes_weights";

impl MatmulRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.kernel,
            self.m,
            self.k,
            self.n,
            self.stats.median_ns,
            self.stats.p10_ns,
            self.stats.p90_ns,
            self.bytes_weights
        )
    }
}

/// Times the packed integer kernel against an `f32` matmul of the same
/// shape. Weights and activations are random but seeded.
pub fn benchmark_matmul(
    sizes: &[(usize, usize, usize)],
    repeats: usize,
    seed: u64,
) -> Result<Vec<MatmulRecord>> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("benchmark repeats must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(sizes.len() * 2);
    for &(m, k, n) in sizes {
        if m == 0 || k == 0 || n == 0 {
            return Err(Error::InvalidArgument(format!(
                "benchmark size ({m}, {k}, {n}) must be positive"
            )));
        }
        let codes: Vec<i8> = (0..m * k).map(|_| rng.random_range(-1..=1)).collect();
        let t = TernaryTensor::new(m, k, codes, 0.05)?;
        let packed = pack(&t);
        let acodes: Vec<i8> = (0..n * k).map(|_| rng.random_range(-127..=127)).collect();
        let scales: Vec<f32> = (0..n).map(|_| rng.random_range(0.001f32..0.1)).collect();
        let act = QuantizedActivation::new(n, k, acodes, scales)?;

        let wf = crate::quantize::ternary_dequantize(&t);
        let xf = crate::quantize::act_dequantize(&act);

        let mut tern = Vec::with_capacity(repeats);
        let mut float = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t0 = Instant::now();
            let r = ternary_matmul(&packed, &act)?;
            tern.push(t0.elapsed().as_nanos() as u64);
            std::hint::black_box(r);

            let t0 = Instant::now();
            let r = wf.matmul_t(&xf)?;
            float.push(t0.elapsed().as_nanos() as u64);
            std::hint::black_box(r);
        }
        out.push(MatmulRecord {
            kernel: "ternary_i8",
            m,
            k,
            n,
            stats: TimingStats::from_samples(&mut tern),
            bytes_weights: packed.footprint_bytes(),
        });
        out.push(MatmulRecord {
            kernel: "float32",
            m,
            k,
            n,
            stats: TimingStats::from_samples(&mut float),
            bytes_weights: m * k * std::mem::size_of::<f32>(),
        });
    }
    Ok(out)
}
