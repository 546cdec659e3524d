//! Exact Hamming-distance retrieval over packed binary embeddings, plus
//! recall@K and the recall-per-megabyte score.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::TimingStats;
use crate::error::{Error, Result};
use crate::quantize::BinaryEmbedding;

#[inline]
fn xor_popcount_portable(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn xor_popcount_hw(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Popcount of the word-wise XOR, using the hardware instruction when the
/// CPU has one.
#[inline]
pub fn xor_popcount(a: &[u64], b: &[u64]) -> u32 {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("popcnt") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { xor_popcount_hw(a, b) };
        }
    }
    xor_popcount_portable(a, b)
}

pub fn hamming(a: &BinaryEmbedding, b: &BinaryEmbedding) -> Result<u32> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "hamming",
            format!("{} vs {} bits", a.dim(), b.dim()),
        ));
    }
    Ok(xor_popcount(a.words(), b.words()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hit {
    pub id: u64,
    pub distance: u32,
}

/// Ascending distance, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SearchResult {
    pub hits: Vec<Hit>,
}

impl SearchResult {
    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.hits.iter().map(|h| h.id)
    }
}

/// Keeps the `k` smallest `(key, id)` pairs in ascending order.
fn top_k<K: Ord + Copy>(mut scored: Vec<(K, u64)>, k: usize) -> Vec<(K, u64)> {
    if k < scored.len() {
        scored.select_nth_unstable(k - 1);
        scored.truncate(k);
    }
    scored.sort_unstable();
    scored
}

#[derive(Debug, Clone, Default)]
pub struct BinaryIndex {
    dim: usize,
    words_per: usize,
    ids: Vec<u64>,
    words: Vec<u64>,
    positions: HashMap<u64, usize>,
    metadata: HashMap<u64, String>,
}

impl BinaryIndex {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("index dimension must be >= 1".into()));
        }
        Ok(Self {
            dim,
            words_per: BinaryEmbedding::words_for(dim),
            ..Self::default()
        })
    }

    pub fn from_entries(dim: usize, entries: impl IntoIterator<Item = (u64, BinaryEmbedding)>) -> Result<Self> {
        let mut index = Self::new(dim)?;
        for (id, e) in entries {
            index.insert(id, &e)?;
        }
        Ok(index)
    }

    pub fn insert(&mut self, id: u64, e: &BinaryEmbedding) -> Result<()> {
        if e.dim() != self.dim {
            return Err(Error::shape(
                "BinaryIndex::insert",
                format!("{} bits into a {}-bit index", e.dim(), self.dim),
            ));
        }
        if self.positions.insert(id, self.ids.len()).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate id {id}")));
        }
        self.ids.push(id);
        self.words.extend_from_slice(e.words());
        Ok(())
    }

    pub fn set_metadata(&mut self, id: u64, meta: impl Into<String>) -> Result<()> {
        if !self.positions.contains_key(&id) {
            return Err(Error::InvalidArgument(format!("unknown id {id}")));
        }
        self.metadata.insert(id, meta.into());
        Ok(())
    }

    pub fn metadata(&self, id: u64) -> Option<&str> {
        self.metadata.get(&id).map(String::as_str)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.positions.contains_key(&id)
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Packed payload size: one bit per component.
    pub fn db_bytes(&self) -> usize {
        self.words.len() * std::mem::size_of::<u64>()
    }

    pub fn embedding(&self, pos: usize) -> BinaryEmbedding {
        let w = self.words[pos * self.words_per..(pos + 1) * self.words_per].to_vec();
        BinaryEmbedding::from_words(self.dim, w).expect("validated on insert")
    }

    /// Exact top-`k` by Hamming distance.
    pub fn search(&self, query: &BinaryEmbedding, k: usize) -> Result<SearchResult> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if self.is_empty() {
            return Err(Error::Empty("index"));
        }
        if query.dim() != self.dim {
            return Err(Error::shape(
                "search",
                format!("{}-bit query against {}-bit index", query.dim(), self.dim),
            ));
        }
        let q = query.words();
        let scored: Vec<(u32, u64)> = self
            .words
            .chunks_exact(self.words_per)
            .zip(&self.ids)
            .map(|(w, &id)| (xor_popcount(q, w), id))
            .collect();
        Ok(SearchResult {
            hits: top_k(scored, k)
                .into_iter()
                .map(|(distance, id)| Hit { id, distance })
                .collect(),
        })
    }
}

/// Query id → positive database ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub positives: BTreeMap<u64, BTreeSet<u64>>,
}

impl GroundTruth {
    pub fn insert(&mut self, query: u64, positives: impl IntoIterator<Item = u64>) {
        self.positives.entry(query).or_default().extend(positives);
    }

    /// Parses `query_id: id id id` lines. Blank lines and `#` comments are
    /// ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut gt = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |d: &str| Error::malformed("ground truth", format!("line {}: {d}", lineno + 1));
            let (q, rest) = line.split_once(':').ok_or_else(|| bad("missing ':'"))?;
            let q: u64 = q.trim().parse().map_err(|_| bad("bad query id"))?;
            let ids = rest
                .split_whitespace()
                .map(|s| s.parse::<u64>().map_err(|_| bad("bad database id")))
                .collect::<Result<Vec<_>>>()?;
            if gt.positives.contains_key(&q) {
                return Err(bad("duplicate query id"));
            }
            gt.insert(q, ids);
        }
        Ok(gt)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (q, ids) in &self.positives {
            let _ = write!(s, "{q}:");
            for id in ids {
                let _ = write!(s, " {id}");
            }
            s.push('\n');
        }
        s
    }

    /// Every referenced database id must be present in `index`.
    pub fn check_against(&self, index: &BinaryIndex) -> Result<()> {
        for (q, ids) in &self.positives {
            if let Some(id) = ids.iter().find(|id| !index.contains(**id)) {
                return Err(Error::malformed(
                    "ground truth",
                    format!("query {q} references unknown database id {id}"),
                ));
            }
        }
        Ok(())
    }
}

/// Fraction of queries with at least one positive among their top `k`.
pub fn recall_at_k(results: &[(u64, SearchResult)], gt: &GroundTruth, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if results.is_empty() {
        return Err(Error::Empty("query results"));
    }
    let mut hits = 0usize;
    for (q, res) in results {
        let pos = gt.positives.get(q).ok_or(Error::MissingGroundTruth(*q))?;
        if pos.is_empty() {
            return Err(Error::malformed(
                "ground truth",
                format!("query {q} has no positives"),
            ));
        }
        if res.ids().take(k).any(|id| pos.contains(&id)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

const MIB: f64 = (1u64 << 20) as f64;

/// Recall percentage per MiB of model plus database.
pub fn memory_efficiency(recall_pct: f64, model_bytes: u64, db_bytes: u64) -> Result<f64> {
    let total = model_bytes + db_bytes;
    if total == 0 {
        return Err(Error::InvalidArgument("memory footprint must be > 0 bytes".into()));
    }
    Ok(recall_pct / (total as f64 / MIB))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchRecord {
    pub kernel: &'static str,
    pub entries: usize,
    pub dim: usize,
    pub stats: TimingStats,
    pub bytes_db: usize,
}

pub const SEARCH_CSV_HEADER: &str = "kernel,entries,dim,median_ns,p10_ns,p90_ns,bytes_db";

impl SearchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.kernel,
            self.entries,
            self.dim,
            self.stats.median_ns,
            self.stats.p10_ns,
            self.stats.p90_ns,
            self.bytes_db
        )
    }
}

/// Brute-force cosine top-`k` over unit-norm `f32` rows.
fn cosine_top_k(db: &[f32], dim: usize, query: &[f32], k: usize) -> Vec<u64> {
    let scored: Vec<(std::cmp::Reverse<OrdF32>, u64)> = db
        .chunks_exact(dim)
        .enumerate()
        .map(|(i, row)| {
            let s: f32 = row.iter().zip(query).map(|(a, b)| a * b).sum();
            (std::cmp::Reverse(OrdF32(s)), i as u64)
        })
        .collect();
    top_k(scored, k).into_iter().map(|(_, id)| id).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF32(f32);

impl Eq for OrdF32 {}

impl PartialOrd for OrdF32 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF32 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Per-query latency of in-memory Hamming search against brute-force
/// `f32` cosine at the same logical dimension. Disk I/O is not included.
pub fn benchmark_search(
    sizes: &[usize],
    dims: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<SearchRecord>> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("benchmark repeats must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &dim in dims {
        for &entries in sizes {
            if dim == 0 || entries == 0 {
                return Err(Error::InvalidArgument(format!(
                    "benchmark size ({entries} entries, {dim} bits) must be positive"
                )));
            }
            let mut float_db = vec![0f32; entries * dim];
            let mut index = BinaryIndex::new(dim)?;
            for (i, row) in float_db.chunks_exact_mut(dim).enumerate() {
                for v in row.iter_mut() {
                    *v = rng.random_range(-1.0f32..1.0);
                }
                let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
                row.iter_mut().for_each(|v| *v /= n);
                index.insert(i as u64, &crate::quantize::sign_binarize(row)?)?;
            }
            let mut ham = Vec::with_capacity(repeats);
            let mut cos = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let mut q: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                let n = q.iter().map(|v| v * v).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
                q.iter_mut().for_each(|v| *v /= n);
                let qb = crate::quantize::sign_binarize(&q)?;

                let t0 = Instant::now();
                let r = index.search(&qb, 1)?;
                ham.push(t0.elapsed().as_nanos() as u64);
                std::hint::black_box(r);

                let t0 = Instant::now();
                let r = cosine_top_k(&float_db, dim, &q, 1);
                cos.push(t0.elapsed().as_nanos() as u64);
                std::hint::black_box(r);
            }
            out.push(SearchRecord {
                kernel: "hamming",
                entries,
                dim,
                stats: TimingStats::from_samples(&mut ham),
                bytes_db: index.db_bytes(),
            });
            out.push(SearchRecord {
                kernel: "cosine_f32",
                entries,
                dim,
                stats: TimingStats::from_samples(&mut cos),
                bytes_db: entries * dim * std::mem::size_of::<f32>(),
            });
        }
    }
    Ok(out)
}
