//! File-level commands: dataset generation, training runs with manifests,
//! embedding extraction, retrieval evaluation and benchmarks. Every output
//! is a file or a CSV string so reruns can be compared byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::{generate, image_files, GenParams, PlacesDataset};
use crate::error::{Error, Result};
use crate::formats::{read_embeddings, read_image, write_embeddings};
use crate::index::{memory_efficiency, recall_at_k, BinaryIndex, GroundTruth, SEARCH_CSV_HEADER};
use crate::kernels::{benchmark_matmul, MATMUL_CSV_HEADER};
use crate::model::{load_model, save_model, Mode, ViT};
use crate::train::{log_csv, train_finetune, train_pretrain, train_teacher, StageResult, TrainConfig};

pub const EVAL_CSV_HEADER: &str = "k,recall_at_k,recall_pct,db_bytes,model_bytes,memory_efficiency";
pub const METRICS_CSV_HEADER: &str = "stage,steps,final_loss,recall_at_1";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// SHA-256 of a file, or of every file below a directory (relative path
/// and contents, in sorted path order).
pub fn content_hash(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f).to_string_lossy().replace('\\', "/");
            h.update((rel.len() as u64).to_le_bytes());
            h.update(rel.as_bytes());
            let data = fs::read(&f)?;
            h.update((data.len() as u64).to_le_bytes());
            h.update(&data);
        }
    } else {
        h.update(fs::read(path)?);
    }
    Ok(hex(&h.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// What a training run read and wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: TrainConfig,
    /// `(name, sha256)` of every input.
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    /// `key = value` lines; the config section lists every default.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command = {}", self.command);
        let _ = writeln!(out, "seed = {}", self.seed);
        for (name, hash) in &self.inputs {
            let _ = writeln!(out, "input.{name} = sha256:{hash}");
        }
        for (i, p) in self.outputs.iter().enumerate() {
            let _ = writeln!(out, "output.{i} = {}", p.display());
        }
        out.push_str("\n[config]\n");
        out.push_str(&self.config.to_text());
        out
    }
}

pub fn gen_data(params: &GenParams, out: &Path) -> Result<PlacesDataset> {
    let ds = generate(params)?;
    ds.write(out)?;
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Teacher training and distillation.
    Pretrain,
    /// Metric fine-tuning from a saved student.
    Finetune,
    All,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            "all" => Ok(Stage::All),
            _ => Err(Error::InvalidArgument(format!(
                "stage {s:?} (expected pretrain, finetune or all)"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::All => "all",
        }
    }
}

fn metrics_row(stage: &str, steps: usize, r: &StageResult) -> String {
    let loss = r.final_loss.map(|l| format!("{l:.9}")).unwrap_or_default();
    format!("{stage},{steps},{loss},{:.6}", r.recall_at_1)
}

/// Trains on the dataset in `data_dir` and writes checkpoints, per-step
/// logs, `metrics.csv` and `manifest.txt` into `out`.
///
/// Pretrain writes `teacher.ttra` and `student.ttra`; finetune reads
/// `student.ttra` and writes `model.ttra` (latent float weights) and
/// `model_q.ttra` (packed ternary).
pub fn train(cfg: &TrainConfig, data_dir: &Path, out: &Path, stage: Stage) -> Result<RunManifest> {
    cfg.validate()?;
    let data = PlacesDataset::read(data_dir, Some(cfg.model.image))?;
    fs::create_dir_all(out)?;
    let mut inputs = vec![("data".to_string(), content_hash(data_dir)?)];
    let mut outputs = Vec::new();
    let mut metrics = String::from(METRICS_CSV_HEADER);
    metrics.push('\n');
    let write = |name: &str, bytes: &[u8], outputs: &mut Vec<PathBuf>| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, bytes)?;
        outputs.push(p);
        Ok(())
    };

    let student = if stage == Stage::Finetune {
        let path = out.join("student.ttra");
        let s = load_model(&path)?;
        let float_cfg = crate::model::ViTConfig {
            mode: Mode::Float,
            ..s.config.clone()
        };
        if float_cfg != cfg.model {
            return Err(Error::InvalidArgument(format!(
                "{} was trained with a different model configuration",
                path.display()
            )));
        }
        inputs.push(("student".to_string(), content_hash(&path)?));
        s
    } else {
        let teacher = train_teacher(cfg, &data)?;
        let student = train_pretrain(cfg, &teacher.model, &data)?;
        save_model(out.join("teacher.ttra"), &teacher.model)?;
        outputs.push(out.join("teacher.ttra"));
        save_model(out.join("student.ttra"), &student.model)?;
        outputs.push(out.join("student.ttra"));
        write("teacher_log.csv", log_csv(&teacher.log).as_bytes(), &mut outputs)?;
        write("pretrain_log.csv", log_csv(&student.log).as_bytes(), &mut outputs)?;
        let _ = writeln!(metrics, "{}", metrics_row("teacher", cfg.teacher_steps, &teacher));
        let _ = writeln!(metrics, "{}", metrics_row("pretrain", cfg.pretrain_steps, &student));
        student.model
    };

    if stage != Stage::Pretrain {
        let fine = train_finetune(cfg, &student, &data)?;
        save_model(out.join("model.ttra"), &fine.model)?;
        outputs.push(out.join("model.ttra"));
        save_model(out.join("model_q.ttra"), &fine.model.to_quantized()?)?;
        outputs.push(out.join("model_q.ttra"));
        write("finetune_log.csv", log_csv(&fine.log).as_bytes(), &mut outputs)?;
        let _ = writeln!(metrics, "{}", metrics_row("finetune", cfg.finetune_steps, &fine));
    }
    write("metrics.csv", metrics.as_bytes(), &mut outputs)?;

    let manifest = RunManifest {
        command: format!("train --stage {}", stage.name()),
        seed: cfg.seed,
        config: cfg.clone(),
        inputs,
        outputs,
    };
    fs::write(out.join("manifest.txt"), manifest.to_text())?;
    Ok(manifest)
}

/// Switches the evaluation mode of a loaded model. `blend` keeps the
/// stored `λ` of a blended checkpoint and uses 1 otherwise.
pub fn with_mode(model: ViT, mode: &str) -> Result<ViT> {
    let lambda = match model.config.mode {
        Mode::Blend(l) => l,
        _ => 1.0,
    };
    match Mode::parse(mode, lambda)? {
        Mode::Quantized => model.to_quantized(),
        m => {
            let mut model = model;
            model.config.mode = m;
            Ok(model)
        }
    }
}

/// Image files named by `inputs`: directories expand to their sorted image
/// files. Ids follow the resulting order.
pub fn expand_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(image_files(p)?);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// Binary embeddings for every input image, written as an embedding file.
/// Returns the number of embeddings.
pub fn extract(model: &ViT, images: &[PathBuf], out: &Path) -> Result<usize> {
    let size = model.config.image;
    let entries = images
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let img = read_image(p)?;
            if img.channels() != model.config.channels {
                return Err(Error::shape(
                    "extract",
                    format!(
                        "{}: {} channels, model expects {}",
                        p.display(),
                        img.channels(),
                        model.config.channels
                    ),
                ));
            }
            Ok((i as u64, model.binary_embedding(&img.fit_square(size))?))
        })
        .collect::<Result<Vec<_>>>()?;
    write_embeddings(out, model.config.embed_dim, &entries)?;
    Ok(entries.len())
}

/// Recall@k rows for each `k` plus the memory-efficiency score
/// (recall percentage per MiB of model and database).
pub fn eval(db: &Path, queries: &Path, gt: &Path, ks: &[usize], model_bytes: u64) -> Result<String> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("k list must be non-empty and positive".into()));
    }
    let db = read_embeddings(db)?;
    let qs = read_embeddings(queries)?;
    if db.dim != qs.dim {
        return Err(Error::shape(
            "eval",
            format!("{}-bit database, {}-bit queries", db.dim, qs.dim),
        ));
    }
    let gt = GroundTruth::parse(&fs::read_to_string(gt)?)?;
    let index = BinaryIndex::from_entries(db.dim, db.entries)?;
    gt.check_against(&index)?;
    let kmax = *ks.iter().max().expect("non-empty");
    let results = qs
        .entries
        .iter()
        .map(|(id, q)| Ok((*id, index.search(q, kmax)?)))
        .collect::<Result<Vec<_>>>()?;
    let db_bytes = index.db_bytes() as u64;
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for &k in ks {
        let r = recall_at_k(&results, &gt, k)?;
        let pct = 100.0 * r;
        let eff = memory_efficiency(pct, model_bytes, db_bytes)?;
        let _ = writeln!(out, "{k},{r:.6},{pct:.4},{db_bytes},{model_bytes},{eff:.9}");
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchKind {
    Matmul,
    Search,
}

impl BenchKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "matmul" => Ok(BenchKind::Matmul),
            "search" => Ok(BenchKind::Search),
            _ => Err(Error::InvalidArgument(format!("bench kind {s:?} (expected matmul or search)"))),
        }
    }
}

/// Benchmark CSV. Matmul sizes are `(m, k, n)` triples; search sizes are
/// `(entries, dim)` pairs.
pub fn bench(kind: BenchKind, sizes: &[Vec<usize>], repeats: usize, seed: u64) -> Result<String> {
    let mut out = String::new();
    match kind {
        BenchKind::Matmul => {
            let shapes = sizes
                .iter()
                .map(|s| match s.as_slice() {
                    &[m, k, n] => Ok((m, k, n)),
                    _ => Err(Error::InvalidArgument(format!("matmul size {s:?} needs m,k,n"))),
                })
                .collect::<Result<Vec<_>>>()?;
            out.push_str(MATMUL_CSV_HEADER);
            out.push('\n');
            for r in benchmark_matmul(&shapes, repeats, seed)? {
                let _ = writeln!(out, "{}", r.csv_row());
            }
        }
        BenchKind::Search => {
            out.push_str(SEARCH_CSV_HEADER);
            out.push('\n');
            for s in sizes {
                let &[entries, dim] = s.as_slice() else {
                    return Err(Error::InvalidArgument(format!("search size {s:?} needs entries,dim")));
                };
                for r in crate::index::benchmark_search(&[entries], &[dim], repeats, seed)? {
                    let _ = writeln!(out, "{}", r.csv_row());
                }
            }
        }
    }
    Ok(out)
}

/// One-paragraph description of a file's header, by magic.
pub fn inspect(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let magic: [u8; 4] = bytes
        .get(..4)
        .and_then(|m| m.try_into().ok())
        .ok_or(Error::Truncated("file header"))?;
    let mut out = String::new();
    match &magic {
        b"TTRA" => {
            let m = crate::model::decode_model(&bytes)?;
            let c = &m.config;
            let (float, ternary) = m.weights.parameter_census();
            let _ = writeln!(out, "format = TTRA");
            let _ = writeln!(out, "mode = {:?}", c.mode);
            let _ = writeln!(
                out,
                "layers = {}\nheads = {}\nhidden = {}\nffn = {}\npatch = {}\nimage = {}\nchannels = {}\nembed_dim = {}",
                c.layers, c.heads, c.hidden, c.ffn, c.patch, c.image, c.channels, c.embed_dim
            );
            let _ = writeln!(out, "float_params = {float}\nternary_params = {ternary}\nbytes = {}", bytes.len());
        }
        b"BEMB" => {
            let e = crate::formats::decode_embeddings(&bytes)?;
            let _ = writeln!(out, "format = BEMB\ndim = {}\ncount = {}\nbytes = {}", e.dim, e.entries.len(), bytes.len());
        }
        b"TNSR" => {
            let t = crate::formats::decode_tensor(&bytes)?;
            let _ = writeln!(out, "format = TNSR\ndims = {:?}\nbytes = {}", t.dims, bytes.len());
        }
        _ if bytes.starts_with(b"P6") => {
            let img = crate::formats::decode_ppm(&bytes)?;
            let _ = writeln!(out, "format = PPM\nchannels = {}\nheight = {}\nwidth = {}", img.channels(), img.height(), img.width());
        }
        _ => {
            return Err(Error::malformed("file", format!("unknown magic {magic:?}")));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::BinaryEmbedding;

    #[test]
    fn hashes_are_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("a")).unwrap();
        fs::write(dir.path().join("a/x"), b"1").unwrap();
        let h1 = content_hash(dir.path()).unwrap();
        assert_eq!(h1.len(), 64);
        fs::write(dir.path().join("a/x"), b"2").unwrap();
        assert_ne!(content_hash(dir.path()).unwrap(), h1);
        let f = dir.path().join("f");
        fs::write(&f, b"abc").unwrap();
        assert_eq!(
            content_hash(&f).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn eval_self_retrieval_and_efficiency() {
        let dir = tempfile::tempdir().unwrap();
        let e = |b: u64| BinaryEmbedding::from_words(64, vec![b]).unwrap();
        let entries = vec![(0, e(0)), (1, e(u64::MAX)), (2, e(0xff))];
        write_embeddings(dir.path().join("db.bemb"), 64, &entries).unwrap();
        fs::write(dir.path().join("gt.txt"), "0: 0\n1: 1\n2: 2\n").unwrap();
        let p = |n: &str| dir.path().join(n);
        let csv = eval(&p("db.bemb"), &p("db.bemb"), &p("gt.txt"), &[1, 5, 10], 1000).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        let f: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(f[1], "1.000000");
        let db_bytes: f64 = f[3].parse().unwrap();
        let eff: f64 = f[5].parse().unwrap();
        let want = 100.0 / ((1000.0 + db_bytes) / (1u64 << 20) as f64);
        assert!((eff - want).abs() < 1e-6 * want, "{eff} {want}");

        fs::write(dir.path().join("gt.txt"), "0: 0\n1: 1\n").unwrap();
        assert!(eval(&p("db.bemb"), &p("db.bemb"), &p("gt.txt"), &[1], 0).is_err());
    }

    #[test]
    fn stage_and_bench_parsing() {
        assert_eq!(Stage::parse("all").unwrap(), Stage::All);
        assert!(Stage::parse("x").is_err());
        assert!(BenchKind::parse("gpu").is_err());
        assert!(bench(BenchKind::Matmul, &[vec![4, 4]], 1, 0).is_err());
        let csv = bench(BenchKind::Search, &[vec![10, 64]], 2, 0).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }
}
