//! `ternvpr`: generate data, train, extract binary embeddings, evaluate
//! retrieval and benchmark the kernels.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ternvpr::data::GenParams;
use ternvpr::model::load_model;
use ternvpr::pipeline::{self, BenchKind, Stage};
use ternvpr::train::TrainConfig;
use ternvpr::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "ternvpr", version, about = "Ternary transformer place recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic places dataset.
    GenData {
        #[arg(long, default_value_t = 50)]
        places: usize,
        /// Images per place; the first is the query.
        #[arg(long, default_value_t = 4)]
        per_place: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train teacher, student and fine-tuned model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `key = value` overrides of the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "all", value_parser = ["pretrain", "finetune", "all"])]
        stage: String,
    },
    /// Binary embeddings of images (files or directories) into a BEMB file.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluation mode; defaults to the one stored in the model.
        #[arg(long, value_parser = ["float", "blend", "quantized"])]
        mode: Option<String>,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Recall@k and memory efficiency of a query set against a database.
    Eval {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
        /// Model file counted in the memory footprint.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Kernel or search latency CSV.
    Bench {
        #[arg(value_parser = ["matmul", "search"])]
        kind: String,
        /// `m,k,n` for matmul or `entries,dim` for search; repeatable.
        #[arg(long = "size")]
        sizes: Vec<String>,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print file headers.
    Inspect {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn emit(text: &str, out: Option<&Path>) -> ternvpr::Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn parse_size(s: &str) -> ternvpr::Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("size {s:?}: expected comma-separated integers")))
        })
        .collect()
}

fn run(cli: Cli) -> ternvpr::Result<()> {
    match cli.command {
        Command::GenData {
            places,
            per_place,
            size,
            seed,
            out,
        } => {
            let ds = pipeline::gen_data(
                &GenParams {
                    places,
                    per_place,
                    size,
                    seed,
                },
                &out,
            )?;
            eprintln!(
                "wrote {} database and {} query images to {}",
                ds.database.len(),
                ds.queries.len(),
                out.display()
            );
        }
        Command::Train {
            data,
            out,
            config,
            seed,
            stage,
        } => {
            let mut cfg = TrainConfig::default();
            if let Some(p) = config {
                cfg.apply_text(&fs::read_to_string(&p)?)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let m = pipeline::train(&cfg, &data, &out, Stage::parse(&stage)?)?;
            eprintln!("wrote {} files to {}", m.outputs.len() + 1, out.display());
        }
        Command::Extract {
            model,
            out,
            mode,
            images,
        } => {
            let mut m = load_model(&model)?;
            if let Some(mode) = mode {
                m = pipeline::with_mode(m, &mode)?;
            }
            let files = pipeline::expand_images(&images)?;
            let n = pipeline::extract(&m, &files, &out)?;
            eprintln!("wrote {n} embeddings to {}", out.display());
        }
        Command::Eval {
            db,
            queries,
            gt,
            k,
            model,
            out,
        } => {
            let model_bytes = match model {
                Some(p) => fs::metadata(p)?.len(),
                None => 0,
            };
            let csv = pipeline::eval(&db, &queries, &gt, &k, model_bytes)?;
            emit(&csv, out.as_deref())?;
        }
        Command::Bench {
            kind,
            sizes,
            repeats,
            seed,
            out,
        } => {
            let kind = BenchKind::parse(&kind)?;
            let mut sizes = sizes.iter().map(|s| parse_size(s)).collect::<ternvpr::Result<Vec<_>>>()?;
            if sizes.is_empty() {
                sizes = match kind {
                    BenchKind::Matmul => vec![vec![64, 64, 17], vec![256, 256, 17], vec![768, 768, 17]],
                    BenchKind::Search => vec![vec![10_000, 256], vec![10_000, 4096]],
                };
            }
            let csv = pipeline::bench(kind, &sizes, repeats, seed)?;
            emit(&csv, out.as_deref())?;
        }
        Command::Inspect { files } => {
            for (i, f) in files.iter().enumerate() {
                if files.len() > 1 {
                    println!("{}[{}]", if i > 0 { "\n" } else { "" }, f.display());
                }
                print!("{}", pipeline::inspect(f)?);
            }
        }
    }
    Ok(())
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("TETRA_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("TETRA_THREADS={v:?} is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}
