use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ternvpr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ternvpr"))
        .args(args)
        .env("TETRA_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ternvpr(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    let out = ternvpr(args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(!stderr.contains("panicked"), "{stderr}");
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "layers = 2\nheads = 2\nhidden = 16\nffn = 32\npatch = 4\nimage = 16\nembed_dim = 64\n\
teacher_steps = 2\npretrain_steps = 2\nfinetune_steps = 2\npretrain_batch = 4\nbatch_places = 3\nbatch_per_place = 2\nwarmup_steps = 1\n";

fn gen(dir: &Path, places: usize, per_place: usize, seed: u64) {
    ok(&[
        "gen-data",
        "--places",
        &places.to_string(),
        "--per-place",
        &per_place.to_string(),
        "--size",
        "16",
        "--seed",
        &seed.to_string(),
        "--out",
        s(dir),
    ]);
}

#[test]
fn gen_data_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    gen(&t.path().join("a"), 3, 3, 7);
    gen(&t.path().join("b"), 3, 3, 7);
    for rel in ["gt.txt", "db/000005.tnsr", "queries/000002.tnsr"] {
        assert_eq!(
            fs::read(t.path().join("a").join(rel)).unwrap(),
            fs::read(t.path().join("b").join(rel)).unwrap(),
            "{rel}"
        );
    }
    gen(&t.path().join("one"), 1, 2, 0);
    assert_eq!(fs::read_to_string(t.path().join("one/gt.txt")).unwrap().trim(), "0: 0");
    assert_eq!(code(&["gen-data", "--per-place", "1", "--out", s(&t.path().join("x"))]), 2);
}

#[test]
fn pipeline_end_to_end_and_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, 6, 3, 1);
    let cfg = t.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    for run in ["r1", "r2"] {
        ok(&["train", "--data", s(&data), "--out", s(&t.path().join(run)), "--config", s(&cfg)]);
    }
    for csv in ["metrics.csv", "teacher_log.csv", "pretrain_log.csv", "finetune_log.csv"] {
        let a = fs::read(t.path().join("r1").join(csv)).unwrap();
        assert_eq!(a, fs::read(t.path().join("r2").join(csv)).unwrap(), "{csv}");
    }
    let manifest = fs::read_to_string(t.path().join("r1/manifest.txt")).unwrap();
    assert!(manifest.contains("input.data = sha256:"));
    assert!(manifest.contains("ms_beta = 50"));

    let model = t.path().join("r1/model_q.ttra");
    let db = t.path().join("db.bemb");
    let q = t.path().join("q.bemb");
    ok(&["extract", "--model", s(&model), "--out", s(&db), s(&data.join("db"))]);
    ok(&["extract", "--model", s(&model), "--out", s(&q), s(&data.join("queries"))]);
    // header + count * (id + 64 bits)
    assert_eq!(fs::metadata(&db).unwrap().len(), 18 + 12 * (8 + 8));
    let csv = ok(&[
        "eval",
        "--db",
        s(&db),
        "--queries",
        s(&q),
        "--gt",
        s(&data.join("gt.txt")),
        "--k",
        "1,5,10",
        "--model",
        s(&model),
    ]);
    assert_eq!(csv.lines().count(), 4);

    // the stored recall agrees with the file-level evaluation
    let metrics = fs::read_to_string(t.path().join("r1/metrics.csv")).unwrap();
    let fine = metrics.lines().find(|l| l.starts_with("finetune")).unwrap();
    let stored: f64 = fine.rsplit(',').next().unwrap().parse().unwrap();
    let r1: f64 = csv.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((stored - r1).abs() < 1e-9, "{stored} vs {r1}");

    // finetune alone from the saved student
    ok(&["train", "--data", s(&data), "--out", s(&t.path().join("r1")), "--config", s(&cfg), "--stage", "finetune"]);
    assert_eq!(
        fs::read(t.path().join("r1/finetune_log.csv")).unwrap(),
        fs::read(t.path().join("r2/finetune_log.csv")).unwrap()
    );
}

#[test]
fn zero_steps_write_the_initialization() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, 3, 2, 0);
    let cfg = t.path().join("zero.cfg");
    fs::write(
        &cfg,
        format!("{TINY}teacher_steps = 0\npretrain_steps = 0\nfinetune_steps = 0\n"),
    )
    .unwrap();
    ok(&["train", "--data", s(&data), "--out", s(&t.path().join("r")), "--config", s(&cfg)]);
    let info = |f: &str| ok(&["inspect", s(&t.path().join("r").join(f))]);
    assert!(info("model_q.ttra").contains("mode = Quantized"));
    let a = ternvpr::model::load_model(t.path().join("r/teacher.ttra")).unwrap();
    let b = ternvpr::model::load_model(t.path().join("r/model.ttra")).unwrap();
    assert_eq!(a, b);
    let init = ternvpr::model::ViT::init(a.config.clone(), 0).unwrap();
    assert_eq!(a, init);
}

#[test]
fn extract_edge_cases() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, 2, 2, 0);
    let model = t.path().join("m.ttra");
    let cfg = ternvpr::model::ViTConfig {
        layers: 1,
        heads: 2,
        hidden: 16,
        ffn: 32,
        patch: 4,
        image: 16,
        embed_dim: 64,
        ..Default::default()
    };
    ternvpr::model::save_model(&model, &ternvpr::model::ViT::init(cfg, 3).unwrap()).unwrap();

    let empty = t.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = t.path().join("e.bemb");
    ok(&["extract", "--model", s(&model), "--out", s(&out), s(&empty)]);
    assert!(ok(&["inspect", s(&out)]).contains("count = 0"));

    let img = data.join("db/000000.tnsr");
    let twice = t.path().join("t.bemb");
    ok(&["extract", "--model", s(&model), "--mode", "quantized", "--out", s(&twice), s(&img), s(&img)]);
    let f = ternvpr::formats::read_embeddings(&twice).unwrap();
    assert_eq!(f.entries[0].1, f.entries[1].1);

    // a one-channel image against a three-channel model
    let gray = t.path().join("gray.tnsr");
    fs::write(&gray, ternvpr::formats::encode_tensor(&[1, 16, 16], &[0.5; 256]).unwrap()).unwrap();
    assert_eq!(code(&["extract", "--model", s(&model), "--out", s(&out), s(&gray)]), 3);
}

#[test]
fn corrupt_inputs_fail_cleanly() {
    let t = tempfile::tempdir().unwrap();
    let model = t.path().join("m.ttra");
    let cfg = ternvpr::model::ViTConfig {
        layers: 1,
        heads: 2,
        hidden: 16,
        ffn: 32,
        patch: 4,
        image: 16,
        embed_dim: 64,
        ..Default::default()
    };
    ternvpr::model::save_model(&model, &ternvpr::model::ViT::init(cfg, 3).unwrap().to_quantized().unwrap()).unwrap();
    let bytes = fs::read(&model).unwrap();
    let bad = t.path().join("bad");
    for cut in [0, 3, 10, 40, bytes.len() / 2, bytes.len() - 1] {
        fs::write(&bad, &bytes[..cut]).unwrap();
        assert_eq!(code(&["inspect", s(&bad)]), 3, "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    flipped[0] ^= 0xff;
    fs::write(&bad, &flipped).unwrap();
    assert_eq!(code(&["inspect", s(&bad)]), 3);
    fs::write(&bad, b"BEMB\x01\x00\x40\x00\x00\x00\x05\x00\x00\x00\x00\x00\x00\x00").unwrap();
    assert_eq!(code(&["inspect", s(&bad)]), 3);
    fs::write(&bad, b"TNSR\x00\x02").unwrap();
    assert_eq!(code(&["inspect", s(&bad)]), 3);

    assert_eq!(code(&["bench", "matmul", "--size", "4,4", "--repeats", "1"]), 2);
    assert_eq!(code(&["eval", "--db", s(&bad), "--queries", s(&bad), "--gt", s(&bad), "--k", "0"]), 2);
    assert_eq!(code(&["train", "--data", s(&t.path().join("missing")), "--out", s(&t.path().join("o"))]), 3);
    assert_eq!(code(&["nonsense"]), 2);
}

#[test]
fn bench_emits_csv() {
    let csv = ok(&["bench", "search", "--size", "200,256", "--repeats", "3"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "kernel,entries,dim,median_ns,p10_ns,p90_ns,bytes_db");
    assert_eq!(lines.len(), 3);
    let csv = ok(&["bench", "matmul", "--size", "32,32,4", "--repeats", "3"]);
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert!(row[4].parse::<u64>().unwrap() > 0);
}
