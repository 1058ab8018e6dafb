use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mcr2::store::{read_embeddings, write_gold, GoldRecord, GoldScores};

fn mcr2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcr2"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mcr2(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic corpus in `dir/syn`.
fn synth(dir: &Path) -> PathBuf {
    let out = dir.join("syn");
    ok(&[
        "gen-synth", "--dim", "16", "--clusters", "2", "--rank", "2", "--per", "32", "--sigma",
        "0.05", "--seed", "7", "--out", s(&out),
    ]);
    out
}

fn train(dir: &Path, syn: &Path, dim_out: &str) -> PathBuf {
    let out = dir.join("run");
    let emb = syn.join("embeddings.emb1");
    let pairs = syn.join("pairs.jsonl");
    let args = [
        "train", "--embeddings", s(&emb), "--pairs", s(&pairs), "--dim-out", dim_out,
        "--clusters", "2", "--batch", "16", "--epochs", "3", "--seed", "3", "--out", s(&out),
    ];
    ok(&args);
    out
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_synth_writes_files_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path());
    for f in ["embeddings.emb1", "pairs.jsonl", "labels.txt", "manifest.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let emb = read_embeddings(a.join("embeddings.emb1")).unwrap();
    assert_eq!((emb.dim(), emb.count()), (16, 128));
    let first = fs::read(a.join("embeddings.emb1")).unwrap();
    synth(dir.path());
    assert_eq!(fs::read(a.join("embeddings.emb1")).unwrap(), first);
    let m = manifest(&a.join("manifest.json"));
    assert_eq!(m["command"], "gen-synth");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["tool_version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn infeasible_spec_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mcr2(&[
        "gen-synth", "--dim", "8", "--clusters", "4", "--rank", "3", "--per", "2", "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible"));
}

#[test]
fn train_defaults_lambda_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synth(dir.path());
    let run = train(dir.path(), &syn, "100");
    let m = manifest(&run.join("manifest.json"));
    assert_eq!(m["config"]["lambda"], 2000.0);
    assert_eq!(m["config"]["batch"], 16);
    let ckpt = fs::read(run.join("projector.prj1")).unwrap();
    train(dir.path(), &syn, "100");
    assert_eq!(fs::read(run.join("projector.prj1")).unwrap(), ckpt);
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,loss,R,sumRk,D,seconds\n"));
    assert_eq!(history.lines().count(), 4);
}

#[test]
fn missing_pairs_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synth(dir.path());
    let missing = dir.path().join("absent.jsonl");
    let out = mcr2(&[
        "train", "--embeddings", s(&syn.join("embeddings.emb1")), "--pairs", s(&missing),
        "--dim-out", "4", "--clusters", "2", "--out", s(&dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.jsonl"));
}

#[test]
fn project_gives_unit_features_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synth(dir.path());
    let run = train(dir.path(), &syn, "4");
    let out = dir.path().join("feat.emb1");
    let (ckpt, emb) = (run.join("projector.prj1"), syn.join("embeddings.emb1"));
    let args = ["project", "--checkpoint", s(&ckpt), "--embeddings", s(&emb), "--out", s(&out)];
    ok(&args);
    let feats = read_embeddings(&out).unwrap();
    assert_eq!(feats.dim(), 4);
    for j in 0..feats.count() {
        let norm: f32 = feats.column(j).iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }
    let bytes = fs::read(&out).unwrap();
    ok(&args);
    assert_eq!(fs::read(&out).unwrap(), bytes);
    assert!(dir.path().join("feat.emb1.manifest.json").exists());
}

#[test]
fn project_rejects_wrong_input_dim() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synth(dir.path());
    let run = train(dir.path(), &syn, "4");
    let other = dir.path().join("other");
    ok(&[
        "gen-synth", "--dim", "12", "--clusters", "2", "--rank", "2", "--per", "4", "--out",
        s(&other),
    ]);
    let out = mcr2(&[
        "project", "--checkpoint", s(&run.join("projector.prj1")), "--embeddings",
        s(&other.join("embeddings.emb1")), "--out", s(&dir.path().join("f.emb1")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_sr_reports_both_methods() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synth(dir.path());
    let run = train(dir.path(), &syn, "4");
    let report = dir.path().join("sr.csv");
    ok(&[
        "eval-sr", "--embeddings", s(&syn.join("embeddings.emb1")), "--pairs",
        s(&syn.join("pairs.jsonl")), "--checkpoint", s(&run.join("projector.prj1")), "--k", "8",
        "--out", s(&report),
    ]);
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,dim,k,accuracy,encode_s,cluster_s,total_s");
    assert!(lines[1].starts_with("head,4,2,"));
    assert!(lines[2].starts_with("kmeans,4,8,"));

    let out = mcr2(&[
        "eval-sr", "--embeddings", s(&syn.join("embeddings.emb1")), "--pairs",
        s(&syn.join("pairs.jsonl")), "--method", "head", "--out", s(&report),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_sr_kmeans_defaults_to_128() {
    let dir = tempfile::tempdir().unwrap();
    let syn = dir.path().join("big");
    ok(&[
        "gen-synth", "--dim", "8", "--clusters", "2", "--rank", "2", "--per", "150", "--out",
        s(&syn),
    ]);
    let report = dir.path().join("sr.csv");
    ok(&[
        "eval-sr", "--embeddings", s(&syn.join("embeddings.emb1")), "--pairs",
        s(&syn.join("pairs.jsonl")), "--method", "kmeans", "--out", s(&report),
    ]);
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("kmeans,8,128,"));
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn eval_sts_scores_gold() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synth(dir.path());
    let emb_path = syn.join("embeddings.emb1");
    let emb = read_embeddings(&emb_path).unwrap();
    let cols = emb.to_rows();
    let pairs = [(0, 1), (0, 40), (2, 70), (5, 100), (9, 33), (12, 64), (80, 81)];
    let records: Vec<GoldRecord> = pairs
        .iter()
        .map(|&(a, b)| GoldRecord { a, b, score: 5.0 * cosine(&cols[a], &cols[b]) })
        .collect();
    let gold = dir.path().join("gold.csv");
    write_gold(&GoldScores { records: records.clone() }, &gold).unwrap();
    let out = dir.path().join("sts.csv");
    ok(&["eval-sts", "--embeddings", s(&emb_path), "--gold", s(&gold), "--out", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "spearman");
    assert!((row[1].parse::<f64>().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(row[2], "7");

    let swapped: Vec<GoldRecord> = records.iter().map(|r| GoldRecord { a: r.b, b: r.a, score: r.score }).collect();
    write_gold(&GoldScores { records: swapped }, &gold).unwrap();
    let out2 = dir.path().join("sts2.csv");
    ok(&["eval-sts", "--embeddings", s(&emb_path), "--gold", s(&gold), "--out", s(&out2)]);
    assert_eq!(fs::read_to_string(&out2).unwrap(), text);
}

#[test]
fn report_plots_and_rejects_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let sr = dir.path().join("sr.csv");
    fs::write(&sr, "method,dim,k,accuracy,encode_s,cluster_s,total_s\nhead,8,4,0.9,0.1,0.01,0.11\n").unwrap();
    let plots = dir.path().join("plots");
    ok(&["report", "--input", s(&sr), "--out", s(&plots)]);
    let svg = fs::read_to_string(plots.join("sr_accuracy.svg")).unwrap();
    assert!(svg.starts_with("<svg xmlns=\"http://www.w3.org/2000/svg\""));
    assert_eq!(svg.matches("<circle").count(), 1);

    fs::write(
        &sr,
        "method,dim,k,accuracy,encode_s,cluster_s,total_s\nhead,8,4,0.9,0.1,0.01,0.11\nkmeans,8,4,0.8,0.1,0.5,0.6\nhead,16,4,0.95,0.1,0.01,0.11\n",
    )
    .unwrap();
    let sts = dir.path().join("sts.csv");
    fs::write(&sts, "metric,value,n,dim\nspearman,0.8,10,384\nspearman,0.7,10,16\n").unwrap();
    ok(&["report", "--input", s(&sr), s(&sts), "--out", s(&plots)]);
    let svg = fs::read_to_string(plots.join("sr_time.svg")).unwrap();
    assert!(svg.contains(">head</text>") && svg.contains(">kmeans</text>"));
    assert!(plots.join("sts_relative_error.svg").exists());

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "method,dim,k,accuracy,encode_s,cluster_s,total_s\n").unwrap();
    let out = mcr2(&["report", "--input", s(&empty), "--out", s(&plots)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty report"));
}

#[test]
fn thread_cap_is_honored_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_mcr2"))
            .env("MCR2_THREADS", threads)
            .args(["gen-synth", "--dim", "4", "--clusters", "2", "--rank", "2", "--per", "3", "--out"])
            .arg(dir.path())
            .output()
            .unwrap()
    };
    assert!(run("1").status.success());
    assert_eq!(run("zero").status.code(), Some(2));
}

#[test]
fn bad_flags_exit_with_usage_code() {
    assert_eq!(mcr2(&["train", "--bogus"]).status.code(), Some(2));
}
