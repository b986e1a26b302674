use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crisis_kit::synth::{TopicCorpus, TopicCorpusConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn ctk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctk"))
        .args(args)
        .env("CT_THREADS", "1")
        .output()
        .expect("ctk runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = ctk(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Raw tweets, a trained tokenizer and packed blocks in a fresh directory.
struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let corpus = TopicCorpus::new(TopicCorpusConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw: Vec<String> = corpus
            .documents(120, 2, &mut rng)
            .into_iter()
            .enumerate()
            .map(|(i, (_, d))| if i % 5 == 0 { format!("@someone {d} https://t.co/x &amp; ok") } else { d })
            .collect();
        fs::write(root.join("raw.txt"), raw.join("\n") + "\nshort one\n").unwrap();
        let mut tsv = String::from("text\tlabel\n");
        for (t, s) in corpus.balanced_sentences(6, &mut rng) {
            tsv.push_str(&format!("{s}\ttopic{t}\n"));
        }
        fs::write(root.join("labeled.tsv"), tsv).unwrap();
        let model = r#"{"hidden_size":16,"num_hidden_layers":1,"num_attention_heads":2,"intermediate_size":32,
            "max_position_embeddings":34,"vocab_size":400,"hidden_dropout_prob":0.1,
            "attention_probs_dropout_prob":0.1,"layer_norm_eps":1e-5}"#;
        fs::write(root.join("model.json"), model).unwrap();
        Workspace { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn prepare(&self) {
        let st = ctk(&["preprocess", "--in", p(&self.path("raw.txt")), "--out", p(&self.path("clean.txt"))]);
        assert!(st.status.success());
        ok_json(&["train-tokenizer", "--in", p(&self.path("clean.txt")), "--out", p(&self.path("tok")), "--vocab-size", "380"]);
        ok_json(&[
            "pack",
            "--in",
            p(&self.path("clean.txt")),
            "--tokenizer",
            p(&self.path("tok")),
            "--out",
            p(&self.path("blocks.txt")),
            "--block-len",
            "32",
        ]);
    }

    fn pretrain(&self, out: &str) -> Value {
        ok_json(&[
            "--seed",
            "5",
            "pretrain",
            "--blocks",
            p(&self.path("blocks.txt")),
            "--model-config",
            p(&self.path("model.json")),
            "--out",
            p(&self.path(out)),
            "--epochs",
            "2",
            "--micro-batch",
            "4",
        ])
    }
}

#[test]
fn preprocess_filters_and_normalizes() {
    let ws = Workspace::new();
    ws.prepare();
    let clean = fs::read_to_string(ws.path("clean.txt")).unwrap();
    assert!(!clean.contains("short one"));
    assert!(!clean.contains("https://") && !clean.contains("&amp;") && !clean.contains("@someone"));
    assert!(clean.contains("@USER") && clean.contains("HTTPURL"));
    let stats = ok_json(&["stats", "--in", p(&ws.path("clean.txt"))]);
    assert!(stats["tokens"].as_u64().unwrap() > 0);
}

#[test]
fn pipeline_is_reproducible_and_leaves_inputs_alone() {
    let ws = Workspace::new();
    ws.prepare();
    let inputs = ["raw.txt", "clean.txt", "blocks.txt", "model.json", "labeled.tsv"];
    let before: Vec<Vec<u8>> = inputs.iter().map(|f| fs::read(ws.path(f)).unwrap()).collect();

    let a = ws.pretrain("ckpt_a");
    let b = ws.pretrain("ckpt_b");
    assert_eq!(a["final_loss"], b["final_loss"]);
    for f in ["complete.ctxf", "best_loss.ctxf", "one_look.ctxf", "loss_history.csv"] {
        assert_eq!(fs::read(ws.path("ckpt_a").join(f)).unwrap(), fs::read(ws.path("ckpt_b").join(f)).unwrap(), "{f}");
    }

    let report = ok_json(&[
        "evaluate-davg",
        "--checkpoint",
        p(&ws.path("ckpt_a/complete.ctxf")),
        "--tokenizer",
        p(&ws.path("tok")),
        "--data",
        p(&ws.path("labeled.tsv")),
        "--write-embeddings",
        p(&ws.path("emb.tsv")),
    ]);
    let d = report["d_avg"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&d));
    assert_eq!(report["per_class"].as_array().unwrap().len(), 4);

    let labels: String = fs::read_to_string(ws.path("labeled.tsv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit('\t').next().unwrap().to_owned() + "\n")
        .collect();
    fs::write(ws.path("labels.txt"), labels).unwrap();
    let from_file = ok_json(&["evaluate-davg", "--embeddings", p(&ws.path("emb.tsv")), "--labels", p(&ws.path("labels.txt"))]);
    assert!((from_file["d_avg"].as_f64().unwrap() - d).abs() < 1e-9);

    let after: Vec<Vec<u8>> = inputs.iter().map(|f| fs::read(ws.path(f)).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn vocab_diff_of_a_tokenizer_with_itself() {
    let ws = Workspace::new();
    ws.prepare();
    let tok = p(&ws.path("tok")).to_owned();
    let v = ok_json(&["vocab-diff", "--a", &tok, "--b", &tok]);
    assert_eq!(v["unique_in_a"], 0);
    assert_eq!(v["unique_in_b"], 0);
    assert_eq!(v["a_vocab_size"], v["b_vocab_size"]);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(ctk(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ctk(&["pack", "--in", "x"]).status.code(), Some(1));
    assert_eq!(ctk(&[]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let out = ctk(&["stats", "--in", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}
