use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use hass_core::bench::{read_jsonl, strip_wall_times, summarize, CaseSummary};
use serde_json::Value;

fn hass(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hass")).args(args).env("RUST_LOG", "warn").output().expect("spawn hass")
}

fn ok(args: &[&str]) -> Output {
    let out = hass(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Prepared data, a target and a draft head, all tiny.
struct Fixture {
    root: PathBuf,
    data: String,
    target: String,
    draft: String,
}

const TARGET_FLAGS: &[&str] =
    &["--d-model", "16", "--n-layers", "1", "--n-heads", "2", "--d-ff", "32", "--max-seq-len", "160", "--seq-len", "32", "--batch-size", "4"];

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        let text: String = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/corpus.txt"))
            .unwrap()
            .chars()
            .take(12_000)
            .collect();
        let corpus = root.join("corpus.txt");
        std::fs::write(&corpus, text).unwrap();
        let s = |rel: &str| p(&root.join(rel)).to_owned();
        let f = Fixture { data: s("data"), target: s("target/target.bin"), draft: s("draft/draft.bin"), root: root.clone() };
        ok(&["prepare", "--corpus", p(&corpus), "--out-dir", &f.data]);
        let target_dir = s("target");
        let mut args = vec!["train-target", "--data-dir", &f.data, "--out-dir", &target_dir];
        args.extend_from_slice(TARGET_FLAGS);
        args.extend_from_slice(&["--epochs", "1"]);
        ok(&args);
        ok(&[
            "train-draft",
            "--data-dir",
            &f.data,
            "--target",
            &f.target,
            "--out-dir",
            p(&f.root.join("draft")),
            "--seq-len",
            "32",
            "--stride",
            "32",
            "--max-examples",
            "12",
            "--epochs",
            "1",
            "--batch-size",
            "4",
        ]);
        f
    })
}

fn generate(f: &Fixture, extra: &[&str]) -> Output {
    let mut args = vec!["generate", "--data-dir", &f.data, "--target", &f.target, "--draft", &f.draft];
    args.extend_from_slice(&["--prompt", "It was the ", "--max-new-tokens", "40"]);
    args.extend_from_slice(extra);
    hass(&args)
}

#[test]
fn prepare_small_corpus_and_rerun_identically() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    std::fs::write(&corpus, "abab").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["prepare", "--corpus", p(&corpus), "--out-dir", p(&a)]);
    ok(&["prepare", "--corpus", p(&corpus), "--out-dir", p(&b)]);
    let vocab = read_json(&a.join("vocab.json"));
    assert_eq!(vocab["chars"], serde_json::json!(["a", "b"]));
    assert_eq!(vocab["unk"], 2);
    assert_eq!(vocab["eot"], 3);
    for file in ["vocab.json", "tokens.bin", "report.json"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    assert_eq!(read_json(&a.join("report.json"))["tokens"], 4);
}

#[test]
fn every_run_writes_its_resolved_config() {
    let f = fixture();
    let cfg = read_json(&f.root.join("target/config.json"));
    assert_eq!(cfg["model"]["d_model"], 16);
    assert_eq!(cfg["model"]["vocab_size"], read_json(&Path::new(&f.data).join("report.json"))["vocab_size"]);
    for dir in ["target", "draft"] {
        for file in ["config.json", "metrics.jsonl", "report.json"] {
            assert!(f.root.join(dir).join(file).exists(), "{dir}/{file}");
        }
    }
    let draft_cfg = read_json(&f.root.join("draft/config.json"));
    assert_eq!(draft_cfg["train"]["align_steps"], 3);
    assert_eq!(draft_cfg["train"]["top_k"], 10);
}

#[test]
fn target_training_is_reproducible_from_its_config() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("again");
    ok(&["train-target", "--config", p(&f.root.join("target/config.json")), "--out-dir", p(&again)]);
    assert_eq!(std::fs::read(&f.target).unwrap(), std::fs::read(again.join("target.bin")).unwrap());
    let zero = dir.path().join("zero");
    let mut args = vec!["train-target", "--data-dir", &f.data, "--out-dir", p(&zero)];
    args.extend_from_slice(TARGET_FLAGS);
    args.extend_from_slice(&["--epochs", "0"]);
    ok(&args);
    assert_ne!(std::fs::read(&f.target).unwrap(), std::fs::read(zero.join("target.bin")).unwrap());
}

#[test]
fn greedy_tree_output_equals_vanilla() {
    let f = fixture();
    let vanilla = generate(f, &["--method", "vanilla", "--temperature", "0"]);
    let tree = generate(f, &["--method", "tree", "--temperature", "0"]);
    let chain = generate(f, &["--method", "chain", "--temperature", "0"]);
    assert!(vanilla.status.success() && tree.status.success() && chain.status.success());
    assert_eq!(vanilla.stdout, tree.stdout);
    assert_eq!(vanilla.stdout, chain.stdout);
    assert!(String::from_utf8(vanilla.stdout).unwrap().starts_with("It was the "));
}

#[test]
fn seeded_sampling_is_repeatable_and_traced_per_cycle() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &Path| generate(f, &["--temperature", "1", "--seed", "7", "--trace", "--out-dir", p(out)]);
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let report = read_json(&dir.path().join("a/report.json"));
    let cycles = report["report"]["cycles"].as_u64().unwrap() as usize;
    let trace = String::from_utf8(a.stderr).unwrap();
    assert_eq!(trace.lines().filter(|l| l.starts_with("cycle ")).count(), cycles);
    let metrics = std::fs::read_to_string(dir.path().join("a/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), cycles);
}

#[test]
fn bench_tables_come_from_the_emitted_metrics() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &Path| {
        ok(&[
            "bench",
            "--data-dir",
            &f.data,
            "--target",
            &f.target,
            "--draft",
            &format!("d={}", f.draft),
            "--prompts",
            "3",
            "--prompt-len",
            "16",
            "--max-new-tokens",
            "24",
            "--out-dir",
            p(out),
        ])
    };
    let out = run(&dir.path().join("a"));
    run(&dir.path().join("b"));
    let text = |d: &str| std::fs::read_to_string(dir.path().join(d).join("metrics.jsonl")).unwrap();
    assert_eq!(strip_wall_times(&text("a")).unwrap(), strip_wall_times(&text("b")).unwrap());

    let records = read_jsonl(&text("a")).unwrap();
    let cfg = read_json(&dir.path().join("a/config.json"));
    let max_step = cfg["decode"]["chain_len"].as_u64().unwrap().max(cfg["decode"]["tree"]["depth"].as_u64().unwrap());
    let recomputed = summarize(&records, max_step as usize);
    let report: Vec<CaseSummary> = serde_json::from_value(read_json(&dir.path().join("a/report.json"))["cases"].clone()).unwrap();
    assert_eq!(report, recomputed);
    let names: Vec<&str> = report.iter().map(|s| s.case.as_str()).collect();
    assert_eq!(names, ["vanilla", "d/chain", "d/tree", "vanilla", "d/chain", "d/tree"]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("| d/tree |"));
}

#[test]
fn sweep_trains_one_drafter_per_cell() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.json");
    let sweep = serde_json::json!({
        "sweep": {
            "align_steps": [1, 2],
            "top_k_weight": [0.0, 1.0],
            "dataset": { "seq_len": 32, "stride": 32, "max_examples": 6 },
            "train": { "epochs": 1, "batch_size": 3 }
        }
    });
    std::fs::write(&cfg, sweep.to_string()).unwrap();
    let out = dir.path().join("out");
    ok(&[
        "bench",
        "--config",
        p(&cfg),
        "--data-dir",
        &f.data,
        "--target",
        &f.target,
        "--prompts",
        "2",
        "--prompt-len",
        "16",
        "--max-new-tokens",
        "12",
        "--temperatures",
        "0",
        "--out-dir",
        p(&out),
    ]);
    let report: Vec<CaseSummary> = serde_json::from_value(read_json(&out.join("report.json"))["cases"].clone()).unwrap();
    let names: Vec<&str> = report.iter().map(|s| s.case.as_str()).collect();
    assert_eq!(names, ["vanilla", "n1-k10-w0/tree", "n1-k10-w1/tree", "n2-k10-w0/tree", "n2-k10-w1/tree"]);
    let cell = read_json(&out.join("drafts/n2-k10-w0/config.json"));
    assert_eq!(cell["train"]["align_steps"], 2);
    assert_eq!(cell["train"]["top_k_weight"], 0.0);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let code = |out: Output| out.status.code().unwrap();

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"corpus": "x.txt", "surprise": 1}"#).unwrap();
    assert_eq!(code(hass(&["prepare", "--config", p(&bad), "--out-dir", p(&dir.path().join("o"))])), 2);
    assert_eq!(code(hass(&["prepare", "--corpus", p(&dir.path().join("missing.txt")), "--out-dir", p(&dir.path().join("o"))])), 3);
    assert_eq!(code(generate(f, &["--method", "sideways"])), 2);
    assert_eq!(code(hass(&["generate", "--data-dir", &f.data, "--target", &f.target, "--method", "tree"])), 2);
    let long = "x".repeat(200);
    assert_eq!(code(hass(&["generate", "--data-dir", &f.data, "--target", &f.target, "--method", "vanilla", "--prompt", &long])), 2);
    assert_eq!(code(generate(f, &["--temperature=-1"])), 2);

    let garbage = dir.path().join("garbage.bin");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(hass(&["generate", "--data-dir", &f.data, "--target", p(&garbage), "--prompt", "a"])), 3);

    // A target over another vocabulary cannot host the draft head.
    let other = dir.path().join("other");
    let corpus = dir.path().join("other.txt");
    std::fs::write(&corpus, "xyz ".repeat(200)).unwrap();
    ok(&["prepare", "--corpus", p(&corpus), "--out-dir", p(&other.join("data"))]);
    let (other_data, other_target) = (other.join("data"), other.join("target"));
    let mut args = vec!["train-target", "--data-dir", p(&other_data), "--out-dir", p(&other_target)];
    args.extend_from_slice(TARGET_FLAGS);
    args.extend_from_slice(&["--epochs", "1"]);
    ok(&args);
    let out = hass(&[
        "generate",
        "--data-dir",
        p(&other.join("data")),
        "--target",
        p(&other.join("target/target.bin")),
        "--draft",
        &f.draft,
        "--prompt",
        "xy",
    ]);
    assert_eq!(code(out), 3);
    let out = hass(&["train-draft", "--data-dir", &f.data, "--target", p(&other.join("target/target.bin")), "--out-dir", p(&other.join("d"))]);
    assert_eq!(code(out), 3);
}
