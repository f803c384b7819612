use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn umnmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_umnmt"))
        .args(args)
        .env_remove("UMNMT_SEED")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config() -> Value {
    json!({
        "data": {"seed": 3, "synth": {"n_samples": 120, "n_valid": 10, "n_test": 12}},
        "model": {"d_model": 16, "n_heads": 2, "d_ff": 32},
        "train": {"steps": 6, "batch_size": 8, "eval_every": 3, "checkpoint_every": 3, "seed": 3}
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn prepared(cfg: &Value) -> (TempDir, PathBuf, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "run.json", cfg);
    let data = tmp.path().join("data");
    let out = umnmt(&["prepare-data", "--config", p(&config), "--out", p(&data)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    (tmp, config, data)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn metrics_without_timing(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("tokens_per_sec");
            v
        })
        .collect()
}

#[test]
fn default_config_prepares_two_thousand_per_language() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "run.json", &json!({}));
    let data = tmp.path().join("data");
    let out = umnmt(&["prepare-data", "--config", p(&config), "--out", p(&data)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest = read_json(&data.join("manifest.json"));
    assert_eq!(manifest["counts"]["train_x"], 2000);
    assert_eq!(manifest["counts"]["train_y"], 2000);
    let magic = &fs::read(data.join("test.umfm")).unwrap()[..4];
    assert_eq!(magic, b"UMFM");
}

#[test]
fn same_seed_gives_identical_manifests() {
    let (_a, _, da) = prepared(&small_config());
    let (_b, _, db) = prepared(&small_config());
    assert_eq!(
        fs::read(da.join("manifest.json")).unwrap(),
        fs::read(db.join("manifest.json")).unwrap()
    );
    let (_c, _, dc) = prepared(
        &json!({"data": {"seed": 4, "synth": {"n_samples": 120, "n_valid": 10, "n_test": 12}}}),
    );
    assert_ne!(
        read_json(&da.join("manifest.json"))["files"],
        read_json(&dc.join("manifest.json"))["files"]
    );
}

/// Undoes the Y word order and cipher using `lexicon.tsv`.
fn decipher(data: &Path, line: &str) -> String {
    let lex = fs::read_to_string(data.join("lexicon.tsv")).unwrap();
    let table: HashMap<&str, (&str, &str)> = lex
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[1], (f[0], f[2]))
        })
        .collect();
    let mut words: Vec<(&str, &str)> = line.split(' ').map(|w| table[w]).collect();
    let mut i = 0;
    while i + 1 < words.len() {
        if words[i].1 == "noun" && words[i + 1].1 == "adjective" {
            words.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    words.iter().map(|w| w.0).collect::<Vec<_>>().join(" ")
}

#[test]
fn language_halves_are_disjoint() {
    let (_t, _, data) = prepared(&small_config());
    let xs: HashSet<String> = fs::read_to_string(data.join("train.x.txt"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    let ys: Vec<String> = fs::read_to_string(data.join("train.y.txt"))
        .unwrap()
        .lines()
        .map(|l| decipher(&data, l))
        .collect();
    assert_eq!(xs.len(), 120);
    assert!(ys.iter().all(|y| !xs.contains(y)));
    let valid_x = fs::read_to_string(data.join("valid.x.txt")).unwrap();
    let valid_y = fs::read_to_string(data.join("valid.y.txt")).unwrap();
    for (x, y) in valid_x.lines().zip(valid_y.lines()) {
        assert_eq!(decipher(&data, y), x);
    }
}

#[test]
fn non_empty_output_requires_force() {
    let (tmp, config, data) = prepared(&small_config());
    let again = umnmt(&["prepare-data", "--config", p(&config), "--out", p(&data)]);
    assert_eq!(code(&again), 1);
    let forced = umnmt(&[
        "prepare-data",
        "--config",
        p(&config),
        "--out",
        p(&data),
        "--force",
    ]);
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));
    drop(tmp);
}

#[test]
fn seed_override_is_applied_and_echoed() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "run.json", &small_config());
    let data = tmp.path().join("data");
    let out = Command::new(env!("CARGO_BIN_EXE_umnmt"))
        .args(["prepare-data", "--config", p(&config), "--out", p(&data)])
        .env("UMNMT_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(stderr(&out).contains("UMNMT_SEED=11"));
    assert_eq!(read_json(&data.join("manifest.json"))["seed"], 11);
    assert_eq!(read_json(&data.join("config.json"))["train"]["seed"], 11);
}

#[test]
fn bad_usage_and_config_exit_one() {
    assert_eq!(code(&umnmt(&["train"])), 1);
    assert_eq!(code(&umnmt(&["no-such-command"])), 1);
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "bad.json", &json!({"train": {"epochs": 3}}));
    let out = umnmt(&[
        "prepare-data",
        "--config",
        p(&bad),
        "--out",
        p(&tmp.path().join("d")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("epochs"));
    let invalid = write_config(
        tmp.path(),
        "invalid.json",
        &json!({"model": {"n_heads": 3}}),
    );
    assert_eq!(
        code(&umnmt(&[
            "prepare-data",
            "--config",
            p(&invalid),
            "--out",
            p(&tmp.path().join("e"))
        ])),
        1
    );
}

fn train(config: &Path, data: &Path, run: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--config",
        p(config),
        "--data",
        p(data),
        "--out",
        p(run),
    ];
    args.extend_from_slice(extra);
    umnmt(&args)
}

#[test]
fn train_writes_the_run_layout_and_resumes_exactly() {
    let (tmp, config, data) = prepared(&small_config());
    let full = tmp.path().join("full");
    let out = train(&config, &data, &full, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in [
        "config.json",
        "metrics.jsonl",
        "report.json",
        "ckpt/step-3.umck",
        "ckpt/step-6.umck",
    ] {
        assert!(full.join(f).exists(), "{f}");
    }
    assert_eq!(metrics_without_timing(&full.join("metrics.jsonl")).len(), 6);
    let report = read_json(&full.join("report.json"));
    assert_eq!(report["split"], "test");
    assert_eq!(report["report"]["n_sentences"], 12);

    let resumed = tmp.path().join("resumed");
    let out = train(
        &config,
        &data,
        &resumed,
        &["--resume", p(&full.join("ckpt/step-3.umck"))],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read(full.join("ckpt/step-6.umck")).unwrap(),
        fs::read(resumed.join("ckpt/step-6.umck")).unwrap()
    );
    let a = metrics_without_timing(&full.join("metrics.jsonl"));
    let b = metrics_without_timing(&resumed.join("metrics.jsonl"));
    assert_eq!(a[3..], b[..]);
    assert_eq!(
        fs::read(full.join("report.json")).unwrap(),
        fs::read(resumed.join("report.json")).unwrap()
    );

    let echoed = tmp.path().join("echoed");
    let out = train(&full.join("config.json"), &data, &echoed, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read(full.join("ckpt/step-6.umck")).unwrap(),
        fs::read(echoed.join("ckpt/step-6.umck")).unwrap()
    );

    assert_eq!(code(&train(&config, &data, &full, &[])), 1);
}

#[test]
fn pretraining_needs_text_corpora() {
    let mut cfg = small_config();
    cfg["train"]["schedule"] = json!("pretrain_text");
    let (tmp, config, data) = prepared(&cfg);
    for f in ["train.x.umfm", "train.y.umfm"] {
        fs::remove_file(data.join(f)).unwrap();
    }
    let ok = train(&config, &data, &tmp.path().join("run"), &[]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    fs::remove_file(data.join("train.x.txt")).unwrap();
    let missing = train(&config, &data, &tmp.path().join("run2"), &[]);
    assert_eq!(code(&missing), 2);
    assert!(stderr(&missing).contains("train.x.txt"));
}

#[test]
fn vocabulary_mismatch_stops_before_training() {
    let (tmp, config, data) = prepared(&small_config());
    let run = tmp.path().join("run");
    let mut vocab = fs::read_to_string(data.join("vocab.x.txt")).unwrap();
    vocab.push_str("zebra\n");
    fs::write(data.join("vocab.x.txt"), vocab).unwrap();
    let out = train(&config, &data, &run, &[]);
    assert_eq!(code(&out), 2);
    assert!(!run.join("metrics.jsonl").exists());
}

#[test]
fn resume_refuses_a_checkpoint_from_other_data() {
    let (tmp, config, data) = prepared(&small_config());
    let run = tmp.path().join("run");
    assert_eq!(code(&train(&config, &data, &run, &[])), 0);
    let mut other_cfg = small_config();
    other_cfg["data"]["seed"] = json!(99);
    let (_o, other_config, other_data) = prepared(&other_cfg);
    let out = train(
        &other_config,
        &other_data,
        &tmp.path().join("run2"),
        &["--resume", p(&run.join("ckpt/step-3.umck"))],
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

fn toy_run() -> (TempDir, PathBuf, PathBuf) {
    let cfg = json!({
        "data": {"seed": 1, "synth": {"n_samples": 1000, "n_valid": 50, "n_test": 100, "overlap": true}},
        "train": {"steps": 300, "batch_size": 32, "eval_every": 100, "seed": 1}
    });
    let (tmp, config, data) = prepared(&cfg);
    let run = tmp.path().join("run");
    let out = train(&config, &data, &run, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    (tmp, data, run)
}

fn accuracy(hyps: &str, refs: &str) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (h, r) in hyps.lines().zip(refs.lines()) {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        hit += r
            .iter()
            .enumerate()
            .filter(|(i, w)| h.get(*i) == Some(w))
            .count();
        total += r.len();
    }
    hit as f64 / total as f64
}

#[test]
fn toy_checkpoint_serves_translation_evaluation_and_attention() {
    let (_tmp, data, run) = toy_run();
    let ckpt = run.join("ckpt/best.umck");
    let input = data.join("test.x.txt");
    let feats = data.join("test.umfm");

    let with = umnmt(&[
        "translate",
        "--ckpt",
        p(&ckpt),
        "--input",
        p(&input),
        "--features",
        p(&feats),
        "--lang-pair",
        "x-y",
    ]);
    assert_eq!(code(&with), 0, "{}", stderr(&with));
    let hyps = String::from_utf8(with.stdout.clone()).unwrap();
    assert_eq!(hyps.lines().count(), 100);
    let refs = fs::read_to_string(data.join("test.y.txt")).unwrap();
    let acc = accuracy(&hyps, &refs);
    assert!(acc > 0.7, "toy accuracy {acc}");
    let again = umnmt(&[
        "translate",
        "--ckpt",
        p(&ckpt),
        "--input",
        p(&input),
        "--features",
        p(&feats),
        "--lang-pair",
        "x-y",
    ]);
    assert_eq!(with.stdout, again.stdout);

    let text_only = umnmt(&[
        "translate",
        "--ckpt",
        p(&ckpt),
        "--input",
        p(&input),
        "--lang-pair",
        "x-y",
    ]);
    assert_eq!(code(&text_only), 0);
    let report_path = run.join("text_only.json");
    let eval = umnmt(&[
        "evaluate",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--modality",
        "text_only",
        "--out",
        p(&report_path),
    ]);
    assert_eq!(code(&eval), 0, "{}", stderr(&eval));
    let report = read_json(&report_path);
    let x_to_y = report["report"]["directions"]
        .as_array()
        .unwrap()
        .iter()
        .find(|d| d["source"] == "x")
        .unwrap()["token_accuracy"]
        .as_f64()
        .unwrap();
    let text_hyps = String::from_utf8(text_only.stdout).unwrap();
    assert!((accuracy(&text_hyps, &refs) - x_to_y).abs() < 1e-12);

    let reversed = umnmt(&[
        "translate",
        "--ckpt",
        p(&ckpt),
        "--input",
        p(&data.join("test.y.txt")),
        "--lang-pair",
        "y-x",
    ]);
    assert_eq!(code(&reversed), 0);

    let short = run.join("short.umfm");
    let bytes = fs::read(&feats).unwrap();
    let grids = 100usize;
    let per = (bytes.len() - 20) / grids;
    let mut truncated = bytes[..20].to_vec();
    truncated[8..12].copy_from_slice(&99u32.to_le_bytes());
    truncated.extend_from_slice(&bytes[20..20 + 99 * per]);
    fs::write(&short, truncated).unwrap();
    let mismatch = umnmt(&[
        "translate",
        "--ckpt",
        p(&ckpt),
        "--input",
        p(&input),
        "--features",
        p(&short),
    ]);
    assert_eq!(code(&mismatch), 2, "{}", stderr(&mismatch));

    let attn = run.join("attn.jsonl");
    let out = umnmt(&[
        "export-attention",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--limit",
        "5",
        "--out",
        p(&attn),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let lines: Vec<Value> = fs::read_to_string(&attn)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.iter().any(|l| l["kind"] == "image"));
    for l in &lines {
        let total: f64 = l["rows"]
            .as_array()
            .unwrap()
            .iter()
            .flat_map(|r| r.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()))
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    for f in ["test.umfm", "valid.umfm", "train.x.umfm", "train.y.umfm"] {
        fs::remove_file(data.join(f)).unwrap();
    }
    let no_features = umnmt(&[
        "evaluate",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--modality",
        "text_only",
    ]);
    assert_eq!(code(&no_features), 0, "{}", stderr(&no_features));
    let needs_features = umnmt(&[
        "evaluate",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--modality",
        "with_image",
    ]);
    assert_eq!(code(&needs_features), 2);
}

#[test]
fn gradcheck_passes_on_the_tiny_model() {
    let out = umnmt(&["gradcheck"]);
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(code(&out), 0, "{text}");
    assert!(text.contains("model.decode_step"));
    let last = text.lines().last().unwrap();
    let worst: f64 = last
        .split_whitespace()
        .next()
        .unwrap()
        .trim_start_matches("max_rel_error=")
        .parse()
        .unwrap();
    assert!(worst < 1e-4);
}
