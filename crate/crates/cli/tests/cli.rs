use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn pbd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pbd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn error_json(o: &Output) -> Value {
    let err = String::from_utf8(o.stderr.clone()).unwrap();
    let line = err.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// The repository copy-task config with its paths made absolute and
/// outputs redirected into `dir`, plus any overrides.
fn copy_config(dir: &TempDir, overrides: Value) -> PathBuf {
    let text = std::fs::read_to_string(configs_dir().join("copy.json")).unwrap();
    let mut cfg: Value = serde_json::from_str(&text).unwrap();
    let abs = |name: &str| configs_dir().join(cfg[name].as_str().unwrap()).display().to_string();
    let (train, eval) = (abs("train_path"), abs("eval_path"));
    cfg["train_path"] = json!(train);
    cfg["eval_path"] = json!(eval);
    cfg["checkpoint_path"] = json!(dir.path().join("model.pbdc"));
    for (k, v) in overrides.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.path().join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn parse_log(text: &str) -> Vec<(u64, f64)> {
    text.lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f.len() == 3).then(|| (f[0].parse().unwrap(), f[1].parse().unwrap()))
        })
        .collect()
}

fn report_value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .parse()
        .unwrap()
}

#[test]
fn copy_config_trains_to_low_loss_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = copy_config(&dir, json!({ "log_path": "loss.tsv" }));
    let out = pbd(&["train", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let log = parse_log(&text);
    let (last_step, last_loss) = *log.last().unwrap();
    assert!(last_step <= 2000);
    assert!(last_loss < 0.05, "final loss {last_loss}");
    // the same lines go to the log file
    let file = std::fs::read_to_string(dir.path().join("loss.tsv")).unwrap();
    assert_eq!(parse_log(&file), log);

    let ckpt = dir.path().join("model.pbdc");
    let train_tsv = configs_dir().join("copy_train.tsv");
    let train_report = stdout(&pbd(&["eval", ckpt.to_str().unwrap(), train_tsv.to_str().unwrap()]));
    assert!(report_value(&train_report, "exact_match") > 0.99, "{train_report}");
    assert_eq!(report_value(&train_report, "n_examples"), 4000.0);

    let eval_tsv = configs_dir().join("copy_eval.tsv");
    let greedy = pbd(&["eval", ckpt.to_str().unwrap(), eval_tsv.to_str().unwrap(), "--greedy"]);
    let beam1 = pbd(&["eval", ckpt.to_str().unwrap(), eval_tsv.to_str().unwrap(), "--beam", "1"]);
    assert!(greedy.status.success() && beam1.status.success());
    assert_eq!(stdout(&greedy), stdout(&beam1));

    let input = dir.path().join("in.txt");
    std::fs::write(&input, "hello\nworld\n").unwrap();
    let decoded = pbd(&["decode", ckpt.to_str().unwrap(), input.to_str().unwrap()]);
    assert!(decoded.status.success());
    assert_eq!(stdout(&decoded), "hello\nworld\n");

    // empty eval file is an error, not a 0/0 report
    let empty = dir.path().join("empty.tsv");
    std::fs::write(&empty, "").unwrap();
    let out = pbd(&["eval", ckpt.to_str().unwrap(), empty.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stdout(&out).is_empty());

    // characters outside the model vocabulary
    let upper = dir.path().join("upper.tsv");
    std::fs::write(&upper, "ABC\tABC\n").unwrap();
    let out = pbd(&["eval", ckpt.to_str().unwrap(), upper.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(error_json(&out)["message"].as_str().unwrap().contains("vocab mismatch"));
}

#[test]
fn f64_training_log_is_reproducible() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = copy_config(
            &dir,
            json!({ "precision": "f64", "steps": 12, "d_model": 16, "d_ff": 32, "dropout": 0.1 }),
        );
        let out = pbd(&["train", cfg.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (stdout(&out), std::fs::read(dir.path().join("model.pbdc")).unwrap())
    };
    let (log_a, ckpt_a) = run();
    let (log_b, ckpt_b) = run();
    assert_eq!(parse_log(&log_a).len(), 12);
    assert_eq!(log_a, log_b);
    assert_eq!(ckpt_a, ckpt_b);
}

#[test]
fn resume_continues_the_same_run() {
    let straight_dir = tempfile::tempdir().unwrap();
    let overrides = json!({ "precision": "f64", "steps": 8, "d_model": 16, "d_ff": 32, "dropout": 0.1 });
    let cfg = copy_config(&straight_dir, overrides.clone());
    let straight = stdout(&pbd(&["train", cfg.to_str().unwrap()]));

    let split_dir = tempfile::tempdir().unwrap();
    let mut first = overrides.clone();
    first["steps"] = json!(4);
    let cfg = copy_config(&split_dir, first);
    let head = stdout(&pbd(&["train", cfg.to_str().unwrap()]));
    let cfg = copy_config(&split_dir, overrides);
    let tail = pbd(&["train", cfg.to_str().unwrap(), "--resume"]);
    assert!(tail.status.success(), "{}", String::from_utf8_lossy(&tail.stderr));
    let joined: Vec<_> = parse_log(&head).into_iter().chain(parse_log(&stdout(&tail))).collect();
    assert_eq!(joined, parse_log(&straight));
}

#[test]
fn missing_corpus_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = copy_config(&dir, json!({ "train_path": "/nonexistent/corpus.tsv" }));
    let out = pbd(&["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_json(&out);
    assert!(err["message"].as_str().unwrap().contains("/nonexistent/corpus.tsv"), "{err}");
    assert_eq!(String::from_utf8(out.stderr).unwrap().lines().count(), 1);
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = copy_config(&dir, json!({ "learning_rate": 0.1 }));
    let out = pbd(&["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "config");
}

fn synth(dir: &TempDir, name: &str, extra: &[&str]) -> PathBuf {
    let path = dir.path().join(name);
    let mut args = vec!["synth", path.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = pbd(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

fn pairs(path: &Path) -> Vec<(String, String)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let (s, t) = l.split_once('\t').unwrap();
            (s.to_string(), t.to_string())
        })
        .collect()
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--builtin", "--count", "500", "--seed", "9"];
    let a = std::fs::read(synth(&dir, "a.tsv", &args)).unwrap();
    let b = std::fs::read(synth(&dir, "b.tsv", &args)).unwrap();
    assert_eq!(a, b);
    let c = std::fs::read(synth(&dir, "c.tsv", &["--builtin", "--count", "500", "--seed", "10"])).unwrap();
    assert_ne!(a, c);
}

#[test]
fn synth_without_noise_copies() {
    let dir = tempfile::tempdir().unwrap();
    let words = dir.path().join("words.txt");
    std::fs::write(&words, "alpha\nbeta\ngamma\n").unwrap();
    let path = synth(&dir, "clean.tsv", &["--words", words.to_str().unwrap(), "--count", "50", "--noise", "0"]);
    let p = pairs(&path);
    assert_eq!(p.len(), 50);
    assert!(p.iter().all(|(s, t)| s == t));
}

fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1];
        for (j, &cb) in b.iter().enumerate() {
            cur.push((prev[j + 1] + 1).min(cur[j] + 1).min(prev[j] + usize::from(ca != cb)));
        }
        prev = cur;
    }
    prev[b.len()]
}

#[test]
fn synth_edit_distance_tracks_noise() {
    // transpositions cost two unit edits, so this check uses the other three
    let dir = tempfile::tempdir().unwrap();
    let path = synth(
        &dir,
        "noisy.tsv",
        &["--builtin", "--count", "10000", "--p-sub", "0.05", "--p-del", "0.025", "--p-ins", "0.025"],
    );
    let p = pairs(&path);
    assert_eq!(p.len(), 10_000);
    let mean_dist = p.iter().map(|(s, t)| levenshtein(s, t)).sum::<usize>() as f64 / p.len() as f64;
    let mean_len = p.iter().map(|(_, t)| t.chars().count()).sum::<usize>() as f64 / p.len() as f64;
    let expected = 0.1 * mean_len;
    assert!((mean_dist - expected).abs() <= 0.15 * expected, "{mean_dist} vs {expected}");
}

#[test]
fn gradcheck_passes_and_lists_each_group_once() {
    let out = pbd(&["gradcheck"]);
    assert!(out.status.success(), "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.lines().last().unwrap().starts_with("PASS"));
    let names: Vec<&str> = text.lines().filter(|l| l.contains('\t')).map(|l| l.split('\t').next().unwrap()).collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
    assert!(names.contains(&"embed.segments") && names.contains(&"decoder.layers.1.cross_attn.wq"));
}

#[test]
fn gradcheck_flags_a_corrupted_backward() {
    let out = pbd(&["gradcheck", "--fault", "1.01"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).lines().last().unwrap().starts_with("FAIL"));
}

#[test]
fn mask_dump_prints_the_staircase() {
    let out = pbd(&["mask", "dump", "--n", "3", "--m", "2"]);
    assert!(out.status.success());
    let rows: Vec<String> = stdout(&out).lines().map(|l| l.replace(' ', "")).collect();
    assert_eq!(rows, ["011|10", "001|11"]);
}
