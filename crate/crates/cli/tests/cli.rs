use std::path::{Path, PathBuf};

use prosodet::audio_io::{write_wav, AudioBuffer};
use prosodet_cli::{run_with, EXIT_DATA, EXIT_OK, EXIT_USAGE};

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn run(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("prosodet").chain(args.iter().copied());
    let code = run_with(argv, &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn ok(args: &[&str]) -> Run {
    let r = run(args);
    assert_eq!(r.code, EXIT_OK, "{args:?} failed:\n{}", r.err);
    r
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny corpus with extracted train/val features and a two-epoch Model E bundle.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(attention: bool) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(
            root.join("spec.json"),
            r#"{"splits":[{"name":"train","per_class":4},{"name":"val","per_class":2},{"name":"eval","per_class":3}]}"#,
        )
        .unwrap();
        std::fs::write(root.join("tc.json"), r#"{"epochs":2,"batch_size":4}"#).unwrap();
        let p = |x: &str| root.join(x);
        ok(&["gen-corpus", "--out", s(&p("corpus")), "--spec", s(&p("spec.json")), "--seed", "3"]);
        for split in ["train", "val"] {
            let proto = p(&format!("corpus/protocol_{split}.txt"));
            ok(&["extract", "--protocol", s(&proto), "--out", s(&p(&format!("feat/{split}")))]);
        }
        let (tr, va, tc, out) = (p("feat/train"), p("feat/val"), p("tc.json"), p("bundle.json"));
        let mut args = vec![
            "train",
            "--train-features",
            s(&tr),
            "--val-features",
            s(&va),
            "--arch",
            "E",
            "--train-config",
            s(&tc),
            "--out",
            s(&out),
        ];
        if attention {
            args.push("--attention");
        }
        ok(&args);
        Fixture { _dir: dir, root }
    }

    fn p(&self, x: &str) -> PathBuf {
        self.root.join(x)
    }
}

#[test]
fn help_and_version_exit_zero() {
    assert!(ok(&["--help"]).out.contains("gen-corpus"));
    assert!(ok(&["--version"]).out.contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let r = run(&["frobnicate"]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.err.contains("Usage"), "{}", r.err);
}

#[test]
fn bad_flag_value_names_the_flag() {
    let r = run(&["extract", "--protocol", "p.txt", "--out", "o", "--window-ms", "ten"]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.err.contains("--window-ms"), "{}", r.err);
    let r = run(&["train", "--train-features", "a", "--val-features", "b", "--out", "c", "--arch", "Z"]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.err.contains("--arch"), "{}", r.err);
    let r = run(&["snr", "--wav", "x.wav", "--jobs", "0"]);
    assert_eq!(r.code, EXIT_USAGE);
}

#[test]
fn missing_input_is_a_data_error() {
    let r = run(&["snr", "--wav", "/nonexistent/clip.wav"]);
    assert_eq!(r.code, EXIT_DATA);
    assert!(r.err.contains("/nonexistent/clip.wav"), "{}", r.err);
    let r = run(&["eval", "--bundle", "/nonexistent/b.json", "--protocol", "/nonexistent/p.txt"]);
    assert_eq!(r.code, EXIT_DATA);
}

#[test]
fn snr_prints_decibels_and_a_reproducibility_header() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("tone.wav");
    let samples = (0..16000)
        .map(|i| 0.5 * (i as f64 * 0.07).sin() + if i % 2 == 0 { 0.01 } else { -0.01 })
        .collect();
    write_wav(&wav, &AudioBuffer::new(samples, 16000, "tone")).unwrap();
    let r = ok(&["snr", "--wav", s(&wav), "--seed", "9"]);
    let db: f64 = r.out.trim().parse().unwrap();
    assert!((-20.0..=100.0).contains(&db));
    assert!(r.err.contains("seed 9"), "{}", r.err);
    assert!(r.err.contains("config sha256:"), "{}", r.err);
}

#[test]
fn eval_reports_every_metric_field() {
    let f = Fixture::new(false);
    let r = ok(&[
        "eval",
        "--bundle",
        s(&f.p("bundle.json")),
        "--protocol",
        s(&f.p("corpus/protocol_eval.txt")),
        "--out",
        s(&f.p("eval")),
    ]);
    let v: serde_json::Value = serde_json::from_str(&r.out).unwrap();
    for key in ["accuracy", "precision", "recall", "f1", "eer", "auroc", "threshold", "counts"] {
        assert!(v.get(key).is_some(), "missing {key} in {}", r.out);
    }
    for key in ["tp", "fp", "tn", "fn"] {
        assert!(v["counts"].get(key).is_some());
    }
    let scores = std::fs::read_to_string(f.p("eval/scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 7);
    assert!(std::fs::read_to_string(f.p("eval/metrics.csv")).unwrap().starts_with("accuracy,precision"));

    // No attention layer in this bundle.
    let r = run(&[
        "attention",
        "--bundle",
        s(&f.p("bundle.json")),
        "--protocol",
        s(&f.p("corpus/protocol_eval.txt")),
        "--out",
        s(&f.p("att")),
    ]);
    assert_eq!(r.code, EXIT_DATA, "{}", r.err);
}

#[test]
fn attack_and_attention_write_their_reports() {
    let f = Fixture::new(true);
    let proto = f.p("corpus/protocol_eval.txt");
    ok(&[
        "train-surrogate",
        "--train-protocol",
        s(&f.p("corpus/protocol_train.txt")),
        "--val-protocol",
        s(&f.p("corpus/protocol_val.txt")),
        "--train-config",
        s(&f.p("tc.json")),
        "--out",
        s(&f.p("sur.json")),
    ]);
    let r = run(&[
        "attack", "--surrogate", s(&f.p("sur.json")), "--bundle", s(&f.p("bundle.json")), "--protocol", s(&proto),
        "--out", s(&f.p("attack")), "--epsilons", "0.001", "--alpha", "0.01",
    ]);
    assert_eq!(r.code, EXIT_USAGE, "{}", r.err);
    assert!(r.err.contains("--alpha"), "{}", r.err);

    ok(&[
        "attack", "--surrogate", s(&f.p("sur.json")), "--bundle", s(&f.p("bundle.json")), "--protocol", s(&proto),
        "--out", s(&f.p("attack")), "--epsilons", "0.001,0.005", "--max-steps", "3", "--per-class", "2",
    ]);
    let csv = std::fs::read_to_string(f.p("attack/robustness.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epsilon,n,surrogate_acc,prosody_acc,mean_steps,success_rate,mean_wada_snr_db");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0.001,4,"));
    let adv = std::fs::read_dir(f.p("attack/adv")).unwrap().count();
    assert_eq!(adv, 8);

    ok(&["attention", "--bundle", s(&f.p("bundle.json")), "--protocol", s(&proto), "--out", s(&f.p("att"))]);
    let rows = std::fs::read_to_string(f.p("att/attention.csv")).unwrap();
    assert_eq!(rows.lines().count(), 7);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.p("att/attention_summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 2);
}

#[test]
fn search_params_writes_best_params_and_trial_log() {
    let f = Fixture::new(false);
    std::fs::write(
        f.p("search.json"),
        r#"{"budget":2,"grid_points":2,"grid_clips":2,"train":{"epochs":1,"batch_size":4}}"#,
    )
    .unwrap();
    ok(&[
        "search-params",
        "--train-protocol",
        s(&f.p("corpus/protocol_train.txt")),
        "--val-protocol",
        s(&f.p("corpus/protocol_val.txt")),
        "--config",
        s(&f.p("search.json")),
        "--out",
        s(&f.p("search")),
    ]);
    let log = std::fs::read_to_string(f.p("search/trials.csv")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("grid,")).count(), 16);
    assert_eq!(log.lines().filter(|l| l.starts_with("random,")).count(), 2);
    let best: prosodet::pitch::PitchParams =
        serde_json::from_str(&std::fs::read_to_string(f.p("search/best_params.json")).unwrap()).unwrap();
    assert!(best.validate(16000).is_ok());
}

#[test]
fn extraction_is_identical_across_job_counts() {
    let f = Fixture::new(false);
    let proto = f.p("corpus/protocol_train.txt");
    ok(&["extract", "--protocol", s(&proto), "--out", s(&f.p("one")), "--jobs", "1"]);
    ok(&["extract", "--protocol", s(&proto), "--out", s(&f.p("three")), "--jobs", "3"]);
    let mut names: Vec<_> = std::fs::read_dir(f.p("one")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 10);
    for n in names {
        assert_eq!(std::fs::read(f.p("one").join(&n)).unwrap(), std::fs::read(f.p("three").join(&n)).unwrap());
    }
}
