use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn toy(name: &str) -> PathBuf {
    root().join("data/toy").join(name)
}

fn toy_conf() -> PathBuf {
    root().join("configs/toy.conf")
}

fn posattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posattn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn posattn")
}

fn ok(args: &[&str]) -> String {
    let out = posattn(args);
    assert!(
        out.status.success(),
        "posattn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    posattn(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn prep(dir: &Path) -> PathBuf {
    let out = dir.join("prep");
    ok(&[
        "--config",
        s(&toy_conf()),
        "prep",
        "--src",
        s(&toy("train.src")),
        "--tgt",
        s(&toy("train.tgt")),
        "--out",
        s(&out),
    ]);
    out
}

fn train(prep: &Path, out: &Path, steps: usize) {
    let steps = format!("train.max_steps={steps}");
    ok(&["--config", s(&toy_conf()), "--set", &steps, "train", "--data", s(prep), "--out", s(out)]);
}

/// "s-BLEU x d-BLEU y coverage c/t (p%)" -> (s, d, p)
fn scores(line: &str) -> (f64, f64, f64) {
    let f: Vec<&str> = line.split_whitespace().collect();
    let pct = f[6].trim_matches(|c| c == '(' || c == ')' || c == '%');
    (f[1].parse().unwrap(), f[3].parse().unwrap(), pct.parse().unwrap())
}

#[test]
fn help_lists_every_subcommand() {
    let help = ok(&["--help"]);
    for cmd in ["prep", "train", "translate", "probe", "eval", "experiment"] {
        assert!(help.contains(cmd), "missing {cmd} in:\n{help}");
    }
    assert_eq!(code(&["frobnicate"]), 2);
}

#[test]
fn toy_corpus_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let prep = prep(tmp.path());
    for f in ["vocab.txt", "train.tsv", "valid.tsv", "train.sent.tsv", "valid.src", "valid.tgt", "config.txt"] {
        assert!(prep.join(f).exists(), "prep did not write {f}");
    }
    let model = tmp.path().join("model");
    train(&prep, &model, 300);
    let metrics = fs::read_to_string(model.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 301);
    let ck = model.join("checkpoint_best.bin");

    let mut results = Vec::new();
    for mode in ["doc2doc", "sent"] {
        let tr = tmp.path().join(format!("tr-{mode}"));
        ok(&[
            "--config",
            s(&toy_conf()),
            "--mode",
            mode,
            "translate",
            "--checkpoint",
            s(&ck),
            "--src",
            s(&toy("test.src")),
            "--out",
            s(&tr),
        ]);
        let hyp = fs::read_to_string(tr.join("hypotheses.tsv")).unwrap();
        let expected = if mode == "sent" {
            fs::read_to_string(toy("test.src")).unwrap().lines().filter(|l| !l.trim().is_empty()).count()
        } else {
            10
        };
        assert_eq!(hyp.lines().count(), expected, "{mode} segments");
        let line = ok(&[
            "eval",
            "--hyp",
            s(&tr.join("hypotheses.tsv")),
            "--reference",
            s(&toy("test.tgt")),
            "--vocab",
            s(&model.join("vocab.txt")),
            "--out",
            s(&tmp.path().join(format!("ev-{mode}"))),
        ]);
        results.push((mode, scores(line.trim())));
    }
    for (mode, (sb, db, cov)) in results {
        assert!(db >= 90.0 && sb >= 90.0, "{mode}: s-BLEU {sb} d-BLEU {db}");
        assert_eq!(cov, 100.0, "{mode} coverage");
    }

    let probe = tmp.path().join("probe");
    let out = ok(&[
        "--config",
        s(&toy_conf()),
        "--layer",
        "0",
        "--task",
        "absolute",
        "probe",
        "--checkpoint",
        s(&ck),
        "--src",
        s(&toy("train.src")),
        "--out",
        s(&probe),
    ]);
    assert!(out.starts_with("absolute probe, layer 0"), "{out}");
    let csv = fs::read_to_string(probe.join("probe.csv")).unwrap();
    assert!(csv.starts_with("task,layer,bucket,accuracy"), "{csv}");
}

#[test]
fn config_echo_and_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let prep = prep(tmp.path());
    let out = tmp.path().join("model");
    ok(&[
        "--config",
        s(&toy_conf()),
        "--set",
        "seed=3",
        "--set",
        "model.ffn_dim=48",
        "--seed",
        "7",
        "--set",
        "train.max_steps=2",
        "train",
        "--data",
        s(&prep),
        "--out",
        s(&out),
    ]);
    let echo = fs::read_to_string(out.join("config.txt")).unwrap();
    let has = |l: &str| echo.lines().any(|x| x.trim() == l);
    assert!(has("seed=7"), "flag beats --set:\n{echo}");
    assert!(has("model.ffn_dim=48"), "--set beats file:\n{echo}");
    assert!(has("model.d_model=32"), "file beats default:\n{echo}");
}

#[test]
fn training_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let prep = prep(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train(&prep, &a, 20);
    train(&prep, &b, 20);
    for f in ["checkpoint_last.bin", "checkpoint_best.bin", "metrics.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn length_sweep_experiment_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("exp");
    let printed = ok(&[
        "--config",
        s(&toy_conf()),
        "--set",
        "train.max_steps=10",
        "--set",
        "experiment.lengths=64",
        "--beam",
        "1",
        "experiment",
        "--kind",
        "length_sweep",
        "--src",
        s(&toy("train.src")),
        "--tgt",
        s(&toy("train.tgt")),
        "--out",
        s(&out),
    ]);
    let csv = fs::read_to_string(printed.trim()).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3, "{csv}");
    assert!(rows[1].starts_with("64,") && rows[2].starts_with("64,"), "{csv}");
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.src");
    let io = code(&["prep", "--src", s(&missing), "--tgt", s(&missing), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(io, 4);

    let bad_key = code(&[
        "--set",
        "model.no_such_key=1",
        "prep",
        "--src",
        s(&toy("train.src")),
        "--tgt",
        s(&toy("train.tgt")),
        "--out",
        s(&tmp.path().join("y")),
    ]);
    assert_eq!(bad_key, 3);

    let prep = prep(tmp.path());
    let model = tmp.path().join("model");
    train(&prep, &model, 1);
    let long = tmp.path().join("long.src");
    let words: Vec<String> = (0..200).map(|i| format!("w{}", i % 24)).collect();
    fs::write(&long, format!("{}\n", words.join(" "))).unwrap();
    let too_long = code(&[
        "--config",
        s(&toy_conf()),
        "translate",
        "--checkpoint",
        s(&model.join("checkpoint_last.bin")),
        "--src",
        s(&long),
        "--out",
        s(&tmp.path().join("z")),
    ]);
    assert_eq!(too_long, 6);

    let garbage = tmp.path().join("garbage.tsv");
    fs::write(&garbage, "not a hypothesis line\n").unwrap();
    let malformed = code(&[
        "eval",
        "--hyp",
        s(&garbage),
        "--reference",
        s(&toy("test.tgt")),
        "--vocab",
        s(&model.join("vocab.txt")),
        "--out",
        s(&tmp.path().join("w")),
    ]);
    assert_eq!(malformed, 5);
}
