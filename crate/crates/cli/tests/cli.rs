use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn textnorm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_textnorm"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn preprocess_reproduces_the_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pairs.csv");
    let stdout = ok(&textnorm(&[
        "preprocess",
        s(&fixture("records.csv")),
        s(&out),
        "--keep-order",
    ]));
    assert_eq!(fs::read(&out).unwrap(), fs::read(fixture("pairs.csv")).unwrap());
    assert!(stdout.contains("kept"), "{stdout}");
}

#[test]
fn preprocess_handles_empty_and_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let out = dir.path().join("out.csv");
    ok(&textnorm(&["preprocess", s(&empty), s(&out)]));
    assert_eq!(fs::read_to_string(&out).unwrap(), "\"Input Token\",\"Output Token\"\n");

    let missing = textnorm(&["preprocess", s(&dir.path().join("nope.csv")), s(&out)]);
    assert_eq!(missing.status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "\"PLAIN\",\"a\"\n").unwrap();
    let parsed = textnorm(&["preprocess", s(&bad), s(&out)]);
    assert_eq!(parsed.status.code(), Some(2));
    assert!(!parsed.stderr.is_empty());
}

#[test]
fn preprocess_writes_splits() {
    let dir = tempfile::tempdir().unwrap();
    let split = dir.path().join("split");
    ok(&textnorm(&[
        "preprocess",
        s(&fixture("records.csv")),
        s(&dir.path().join("all.csv")),
        "--subset",
        "3",
        "--split-dir",
        s(&split),
    ]));
    for name in ["train.csv", "validation.csv", "test.csv", "manifest.txt"] {
        assert!(split.join(name).exists(), "{name} missing");
    }
    let train = fs::read_to_string(split.join("train.csv")).unwrap();
    assert_eq!(train.lines().count(), 4);
    let test = fs::read_to_string(split.join("test.csv")).unwrap();
    assert_eq!(test.lines().count(), 2);
}

#[test]
fn gen_toy_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        ok(&textnorm(&[
            "gen-toy",
            "--task",
            "digits-to-words",
            "--n",
            "30",
            "--seed",
            "4",
            "--out",
            s(p),
        ]));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 31);
    let zero = textnorm(&["gen-toy", "--task", "copy", "--n", "0", "--out", s(&a)]);
    assert_eq!(zero.status.code(), Some(1));
}

fn write_config(dir: &Path, iterations: u64) -> PathBuf {
    let train = dir.join("train.csv");
    if !train.exists() {
        ok(&textnorm(&[
            "gen-toy",
            "--task",
            "digits-to-words",
            "--n",
            "40",
            "--out",
            s(&train),
        ]));
        ok(&textnorm(&[
            "gen-toy",
            "--task",
            "digits-to-words",
            "--n",
            "8",
            "--seed",
            "1",
            "--out",
            s(&dir.join("val.csv")),
        ]));
    }
    let path = dir.join("run.toml");
    fs::write(
        &path,
        format!(
            r#"output_dir = "out"

[data]
train = "train.csv"
validation = "val.csv"

[model]
encoder = {{ kind = "CFE", channels = 4, layers = 2, kernel = 2 }}
decoder_hidden = 8
attention_hidden = 4

[train]
batch_size = 8
max_iterations = {iterations}
validation_every = 3
"#
        ),
    )
    .unwrap();
    path
}

#[test]
fn train_resume_evaluate_and_dump_attention() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 4);
    let stdout = ok(&textnorm(&["train", s(&cfg)]));
    assert!(stdout.contains("iterations\t4"), "{stdout}");
    let out = dir.path().join("out");
    for name in ["config.toml", "train_log.tsv", "final.ckpt", "best.ckpt"] {
        assert!(out.join(name).exists(), "{name} missing");
    }

    let cfg = write_config(dir.path(), 7);
    let stdout = ok(&textnorm(&["train", s(&cfg), "--resume", s(&out.join("final.ckpt"))]));
    assert!(stdout.contains("iterations\t7"), "{stdout}");
    let log = fs::read_to_string(out.join("train_log.tsv")).unwrap();
    let iterations: Vec<u64> = log
        .lines()
        .skip(1)
        .filter(|l| l.starts_with("train"))
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(iterations, (1..=7).collect::<Vec<_>>());
    assert_eq!(log.lines().filter(|l| l.starts_with("kind")).count(), 1);

    let ckpt = out.join("final.ckpt");
    let data = dir.path().join("val.csv");
    let (e1, e2) = (dir.path().join("eval1"), dir.path().join("eval2"));
    for e in [&e1, &e2] {
        ok(&textnorm(&["evaluate", s(&ckpt), s(&data), "--out", s(e)]));
    }
    let report = fs::read_to_string(e1.join("report.txt")).unwrap();
    for field in ["nll", "cer_percent", "accuracy_percent"] {
        assert!(report.contains(field), "{report}");
    }
    for name in ["report.txt", "predictions.csv"] {
        assert_eq!(fs::read(e1.join(name)).unwrap(), fs::read(e2.join(name)).unwrap());
    }
    let seq = dir.path().join("eval_seq");
    ok(&textnorm(&[
        "--sequential",
        "evaluate",
        s(&ckpt),
        s(&data),
        "--out",
        s(&seq),
    ]));
    assert_eq!(
        fs::read(e1.join("predictions.csv")).unwrap(),
        fs::read(seq.join("predictions.csv")).unwrap()
    );

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let failed = textnorm(&["evaluate", s(&ckpt), s(&empty), "--out", s(&dir.path().join("e3"))]);
    assert_eq!(failed.status.code(), Some(2));

    let preds = e1.join("predictions.csv");
    let p = ok(&textnorm(&["compare", s(&preds), s(&preds), "-R", "50"]));
    assert_eq!(p.trim().parse::<f64>().unwrap(), 1.0);
    ok(&textnorm(&["classify-errors", s(&preds)]));

    let trace = dir.path().join("trace.tsv");
    let image = dir.path().join("trace.pgm");
    ok(&textnorm(&[
        "dump-attention",
        s(&ckpt),
        "12 .",
        "--out",
        s(&trace),
        "--image",
        s(&image),
        "--cell",
        "2",
    ]));
    let text = fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().next(), Some("12 ."));
    assert!(fs::read(&image).unwrap().starts_with(b"P5\n"));
}

#[test]
fn invalid_encoder_kind_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 2);
    let text = fs::read_to_string(&cfg).unwrap().replace("\"CFE\"", "\"transformer\"");
    fs::write(&cfg, text).unwrap();
    let out = textnorm(&["train", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("kind"), "{err}");
}

#[test]
fn config_errors_are_listed_together() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 2);
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("batch_size = 8", "batch_size = 0")
        .replace("decoder_hidden = 8", "decoder_hidden = 0");
    fs::write(&cfg, text).unwrap();
    let out = textnorm(&["train", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("batch_size") && err.contains("decoder_hidden"), "{err}");
}

#[test]
fn compare_rejects_mismatched_dumps_and_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let header = "input,reference,prediction,hit_cap\n";
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let short = dir.path().join("short.csv");
    let rows_a: String = (0..12).map(|i| format!("\"{i}\",\"x\",\"x\",\"false\"\n")).collect();
    let rows_b: String = (0..12)
        .map(|i| format!("\"{i}\",\"x\",\"{}\",\"false\"\n", if i % 3 == 0 { "x" } else { "y" }))
        .collect();
    fs::write(&a, format!("{header}{rows_a}")).unwrap();
    fs::write(&b, format!("{header}{rows_b}")).unwrap();
    fs::write(&short, format!("{header}\"0\",\"x\",\"x\",\"false\"\n")).unwrap();
    let p1 = ok(&textnorm(&["compare", s(&a), s(&b), "--seed", "3"]));
    let p2 = ok(&textnorm(&["compare", s(&a), s(&b), "--seed", "3"]));
    assert_eq!(p1, p2);
    assert!(p1.trim().parse::<f64>().unwrap() < 0.05);
    assert_ne!(textnorm(&["compare", s(&a), s(&short)]).status.code(), Some(0));
    let cls = ok(&textnorm(&["classify-errors", s(&b)]));
    assert!(cls.contains("T2\t8"), "{cls}");
}

#[test]
fn help_and_unknown_flags() {
    for sub in [
        "preprocess",
        "train",
        "evaluate",
        "compare",
        "classify-errors",
        "dump-attention",
        "gen-toy",
    ] {
        let help = ok(&textnorm(&[sub, "--help"]));
        assert!(help.contains("Usage"), "{sub}: {help}");
    }
    let help = ok(&textnorm(&["preprocess", "--help"]));
    for flag in [
        "--max-output-len",
        "--alphabet",
        "--keep-order",
        "--subset",
        "--mode",
        "--seed",
        "--split-dir",
    ] {
        assert!(help.contains(flag), "{flag} undocumented");
    }
    let bad = textnorm(&["gen-toy", "--bogus"]);
    assert_eq!(bad.status.code(), Some(1));
    assert_eq!(textnorm(&[]).status.code(), Some(1));
}
