use std::path::Path;
use std::process::{Command, Output};

fn meca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meca"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path) {
    let out = meca(&[
        "gen",
        "--preset",
        "blobs",
        "--seed",
        "1",
        "--out-dir",
        s(dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn train_args<'a>(data: &'a Path, out: &'a Path, extra: &[&'a str]) -> Vec<String> {
    let mut args: Vec<String> = ["train", "--epochs", "3", "--hidden", "16", "--source"]
        .iter()
        .map(|a| a.to_string())
        .collect();
    args.push(s(&data.join("source.csv")).into());
    args.push("--target".into());
    args.push(s(&data.join("target.csv")).into());
    args.push("--out-dir".into());
    args.push(s(out).into());
    args.extend(extra.iter().map(|a| a.to_string()));
    args
}

fn run(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    meca(&refs)
}

#[test]
fn gen_writes_identical_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    gen(&a);
    gen(&b);
    for f in ["source.csv", "target.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap()
        );
    }
    let moons = meca(&[
        "gen",
        "--preset",
        "moons",
        "--out-dir",
        s(&dir.path().join("m")),
    ]);
    assert!(moons.status.success());
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        meca(&["gen", "--preset", "spirals", "--out-dir", s(dir.path())])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        meca(&["train", "--target", "t.csv", "--out-dir", "o"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(meca(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(meca(&["--help"]).status.code(), Some(0));
    assert_eq!(meca(&["--version"]).status.code(), Some(0));
}

#[test]
fn missing_input_is_an_io_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&train_args(
        &dir.path().join("nowhere"),
        &dir.path().join("o"),
        &[],
    ));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_writes_metrics_model_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let out_dir = dir.path().join("run");
    let out = run(&train_args(
        dir.path(),
        &out_dir,
        &["--method", "meca", "--lambda", "0.1"],
    ));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l.split(',').count() == 6));

    let bytes = std::fs::read(out_dir.join("model.bin")).unwrap();
    let model = meca::network::MlpModel::read_from(bytes.as_slice()).unwrap();
    assert_eq!(model.layer_sizes(), &[16, 16, 4]);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["method"], "meca");
    assert_eq!(manifest["config"]["lambda_or_gamma"], 0.1);
    assert!(manifest["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
    for p in manifest["artifacts"].as_array().unwrap() {
        assert!(Path::new(p.as_str().unwrap()).exists(), "{p}");
    }
    assert!(manifest["command"]
        .as_array()
        .unwrap()
        .iter()
        .any(|a| a == "--lambda"));
}

#[test]
fn train_is_deterministic_and_zero_lambda_matches_source_only() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let read = |name: &str, extra: &[&str]| {
        let out_dir = dir.path().join(name);
        let out = run(&train_args(dir.path(), &out_dir, extra));
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        (
            std::fs::read(out_dir.join("metrics.csv")).unwrap(),
            std::fs::read(out_dir.join("model.bin")).unwrap(),
        )
    };
    let a = read("a", &["--method", "meca", "--seed", "4"]);
    let b = read("b", &["--method", "meca", "--seed", "4"]);
    assert_eq!(a, b);

    let coral = read("c", &["--method", "coral", "--lambda", "0"]);
    let plain = read("d", &["--method", "source_only"]);
    assert_eq!(coral.1, plain.1);
}

#[test]
fn divergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let out_dir = dir.path().join("boom");
    let out = run(&train_args(
        dir.path(),
        &out_dir,
        &["--method", "coral", "--lambda", "1e12", "--lr", "1"],
    ));
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out_dir.join("metrics.csv").exists());
}

fn sweep(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "sweep".to_string(),
        "--epochs".into(),
        "2".into(),
        "--lr".into(),
        "0.0005".into(),
        "--hidden".into(),
        "12".into(),
        "--source".into(),
        s(&data.join("source.csv")).into(),
        "--target".into(),
        s(&data.join("target.csv")).into(),
        "--out-dir".into(),
        s(out).into(),
    ];
    args.extend(extra.iter().map(|a| a.to_string()));
    run(&args)
}

#[test]
fn sweep_output_is_independent_of_jobs() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let (one, eight) = (dir.path().join("one"), dir.path().join("eight"));
    let a = sweep(dir.path(), &one, &["--jobs", "1"]);
    let b = sweep(dir.path(), &eight, &["--jobs", "8"]);
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);

    let summary = std::fs::read_to_string(one.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows.iter().filter(|r| r.ends_with(",1")).count(), 1);
    let mut names: Vec<_> = std::fs::read_dir(&one)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    for n in &names {
        assert_eq!(
            std::fs::read(one.join(n)).unwrap(),
            std::fs::read(eight.join(n)).unwrap(),
            "{n}"
        );
    }
    assert_eq!(names.len(), 9);
}

#[test]
fn single_value_grid_is_selected() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let out = dir.path().join("g");
    let o = sweep(dir.path(), &out, &["--grid", "1"]);
    assert!(o.status.success());
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].ends_with(",1"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("selected lambda: 1"));
}

#[test]
fn verify_reports_and_filters() {
    let out = meca(&["verify", "--checks", "gradients"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("PASS gradients"));

    let broken = meca(&["verify", "--checks", "gradients", "--corrupt-gradient"]);
    assert_ne!(broken.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&broken.stdout).starts_with("FAIL gradients"));

    let all = meca(&["verify"]);
    assert!(all.status.success());
    assert_eq!(
        String::from_utf8_lossy(&all.stdout).matches("PASS").count(),
        4
    );
}
