use std::path::Path;
use std::process::{Command, Output};

fn dpem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpem"))
        .args(args)
        .env_remove("DPEM_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn eps_i_of(table: &str, method: &str) -> f64 {
    table
        .lines()
        .find(|l| l.split_whitespace().next() == Some(method))
        .and_then(|l| l.split_whitespace().nth(1))
        .unwrap()
        .parse()
        .unwrap()
}

fn small_fit(out: &Path, extra: &[&str]) -> Vec<String> {
    let mut args: Vec<String> = [
        "fit", "--synth-n", "400", "--k", "2", "--iters", "3", "--eps-list", "0.5,2",
        "--method", "linear,zcdp", "--folds", "3", "--seeds", "2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    args.push("--out".into());
    args.push(out.display().to_string());
    args.extend(extra.iter().map(|s| s.to_string()));
    args
}

#[test]
fn calibrate_all_prints_four_rows() {
    let o = dpem(&["calibrate", "--eps", "1", "--delta", "1e-4", "--iters", "10", "--components", "3"]);
    assert!(o.status.success());
    let t = stdout(&o);
    for m in ["linear", "advanced", "zcdp", "ma"] {
        assert!(t.lines().any(|l| l.starts_with(m)), "missing {m} in\n{t}");
    }
    let lin = eps_i_of(&t, "linear");
    assert!((lin - 1.0 / 70.0).abs() < 1e-8, "{lin}");
    assert!(eps_i_of(&t, "zcdp") > lin);
}

#[test]
fn exit_codes() {
    assert_eq!(dpem(&["calibrate"]).status.code(), Some(2));
    assert_eq!(dpem(&["calibrate", "--eps", "1", "--method", "bogus"]).status.code(), Some(2));
    assert_eq!(dpem(&["calibrate", "--eps", "-1"]).status.code(), Some(2));
    let unattainable = dpem(&[
        "calibrate", "--eps", "0.1", "--delta", "1e-5", "--iters", "20", "--components", "10",
        "--method", "linear",
    ]);
    assert_eq!(unattainable.status.code(), Some(3));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "0.1,0.2\n0.3\n").unwrap();
    let o = dpem(&["fit", "--data", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    let missing = dir.path().join("nope.csv");
    let o = dpem(&["fit", "--data", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn fit_writes_reproducible_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = dpem(&small_fit(&a, &["--jobs", "1"]).iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = dpem(&small_fit(&b, &["--jobs", "3"]).iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success());
    let sa = std::fs::read(a.join("summary.csv")).unwrap();
    assert_eq!(sa, std::fs::read(b.join("summary.csv")).unwrap());

    let text = String::from_utf8(sa).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("model,method,scenario,epsilon,delta,metric,count,median,q1,q3,iqr"));
    assert_eq!(lines.len(), 1 + 2 * 2 + 1);
    assert!(lines.last().unwrap().starts_with("mog,nonprivate,"));
    let jsonl = std::fs::read_to_string(a.join("results.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 2 * 2 * 3 * 2);
}

#[test]
fn env_seed_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &Path, seed: &str, env: Option<&str>| {
        let mut args = small_fit(out, &["--seed", seed]);
        args.push("--jobs".into());
        args.push("2".into());
        let mut c = Command::new(env!("CARGO_BIN_EXE_dpem"));
        c.args(&args).env_remove("DPEM_SEED");
        if let Some(v) = env {
            c.env("DPEM_SEED", v);
        }
        assert!(c.output().unwrap().status.success());
        std::fs::read(out.join("summary.csv")).unwrap()
    };
    let flag = run(&dir.path().join("flag"), "11", None);
    let env = run(&dir.path().join("env"), "999", Some("11"));
    let other = run(&dir.path().join("other"), "999", None);
    assert_eq!(flag, env);
    assert_ne!(flag, other);

    let mut c = Command::new(env!("CARGO_BIN_EXE_dpem"));
    c.args(small_fit(&dir.path().join("bad"), &[])).env("DPEM_SEED", "abc");
    assert_eq!(c.output().unwrap().status.code(), Some(2));
}

#[test]
fn kmeans_and_fa_models_run() {
    let dir = tempfile::tempdir().unwrap();
    for model in ["kmeans", "fa"] {
        let out = dir.path().join(model);
        let o = dpem(&[
            "fit", "--model", model, "--synth-n", "300", "--synth-d", "3", "--iters", "5",
            "--eps-list", "1", "--folds", "2", "--out", out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{model}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join("summary.csv").exists());
    }
}
