use std::path::Path;
use std::process::{Command, Output};

fn ppgwas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppgwas")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = ppgwas(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_split_simulate_compare() {
    let dir = tempfile::tempdir().unwrap();
    let (whole, split, sim, orc) = (
        dir.path().join("whole"),
        dir.path().join("split"),
        dir.path().join("sim"),
        dir.path().join("oracle"),
    );
    ok(&["gen-data", "--samples", "240", "--snps", "120", "--seed", "3", "--out", s(&whole)]);
    ok(&["split", "--data", s(&whole), "--parties", "3", "--out", s(&split)]);
    let flags = ["--blocks", "3", "--ridge-params", "3", "--folds", "3"];
    let mut args = vec!["simulate", "--data", s(&split), "--out", s(&sim)];
    args.extend(flags);
    ok(&args);
    for f in ["results.tsv", "bytes.tsv", "qc.tsv"] {
        assert!(sim.join(f).is_file(), "{f}");
    }
    let mut args = vec!["oracle", "--data", s(&split), "--out", s(&orc)];
    args.extend(flags);
    ok(&args);
    let a = sim.join("results.tsv");
    let b = orc.join("results.tsv");
    assert_eq!(ok(&["compare", s(&a), s(&a)]).trim(), "r2\t1.000000");
    let r2: f64 = ok(&["compare", s(&a), s(&b)]).trim().split('\t').nth(1).unwrap().parse().unwrap();
    assert!(r2 >= 0.99, "{r2}");
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(ppgwas(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ppgwas(&["split", "--parties", "2"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = ppgwas(&["oracle", "--data", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
