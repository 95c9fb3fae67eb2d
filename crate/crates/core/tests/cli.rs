use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_market-thermo"))
}

fn run(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn kinetic_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("kinetic.cfg");
    fs::write(&cfg, "kind = kinetic\nagents = 10000\nsteps = 10000000\nthin = 100000\nseed = 1\n").unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let (code, err) = run(&["kinetic", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
    }
    let (fa, fb) = (read_dir_sorted(&a), read_dir_sorted(&b));
    assert_eq!(fa.iter().map(|f| f.0.as_str()).collect::<Vec<_>>(), ["hist.csv", "summary.txt", "trace.csv"]);
    assert_eq!(fa, fb);
    let summary = String::from_utf8(fa[1].1.clone()).unwrap();
    let ks: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("ks_exponential = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(ks < 0.02, "{ks}");
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let (code, err) = run(&["kinetic", "--seed", "42", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.lines().next().unwrap().ends_with(" seed=42"));
    // nothing written outside the output directory
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    fs::write(p("bad.cfg"), "kind = canonical\nagents = lots\n").unwrap();
    fs::write(p("npt.cfg"), "kind = npt\n").unwrap();
    fs::write(p("sabotage.cfg"), "kind = verify\ncriteria = 2\neos_k0_scale = 2\n").unwrap();
    assert_eq!(run(&["canonical", "--config", &p("bad.cfg"), "--out-dir", &p("o1")]).0, 2);
    assert_eq!(run(&["canonical", "--config", &p("npt.cfg"), "--out-dir", &p("o2")]).0, 2);
    assert_eq!(run(&["canonical", "--config", &p("missing.cfg"), "--out-dir", &p("o3")]).0, 2);
    assert_eq!(run(&["oracle", "--out-dir", &p("o4")]).0, 0);
    let (code, _) = run(&["verify", "--config", &p("sabotage.cfg"), "--out-dir", &p("o5")]);
    assert_eq!(code, 3);
    let report = fs::read_to_string(dir.path().join("o5/verify.csv")).unwrap();
    assert!(report.lines().nth(1) == Some("name,measured,expected,tolerance,status"));
    assert!(report.lines().any(|l| l.starts_with("quadrature_eos_ratio_n3,") && l.ends_with(",FAIL")));
}
