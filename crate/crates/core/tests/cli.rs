use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nce_lab(args: &[&str], out: &Path, threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nce-lab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("NCE_LAB_THREADS", threads)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
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
fn empty_config_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.toml");
    fs::write(&cfg, "").unwrap();
    let o = nce_lab(&["run", "--config", cfg.to_str().unwrap()], &dir.path().join("out"), "1");
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("command"), "{}", stderr(&o));
}

#[test]
fn usage_and_value_errors_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["mse", "--no-such-flag"],
        vec!["mse", "--loss", "bogus"],
        vec!["mse", "--noise", "normal:0"],
        vec!["preset", "fig9"],
        vec!["mse", "--nu", "-1"],
    ] {
        let o = nce_lab(&args, dir.path(), "1");
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn help_exits_zero() {
    let o = Command::new(env!("CARGO_BIN_EXE_nce-lab")).arg("--help").output().unwrap();
    assert_eq!(code(&o), 0);
}

#[test]
fn numerical_failure_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    // importance weights against a lighter-tailed noise have infinite variance
    let o = nce_lab(&["mse", "--model", "gauss-var", "--loss", "kl", "--noise", "normal:0:0.4"], dir.path(), "1");
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn flags_override_config_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "command = \"mse\"\nnu = 2.0\nT = 500.0\n").unwrap();
    let out = dir.path().join("out");
    let o = nce_lab(&["run", "--config", cfg.to_str().unwrap(), "--nu", "3"], &out, "1");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(out.join("mse.json")).unwrap();
    assert!(report.contains("\"nu\": 3.0"), "{report}");
    assert!(report.contains("\"t\": 500.0"), "{report}");
}

#[test]
fn preset_headers() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["fig4", "fig6"] {
        let o = nce_lab(&["preset", name], dir.path(), "2");
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for fam in ["gauss-mean", "gauss-var", "gauss-corr"] {
        assert_eq!(
            first_line(&dir.path().join(format!("fig4_{fam}.csv"))),
            "nu,mse_data_noise,mse_param_noise,mse_opt_noise,cramer_rao"
        );
        assert_eq!(first_line(&dir.path().join(format!("fig6_{fam}.csv"))), "noise_param,mse");
    }
}

#[test]
fn every_csv_starts_with_a_header_and_uses_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    for args in [vec!["landscape"], vec!["optimize-nu"], vec!["optimize-noise", "--mode", "histogram", "--max-iter", "5"]] {
        let o = nce_lab(&args, dir.path(), "1");
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    }
    let mut seen = 0;
    for (name, bytes) in snapshot(dir.path()) {
        if !name.ends_with(".csv") {
            continue;
        }
        seen += 1;
        let text = String::from_utf8(bytes).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.split(',').all(|h| h.parse::<f64>().is_err()), "{name}: {header}");
        let row = lines.next().unwrap();
        let cell = row.split(',').find(|c| c.contains('e')).unwrap();
        let digits = cell.split('e').next().unwrap().chars().filter(char::is_ascii_digit).count();
        assert_eq!(digits, 17, "{name}: {cell}");
    }
    assert!(seen >= 4);
}

#[test]
fn gnuplot_script_per_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = nce_lab(&["landscape", "--gnuplot"], dir.path(), "1");
    assert_eq!(code(&o), 0);
    let script = fs::read_to_string(dir.path().join("landscape.gp")).unwrap();
    assert!(script.contains("'landscape.csv'"));
}

#[test]
fn monte_carlo_reruns_are_byte_identical_across_thread_counts() {
    let args = ["validate", "--reps", "100", "--T", "2000", "--seed", "9"];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&nce_lab(&args, a.path(), "1")), 0);
    assert_eq!(code(&nce_lab(&args, b.path(), "3")), 0);
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.len(), 2);
    assert_eq!(sa, sb);
}

#[test]
fn report_lists_files_and_hash_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let run = || nce_lab(&["optimize-nu", "--nu-grid", "0.5,1,2"], dir.path(), "1");
    let (a, b) = (run(), run());
    let hash = |o: &Output| {
        let s = String::from_utf8_lossy(&o.stdout).into_owned();
        let line = s.lines().find(|l| l.contains("artifact_hash")).unwrap().to_string();
        assert!(s.contains("nu_curve.csv") && s.contains("optimum.json"), "{s}");
        line
    };
    assert_eq!(hash(&a), hash(&b));
    let other = nce_lab(&["optimize-nu", "--nu-grid", "0.5,1,3"], dir.path(), "1");
    assert_ne!(hash(&a), hash(&other));
}
