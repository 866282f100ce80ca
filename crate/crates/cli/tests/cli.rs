use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use palm_cli::output::{read_summary, RUN_HEADER, SUMMARY_HEADER};

/// Small dataset and short source training so each invocation stays fast.
const SMALL: [&str; 8] = [
    "--set",
    "dataset.samples=1000",
    "--set",
    "dataset.hidden=[16,16]",
    "--set",
    "source.epochs=30",
    "--set",
    "source.batch_size=50",
];

fn palm(args: &[&str], out: Option<&Path>, env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_palm"));
    cmd.args(args).env_remove("PALM_OUT");
    if args[0] != "report" {
        cmd.args(SMALL);
    }
    if let Some(o) = out {
        cmd.arg("--out").arg(o);
    }
    if let Some(e) = env_out {
        cmd.env("PALM_OUT", e);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn run_writes_exact_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let o = palm(&["run", "--train-source", "--set", "run.seeds=[0,1]"], Some(dir.path()), None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let csv = fs::read_to_string(dir.path().join("runs/palm-s0.csv")).unwrap();
    let mut lines = csv.split('\n');
    assert_eq!(lines.next(), Some(RUN_HEADER));
    assert!(!csv.contains('\r') && !csv.contains('"'));
    assert!(csv.ends_with('\n'));
    // 200 test samples in batches of 100, six domains.
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 12);
    for row in &rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 12);
        assert_eq!(&fields[..4], &["palm-s0", "palm", "ctta", "0"]);
        assert_eq!(fields[6], "5");
        let err: f64 = fields[11].parse().unwrap();
        assert!((0.0..=1.0).contains(&err));
    }

    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with(&format!("{SUMMARY_HEADER}\n")));
    assert_eq!(read_summary(&dir.path().join("summary.csv")).unwrap().len(), 2);
    assert!(dir.path().join("config.toml").exists());
}

#[test]
fn output_directory_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let env_dir = dir.path().join("from-env");
    let flag_dir = dir.path().join("from-flag");
    let o = palm(&["train-source"], None, Some(&env_dir));
    assert_eq!(code(&o), 0);
    assert!(env_dir.join("source").is_dir());
    let o = palm(&["train-source"], Some(&flag_dir), Some(&env_dir));
    assert_eq!(code(&o), 0);
    assert!(flag_dir.join("source").is_dir());
}

#[test]
fn cached_source_is_reused_and_missing_source_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = palm(&["run"], Some(dir.path()), None);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-source"));

    assert_eq!(code(&palm(&["train-source"], Some(dir.path()), None)), 0);
    let o = palm(&["run"], Some(dir.path()), None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn invalid_configuration_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for bad in ["palm.p=1.5", "palm.bogus=1", "palm.alpha=2", "run.method=\"nope\"", "scenario.batch_size=1"] {
        let o = palm(&["run", "--train-source", "--set", bad], Some(dir.path()), None);
        assert_eq!(code(&o), 1, "{bad}");
    }
    let o = palm(&["run", "--set", "novalue"], Some(dir.path()), None);
    assert_eq!(code(&o), 1);
    let o = palm(&["run", "--no-such-flag"], Some(dir.path()), None);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&palm(&["--help"], None, None)), 0);
}

#[test]
fn divergence_exits_with_two_and_keeps_partial_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = palm(&["run", "--train-source", "--set", "palm.kappa=1e300"], Some(dir.path()), None);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_summary(&dir.path().join("summary.csv")).unwrap();
    assert!(summary[0].diverged);
    let csv = fs::read_to_string(dir.path().join("runs/palm-s0.csv")).unwrap();
    assert!(csv.lines().count() < 13);
}

#[test]
fn sweep_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = palm(
        &["sweep", "--train-source", "--preset", "variants", "--seeds", "0,1,2,3,4"],
        Some(dir.path()),
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_summary(&dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.len(), 30);
    for v in 1..=6 {
        let rows: Vec<_> = summary.iter().filter(|r| r.params == format!("palm.variant={v}")).collect();
        assert_eq!(rows.len(), 5);
        let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        assert_eq!(seeds, vec![0, 1, 2, 3, 4]);
    }
    assert_eq!(fs::read_dir(dir.path().join("cells")).unwrap().count(), 6);
    assert_eq!(fs::read_dir(dir.path().join("runs")).unwrap().count(), 30);

    let o = palm(&["report"], Some(dir.path()), None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = dir.path().join("report");
    let ablation = fs::read_to_string(report.join("ablation.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 7);
    assert!(ablation.lines().skip(1).all(|l| l.split(',').nth(4) == Some("5")));
    let per_domain = fs::read_to_string(report.join("per_domain.csv")).unwrap();
    assert_eq!(per_domain.lines().count(), 1 + 6 * 6);
    let plot = fs::read_to_string(report.join("plot_palm.variant.dat")).unwrap();
    assert_eq!(plot.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).count(), 6);
}

#[test]
fn scenario_dump_has_one_json_line_per_batch() {
    let dir = tempfile::tempdir().unwrap();
    let o = palm(
        &["run", "--train-source", "--dump-scenario", "--set", "scenario.protocol=\"gtta\"", "--set", "scenario.batch_size=20"],
        Some(dir.path()),
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dump = fs::read_to_string(dir.path().join("scenarios/gtta-s0.jsonl")).unwrap();
    let csv = fs::read_to_string(dir.path().join("runs/palm-s0.csv")).unwrap();
    assert_eq!(dump.lines().count(), csv.lines().count() - 1);
    for line in dump.lines() {
        let keys = ["\"protocol\":\"gtta\"", "\"index\":", "\"domain\":", "\"severity\":", "\"sample_ids\":["];
        assert!(keys.iter().all(|k| line.contains(k)), "{line}");
    }
}

#[test]
fn written_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let o = palm(&["run", "--train-source", "--set", "palm.alpha=0.9", "--set", "run.method=\"law\""], Some(&first), None);
    assert_eq!(code(&o), 0);
    let second = dir.path().join("second");
    let cfg = first.join("config.toml");
    let o = palm(&["run", "--train-source", "-c", cfg.to_str().unwrap()], Some(&second), None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let a = fs::read(first.join("runs/law-s0.csv")).unwrap();
    let b = fs::read(second.join("runs/law-s0.csv")).unwrap();
    assert_eq!(a, b);
}
