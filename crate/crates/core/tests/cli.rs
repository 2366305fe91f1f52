use std::path::Path;
use std::process::{Command, Output};

use dyadlab::config::ExperimentSpec;
use dyadlab::lattice::Grid;
use dyadlab::measures::{generate, LatticeMeasure, MeasureSpec};
use dyadlab::verify::RECORD_CSV_HEADER;

fn dyadlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dyadlab")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, edit: impl FnOnce(&mut ExperimentSpec)) -> String {
    let mut s = ExperimentSpec { id: name.into(), ..Default::default() };
    s.lattice.depth = 7;
    s.output.dir = dir.to_path_buf();
    edit(&mut s);
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, s.to_toml()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn passing_suite_exits_zero_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ok", |_| {});
    let out = dyadlab(&["verify", "t1", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    let csv = std::fs::read_to_string(dir.path().join("ok-t1.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), RECORD_CSV_HEADER.join(","));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("ok-t1.json")).unwrap()).unwrap();
    for key in ["suite", "id", "seed", "records"] {
        assert!(json.get(key).is_some(), "report lacks {key}");
    }
}

#[test]
fn failing_check_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tight", |s| s.ceilings.t1 = 1e-6);
    let out = dyadlab(&["verify", "t1", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    assert_eq!(dyadlab(&["verify", "nonsense", "--out-dir", out_dir]).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "lattice = 3\n").unwrap();
    assert_eq!(dyadlab(&["verify", "t1", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(dyadlab(&["verify", "t1", "--out-dir", out_dir, "--seed", &u64::MAX.to_string()]).status.code(), Some(2));
    // clap's own parse errors use the same code
    assert_eq!(dyadlab(&["gen-measure"]).status.code(), Some(2));
}

#[test]
fn budget_exceeded_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "big", |s| s.operator.budget = 100);
    let out = dyadlab(&["constants", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_measure_round_trips_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dyadmeas");
    let out = dyadlab(&["gen-measure", "--family", "cascade:0.2", "--n", "2", "-L", "5", "--seed", "41", "--out", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let loaded = LatticeMeasure::load(&path).unwrap();
    let direct = generate(&MeasureSpec::parse("cascade:0.2:41").unwrap(), &Grid::unit(2, 5).unwrap()).unwrap();
    let bits = |m: &LatticeMeasure| m.masses().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&loaded), bits(&direct));
    assert_eq!(loaded.to_text(), std::fs::read_to_string(&path).unwrap());
}

#[test]
fn merge_concatenates_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "m", |_| {});
    for suite in ["wavelets", "truncation"] {
        assert_eq!(dyadlab(&["verify", suite, "--config", &cfg]).status.code(), Some(0));
    }
    let a = dir.path().join("m-wavelets.csv");
    let b = dir.path().join("m-truncation.csv");
    let merged = dir.path().join("all.csv");
    let out = dyadlab(&["report", "merge", "--out", merged.to_str().unwrap(), a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let rows = |p: &Path| std::fs::read_to_string(p).unwrap().lines().count() - 1;
    assert_eq!(rows(&merged), rows(&a) + rows(&b));

    let constants = dir.path().join("m-constants.csv");
    assert_eq!(dyadlab(&["constants", "--config", &cfg]).status.code(), Some(0));
    let out = dyadlab(&["report", "merge", "--out", merged.to_str().unwrap(), a.to_str().unwrap(), constants.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "mismatched headers must be refused");
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let cfg = write_config(dir.path(), "det", |s| {
            s.seed = 99;
            s.measures.omega = "cascade:0.3:4".into();
        });
        let out = dyadlab(&["verify", "corona", "--config", &cfg, "--out-dir", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
    }
    for ext in ["json", "csv"] {
        let a = std::fs::read(dir.path().join(format!("a/det-corona.{ext}"))).unwrap();
        let b = std::fs::read(dir.path().join(format!("b/det-corona.{ext}"))).unwrap();
        assert_eq!(a, b, "{ext} differs");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "thr", |s| s.measures.sigma = "power:0.3".into());
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let out_dir = dir.path().join(threads);
        let out = Command::new(env!("CARGO_BIN_EXE_dyadlab"))
            .args(["verify", "t1", "--config", &cfg, "--out-dir", out_dir.to_str().unwrap()])
            .env("DYADLAB_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        outputs.push(std::fs::read(out_dir.join("thr-t1.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}
