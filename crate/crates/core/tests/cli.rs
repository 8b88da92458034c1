use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tmifpe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmifpe")).args(args).current_dir(cwd).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SYNTH: [&str; 8] = ["--dataset", "synth", "--classes", "3", "--per-class", "40", "--dim", "6"];

fn train_synth(dir: &Path, out: &str) -> Output {
    let mut args = vec!["train"];
    args.extend(SYNTH);
    args.extend(["--epochs", "4", "--seed", "0", "--out", out]);
    tmifpe(&args, dir)
}

#[test]
fn analyze_two_class() {
    let dir = tempfile::tempdir().unwrap();
    let o = tmifpe(&["analyze", "--logits", "1,0", "--scenario", "uu", "--out", "a"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("t* = 1.278465"), "{}", stdout(&o));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("a/analyze.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["command"], "analyze");
    assert_eq!(json["solutions"].as_array().unwrap().len(), 3);
}

#[test]
fn negative_logits_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let o = tmifpe(&["analyze", "--logits", "-1,-3,0.5", "--scenario", "us"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn errors_are_single_line_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let o = tmifpe(&["analyze", "--logits", "1,1", "--scenario", "uu"], dir.path());
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim_end().lines().count(), 1);
    assert!(err.starts_with("error: "));

    let o = tmifpe(&["compare", "--model", "missing.manifest"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("model not found"));
}

#[test]
fn training_twice_gives_identical_weights() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_synth(dir.path(), "a").status.success());
    assert!(train_synth(dir.path(), "b").status.success());
    for f in ["model.manifest", "model.bin"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("a/train_report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seed"], 0);
}

#[test]
fn attack_and_compare_reports() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_synth(dir.path(), "m").status.success());
    let mut args = vec!["attack", "--model", "m/model.manifest"];
    args.extend(SYNTH);
    args.extend(["--loss", "tmifpe", "--eps", "0.3", "--iters", "100", "--seed", "0", "--limit", "30", "--out", "r"]);
    let o = tmifpe(&args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("r/attack_tmifpe.json")).unwrap()).unwrap();
    let samples = report["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 30);
    for s in samples {
        assert!(s["final_norm"].as_f64().unwrap() <= 0.3 + 1e-6);
        for key in ["index", "clean_correct", "success", "first_success_iteration"] {
            assert!(s.get(key).is_some());
        }
    }
    for key in ["clean_accuracy", "robust_accuracy", "mean_first_success"] {
        assert!(report["aggregate"].get(key).is_some());
    }
    assert_eq!(report["config"]["eps"], 0.3);

    let mut args = vec!["compare", "--model", "m/model.manifest"];
    args.extend(SYNTH);
    args.extend(["--eps", "0.2", "--iters", "20", "--limit", "30", "--out", "c"]);
    let first = tmifpe(&args, dir.path());
    assert!(first.status.success());
    let table = stdout(&first);
    for name in ["Clean", "CE", "C&W", "DLR", "MIFPE", "T-MIFPE"] {
        assert!(table.contains(name), "{table}");
    }
    let second = tmifpe(&args, dir.path());
    assert_eq!(stdout(&first), stdout(&second));
}

#[test]
fn figure1_writes_four_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let o = tmifpe(&["figure1", "--out", "fig", "--points", "101"], dir.path());
    assert!(o.status.success());
    let mut names: Vec<String> = fs::read_dir(dir.path().join("fig"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["figure1.json", "figure1_a_u_u.csv", "figure1_b_u_s.csv", "figure1_c_t_u.csv", "figure1_d_t_s.csv"]);
    let text = fs::read_to_string(dir.path().join("fig/figure1_a_u_u.csv")).unwrap();
    assert!(text.starts_with("t,g,delta_sup_16,delta_sup_32,delta_sup_64,t_star_marker\n"));
}
