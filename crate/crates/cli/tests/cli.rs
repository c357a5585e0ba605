use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &[&str] = &["--set", "epochs=2", "--set", "largest_class=150"];

fn leaf(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leaf"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("LEAF_OUT")
        .output()
        .expect("binary runs")
}

fn with_small(args: &[&str]) -> Vec<String> {
    args.iter().chain(SMALL).map(|s| s.to_string()).collect()
}

fn run_small(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run"];
    args.extend_from_slice(extra);
    let args = with_small(&args);
    leaf(out, &args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn run_dirs(root: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_the_documented_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_small(tmp.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dirs = run_dirs(tmp.path());
    assert_eq!(dirs.len(), 1);
    let id = dirs[0].file_name().unwrap().to_str().unwrap();
    assert_eq!(id.len(), 16);
    assert!(id.chars().all(|c| c.is_ascii_hexdigit()));
    for f in ["config", "metrics.jsonl", "summary.csv", "checkpoint"] {
        assert!(dirs[0].join(f).is_file(), "missing {f}");
    }
    let summary = fs::read_to_string(dirs[0].join("summary.csv")).unwrap();
    assert!(summary.starts_with("method,seed,n_labeled,overall_acc,balanced_acc\nleaf,0,70,"));
    let metrics = fs::read_to_string(dirs[0].join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().filter(|l| l.contains("\"kind\":\"epoch\"")).count(), 2);
}

#[test]
fn identical_configs_give_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run_small(a.path(), &[]).status.success());
    assert!(run_small(b.path(), &[]).status.success());
    let (da, db) = (run_dirs(a.path()), run_dirs(b.path()));
    assert_eq!(da[0].file_name(), db[0].file_name());
    for f in ["config", "metrics.jsonl", "summary.csv", "checkpoint"] {
        assert_eq!(fs::read(da[0].join(f)).unwrap(), fs::read(db[0].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn saved_config_reloads_to_the_same_run() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run_small(tmp.path(), &["--set", "seed=4"]).status.success());
    let dir = run_dirs(tmp.path()).remove(0);
    let config = dir.join("config");
    let again = tempfile::tempdir().unwrap();
    let o = leaf(again.path(), &["run", "--config", config.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let redo = run_dirs(again.path()).remove(0);
    assert_eq!(redo.file_name(), dir.file_name());
    assert_eq!(
        fs::read(redo.join("summary.csv")).unwrap(),
        fs::read(dir.join("summary.csv")).unwrap()
    );
}

#[test]
fn report_reloads_checkpoints_and_summaries() {
    let tmp = tempfile::tempdir().unwrap();
    for seed in ["seed=0", "seed=1"] {
        assert!(run_small(tmp.path(), &["--set", seed]).status.success());
    }
    let o = leaf(tmp.path(), &["report", "--check-checkpoints", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("70,leaf,2,0,"));
}

#[test]
fn report_flags_a_tampered_summary() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run_small(tmp.path(), &[]).status.success());
    let summary = run_dirs(tmp.path())[0].join("summary.csv");
    let text = fs::read_to_string(&summary).unwrap();
    let (head, row) = text.trim_end().split_once('\n').unwrap();
    let mut fields: Vec<&str> = row.split(',').collect();
    fields[4] = "0.123";
    fs::write(&summary, format!("{head}\n{}\n", fields.join(","))).unwrap();
    let o = leaf(tmp.path(), &["report", "--check-checkpoints", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_config_file_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = leaf(tmp.path(), &["run", "--config", "/nonexistent/leaf.cfg"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    for bad in ["epochs=0", "no_such_key=1", "top_k=5", "method=magic", "lambda=-1"] {
        let o = leaf(tmp.path(), &["run", "--set", bad]);
        assert_eq!(o.status.code(), Some(2), "{bad}: {}", stderr(&o));
    }
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 2\nthis line has no equals sign\n").unwrap();
    let o = leaf(tmp.path(), &["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(run_dirs(tmp.path()).is_empty(), "nothing written for invalid configs");
}

#[test]
fn numeric_blow_up_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_small(tmp.path(), &["--set", "lr=1e300"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("numeric abort"));
}

#[test]
fn supervised_only_warns_about_lambda() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_small(tmp.path(), &["--set", "method=supervised_only", "--set", "lambda=0.3"]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("ignores lambda"), "{}", stderr(&o));
}

#[test]
fn leaf_out_sets_the_root_and_flag_wins() {
    let env_root = tempfile::tempdir().unwrap();
    let flag_root = tempfile::tempdir().unwrap();
    let args = with_small(&["run"]);
    let o = Command::new(env!("CARGO_BIN_EXE_leaf"))
        .args(&args)
        .env("LEAF_OUT", env_root.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(run_dirs(env_root.path()).len(), 1);

    let o = Command::new(env!("CARGO_BIN_EXE_leaf"))
        .arg("--out")
        .arg(flag_root.path())
        .args(&args)
        .env("LEAF_OUT", env_root.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(run_dirs(flag_root.path()).len(), 1);
    assert_eq!(run_dirs(env_root.path()).len(), 1);
}

#[test]
fn sweep_has_one_row_per_cell_and_unit_grid_matches_run() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with_small(&[
        "sweep",
        "--labels",
        "14,35",
        "--seeds",
        "2",
        "--methods",
        "leaf,supervised_only,fixed_threshold",
    ]);
    let o = leaf(tmp.path(), &args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 3);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), table);
    let runs = fs::read_to_string(tmp.path().join("sweep_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 2 * 3 * 2);

    let unit = tempfile::tempdir().unwrap();
    let args = with_small(&["sweep", "--labels", "35", "--seeds", "1", "--methods", "leaf"]);
    assert!(leaf(unit.path(), &args.iter().map(String::as_str).collect::<Vec<_>>())
        .status
        .success());
    let single = tempfile::tempdir().unwrap();
    assert!(run_small(single.path(), &["--set", "n_labeled=35"]).status.success());
    let summary = fs::read_to_string(run_dirs(single.path())[0].join("summary.csv")).unwrap();
    let run_row = summary.lines().nth(1).unwrap();
    let sweep_runs = fs::read_to_string(unit.path().join("sweep_runs.csv")).unwrap();
    assert_eq!(sweep_runs.lines().nth(1).unwrap(), run_row);
}

#[test]
fn sweep_rejects_bad_grids() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        vec!["sweep", "--methods", "leaf,nonsense"],
        vec!["sweep", "--seeds", "0"],
        vec!["sweep", "--labels", "3"],
    ] {
        let o = leaf(tmp.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn ablate_writes_every_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with_small(&["ablate", "--seeds", "1"]);
    let o = leaf(tmp.path(), &args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(tmp.path().join("ablation.csv")).unwrap();
    let variants: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        variants,
        ["full", "wo_semantic_eaf", "wo_instance_eaf", "wo_category_eaf", "w_cross_entropy"]
    );
}

#[test]
fn verification_commands_pass() {
    let tmp = tempfile::tempdir().unwrap();
    let o = leaf(tmp.path(), &["gradcheck", "--trials", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let o = leaf(
        tmp.path(),
        &["oracle", "--gating-cases", "200", "--partition-cases", "2000", "--loss-cases", "200"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8(o.stdout).unwrap().contains("PASS partition_oracle"));
}

#[test]
fn bad_flags_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(leaf(tmp.path(), &["gradcheck", "--trials", "0"]).status.code(), Some(2));
    assert_eq!(leaf(tmp.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(leaf(tmp.path(), &["report", "/nonexistent"]).status.code(), Some(2));
}
