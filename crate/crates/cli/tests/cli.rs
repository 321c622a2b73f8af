use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn his(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_his"))
        .args(args)
        .current_dir(cwd)
        .env_remove("HIS_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const MINI: &str = "n = 2\naction_dim = 1\nepisodes = 120\nwarmup_steps = 40\nbatch_size = 16\n\
hidden_sizes = [8]\ntrain_interval = 20\nupdates_per_train = 5\neval_interval = 40\neval_episodes = 1\n";

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn game_reports() {
    let d = tempfile::tempdir().unwrap();
    let sym = write(
        d.path(),
        "sym.json",
        r#"{"n":2,"values":{"":0,"0":0,"1":0,"0,1":1}}"#,
    );
    let o = his(&["game", "shapley", &sym], d.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "0.5 0.5");

    let sq = write(
        d.path(),
        "sq.json",
        r#"{"n":3,"values":{"":0,"0":1,"1":1,"2":1,"0,1":4,"0,2":4,"1,2":4,"0,1,2":9}}"#,
    );
    let o = his(&["game", "hybrid", &sq], d.path());
    assert_eq!(stdout(&o).trim(), "3 3 3\nefficient=true\ncore=true");
    assert_eq!(
        stdout(&his(&["game", "convex", &sq], d.path())).trim(),
        "true"
    );
    let o = his(&["game", "core", &sq, "--allocation", "9,0,0"], d.path());
    assert!(
        stdout(&o).starts_with("false\nviolated coalition {1}"),
        "{}",
        stdout(&o)
    );

    // v({0}) + v({1}) = 2 > v({0,1}) + v(∅) = 1
    let nc = write(
        d.path(),
        "nc.json",
        r#"{"n":2,"values":{"":0,"0":1,"1":1,"0,1":1}}"#,
    );
    let out = stdout(&his(&["game", "convex", &nc], d.path()));
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("false"));
    assert!(lines.next().unwrap().contains("C = {0}, D = {1}"));
}

#[test]
fn malformed_game_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let missing = write(
        d.path(),
        "m.json",
        r#"{"n":2,"values":{"":0,"0":1,"0,1":1}}"#,
    );
    let o = his(&["game", "shapley", &missing], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing value for coalition {1}"));
    let nonzero = write(d.path(), "z.json", r#"{"n":1,"values":{"":1,"0":1}}"#);
    assert_eq!(
        his(&["game", "shapley", &nonzero], d.path()).status.code(),
        Some(2)
    );
    assert_eq!(
        his(&["game", "shapley", "nope.json"], d.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn run_writes_artifacts_and_refuses_overwrite() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "mini.toml", MINI);
    let o = his(
        &["run", "--config", &cfg, "--out", "a", "--ablation", "share"],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = fs::read_to_string(d.path().join("a/metrics.csv")).unwrap();
    assert!(metrics.lines().count() >= 2);
    assert!(metrics
        .starts_with("step,episodes,ret_mean,ret_std,critic_loss,alpha,shapley_q_mean_agent0,"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("a/summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["ablation"], "share");
    assert_eq!(summary["completed"], true);
    assert!(d.path().join("a/checkpoints/step_120.json").exists());
    assert!(fs::read_to_string(d.path().join("a/eval.csv"))
        .unwrap()
        .starts_with("step,eval_return\n40,"));

    let again = his(&["run", "--config", &cfg, "--out", "a"], d.path());
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"));
    assert_eq!(
        his(
            &["run", "--config", &cfg, "--out", "a", "--force"],
            d.path()
        )
        .status
        .code(),
        Some(0)
    );
}

#[test]
fn identical_runs_give_identical_csvs() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "mini.toml", MINI);
    for out in ["x", "y"] {
        assert_eq!(
            his(
                &["run", "--config", &cfg, "--seed", "7", "--out", out],
                d.path()
            )
            .status
            .code(),
            Some(0)
        );
    }
    for f in ["metrics.csv", "eval.csv"] {
        let a = fs::read(d.path().join("x").join(f)).unwrap();
        let b = fs::read(d.path().join("y").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn config_errors_name_the_line() {
    let d = tempfile::tempdir().unwrap();
    let bad = write(d.path(), "bad.toml", "n = 3\ngamma = 1.5\n");
    let o = his(&["run", "--config", &bad, "--out", "r"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    let typo = write(d.path(), "typo.toml", "n = 3\n\nbatch_sise = 4\n");
    let o = his(&["run", "--config", &typo, "--out", "r"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    assert!(!d.path().join("r").exists());
    assert_eq!(
        his(&["run", "--set", "n_step=0", "--out", "r"], d.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(his(&["frobnicate"], d.path()).status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_one() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "mini.toml", MINI);
    write(d.path(), "blocker", "not a directory");
    let o = his(&["run", "--config", &cfg, "--out", "blocker"], d.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn print_config_round_trips() {
    let d = tempfile::tempdir().unwrap();
    let o = his(
        &[
            "run",
            "--print-config",
            "--seed",
            "4",
            "--set",
            "batch_size=32",
        ],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("seed = 4"));
    let cfg = his_core::config::RunConfig::from_toml_str(&text).unwrap();
    assert_eq!(cfg.batch_size, 32);
}

#[test]
fn default_output_root_comes_from_env() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "mini.toml", MINI);
    let o = Command::new(env!("CARGO_BIN_EXE_his"))
        .args(["run", "--config", &cfg, "--seed", "3"])
        .env("HIS_OUT_DIR", d.path().join("root"))
        .current_dir(d.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(d
        .path()
        .join("root/quad_coupled_full_s3/summary.json")
        .exists());
}

#[test]
fn verify_reports_json() {
    let d = tempfile::tempdir().unwrap();
    let o = his(
        &[
            "verify", "theorems", "--count", "30", "--seed", "2", "--out", "v",
        ],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["count"], 30);
    assert!(d.path().join("v/verify_theorems.json").exists());
    let o = his(&["verify", "gradients", "--count", "1"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        his(&["verify", "theorems", "--count", "0"], d.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        his(&["verify", "nonsense"], d.path()).status.code(),
        Some(2)
    );
}

#[test]
fn ablate_writes_comparison_and_medians() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "mini.toml", MINI);
    let o = his(
        &[
            "ablate",
            "--config",
            &cfg,
            "--modes",
            "full,share",
            "--seeds",
            "0,1",
            "--out",
            "ab",
            "--jobs",
            "2",
        ],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cmp = fs::read_to_string(d.path().join("ab/comparison.csv")).unwrap();
    let rows: Vec<&str> = cmp.lines().collect();
    assert_eq!(
        rows[0],
        "mode,seed,completed,final_return,steps_to_threshold"
    );
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("full,0,true,") && rows[4].starts_with("share,1,true,"));
    let med = fs::read_to_string(d.path().join("ab/medians.csv")).unwrap();
    assert_eq!(med.lines().count(), 3);
    assert!(d.path().join("ab/share_s1/summary.json").exists());
    let one = his(
        &[
            "ablate", "--config", &cfg, "--modes", "full", "--out", "ab2",
        ],
        d.path(),
    );
    assert_eq!(one.status.code(), Some(2));
}

#[test]
fn ablate_reports_no_bc_variance() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "mini.toml", MINI);
    let o = his(
        &[
            "ablate",
            "--config",
            &cfg,
            "--modes",
            "full,no_bc",
            "--seeds",
            "0,1",
            "--out",
            "ab",
        ],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("no_bc return variance"));
}

#[test]
fn sweep_covers_the_grid() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "mini.toml", MINI);
    let o = his(
        &[
            "sweep",
            "--config",
            &cfg,
            "--param",
            "lr_actor=1e-3,3e-4",
            "--param",
            "hidden_sizes=[4],[4,4]",
            "--seeds",
            "0",
            "--out",
            "sw",
        ],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(d.path().join("sw/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(
        rows[0],
        "lr_actor,hidden_sizes,seed,completed,final_return,steps_to_threshold"
    );
    assert_eq!(rows.len(), 5);
    assert!(rows[2].starts_with("1e-3,\"[4,4]\",0,true,"));
    let bad = his(
        &[
            "sweep",
            "--config",
            &cfg,
            "--param",
            "no_such_key=1,2",
            "--out",
            "sw2",
        ],
        d.path(),
    );
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn verify_failure_writes_a_replayable_fixture() {
    // seed 1 draws a convex game whose hybrid allocation leaves the core
    let d = tempfile::tempdir().unwrap();
    let o = his(
        &["verify", "theorems", "--seed", "1", "--out", "v"],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("FAIL hybrid_in_core"));
    let text = fs::read_to_string(d.path().join("v/verify_theorems_failure.json")).unwrap();
    let fixture: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(fixture["check"], "hybrid_in_core");
    let game = write(d.path(), "game.json", &fixture["game"].to_string());
    let o = his(&["game", "convex", &game], d.path());
    assert_eq!(stdout(&o).trim(), "true");
    let o = his(&["game", "hybrid", &game], d.path());
    assert!(stdout(&o).ends_with("core=false\n"), "{}", stdout(&o));
}
