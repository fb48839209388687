use std::path::Path;
use std::process::{Command, Output};

fn dropphase(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dropphase"))
        .args(args)
        .current_dir(dir)
        .env_remove("DROPPHASE_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const CONFIG: &str = r#"{
    "feature": "bounded-smooth",
    "dataset": {"source": "teacher", "input_dim": 3, "teacher_width": 2, "samples": 6, "seed": 1},
    "schedule": {"tau0": 0.5, "q0": 0.5, "a": 0.0, "b": 0.0},
    "widths": [4, 8],
    "variant": {"kind": "dropout"},
    "horizon": {"steps": 5},
    "seed": 3,
    "stride": 1
}"#;

fn with_config(text: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), text).unwrap();
    dir
}

#[test]
fn classify_prints_phase() {
    let dir = tempfile::tempdir().unwrap();
    let o = dropphase(&["classify", "--tau0", "0.5", "--q0", "0.5", "--a", "0", "--b", "0"], dir.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "Phase I, alpha=1");
    let o = dropphase(&["classify", "--tau0", "1", "--q0", "1", "--a", "0.5", "--b", "0.5"], dir.path());
    assert_eq!(stdout(&o).trim(), "Phase III, alpha=1");
}

#[test]
fn invalid_schedule_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = dropphase(&["classify", "--tau0", "-1", "--q0", "0.5", "--a", "0", "--b", "0"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_flag_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dropphase(&["classify", "--bogus"], dir.path()).status.code(), Some(2));
}

#[test]
fn missing_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = dropphase(&["simulate", "--config", "absent.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_writes_trajectories_per_width() {
    let dir = with_config(CONFIG);
    let o = dropphase(&["simulate", "--config", "cfg.json", "--out", "run"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for n in [4, 8] {
        let csv = std::fs::read_to_string(dir.path().join(format!("run/simulate-n{n}.csv"))).unwrap();
        // Header plus the initial snapshot and five steps.
        assert_eq!(csv.lines().count(), 7);
        assert!(dir.path().join(format!("run/simulate-n{n}.json")).exists());
    }
}

#[test]
fn output_dir_from_environment() {
    let dir = with_config(CONFIG);
    let o = Command::new(env!("CARGO_BIN_EXE_dropphase"))
        .args(["couple", "dropout-ram", "--config", "cfg.json"])
        .current_dir(dir.path())
        .env("DROPPHASE_OUT", "envout")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("envout/dropout-ram.csv").exists());
}

#[test]
fn seed_flag_changes_results_reproducibly() {
    let dir = with_config(CONFIG);
    let run = |seed: &str| {
        let o = dropphase(&["couple", "teacher-student", "--config", "cfg.json", "--seed", seed], dir.path());
        assert!(o.status.success());
        stdout(&o)
    };
    assert_eq!(run("5"), run("5"));
    assert_ne!(run("5"), run("6"));
}

#[test]
fn divergent_run_exits_three() {
    let blowup = CONFIG
        .replace("bounded-smooth", "relu-standard")
        .replace("\"tau0\": 0.5", "\"tau0\": 1e100")
        .replace("\"steps\": 5", "\"steps\": 50");
    let dir = with_config(&blowup);
    let o = dropphase(&["simulate", "--config", "cfg.json", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn geom_exp_reports_each_width() {
    let dir = tempfile::tempdir().unwrap();
    let o = dropphase(&["couple", "geom-exp", "--widths", "100,400", "--count", "1000"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("n=100") && text.contains("n=400"));
}

#[test]
fn distance_of_identical_files_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.csv"), "x0,x1\n0,1\n2,3\n").unwrap();
    std::fs::write(dir.path().join("b.csv"), "x0,x1\n2,3\n0,1\n").unwrap();
    let o = dropphase(&["distance", "a.csv", "b.csv"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("0.000000000000e0 exact"));
}

#[test]
fn sweep_then_report() {
    let grid = r#"{
        "feature": "bounded-smooth",
        "dataset": {"source": "teacher", "input_dim": 3, "teacher_width": 2, "samples": 6, "seed": 1},
        "schedules": [{"tau0": 0.5, "q0": 0.5, "a": 0.0, "b": 0.0}],
        "widths": [4, 8],
        "seeds": [0, 1],
        "horizon": 4.0
    }"#;
    let dir = with_config(grid);
    let o = dropphase(&["--threads", "1", "sweep", "--config", "cfg.json", "--out", "sw"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("ran 4 skipped 0 failed 0"));
    let o = dropphase(&["sweep", "--config", "cfg.json", "--out", "sw"], dir.path());
    assert!(stdout(&o).contains("ran 0 skipped 4"));
    let o = dropphase(&["report", "sw/sweep.csv", "--out", "plots"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("plot_"));
}
