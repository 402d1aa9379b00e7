use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use pivoflow::pipeline::{run_stages, stages_for, Layout};
use pivoflow::report::{read_csv, verify_report};
use pivoflow::{run_pipeline, Error, PipelineConfig, Stage};

const TINY: &str = "\
trajectory.particles: 40
trajectory.steps: 40
trajectory.dt: 0.05
trajectory.field: poiseuille
trajectory.reflect_H: 1
trajectory.x0_box: -0.5,-0.8,0.5,0.8
trajectory.seed: 3
cnf.batch_size: 16
cnf.epochs: 1
cnf.hidden: 8
cnf.depth: 1
cnf.limit: 32
vsde.batch_size: 8
vsde.epochs: 1
vsde.particles: 2
vsde.steps: 10
vsde.hidden: 8
vsde.depth: 1
vsde.encoder_hidden: 4
vsde.ctx_dim: 4
inference.particles: 4
inference.steps: 10
inference.compare_integrators: true
inference.compare_trajectories: 3
eval.regional_nx: 2
eval.regional_ny: 2
eval.overlay_trajectories: 2
";

fn tiny() -> PipelineConfig {
    PipelineConfig::parse(TINY).unwrap()
}

/// Every file under `root` keyed by its relative path.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn log_value(log: &str, key: &str) -> Option<String> {
    log.lines().find_map(|l| l.strip_prefix(&format!("{key}: ")).map(str::to_string))
}

#[test]
fn reduced_config_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::parse("trajectory.particles: 256\ncnf.epochs: 2\nvsde.epochs: 2\n").unwrap();
    let start = Instant::now();
    let logs = run_pipeline("all", &cfg, dir.path()).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 300.0, "smoke run took {elapsed:.0} s");
    assert_eq!(logs.iter().map(|l| l.stage).collect::<Vec<_>>(), Stage::ALL);

    let layout = Layout::new(&cfg, dir.path());
    let report = verify_report(&layout.report).unwrap();
    assert!(report.files.iter().any(|(n, _)| n == "summary.csv"));
    let (_, rows) = read_csv(&fs::read(layout.report.join("summary.csv")).unwrap()).unwrap();
    assert_eq!(rows[0][0], "lamb_oseen");
    for cell in &rows[0][1..3] {
        let mae: f64 = cell.parse().unwrap();
        assert!(mae.is_finite() && mae > 0.0);
    }
    for stage in Stage::ALL {
        let text = fs::read_to_string(layout.log(stage)).unwrap();
        assert_eq!(log_value(&text, "stage").as_deref(), Some(stage.name()));
        assert_eq!(log_value(&text, "config_sha256"), Some(cfg.hash()));
        assert!(log_value(&text, "wall_time_s").is_some());
    }
    let vsde_log = fs::read_to_string(layout.log(Stage::TrainVsde)).unwrap();
    assert!(log_value(&vsde_log, "final_loss").unwrap().parse::<f64>().unwrap().is_finite());
}

#[test]
fn missing_prerequisites_have_their_own_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    for stage in [Stage::TrainCnf, Stage::TrainVsde, Stage::Infer, Stage::Eval] {
        let err = run_stages(&[stage], &cfg, dir.path(), |_| {}).unwrap_err();
        assert!(matches!(err, Error::MissingPrerequisite { .. }), "{}: {err}", stage.name());
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().starts_with(stage.name()));
    }
    // A bundle alone is not enough for the controller.
    run_stages(&[Stage::Simulate], &cfg, dir.path(), |_| {}).unwrap();
    let err = run_stages(&[Stage::TrainVsde], &cfg, dir.path(), |_| {}).unwrap_err();
    assert!(err.to_string().contains("CNF checkpoint"), "{err}");
}

#[test]
fn identical_runs_give_identical_artifacts() {
    let cfg = tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline("all", &cfg, a.path()).unwrap();
    run_pipeline("all", &cfg, b.path()).unwrap();
    let layout = Layout::new(&cfg, a.path());
    let logs = layout.logs.strip_prefix(a.path()).unwrap().to_path_buf();
    let strip = |m: BTreeMap<PathBuf, Vec<u8>>| m.into_iter().filter(|(p, _)| !p.starts_with(&logs)).collect::<BTreeMap<_, _>>();
    let (sa, sb) = (strip(snapshot(a.path())), strip(snapshot(b.path())));
    assert!(sa.keys().any(|p| p.extension().is_some_and(|e| e == "csv")));
    assert!(sa.keys().any(|p| p.ends_with("params.f64le")));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (p, bytes) in &sa {
        assert!(bytes == &sb[p], "{} differs between runs", p.display());
    }

    // A different seed changes the data.
    let c = tempfile::tempdir().unwrap();
    let reseeded = PipelineConfig { trajectory: pivoflow::config::TrajectorySection { seed: 4, ..cfg.trajectory.clone() }, ..cfg.clone() };
    run_pipeline("simulate", &reseeded, c.path()).unwrap();
    let train = Path::new(&cfg.paths.data_dir).join("train").join("positions.f64le");
    assert_ne!(fs::read(c.path().join(&train)).unwrap(), sa[&train]);
}

#[test]
fn rerunning_a_stage_leaves_upstream_artifacts_alone() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    run_pipeline("all", &cfg, dir.path()).unwrap();
    let layout = Layout::new(&cfg, dir.path());
    let before = snapshot(dir.path());

    fs::remove_dir_all(&layout.report).unwrap();
    run_pipeline("eval", &cfg, dir.path()).unwrap();
    fs::remove_dir_all(&layout.predictions).unwrap();
    let err = run_pipeline("eval", &cfg, dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    run_pipeline("infer", &cfg, dir.path()).unwrap();
    run_pipeline("eval", &cfg, dir.path()).unwrap();

    let logs = layout.logs.strip_prefix(dir.path()).unwrap().to_path_buf();
    let after = snapshot(dir.path());
    for (p, bytes) in before.iter().filter(|(p, _)| !p.starts_with(&logs)) {
        assert!(after.get(p) == Some(bytes), "{} changed", p.display());
    }
    // No staging leftovers.
    assert_eq!(before.len(), after.len());
}

#[test]
fn command_names() {
    assert_eq!(stages_for("all").unwrap(), Stage::ALL);
    assert_eq!(stages_for("train-vsde").unwrap(), [Stage::TrainVsde]);
    assert!(stages_for("train").is_none());
    assert_eq!(run_pipeline("train", &tiny(), Path::new(".")).unwrap_err().exit_code(), 2);
}

fn cli(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_pivoflow")).args(args).current_dir(cwd).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    fs::write(d.join("bad.cfg"), "trajectory.particles: 10\ncnf.banana: 3\n").unwrap();

    let (code, err) = cli(&["simulate", "--config", "bad.cfg"], d);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("line 2"), "{err}");
    assert_eq!(cli(&["simulate", "--config", "preset:nope"], d).0, 2);
    assert_eq!(cli(&["simulate", "--config", "absent.cfg"], d).0, 2);

    let (code, err) = cli(&["train-vsde", "--config", "tiny.cfg", "--out", "run"], d);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("train-vsde"), "{err}");

    let (code, err) = cli(&["simulate", "--config", "tiny.cfg", "--out", "run", "--seed", "9"], d);
    assert_eq!(code, 0, "{err}");
    let manifest = fs::read_to_string(d.join("run").join(&tiny().paths.data_dir).join("train/manifest.txt")).unwrap();
    assert!(manifest.lines().any(|l| l == "seed: 9"), "{manifest}");
}
