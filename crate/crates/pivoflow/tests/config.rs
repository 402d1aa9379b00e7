use pivoflow::config::PRESETS;
use pivoflow::{Error, PipelineConfig};
use pivoflow_core::flow::FieldKind;
use pivoflow_core::integrate::StepMethod;

#[test]
fn empty_file_gives_defaults() {
    let cfg = PipelineConfig::parse("").unwrap();
    assert_eq!(cfg, PipelineConfig::default());
    assert_eq!(cfg.trajectory.particles, 4096);
    assert_eq!(cfg.trajectory.steps, 240);
    assert_eq!(cfg.trajectory.dt, 0.01);
    assert_eq!(cfg.trajectory.field, FieldKind::LambOseenVortex);
    assert_eq!(cfg.cnf.learning_rate, 0.002);
    assert_eq!(cfg.cnf.hidden, 64);
    assert_eq!(cfg.vsde.particles, 64);
    assert_eq!(cfg.vsde.steps, 120);
    assert_eq!(cfg.inference.integrator, StepMethod::Euler);
    // Comments and blank lines are ignored.
    assert_eq!(PipelineConfig::parse("# nothing\n\n   # here\n").unwrap(), cfg);
}

#[test]
fn an_override_changes_only_its_key() {
    let cfg = PipelineConfig::parse("vsde.integrator: rk4   # faster to converge\n").unwrap();
    let expected = PipelineConfig { vsde: pivoflow::config::VsdeSection { integrator: StepMethod::Rk4, ..PipelineConfig::default().vsde }, ..PipelineConfig::default() };
    assert_eq!(cfg, expected);
    let cfg = PipelineConfig::parse("\ntrajectory.D: 0.05\n").unwrap();
    assert_eq!(cfg.trajectory.diffusion, 0.05);
    assert_eq!(cfg.trajectory.steps, 240);
}

fn line_error(text: &str) -> (usize, String) {
    match PipelineConfig::parse(text) {
        Err(Error::ConfigLine { line, detail }) => (line, detail),
        other => panic!("expected a line error for {text:?}, got {other:?}"),
    }
}

#[test]
fn bad_lines_are_reported_with_their_number() {
    let (line, detail) = line_error("cnf.banana: 3");
    assert_eq!(line, 1);
    assert!(detail.contains("unknown key cnf.banana"), "{detail}");

    let (line, detail) = line_error("# header\ntrajectory.particles: many");
    assert_eq!(line, 2);
    assert!(detail.contains("trajectory.particles"), "{detail}");

    let (line, detail) = line_error("trajectory.seed: 1\n\ntrajectory.dt: -0.01");
    assert_eq!(line, 3);
    assert!(detail.contains("> 0"), "{detail}");

    assert_eq!(line_error("trajectory.validation_fraction: 1.5").0, 1);
    assert_eq!(line_error("vsde.integrator: leapfrog").0, 1);
    assert_eq!(line_error("trajectory.field: couette").0, 1);
    assert_eq!(line_error("trajectory.x0_box: 1,2,3").0, 1);
    assert_eq!(line_error("no colon here").0, 1);
    assert!(line_error("cnf.epochs: 2\ncnf.epochs: 3").1.contains("duplicate"));
}

#[test]
fn cross_key_constraints_are_checked() {
    let err = PipelineConfig::parse("cnf.context_dim: 2").unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    PipelineConfig::parse("cnf.context_dim: 2\ncnf.context_features: strength,start_y").unwrap();
}

#[test]
fn rendering_is_a_fixed_point() {
    let text = "trajectory.field: uniform_shear\ntrajectory.reflect_H: 2.5\ntrajectory.x0_box: -1,-0.5,1,0.5\n\
                cnf.context_features: strength,diffusion,start_x\ncnf.context_dim: 3\nvsde.guardrail.r_mode: fixed\n\
                vsde.guardrail.radius: 3\nvsde.learnable_diffusion: false\npaths.report_dir: elsewhere/r\n";
    let cfg = PipelineConfig::parse(text).unwrap();
    let rendered = cfg.to_text();
    let again = PipelineConfig::parse(&rendered).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.to_text(), rendered);
    assert_eq!(again.hash(), cfg.hash());
    assert_ne!(cfg.hash(), PipelineConfig::default().hash());
    // Every key appears exactly once.
    assert_eq!(rendered.lines().count(), PipelineConfig::KEYS.len());
}

#[test]
fn presets_parse_and_differ() {
    let mut hashes = Vec::new();
    for (name, _) in PRESETS {
        let cfg = PipelineConfig::preset(name).unwrap();
        cfg.validate().unwrap();
        cfg.sim_config().unwrap();
        hashes.push(cfg.hash());
    }
    hashes.dedup();
    assert_eq!(hashes.len(), PRESETS.len());
    let p = PipelineConfig::preset("poiseuille").unwrap();
    assert_eq!(p.flow_regime(), "poiseuille");
    assert_eq!((p.trajectory.particles, p.trajectory.steps, p.cnf.epochs), (1024, 240, 8));
    assert!(matches!(PipelineConfig::preset("nope"), Err(Error::Config(_))));
}

#[test]
fn load_reports_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(PipelineConfig::load(&dir.path().join("absent.cfg")), Err(Error::MissingFile(_))));
    let path = dir.path().join("ok.cfg");
    std::fs::write(&path, "inference.seed: 11\n").unwrap();
    assert_eq!(PipelineConfig::load(&path).unwrap().inference.seed, 11);
}
