use std::fs;
use std::path::Path;

use pivoflow::bundle_io::{self, read_bundle, write_bundle};
use pivoflow::checkpoint::{read_cnf, read_params, read_vsde, write_cnf, write_vsde, PARAMS_DATA};
use pivoflow::predictions::{read_predictions, write_predictions, MethodFinals, Predictions};
use pivoflow::Error;
use pivoflow_core::cnf::{CnfArch, CnfModel, ContextFeature, FlowSolver};
use pivoflow_core::flow::{generate_bundle, FlowFieldSpec, SimConfig};
use pivoflow_core::integrate::StepMethod;
use pivoflow_core::nn::Mat;
use pivoflow_core::rng::{self, domain};
use pivoflow_core::vsde::{GuardrailConfig, VsdeArch, VsdeModel};
use pivoflow_core::Vec2;

fn small_bundle() -> pivoflow_core::flow::TrajectoryBundle {
    let mut cfg = SimConfig::new(FlowFieldSpec::Poiseuille { u_max: 1.0, half_height: 1.0 }, 0.01, 0.01, 9, 10);
    cfg.reflect_h = Some(1.0);
    cfg.seed = 3;
    generate_bundle(&cfg).unwrap()
}

fn small_cnf() -> CnfModel {
    let arch = CnfArch { hidden: 6, depth: 2, n_freqs: 2, features: vec![ContextFeature::Strength, ContextFeature::StartY] };
    let mut m = CnfModel::new(arch, &mut rng::substream(1, domain::INIT, 0)).unwrap();
    m.set_context_stats(vec![1.0, 0.1], vec![0.5, 0.3]).unwrap();
    m
}

fn rewrite(path: &Path, from: &str, to: &str) {
    let text = fs::read_to_string(path).unwrap();
    assert!(text.contains(from), "{from:?} not in {}", path.display());
    fs::write(path, text.replacen(from, to, 1)).unwrap();
}

#[test]
fn bundle_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let b = small_bundle();
    write_bundle(dir.path(), &b).unwrap();
    let back = read_bundle(dir.path()).unwrap();
    assert_eq!(back.positions(), b.positions());
    assert_eq!(back.n_particles(), 10);
    assert_eq!(back.n_steps(), 9);
    assert_eq!(back.field, b.field);
    assert_eq!(back.reflect_h, Some(1.0));
    assert_eq!((back.dt, back.diffusion, back.seed, back.split), (b.dt, b.diffusion, b.seed, b.split));
    let bytes = fs::read(dir.path().join(bundle_io::DATA)).unwrap();
    assert_eq!(bytes.len(), 10 * 10 * 2 * 8);
}

#[test]
fn bundle_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let b = small_bundle();
    let root = dir.path().join("b");

    assert!(matches!(read_bundle(&root), Err(Error::MissingFile(_))));

    write_bundle(&root, &b).unwrap();
    rewrite(&root.join(bundle_io::MANIFEST), "format_version: 1", "format_version: 7");
    assert!(matches!(read_bundle(&root), Err(Error::VersionMismatch { .. })));

    write_bundle(&root, &b).unwrap();
    let data = root.join(bundle_io::DATA);
    let mut bytes = fs::read(&data).unwrap();
    bytes[17] ^= 1;
    fs::write(&data, &bytes).unwrap();
    assert!(matches!(read_bundle(&root), Err(Error::ChecksumMismatch { .. })));

    // Manifest promises 10 steps but the data holds 9, with a matching checksum.
    write_bundle(&root, &b).unwrap();
    rewrite(&root.join(bundle_io::MANIFEST), "n_steps: 9", "n_steps: 10");
    let err = read_bundle(&root).unwrap_err();
    assert!(matches!(err, Error::ShapeInconsistency { .. }), "{err}");
    let msg = err.to_string();
    assert!(msg.contains("manifest declares") && msg.contains("data holds"), "{msg}");

    fs::remove_file(&data).unwrap();
    assert!(matches!(read_bundle(&root), Err(Error::MissingFile(_))));
}

#[test]
fn cnf_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_cnf();
    write_cnf(dir.path(), &m, 42).unwrap();
    let back = read_cnf(dir.path()).unwrap();
    assert_eq!(back.checksum(), m.checksum());
    assert_eq!(back.arch(), m.arch());
    assert_eq!(back.context_stats(), m.context_stats());
    assert_eq!(read_params(dir.path()).unwrap().1, 42);

    let z = Mat::from_vec(3, 2, vec![0.1, -0.2, 0.5, 0.3, -1.0, 0.7]);
    let ctx = Mat::from_vec(3, 2, vec![0.2, 0.1, -0.4, 0.9, 1.0, -1.0]);
    let solver = FlowSolver { method: StepMethod::Rk4, n_steps: 5 };
    assert_eq!(back.log_prob(&z, &ctx, solver).unwrap(), m.log_prob(&z, &ctx, solver).unwrap());

    let mut bytes = fs::read(dir.path().join(PARAMS_DATA)).unwrap();
    bytes[3] ^= 0x10;
    fs::write(dir.path().join(PARAMS_DATA), &bytes).unwrap();
    assert!(matches!(read_cnf(dir.path()), Err(Error::ChecksumMismatch { .. })));
}

#[test]
fn vsde_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cnf = small_cnf();
    let arch = VsdeArch { encoder_hidden: 4, ctx_dim: 3, hidden: 5, depth: 2, n_freqs: 2 };
    let g = GuardrailConfig { radius: 2.5, alpha: 1.5, u_max: 7.0 };
    let m = VsdeModel::new(arch, g, -3.25, &cnf, &mut rng::substream(2, domain::INIT, 1)).unwrap();
    write_vsde(dir.path(), &m, 9).unwrap();
    let back = read_vsde(dir.path()).unwrap();
    assert_eq!(back.store().checksum(), m.store().checksum());
    assert_eq!(back.arch(), m.arch());
    assert_eq!(back.guardrail, g);
    assert_eq!(back.log_g0(), -3.25);
    assert_eq!(back.cnf_checksum(), cnf.checksum());
    back.check_backbone(&cnf).unwrap();

    // A CNF directory is not a VSDE checkpoint.
    let other = tempfile::tempdir().unwrap();
    write_cnf(other.path(), &cnf, 0).unwrap();
    assert!(matches!(read_vsde(other.path()), Err(Error::Manifest { .. })));
}

#[test]
fn predictions_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pts = |k: usize, n: usize| (0..n).map(|i| Vec2::new(k as f64 + 0.1 * i as f64, -(i as f64))).collect::<Vec<_>>();
    let p = Predictions {
        method: StepMethod::Heun,
        n_particles: 3,
        n_steps: 4,
        duration: 2.4,
        trajectory_ids: vec![0, 1],
        vsde_finals: vec![pts(0, 3), pts(1, 2)],
        cnf_finals: vec![pts(2, 3), pts(3, 3)],
        vsde_mean_paths: vec![pts(4, 5), pts(5, 5)],
        cnf_mean_paths: vec![pts(6, 5), pts(7, 5)],
        diverged_particles: 1,
        comparisons: vec![MethodFinals { method: StepMethod::Dopri5, vsde: vec![pts(8, 1)], cnf: vec![pts(9, 3)] }],
    };
    write_predictions(dir.path(), &p).unwrap();
    assert_eq!(read_predictions(dir.path()).unwrap(), p);
    assert!((p.step_dt() - 0.6).abs() < 1e-15);
}
