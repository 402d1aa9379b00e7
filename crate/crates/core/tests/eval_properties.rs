use pivoflow_core::eval::{
    final_position_mae, mae, regional_mae, velocity_stats, GridSpec, Histogram, Histogram2d,
};
use pivoflow_core::flow::{generate_bundle, FlowFieldSpec, SimConfig};
use pivoflow_core::Vec2;
use proptest::prelude::*;

fn point() -> impl Strategy<Value = Vec2> {
    (-10.0..10.0f64, -10.0..10.0f64).prop_map(|(x, y)| Vec2::new(x, y))
}

fn paths(n: usize) -> impl Strategy<Value = (Vec<Vec2>, Vec<Vec2>, Vec<Vec2>)> {
    (prop::collection::vec(point(), n), prop::collection::vec(point(), n), prop::collection::vec(point(), n))
}

proptest! {
    #[test]
    fn mae_is_a_pseudometric((a, b, c) in (1usize..20).prop_flat_map(paths)) {
        prop_assert_eq!(mae(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
        prop_assert!(mae(&a, &c).unwrap() <= mae(&a, &b).unwrap() + mae(&b, &c).unwrap() + 1e-12);
    }

    #[test]
    fn histograms_conserve_mass(samples in prop::collection::vec(-50.0..50.0f64, 1..300), bins in 1usize..40) {
        let h = Histogram::from_samples(&samples, bins).unwrap();
        prop_assert_eq!(h.total(), samples.len() as u64);
        prop_assert_eq!(h.edges.len(), bins + 1);
        let pts: Vec<Vec2> = samples.windows(2).map(|w| Vec2::new(w[0], w[1])).collect();
        if !pts.is_empty() {
            let h2 = Histogram2d::from_samples(&pts, bins, bins + 1).unwrap();
            prop_assert_eq!(h2.total(), pts.len() as u64);
        }
    }

    #[test]
    fn regional_errors_decompose_the_global_mae((pred, truth, _) in (2usize..60).prop_flat_map(paths), nx in 1usize..10, ny in 1usize..10) {
        prop_assume!(GridSpec::covering(&truth, nx, ny).is_ok());
        let grid = GridSpec::covering(&truth, nx, ny).unwrap();
        let r = regional_mae(&pred, &truth, grid).unwrap();
        prop_assert_eq!(r.counts.iter().sum::<usize>(), truth.len());
        for (c, &k) in r.cells.iter().zip(&r.counts) {
            prop_assert_eq!(c.is_some(), k > 0);
        }
        let global = mae(&pred, &truth).unwrap();
        prop_assert!((r.weighted_mean().unwrap() - global).abs() < 1e-12);
    }
}

#[test]
fn final_position_matches_flat_loop() {
    let mut state = 0x2545_f491_4f6c_dd1du64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
    };
    let n_traj = 25;
    let finals: Vec<Vec<Vec2>> = (0..n_traj).map(|i| (0..1 + i % 7).map(|_| Vec2::new(next(), next())).collect()).collect();
    let truth: Vec<Vec2> = (0..n_traj).map(|_| Vec2::new(next(), next())).collect();
    let r = final_position_mae(&finals, &truth).unwrap();
    let mut total = 0.0;
    for i in 0..n_traj {
        let (mut mx, mut my) = (0.0, 0.0);
        for p in &finals[i] {
            mx += p.x;
            my += p.y;
        }
        mx /= finals[i].len() as f64;
        my /= finals[i].len() as f64;
        let e = ((mx - truth[i].x).abs() + (my - truth[i].y).abs()) / 2.0;
        assert!((r.per_trajectory[i] - e).abs() < 1e-14);
        total += e;
    }
    assert!((r.mean - total / n_traj as f64).abs() < 1e-14);
}

#[test]
fn pure_diffusion_speeds_are_rayleigh() {
    let (d, dt) = (0.1, 0.01);
    let field = FlowFieldSpec::UniformShear { shear_rate: 0.0, base_velocity: 0.0 };
    let mut cfg = SimConfig::new(field, d, dt, 50, 400);
    cfg.seed = 17;
    let bundle = generate_bundle(&cfg).unwrap();
    let paths: Vec<Vec<Vec2>> = (0..bundle.n_particles()).map(|i| bundle.trajectory(i).to_vec()).collect();
    let s = velocity_stats(&paths, dt).unwrap();
    assert_eq!(s.n_samples, 400 * 50);
    assert_eq!(s.speed.total(), s.n_samples as u64);
    let scale = (2.0 * d / dt).sqrt();
    let expect = scale * (std::f64::consts::PI / 2.0).sqrt();
    assert!((s.mean_speed / expect - 1.0).abs() < 0.05, "{} vs {expect}", s.mean_speed);
}
