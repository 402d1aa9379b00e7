use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::flow::{Bounds, FlowFieldSpec, Split, TrajectoryBundle};
use crate::geom::Vec2;
use crate::rng::{self, domain, Stream};
#[allow(unused_imports)] // test builds link std, whose inherent methods take precedence
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialCondition {
    Fixed(Vec2),
    UniformBox(Bounds),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub field: FlowFieldSpec,
    pub diffusion: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub n_particles: usize,
    pub x0: InitialCondition,
    /// Reflecting walls at `y = ±H` when set.
    pub reflect_h: Option<f64>,
    pub seed: u64,
}

impl SimConfig {
    /// Config with uniform initial conditions over the field's natural domain.
    pub fn new(field: FlowFieldSpec, diffusion: f64, dt: f64, n_steps: usize, n_particles: usize) -> Self {
        Self {
            field,
            diffusion,
            dt,
            n_steps,
            n_particles,
            x0: InitialCondition::UniformBox(field.natural_domain()),
            reflect_h: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        if !(self.diffusion >= 0.0 && self.diffusion.is_finite()) {
            return Err(Error::InvalidInput(format!("diffusion must be >= 0, got {}", self.diffusion)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidInput(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.n_particles == 0 {
            return Err(Error::InvalidInput("n_particles must be >= 1".into()));
        }
        if let Some(h) = self.reflect_h {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidInput(format!("reflect_h must be > 0, got {h}")));
            }
        }
        if let InitialCondition::UniformBox(b) = self.x0 {
            if b.is_degenerate() {
                return Err(Error::InvalidInput("degenerate initial-condition box".into()));
            }
        }
        Ok(())
    }
}

/// One Euler–Maruyama update `x + u Δt + sqrt(2 D Δt) ξ`.
pub fn em_step(x: Vec2, u: Vec2, diffusion: f64, dt: f64, xi: Vec2) -> Vec2 {
    let amp = (2.0 * diffusion * dt).sqrt();
    Vec2::new(x.x + u.x * dt + amp * xi.x, x.y + u.y * dt + amp * xi.y)
}

/// Mirror-folds the wall-normal coordinate into `[-H, H]`.
pub fn reflect(x: Vec2, h: f64) -> Vec2 {
    let mut y = x.y;
    if !y.is_finite() || (-h..=h).contains(&y) {
        return x;
    }
    if y.abs() > 4.0 * h {
        // the fold map is 4H-periodic; reduce before folding
        let period = 4.0 * h;
        let mut r = (y + h) % period;
        if r < 0.0 {
            r += period;
        }
        y = r - h;
    }
    while y > h || y < -h {
        y = if y > h { 2.0 * h - y } else { -2.0 * h - y };
    }
    Vec2::new(x.x, y)
}

/// Marches one particle for `cfg.n_steps` steps, returning `n_steps + 1` states.
pub fn simulate_trajectory(cfg: &SimConfig, x0: Vec2, stream: &mut Stream) -> Result<Vec<Vec2>> {
    let mut path = Vec::with_capacity(cfg.n_steps + 1);
    path.push(x0);
    let mut x = x0;
    for step in 1..=cfg.n_steps {
        let xi = Vec2::from(rng::normal2(stream));
        let u = cfg.field.velocity_unchecked(x);
        x = em_step(x, u, cfg.diffusion, cfg.dt, xi);
        if let Some(h) = cfg.reflect_h {
            x = reflect(x, h);
        }
        if !x.is_finite() {
            return Err(Error::SimulationDiverged { particle: 0, step });
        }
        path.push(x);
    }
    Ok(path)
}

fn initial_condition(cfg: &SimConfig, particle: usize) -> Vec2 {
    match cfg.x0 {
        InitialCondition::Fixed(p) => p,
        InitialCondition::UniformBox(b) => {
            let mut s = rng::substream(cfg.seed, domain::SIM_X0, particle as u64);
            let x = rng::uniform(&mut s, b.min.x, b.max.x);
            let y = rng::uniform(&mut s, b.min.y, b.max.y);
            Vec2::new(x, y)
        }
    }
}

/// Simulates every particle on its own `(seed, particle)` substream.
pub fn generate_bundle(cfg: &SimConfig) -> Result<TrajectoryBundle> {
    cfg.validate()?;
    let stride = cfg.n_steps + 1;
    let mut positions = Vec::with_capacity(cfg.n_particles * stride);
    for p in 0..cfg.n_particles {
        let x0 = initial_condition(cfg, p);
        let mut stream = rng::substream(cfg.seed, domain::SIM_NOISE, p as u64);
        let path = simulate_trajectory(cfg, x0, &mut stream).map_err(|e| match e {
            Error::SimulationDiverged { step, .. } => Error::SimulationDiverged { particle: p, step },
            other => other,
        })?;
        positions.extend(path);
    }
    TrajectoryBundle::new(
        cfg.field,
        cfg.diffusion,
        cfg.dt,
        cfg.n_steps,
        cfg.reflect_h,
        cfg.seed,
        Split::Train,
        positions,
    )
}
