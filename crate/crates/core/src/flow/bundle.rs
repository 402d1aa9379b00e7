use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::flow::FlowFieldSpec;
use crate::geom::Vec2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            _ => None,
        }
    }
}

/// Simulated trajectories on a shared uniform time grid.
///
/// Positions are stored flat in `[particle][step]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    pub field: FlowFieldSpec,
    pub diffusion: f64,
    pub dt: f64,
    pub reflect_h: Option<f64>,
    pub seed: u64,
    pub split: Split,
    n_steps: usize,
    time_grid: Vec<f64>,
    positions: Vec<Vec2>,
}

impl TrajectoryBundle {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        field: FlowFieldSpec,
        diffusion: f64,
        dt: f64,
        n_steps: usize,
        reflect_h: Option<f64>,
        seed: u64,
        split: Split,
        positions: Vec<Vec2>,
    ) -> Result<Self> {
        let stride = n_steps + 1;
        if positions.is_empty() || !positions.len().is_multiple_of(stride) {
            return Err(Error::ShapeMismatch(format!(
                "{} positions is not a positive multiple of {stride} states",
                positions.len()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(format!("dt must be > 0, got {dt}")));
        }
        let time_grid = (0..stride).map(|k| k as f64 * dt).collect();
        Ok(Self { field, diffusion, dt, reflect_h, seed, split, n_steps, time_grid, positions })
    }

    pub fn n_particles(&self) -> usize {
        self.positions.len() / (self.n_steps + 1)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn time_grid(&self) -> &[f64] {
        &self.time_grid
    }

    /// Total simulated time `n_steps · dt`.
    pub fn duration(&self) -> f64 {
        self.time_grid[self.n_steps]
    }

    pub fn positions(&self) -> &[Vec2] {
        &self.positions
    }

    pub fn trajectory(&self, i: usize) -> &[Vec2] {
        let stride = self.n_steps + 1;
        &self.positions[i * stride..(i + 1) * stride]
    }

    pub fn initial_position(&self, i: usize) -> Vec2 {
        self.trajectory(i)[0]
    }

    pub fn final_position(&self, i: usize) -> Vec2 {
        self.trajectory(i)[self.n_steps]
    }

    /// Largest state norm over every recorded position.
    pub fn max_state_norm(&self) -> f64 {
        self.positions.iter().map(|p| p.norm()).fold(0.0, f64::max)
    }

    /// Bundle restricted to the given particle indices.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let mut positions = Vec::with_capacity(indices.len() * (self.n_steps + 1));
        for &i in indices {
            if i >= self.n_particles() {
                return Err(Error::InvalidInput(format!("particle index {i} out of range")));
            }
            positions.extend_from_slice(self.trajectory(i));
        }
        Self::new(
            self.field,
            self.diffusion,
            self.dt,
            self.n_steps,
            self.reflect_h,
            self.seed,
            split,
            positions,
        )
    }

    /// Splits off the trailing `fraction` of particles as a validation bundle.
    pub fn split(&self, validation_fraction: f64) -> Result<(Self, Self)> {
        let n = self.n_particles();
        if !(0.0..1.0).contains(&validation_fraction) || n < 2 {
            return Err(Error::InvalidInput(format!(
                "cannot split {n} particles with validation fraction {validation_fraction}"
            )));
        }
        let n_val = ((n as f64 * validation_fraction) as usize).clamp(1, n - 1);
        let train: Vec<usize> = (0..n - n_val).collect();
        let val: Vec<usize> = (n - n_val..n).collect();
        Ok((self.subset(&train, Split::Train)?, self.subset(&val, Split::Validation)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(n: usize) -> TrajectoryBundle {
        let positions = (0..n * 3).map(|i| Vec2::new(i as f64, -(i as f64))).collect();
        TrajectoryBundle::new(
            FlowFieldSpec::Poiseuille { u_max: 1.0, half_height: 1.0 },
            0.1,
            0.5,
            2,
            Some(1.0),
            7,
            Split::Train,
            positions,
        )
        .unwrap()
    }

    #[test]
    fn shape_accessors() {
        let b = bundle(4);
        assert_eq!(b.n_particles(), 4);
        assert_eq!(b.time_grid(), &[0.0, 0.5, 1.0]);
        assert_eq!(b.final_position(1), Vec2::new(5.0, -5.0));
        assert_eq!(b.duration(), 1.0);
    }

    #[test]
    fn rejects_ragged_positions() {
        let r = TrajectoryBundle::new(
            FlowFieldSpec::Poiseuille { u_max: 1.0, half_height: 1.0 },
            0.1,
            0.5,
            2,
            None,
            0,
            Split::Train,
            alloc::vec![Vec2::ZERO; 7],
        );
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn split_is_a_partition() {
        let b = bundle(10);
        let (t, v) = b.split(0.2).unwrap();
        assert_eq!((t.n_particles(), v.n_particles()), (8, 2));
        assert_eq!(v.split, Split::Validation);
        assert_eq!(v.trajectory(0), b.trajectory(8));
    }
}
