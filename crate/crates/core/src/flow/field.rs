use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geom::Vec2;
#[allow(unused_imports)] // test builds link std, whose inherent methods take precedence
use num_traits::Float;

/// Axis-aligned rectangle `[min.x, max.x] × [min.y, max.y]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Vec2,
    pub max: Vec2,
}

impl Bounds {
    pub fn new(min: Vec2, max: Vec2) -> Self {
        Self { min, max }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.max.x > self.min.x && self.max.y > self.min.y)
            || !(self.min.is_finite() && self.max.is_finite())
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Poiseuille,
    LambOseenVortex,
    UniformShear,
}

impl FieldKind {
    pub fn name(self) -> &'static str {
        match self {
            FieldKind::Poiseuille => "poiseuille",
            FieldKind::LambOseenVortex => "lamb_oseen",
            FieldKind::UniformShear => "uniform_shear",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "poiseuille" => Some(FieldKind::Poiseuille),
            "lamb_oseen" | "vortex" => Some(FieldKind::LambOseenVortex),
            "uniform_shear" | "shear" => Some(FieldKind::UniformShear),
            _ => None,
        }
    }

    /// Parameter names in canonical order.
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            FieldKind::Poiseuille => &["u_max", "half_height"],
            FieldKind::LambOseenVortex => &["circulation", "core_radius", "center_x", "center_y"],
            FieldKind::UniformShear => &["shear_rate", "base_velocity"],
        }
    }
}

/// Analytical planar velocity field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowFieldSpec {
    /// Channel flow `(U_max (1 - (y/H)^2), 0)`.
    Poiseuille { u_max: f64, half_height: f64 },
    /// Lamb–Oseen vortex with tangential speed `Γ/(2πr) (1 - exp(-r²/r_c²))`.
    LambOseenVortex { circulation: f64, core_radius: f64, center: Vec2 },
    /// Linear shear `(U_0 + γ y, 0)`.
    UniformShear { shear_rate: f64, base_velocity: f64 },
}

impl FlowFieldSpec {
    pub fn kind(&self) -> FieldKind {
        match self {
            FlowFieldSpec::Poiseuille { .. } => FieldKind::Poiseuille,
            FlowFieldSpec::LambOseenVortex { .. } => FieldKind::LambOseenVortex,
            FlowFieldSpec::UniformShear { .. } => FieldKind::UniformShear,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            FlowFieldSpec::Poiseuille { u_max, half_height } => vec![u_max, half_height],
            FlowFieldSpec::LambOseenVortex { circulation, core_radius, center } => {
                vec![circulation, core_radius, center.x, center.y]
            }
            FlowFieldSpec::UniformShear { shear_rate, base_velocity } => {
                vec![shear_rate, base_velocity]
            }
        }
    }

    /// Rebuilds a spec from parameters in [`FieldKind::param_names`] order.
    pub fn from_params(kind: FieldKind, p: &[f64]) -> Result<Self> {
        let expected = kind.param_names().len();
        if p.len() != expected {
            return Err(Error::InvalidInput(format!(
                "{} expects {expected} parameters, got {}",
                kind.name(),
                p.len()
            )));
        }
        let spec = match kind {
            FieldKind::Poiseuille => FlowFieldSpec::Poiseuille { u_max: p[0], half_height: p[1] },
            FieldKind::LambOseenVortex => FlowFieldSpec::LambOseenVortex {
                circulation: p[0],
                core_radius: p[1],
                center: Vec2::new(p[2], p[3]),
            },
            FieldKind::UniformShear => {
                FlowFieldSpec::UniformShear { shear_rate: p[0], base_velocity: p[1] }
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite {} parameter", self.kind().name())));
        }
        match *self {
            FlowFieldSpec::Poiseuille { half_height, .. } if half_height <= 0.0 => {
                Err(Error::InvalidInput("poiseuille half_height must be positive".into()))
            }
            FlowFieldSpec::LambOseenVortex { core_radius, .. } if core_radius <= 0.0 => {
                Err(Error::InvalidInput("lamb_oseen core_radius must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Region used for uniform initial-condition sampling.
    pub fn natural_domain(&self) -> Bounds {
        match *self {
            FlowFieldSpec::Poiseuille { half_height: h, .. } => {
                Bounds::new(Vec2::new(-h, -h), Vec2::new(h, h))
            }
            FlowFieldSpec::LambOseenVortex { core_radius: rc, center, .. } => Bounds::new(
                Vec2::new(center.x - 2.0 * rc, center.y - 2.0 * rc),
                Vec2::new(center.x + 2.0 * rc, center.y + 2.0 * rc),
            ),
            FlowFieldSpec::UniformShear { .. } => {
                Bounds::new(Vec2::new(-1.0, -1.0), Vec2::new(1.0, 1.0))
            }
        }
    }

    /// The (velocity scale, length scale) pair used as conditioning features.
    pub fn scale_features(&self) -> [f64; 2] {
        match *self {
            FlowFieldSpec::Poiseuille { u_max, half_height } => [u_max, half_height],
            FlowFieldSpec::LambOseenVortex { circulation, core_radius, .. } => {
                [circulation, core_radius]
            }
            FlowFieldSpec::UniformShear { shear_rate, base_velocity } => {
                [shear_rate, base_velocity]
            }
        }
    }

    /// Velocity at `x`. Non-finite positions are rejected.
    pub fn velocity_at(&self, x: Vec2) -> Result<Vec2> {
        if !x.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite position ({}, {})", x.x, x.y)));
        }
        Ok(self.velocity_unchecked(x))
    }

    pub(crate) fn velocity_unchecked(&self, x: Vec2) -> Vec2 {
        match *self {
            FlowFieldSpec::Poiseuille { u_max, half_height } => {
                let r = x.y / half_height;
                Vec2::new(u_max * (1.0 - r * r), 0.0)
            }
            FlowFieldSpec::LambOseenVortex { circulation, core_radius, center } => {
                let d = x - center;
                let (s, _) = vortex_profile(circulation, core_radius, d.norm_sq());
                Vec2::new(-s * d.y, s * d.x)
            }
            FlowFieldSpec::UniformShear { shear_rate, base_velocity } => {
                Vec2::new(base_velocity + shear_rate * x.y, 0.0)
            }
        }
    }

    /// Velocity gradient `[[∂u/∂x, ∂u/∂y], [∂v/∂x, ∂v/∂y]]` at `x`.
    pub fn velocity_jacobian(&self, x: Vec2) -> [[f64; 2]; 2] {
        match *self {
            FlowFieldSpec::Poiseuille { u_max, half_height } => {
                [[0.0, -2.0 * u_max * x.y / (half_height * half_height)], [0.0, 0.0]]
            }
            FlowFieldSpec::LambOseenVortex { circulation, core_radius, center } => {
                let d = x - center;
                let (s, ds) = vortex_profile(circulation, core_radius, d.norm_sq());
                [
                    [-2.0 * ds * d.x * d.y, -s - 2.0 * ds * d.y * d.y],
                    [s + 2.0 * ds * d.x * d.x, 2.0 * ds * d.x * d.y],
                ]
            }
            FlowFieldSpec::UniformShear { shear_rate, .. } => [[0.0, shear_rate], [0.0, 0.0]],
        }
    }
}

/// Returns `(s, ds/dq)` for the vortex velocity `u = s(q) (-dy, dx)`, `q = r²`.
fn vortex_profile(circulation: f64, core_radius: f64, q: f64) -> (f64, f64) {
    let rc2 = core_radius * core_radius;
    let a = q / rc2;
    let k = circulation / (2.0 * PI);
    if a < 1e-4 {
        // series about the core centre, where both closed forms cancel
        let s = k / rc2 * (1.0 - a / 2.0 + a * a / 6.0);
        let ds = k / (rc2 * rc2) * (-0.5 + a / 3.0 - a * a / 8.0);
        (s, ds)
    } else {
        let one_minus = -libm::expm1(-a);
        let s = k * one_minus / q;
        let ds = k * (a * (-a).exp() - one_minus) / (q * q);
        (s, ds)
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;

    const VORTEX: FlowFieldSpec = FlowFieldSpec::LambOseenVortex {
        circulation: 2.0 * PI,
        core_radius: 1.0,
        center: Vec2::ZERO,
    };

    #[test]
    fn poiseuille_centerline_and_wall() {
        let f = FlowFieldSpec::Poiseuille { u_max: 1.0, half_height: 1.0 };
        assert_eq!(f.velocity_at(Vec2::new(0.0, 0.0)).unwrap(), Vec2::new(1.0, 0.0));
        assert_eq!(f.velocity_at(Vec2::new(3.0, 1.0)).unwrap(), Vec2::new(0.0, 0.0));
    }

    #[test]
    fn vortex_tangential_profile() {
        let v = VORTEX.velocity_at(Vec2::new(1.0, 0.0)).unwrap();
        // Γ/(2πr) (1 - e^{-1}) with Γ = 2π, r = 1, pointing along +y
        let expected = 1.0 - (-1.0f64).exp();
        assert!(v.x.abs() < 1e-15);
        assert!((v.y - expected).abs() < 1e-14);
        assert!((v.y - 0.63212).abs() < 1e-5);
    }

    #[test]
    fn shear_profile() {
        let f = FlowFieldSpec::UniformShear { shear_rate: 2.0, base_velocity: 0.5 };
        assert_eq!(f.velocity_at(Vec2::new(7.0, 0.25)).unwrap(), Vec2::new(1.0, 0.0));
    }

    #[test]
    fn rejects_non_finite_position() {
        let f = FlowFieldSpec::Poiseuille { u_max: 1.0, half_height: 1.0 };
        assert!(matches!(
            f.velocity_at(Vec2::new(f64::NAN, 0.0)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn validation() {
        assert!(FlowFieldSpec::Poiseuille { u_max: 1.0, half_height: 0.0 }.validate().is_err());
        assert!(FlowFieldSpec::LambOseenVortex {
            circulation: 1.0,
            core_radius: -1.0,
            center: Vec2::ZERO
        }
        .validate()
        .is_err());
        assert!(FlowFieldSpec::UniformShear { shear_rate: f64::INFINITY, base_velocity: 0.0 }
            .validate()
            .is_err());
    }

    #[test]
    fn jacobians_match_central_differences() {
        let fields = [
            FlowFieldSpec::Poiseuille { u_max: 1.3, half_height: 0.8 },
            VORTEX,
            FlowFieldSpec::LambOseenVortex {
                circulation: -1.7,
                core_radius: 0.4,
                center: Vec2::new(0.2, -0.1),
            },
            FlowFieldSpec::UniformShear { shear_rate: 0.7, base_velocity: 0.2 },
        ];
        let points = [
            Vec2::new(0.3, -0.4),
            Vec2::new(1.2, 0.9),
            Vec2::new(0.2005, -0.1003),
            Vec2::new(-2.0, 0.5),
        ];
        let h = 1e-6;
        for f in &fields {
            for &p in &points {
                let jac = f.velocity_jacobian(p);
                for j in 0..2 {
                    let e = if j == 0 { Vec2::new(h, 0.0) } else { Vec2::new(0.0, h) };
                    let d = (f.velocity_unchecked(p + e) - f.velocity_unchecked(p - e)) * (0.5 / h);
                    assert!((jac[0][j] - d.x).abs() < 1e-6, "{f:?} {p:?}");
                    assert!((jac[1][j] - d.y).abs() < 1e-6, "{f:?} {p:?}");
                }
            }
        }
    }

    #[test]
    fn param_round_trip() {
        for f in [
            FlowFieldSpec::Poiseuille { u_max: 1.0, half_height: 2.0 },
            VORTEX,
            FlowFieldSpec::UniformShear { shear_rate: 0.1, base_velocity: 1.0 },
        ] {
            assert_eq!(FlowFieldSpec::from_params(f.kind(), &f.params()).unwrap(), f);
        }
    }
}
