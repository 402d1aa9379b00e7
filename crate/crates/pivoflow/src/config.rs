//! Flat `section.key: value` pipeline configuration.
//!
//! Every key has a default (the vortex case); unknown keys, unparsable
//! values and out-of-range values are rejected with the offending line.

use std::path::PathBuf;

use pivoflow_core::cnf::{CnfArch, CnfObjective, CnfTrainConfig, ContextFeature, FlowSolver};
use pivoflow_core::flow::{Bounds, FieldKind, FlowFieldSpec, InitialCondition, SimConfig};
use pivoflow_core::integrate::StepMethod;
use pivoflow_core::nn::AdamWConfig;
use pivoflow_core::vsde::{ElboWeights, PdeConstants, RadiusMode, VsdeArch, VsdeTrainConfig};
use pivoflow_core::Vec2;

use crate::error::{Error, Result};
use crate::fsutil;

pub const PRESETS: [(&str, &str); 3] = [
    ("poiseuille", include_str!("../presets/poiseuille.cfg")),
    ("vortex", include_str!("../presets/vortex.cfg")),
    ("shear", include_str!("../presets/shear.cfg")),
];

trait Value: Sized {
    fn parse(raw: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(raw: &str) -> Result<Self, String> {
                raw.parse().map_err(|e| format!("cannot parse {raw:?} as {}: {e}", stringify!($t)))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
from_str_value!(usize, u64, f64, bool, String);

impl Value for PathBuf {
    fn parse(raw: &str) -> Result<Self, String> {
        if raw.is_empty() {
            return Err("empty path".into());
        }
        Ok(PathBuf::from(raw))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl Value for StepMethod {
    fn parse(raw: &str) -> Result<Self, String> {
        StepMethod::from_name(raw).ok_or_else(|| format!("unknown integrator {raw:?} (euler, heun, rk4, dopri5)"))
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

impl Value for FieldKind {
    fn parse(raw: &str) -> Result<Self, String> {
        FieldKind::from_name(raw).ok_or_else(|| format!("unknown field {raw:?} (poiseuille, lamb_oseen, uniform_shear)"))
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

impl Value for CnfObjective {
    fn parse(raw: &str) -> Result<Self, String> {
        CnfObjective::from_name(raw).ok_or_else(|| format!("unknown objective {raw:?} (mle, endpoint_mse)"))
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

impl Value for Vec<ContextFeature> {
    fn parse(raw: &str) -> Result<Self, String> {
        raw.split(',')
            .map(|s| ContextFeature::from_name(s.trim()).ok_or_else(|| format!("unknown context feature {s:?}")))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(|f| f.name()).collect::<Vec<_>>().join(",")
    }
}

/// `none` or a number.
impl Value for Option<f64> {
    fn parse(raw: &str) -> Result<Self, String> {
        if raw == "none" {
            Ok(None)
        } else {
            f64::parse(raw).map(Some)
        }
    }
    fn render(&self) -> String {
        self.map_or("none".into(), |v| v.to_string())
    }
}

/// `natural` or `x_min,y_min,x_max,y_max`.
impl Value for Option<[f64; 4]> {
    fn parse(raw: &str) -> Result<Self, String> {
        if raw == "natural" {
            return Ok(None);
        }
        let v: Vec<f64> = raw.split(',').map(|s| f64::parse(s.trim())).collect::<Result<_, _>>()?;
        let b: [f64; 4] = v.try_into().map_err(|_| "expected `natural` or x_min,y_min,x_max,y_max".to_string())?;
        Ok(Some(b))
    }
    fn render(&self) -> String {
        self.map_or("natural".into(), |b| b.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadiusKind {
    Auto,
    Fixed,
}

impl Value for RadiusKind {
    fn parse(raw: &str) -> Result<Self, String> {
        match raw {
            "auto" => Ok(RadiusKind::Auto),
            "fixed" => Ok(RadiusKind::Fixed),
            _ => Err(format!("unknown radius mode {raw:?} (auto, fixed)")),
        }
    }
    fn render(&self) -> String {
        match self {
            RadiusKind::Auto => "auto".into(),
            RadiusKind::Fixed => "fixed".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySection {
    pub particles: usize,
    pub steps: usize,
    pub dt: f64,
    pub field: FieldKind,
    pub diffusion: f64,
    pub seed: u64,
    pub reflect_h: Option<f64>,
    pub x0_box: Option<[f64; 4]>,
    pub validation_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSection {
    pub u_max: f64,
    pub half_height: f64,
    pub circulation: f64,
    pub core_radius: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub shear_rate: f64,
    pub base_velocity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnfSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub hidden: usize,
    pub depth: usize,
    pub n_freqs: usize,
    pub context_dim: usize,
    pub context_features: Vec<ContextFeature>,
    pub limit: usize,
    pub objective: CnfObjective,
    pub solver_steps: usize,
    pub grad_clip: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuardrailSection {
    pub r_mode: RadiusKind,
    pub r_factor: f64,
    pub radius: f64,
    pub alpha: f64,
    pub u_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VsdeSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub particles: usize,
    pub steps: usize,
    pub integrator: StepMethod,
    pub control_cost: f64,
    pub learnable_diffusion: bool,
    pub log_g0_init: f64,
    pub lambda_kl: f64,
    pub lambda_phys: f64,
    pub lambda_pde: f64,
    pub sigma_obs: f64,
    pub prefix_fraction: f64,
    pub physics_ramp: f64,
    pub grad_clip: f64,
    pub encoder_hidden: usize,
    pub ctx_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub n_freqs: usize,
    pub rho: f64,
    pub c_p: f64,
    pub k: f64,
    pub phi_visc: f64,
    pub stencil_h: f64,
    pub guardrail: GuardrailSection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceSection {
    pub particles: usize,
    pub steps: usize,
    pub integrator: StepMethod,
    pub seed: u64,
    /// Validation trajectories to predict; 0 means all.
    pub trajectories: usize,
    pub compare_integrators: bool,
    pub compare_trajectories: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub regional_nx: usize,
    pub regional_ny: usize,
    pub overlay_trajectories: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathsSection {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub predictions_dir: PathBuf,
    pub report_dir: PathBuf,
    pub log_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub trajectory: TrajectorySection,
    pub field: FieldSection,
    pub cnf: CnfSection,
    pub vsde: VsdeSection,
    pub inference: InferenceSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            trajectory: TrajectorySection {
                particles: 4096,
                steps: 240,
                dt: 0.01,
                field: FieldKind::LambOseenVortex,
                diffusion: 0.001,
                seed: 0,
                reflect_h: None,
                x0_box: None,
                validation_fraction: 0.2,
            },
            field: FieldSection {
                u_max: 1.0,
                half_height: 1.0,
                circulation: 1.0,
                core_radius: 0.5,
                center_x: 0.0,
                center_y: 0.0,
                shear_rate: 1.0,
                base_velocity: 0.0,
            },
            cnf: CnfSection {
                batch_size: 512,
                epochs: 8,
                learning_rate: 0.002,
                warmup_steps: 1000,
                hidden: 64,
                depth: 3,
                n_freqs: 4,
                context_dim: 3,
                context_features: vec![ContextFeature::Strength, ContextFeature::Length, ContextFeature::Diffusion],
                limit: 1024,
                objective: CnfObjective::Mle,
                solver_steps: 8,
                grad_clip: 10.0,
            },
            vsde: VsdeSection {
                batch_size: 2048,
                epochs: 50,
                learning_rate: 0.01,
                warmup_steps: 1000,
                particles: 64,
                steps: 120,
                integrator: StepMethod::Euler,
                control_cost: 1.0,
                learnable_diffusion: true,
                log_g0_init: -4.0,
                lambda_kl: 1.0,
                lambda_phys: 0.1,
                lambda_pde: 0.01,
                sigma_obs: 0.05,
                prefix_fraction: 0.25,
                physics_ramp: 0.25,
                grad_clip: 100.0,
                encoder_hidden: 32,
                ctx_dim: 16,
                hidden: 64,
                depth: 2,
                n_freqs: 4,
                rho: 1.0,
                c_p: 1.0,
                k: 0.01,
                phi_visc: 0.0,
                stencil_h: 1e-3,
                guardrail: GuardrailSection { r_mode: RadiusKind::Auto, r_factor: 1.1, radius: 1.0, alpha: 1.0, u_max: 10.0 },
            },
            inference: InferenceSection {
                particles: 64,
                steps: 120,
                integrator: StepMethod::Euler,
                seed: 0,
                trajectories: 0,
                compare_integrators: false,
                compare_trajectories: 64,
            },
            eval: EvalSection { regional_nx: 8, regional_ny: 8, overlay_trajectories: 6 },
            paths: PathsSection {
                data_dir: "runs/data".into(),
                checkpoint_dir: "runs/checkpoints".into(),
                predictions_dir: "runs/predictions".into(),
                report_dir: "runs/report".into(),
                log_dir: "runs/logs".into(),
            },
        }
    }
}

macro_rules! schema {
    ($($key:literal => $($field:ident).+;)*) => {
        /// Every accepted key, in serialization order.
        pub const KEYS: &[&str] = &[$($key),*];

        fn set_raw(&mut self, key: &str, raw: &str) -> Option<Result<(), String>> {
            match key {
                $($key => Some(Value::parse(raw).map(|v| self.$($field).+ = v)),)*
                _ => None,
            }
        }

        fn render_all(&self) -> Vec<(&'static str, String)> {
            vec![$(($key, self.$($field).+.render())),*]
        }
    };
}

fn positive(v: f64) -> Result<(), String> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(format!("must be > 0, got {v}"))
    }
}

fn non_negative(v: f64) -> Result<(), String> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(format!("must be >= 0, got {v}"))
    }
}

fn finite(v: f64) -> Result<(), String> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(format!("must be finite, got {v}"))
    }
}

fn at_least(v: usize, min: usize) -> Result<(), String> {
    if v >= min {
        Ok(())
    } else {
        Err(format!("must be >= {min}, got {v}"))
    }
}

fn fraction(v: f64, lo_open: bool) -> Result<(), String> {
    let ok = if lo_open { v > 0.0 && v <= 1.0 } else { (0.0..=1.0).contains(&v) };
    if ok {
        Ok(())
    } else {
        Err(format!("must lie in {}0, 1], got {v}", if lo_open { "(" } else { "[" }))
    }
}

impl PipelineConfig {
    schema! {
        "trajectory.particles" => trajectory.particles;
        "trajectory.steps" => trajectory.steps;
        "trajectory.dt" => trajectory.dt;
        "trajectory.field" => trajectory.field;
        "trajectory.D" => trajectory.diffusion;
        "trajectory.seed" => trajectory.seed;
        "trajectory.reflect_H" => trajectory.reflect_h;
        "trajectory.x0_box" => trajectory.x0_box;
        "trajectory.validation_fraction" => trajectory.validation_fraction;
        "field.u_max" => field.u_max;
        "field.half_height" => field.half_height;
        "field.circulation" => field.circulation;
        "field.core_radius" => field.core_radius;
        "field.center_x" => field.center_x;
        "field.center_y" => field.center_y;
        "field.shear_rate" => field.shear_rate;
        "field.base_velocity" => field.base_velocity;
        "cnf.batch_size" => cnf.batch_size;
        "cnf.epochs" => cnf.epochs;
        "cnf.learning_rate" => cnf.learning_rate;
        "cnf.warmup_steps" => cnf.warmup_steps;
        "cnf.hidden" => cnf.hidden;
        "cnf.depth" => cnf.depth;
        "cnf.n_freqs" => cnf.n_freqs;
        "cnf.context_dim" => cnf.context_dim;
        "cnf.context_features" => cnf.context_features;
        "cnf.limit" => cnf.limit;
        "cnf.objective" => cnf.objective;
        "cnf.solver_steps" => cnf.solver_steps;
        "cnf.grad_clip" => cnf.grad_clip;
        "vsde.batch_size" => vsde.batch_size;
        "vsde.epochs" => vsde.epochs;
        "vsde.learning_rate" => vsde.learning_rate;
        "vsde.warmup_steps" => vsde.warmup_steps;
        "vsde.particles" => vsde.particles;
        "vsde.steps" => vsde.steps;
        "vsde.integrator" => vsde.integrator;
        "vsde.control_cost" => vsde.control_cost;
        "vsde.learnable_diffusion" => vsde.learnable_diffusion;
        "vsde.log_g0_init" => vsde.log_g0_init;
        "vsde.lambda_kl" => vsde.lambda_kl;
        "vsde.lambda_phys" => vsde.lambda_phys;
        "vsde.lambda_pde" => vsde.lambda_pde;
        "vsde.sigma_obs" => vsde.sigma_obs;
        "vsde.prefix_fraction" => vsde.prefix_fraction;
        "vsde.physics_ramp" => vsde.physics_ramp;
        "vsde.grad_clip" => vsde.grad_clip;
        "vsde.encoder_hidden" => vsde.encoder_hidden;
        "vsde.ctx_dim" => vsde.ctx_dim;
        "vsde.hidden" => vsde.hidden;
        "vsde.depth" => vsde.depth;
        "vsde.n_freqs" => vsde.n_freqs;
        "vsde.pde.rho" => vsde.rho;
        "vsde.pde.c_p" => vsde.c_p;
        "vsde.pde.k" => vsde.k;
        "vsde.pde.phi_visc" => vsde.phi_visc;
        "vsde.pde.stencil_h" => vsde.stencil_h;
        "vsde.guardrail.r_mode" => vsde.guardrail.r_mode;
        "vsde.guardrail.r_factor" => vsde.guardrail.r_factor;
        "vsde.guardrail.radius" => vsde.guardrail.radius;
        "vsde.guardrail.alpha" => vsde.guardrail.alpha;
        "vsde.guardrail.u_max" => vsde.guardrail.u_max;
        "inference.particles" => inference.particles;
        "inference.steps" => inference.steps;
        "inference.integrator" => inference.integrator;
        "inference.seed" => inference.seed;
        "inference.trajectories" => inference.trajectories;
        "inference.compare_integrators" => inference.compare_integrators;
        "inference.compare_trajectories" => inference.compare_trajectories;
        "eval.regional_nx" => eval.regional_nx;
        "eval.regional_ny" => eval.regional_ny;
        "eval.overlay_trajectories" => eval.overlay_trajectories;
        "paths.data_dir" => paths.data_dir;
        "paths.checkpoint_dir" => paths.checkpoint_dir;
        "paths.predictions_dir" => paths.predictions_dir;
        "paths.report_dir" => paths.report_dir;
        "paths.log_dir" => paths.log_dir;
    }

    /// Range check for a single key.
    fn check_key(&self, key: &str) -> Result<(), String> {
        let t = &self.trajectory;
        let f = &self.field;
        let c = &self.cnf;
        let v = &self.vsde;
        let g = &v.guardrail;
        let i = &self.inference;
        match key {
            "trajectory.particles" => at_least(t.particles, 2),
            "trajectory.steps" => at_least(t.steps, 1),
            "trajectory.dt" => positive(t.dt),
            "trajectory.D" => non_negative(t.diffusion),
            "trajectory.reflect_H" => t.reflect_h.map_or(Ok(()), positive),
            "trajectory.x0_box" => match t.x0_box {
                Some([x0, y0, x1, y1]) if !(x1 > x0 && y1 > y0) || [x0, y0, x1, y1].iter().any(|v| !v.is_finite()) => {
                    Err("box must have x_max > x_min and y_max > y_min".into())
                }
                _ => Ok(()),
            },
            "trajectory.validation_fraction" => {
                if t.validation_fraction > 0.0 && t.validation_fraction < 1.0 {
                    Ok(())
                } else {
                    Err(format!("must lie in (0, 1), got {}", t.validation_fraction))
                }
            }
            "field.u_max" | "field.circulation" | "field.shear_rate" | "field.base_velocity" | "field.center_x" | "field.center_y" => {
                finite(match key {
                    "field.u_max" => f.u_max,
                    "field.circulation" => f.circulation,
                    "field.shear_rate" => f.shear_rate,
                    "field.base_velocity" => f.base_velocity,
                    "field.center_x" => f.center_x,
                    _ => f.center_y,
                })
            }
            "field.half_height" => positive(f.half_height),
            "field.core_radius" => positive(f.core_radius),
            "cnf.batch_size" => at_least(c.batch_size, 1),
            "cnf.hidden" => at_least(c.hidden, 1),
            "cnf.depth" => at_least(c.depth, 1),
            "cnf.context_dim" => at_least(c.context_dim, 1),
            "cnf.limit" => at_least(c.limit, 1),
            "cnf.solver_steps" => at_least(c.solver_steps, 1),
            "cnf.learning_rate" => positive(c.learning_rate),
            "cnf.grad_clip" => positive(c.grad_clip),
            "vsde.batch_size" => at_least(v.batch_size, 1),
            "vsde.particles" => at_least(v.particles, 1),
            "vsde.steps" => at_least(v.steps, 2),
            "vsde.encoder_hidden" => at_least(v.encoder_hidden, 1),
            "vsde.hidden" => at_least(v.hidden, 1),
            "vsde.depth" => at_least(v.depth, 1),
            "vsde.learning_rate" => positive(v.learning_rate),
            "vsde.grad_clip" => positive(v.grad_clip),
            "vsde.sigma_obs" => positive(v.sigma_obs),
            "vsde.pde.stencil_h" => positive(v.stencil_h),
            "vsde.log_g0_init" => finite(v.log_g0_init),
            "vsde.control_cost" => non_negative(v.control_cost),
            "vsde.lambda_kl" => non_negative(v.lambda_kl),
            "vsde.lambda_phys" => non_negative(v.lambda_phys),
            "vsde.lambda_pde" => non_negative(v.lambda_pde),
            "vsde.pde.rho" => non_negative(v.rho),
            "vsde.pde.c_p" => non_negative(v.c_p),
            "vsde.pde.k" => non_negative(v.k),
            "vsde.pde.phi_visc" => non_negative(v.phi_visc),
            "vsde.prefix_fraction" => fraction(v.prefix_fraction, true),
            "vsde.physics_ramp" => fraction(v.physics_ramp, false),
            "vsde.guardrail.r_factor" => positive(g.r_factor),
            "vsde.guardrail.radius" => positive(g.radius),
            "vsde.guardrail.alpha" => positive(g.alpha),
            "vsde.guardrail.u_max" => positive(g.u_max),
            "inference.particles" => at_least(i.particles, 1),
            "inference.steps" => at_least(i.steps, 1),
            "inference.compare_trajectories" => at_least(i.compare_trajectories, 1),
            "eval.regional_nx" => at_least(self.eval.regional_nx, 1),
            "eval.regional_ny" => at_least(self.eval.regional_ny, 1),
            _ => Ok(()),
        }
    }

    fn check_cross(&self) -> Result<()> {
        if self.cnf.context_dim != self.cnf.context_features.len() {
            return Err(Error::Config(format!(
                "cnf.context_dim is {} but cnf.context_features lists {}",
                self.cnf.context_dim,
                self.cnf.context_features.len()
            )));
        }
        Ok(())
    }

    /// Checks every key and the cross-key constraints.
    pub fn validate(&self) -> Result<()> {
        for key in Self::KEYS {
            self.check_key(key).map_err(|d| Error::Config(format!("{key}: {d}")))?;
        }
        self.check_cross()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split_once('#').map_or(raw, |(before, _)| before).trim();
            if content.is_empty() {
                continue;
            }
            let err = |detail: String| Error::ConfigLine { line, detail };
            let (key, value) = content.split_once(':').ok_or_else(|| err("expected `section.key: value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(err(format!("duplicate key {key}")));
            }
            match cfg.set_raw(key, value) {
                None => return Err(err(format!("unknown key {key}"))),
                Some(Err(d)) => return Err(err(format!("{key}: {d}"))),
                Some(Ok(())) => {}
            }
            cfg.check_key(key).map_err(|d| err(format!("{key}: {d}")))?;
            seen.push(key);
        }
        cfg.check_cross()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&fsutil::read_string(path)?)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?;
        Self::parse(text)
    }

    /// Canonical text listing every key.
    pub fn to_text(&self) -> String {
        self.render_all().into_iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        fsutil::sha256_hex(self.to_text().as_bytes())
    }

    pub fn field_spec(&self) -> Result<FlowFieldSpec> {
        let f = &self.field;
        let spec = match self.trajectory.field {
            FieldKind::Poiseuille => FlowFieldSpec::Poiseuille { u_max: f.u_max, half_height: f.half_height },
            FieldKind::LambOseenVortex => FlowFieldSpec::LambOseenVortex {
                circulation: f.circulation,
                core_radius: f.core_radius,
                center: Vec2::new(f.center_x, f.center_y),
            },
            FieldKind::UniformShear => FlowFieldSpec::UniformShear { shear_rate: f.shear_rate, base_velocity: f.base_velocity },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let t = &self.trajectory;
        let mut sc = SimConfig::new(self.field_spec()?, t.diffusion, t.dt, t.steps, t.particles);
        if let Some([x0, y0, x1, y1]) = t.x0_box {
            sc.x0 = InitialCondition::UniformBox(Bounds::new(Vec2::new(x0, y0), Vec2::new(x1, y1)));
        }
        sc.reflect_h = t.reflect_h;
        sc.seed = t.seed;
        Ok(sc)
    }

    pub fn cnf_train_config(&self) -> CnfTrainConfig {
        let c = &self.cnf;
        let defaults = CnfTrainConfig::default();
        CnfTrainConfig {
            arch: CnfArch { hidden: c.hidden, depth: c.depth, n_freqs: c.n_freqs, features: c.context_features.clone() },
            objective: c.objective,
            batch_size: c.batch_size,
            epochs: c.epochs,
            limit: c.limit,
            optim: AdamWConfig { lr: c.learning_rate, warmup_steps: c.warmup_steps, ..defaults.optim },
            solver: FlowSolver { n_steps: c.solver_steps, ..defaults.solver },
            grad_clip: c.grad_clip,
            seed: self.trajectory.seed,
        }
    }

    pub fn vsde_train_config(&self) -> VsdeTrainConfig {
        let v = &self.vsde;
        let g = &v.guardrail;
        let defaults = VsdeTrainConfig::default();
        VsdeTrainConfig {
            arch: VsdeArch { encoder_hidden: v.encoder_hidden, ctx_dim: v.ctx_dim, hidden: v.hidden, depth: v.depth, n_freqs: v.n_freqs },
            weights: ElboWeights {
                kl: v.lambda_kl,
                control: v.control_cost,
                phys: v.lambda_phys,
                pde: v.lambda_pde,
                sigma_obs: v.sigma_obs,
                consts: PdeConstants { rho: v.rho, c_p: v.c_p, k: v.k, phi_visc: v.phi_visc },
                stencil_h: v.stencil_h,
            },
            batch_size: v.batch_size,
            epochs: v.epochs,
            n_particles: v.particles,
            n_steps: v.steps,
            method: v.integrator,
            optim: AdamWConfig { lr: v.learning_rate, warmup_steps: v.warmup_steps, ..defaults.optim },
            prefix_fraction: v.prefix_fraction,
            radius: match g.r_mode {
                RadiusKind::Auto => RadiusMode::Auto { factor: g.r_factor },
                RadiusKind::Fixed => RadiusMode::Fixed(g.radius),
            },
            alpha: g.alpha,
            u_max: g.u_max,
            learnable_diffusion: v.learnable_diffusion,
            log_g0_init: v.log_g0_init,
            physics_ramp: v.physics_ramp,
            grad_clip: v.grad_clip,
            seed: self.trajectory.seed,
        }
    }

    /// Short label for report tables, e.g. `poiseuille`.
    pub fn flow_regime(&self) -> &'static str {
        self.trajectory.field.name()
    }
}
