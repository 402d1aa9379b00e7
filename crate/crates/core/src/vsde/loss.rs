//! ELBO terms. Each has a tape form used in training and a plain form that
//! evaluates the same graph on constants.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::cnf::LATENT_DIM;
use crate::error::{Error, Result};
use crate::flow::FlowFieldSpec;
use crate::geom::Vec2;
use crate::nn::{Mat, Tape, Var};
#[allow(unused_imports)] // test builds link std, whose inherent methods take precedence
use num_traits::Float;

/// Constants of the energy balance `ρ c_p (∂_t T + u·∇T) = k ∇²T + Φ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdeConstants {
    pub rho: f64,
    pub c_p: f64,
    pub k: f64,
    pub phi_visc: f64,
}

impl Default for PdeConstants {
    fn default() -> Self {
        Self { rho: 1.0, c_p: 1.0, k: 0.01, phi_visc: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboWeights {
    pub kl: f64,
    pub control: f64,
    pub phys: f64,
    pub pde: f64,
    pub sigma_obs: f64,
    pub consts: PdeConstants,
    /// Finite-difference stencil width for the PDE residual.
    pub stencil_h: f64,
}

impl Default for ElboWeights {
    fn default() -> Self {
        Self { kl: 1.0, control: 1.0, phys: 0.1, pde: 0.01, sigma_obs: 0.05, consts: PdeConstants::default(), stencil_h: 1e-3 }
    }
}

impl ElboWeights {
    pub fn validate(&self) -> Result<()> {
        let c = self.consts;
        let all = [self.kl, self.control, self.phys, self.pde, c.rho, c.c_p, c.k, c.phi_visc];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput("loss weights and energy constants must be finite and >= 0".into()));
        }
        if !(self.sigma_obs > 0.0) || !(self.stencil_h > 0.0) {
            return Err(Error::InvalidInput("sigma_obs and stencil width must be > 0".into()));
        }
        Ok(())
    }
}

/// Scalar values of the five ELBO terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElboComponents {
    pub recon_loglik: f64,
    pub kl: f64,
    pub control: f64,
    pub energy: f64,
    pub pde: f64,
}

impl ElboComponents {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("reconstruction", self.recon_loglik),
            ("kl", self.kl),
            ("control", self.control),
            ("energy", self.energy),
            ("pde", self.pde),
        ]
    }

    pub fn describe(&self) -> String {
        let parts: Vec<String> = self.named().iter().map(|(n, v)| format!("{n}={v}")).collect();
        parts.join(", ")
    }
}

/// Weighted loss `-recon + λ_KL KL + λ_u control + λ_phys energy + λ_pde pde`.
pub fn elbo(c: &ElboComponents, w: &ElboWeights) -> Result<f64> {
    for (name, v) in c.named() {
        if !v.is_finite() {
            return Err(Error::NonFinite { component: name.into(), detail: format!("value {v}") });
        }
    }
    Ok(-c.recon_loglik + w.kl * c.kl + w.control * c.control + w.phys * c.energy + w.pde * c.pde)
}

/// `½ Σ (μ² + σ² - 1 - 2 log σ)`.
pub fn kl_gaussian(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::LengthMismatch { left: mu.len(), right: sigma.len() });
    }
    if sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidInput("sigma must be > 0".into()));
    }
    Ok(0.5 * mu.iter().zip(sigma).map(|(m, s)| m * m + s * s - 1.0 - 2.0 * s.ln()).sum::<f64>())
}

/// Mean over rows of the Gaussian KL, from `μ` and `log σ` (both B×d).
pub(crate) fn kl_on_tape(tape: &mut Tape, mu: Var, log_sigma: Var) -> Var {
    let mu2 = tape.square(mu);
    let two = tape.scale(log_sigma, 2.0);
    let var = tape.exp(two);
    let a = tape.add(mu2, var);
    let b = tape.sub(a, two);
    let c = tape.offset(b, -1.0);
    let rows = tape.row_sum(c);
    let half = tape.scale(rows, 0.5);
    tape.mean_all(half)
}

fn sum_vars(tape: &mut Tape, vs: &[Var]) -> Option<Var> {
    let mut it = vs.iter();
    let mut acc = *it.next()?;
    for &v in it {
        acc = tape.add(acc, v);
    }
    Some(acc)
}

/// Mean over rows of `Σ_k ‖u_k‖² Δt`.
pub(crate) fn control_cost_on_tape(tape: &mut Tape, controls: &[Var], dt: f64) -> Option<Var> {
    let sq: Vec<Var> = controls
        .iter()
        .map(|&u| {
            let s = tape.square(u);
            tape.row_sum(s)
        })
        .collect();
    let total = sum_vars(tape, &sq)?;
    let scaled = tape.scale(total, dt);
    Some(tape.mean_all(scaled))
}

/// Mean over particles of `Σ_k ‖u_k‖² Δt`; `controls[particle][step]`.
pub fn control_cost(controls: &[Vec<Vec2>], dt: f64) -> f64 {
    if controls.is_empty() {
        return 0.0;
    }
    let total: f64 = controls.iter().map(|p| p.iter().map(|u| u.norm_sq() * dt).sum::<f64>()).sum();
    total / controls.len() as f64
}

/// Fluctuation penalty on per-step kinetic proxies `E_k = ½ρ‖z_{k+1} - z_k‖²`.
pub(crate) fn energy_on_tape(tape: &mut Tape, states: &[Var], rho: f64) -> Result<Var> {
    if states.len() < 3 {
        return Err(Error::PathTooShort { need: 3, got: states.len() });
    }
    let energies: Vec<Var> = states
        .windows(2)
        .map(|w| {
            let d = tape.sub(w[1], w[0]);
            let s = tape.square(d);
            let r = tape.row_sum(s);
            tape.scale(r, 0.5 * rho)
        })
        .collect();
    let fluct: Vec<Var> = energies
        .windows(2)
        .map(|w| {
            let d = tape.sub(w[1], w[0]);
            tape.square(d)
        })
        .collect();
    let n = fluct.len() as f64;
    let total = sum_vars(tape, &fluct).expect("at least one fluctuation term");
    let mean_k = tape.scale(total, 1.0 / n);
    Ok(tape.mean_all(mean_k))
}

/// `T(x) = ½‖u(x)‖²` per row.
fn temperature(tape: &mut Tape, z: Var, field: &FlowFieldSpec) -> Var {
    let u = tape.field_velocity(z, field);
    let s = tape.square(u);
    let r = tape.row_sum(s);
    tape.scale(r, 0.5)
}

fn shifted(tape: &mut Tape, z: Var, axis: usize, h: f64) -> Var {
    let rows = tape.shape(z).0;
    let off = tape.constant(Mat::from_fn(rows, LATENT_DIM, |_, c| if c == axis { h } else { 0.0 }));
    tape.add(z, off)
}

/// Mean squared residual of the energy balance along the path, with the
/// speed-energy proxy as temperature, a backward time difference and
/// central spatial differences of width `h`.
pub(crate) fn pde_on_tape(tape: &mut Tape, states: &[Var], field: &FlowFieldSpec, consts: &PdeConstants, dt: f64, h: f64) -> Result<Var> {
    if states.len() < 2 {
        return Err(Error::PathTooShort { need: 2, got: states.len() });
    }
    let temps: Vec<Var> = states.iter().map(|&z| temperature(tape, z, field)).collect();
    let mut residuals = Vec::with_capacity(states.len() - 1);
    for k in 1..states.len() {
        let z = states[k];
        let t_c = temps[k];
        let dtt = tape.sub(t_c, temps[k - 1]);
        let dtt = tape.scale(dtt, 1.0 / dt);
        let mut grads = [t_c; 2];
        let mut lap = tape.scale(t_c, -4.0);
        for (axis, g) in grads.iter_mut().enumerate() {
            let zp = shifted(tape, z, axis, h);
            let zm = shifted(tape, z, axis, -h);
            let tp = temperature(tape, zp, field);
            let tm = temperature(tape, zm, field);
            let diff = tape.sub(tp, tm);
            *g = tape.scale(diff, 0.5 / h);
            let s = tape.add(tp, tm);
            lap = tape.add(lap, s);
        }
        let lap = tape.scale(lap, 1.0 / (h * h));
        let grad_t = tape.concat(&grads);
        let u = tape.field_velocity(z, field);
        let adv = tape.mul(u, grad_t);
        let adv = tape.row_sum(adv);
        let material = tape.add(dtt, adv);
        let lhs = tape.scale(material, consts.rho * consts.c_p);
        let rhs = tape.scale(lap, consts.k);
        let r = tape.sub(lhs, rhs);
        let r = tape.offset(r, -consts.phi_visc);
        residuals.push(tape.square(r));
    }
    let n = residuals.len() as f64;
    let total = sum_vars(tape, &residuals).expect("non-empty residual list");
    let mean_k = tape.scale(total, 1.0 / n);
    let out = tape.mean_all(mean_k);
    if !tape.value(out).is_finite() {
        return Err(Error::NonFinite { component: "pde".into(), detail: "stencil evaluation produced a non-finite value".into() });
    }
    Ok(out)
}

/// Guardrail-weighted Gaussian log-likelihood of `states` against `targets`.
///
/// Rows are grouped in blocks of `group` particles per trajectory; within a
/// block particle `j` is weighted by `w_j / Σ w`, blocks are then averaged.
pub(crate) fn recon_on_tape(tape: &mut Tape, states: &[Var], targets: &[Var], weights: Var, sigma_obs: f64, group: usize) -> Result<Var> {
    if states.len() != targets.len() {
        return Err(Error::LengthMismatch { left: states.len(), right: targets.len() });
    }
    if states.is_empty() {
        return Err(Error::EmptySequence);
    }
    let sq: Vec<Var> = states
        .iter()
        .zip(targets)
        .map(|(&z, &x)| {
            let d = tape.sub(z, x);
            let s = tape.square(d);
            tape.row_sum(s)
        })
        .collect();
    let total = sum_vars(tape, &sq).expect("non-empty");
    let ll = tape.scale(total, -1.0 / (2.0 * sigma_obs * sigma_obs));
    let norm = states.len() as f64 * LATENT_DIM as f64 * (sigma_obs * (2.0 * PI).sqrt()).ln();
    let ll = tape.offset(ll, -norm);
    let wsum = tape.group_sum(weights, group);
    let wsum = tape.repeat_rows(wsum, group);
    let inv = tape.recip(wsum);
    let w = tape.mul(weights, inv);
    let weighted = tape.mul(w, ll);
    let per_traj = tape.group_sum(weighted, group);
    Ok(tape.mean_all(per_traj))
}

/// Per-step state matrices (particles as rows) from `paths[particle][step]`.
pub(crate) fn step_matrices(paths: &[Vec<Vec2>]) -> Result<Vec<Mat>> {
    let n = paths.first().map(|p| p.len()).ok_or(Error::EmptyEnsemble)?;
    if let Some(p) = paths.iter().find(|p| p.len() != n) {
        return Err(Error::LengthMismatch { left: p.len(), right: n });
    }
    Ok((0..n).map(|k| Mat::from_fn(paths.len(), LATENT_DIM, |r, c| paths[r][k].to_array()[c])).collect())
}

fn constants(tape: &mut Tape, paths: &[Vec<Vec2>]) -> Result<Vec<Var>> {
    Ok(step_matrices(paths)?.into_iter().map(|m| tape.constant(m)).collect())
}

/// Energy fluctuation loss averaged over particles; `paths[particle][step]`.
pub fn energy_loss(paths: &[Vec<Vec2>], rho: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let states = constants(&mut tape, paths)?;
    let v = energy_on_tape(&mut tape, &states, rho)?;
    Ok(tape.value(v).item())
}

/// Mean squared energy-balance residual over steps and particles.
pub fn pde_residual_loss(paths: &[Vec<Vec2>], field: &FlowFieldSpec, consts: &PdeConstants, dt: f64, h: f64) -> Result<f64> {
    if !(dt > 0.0 && h > 0.0) {
        return Err(Error::InvalidInput("time step and stencil width must be > 0".into()));
    }
    let mut tape = Tape::new();
    let states = constants(&mut tape, paths)?;
    let v = pde_on_tape(&mut tape, &states, field, consts, dt, h)?;
    Ok(tape.value(v).item())
}

/// Weighted reconstruction log-likelihood of decoded particle paths against
/// one observed path on the same grid, using per-particle mean guardrail
/// weights `gamma_bar`.
pub fn reconstruction_loglik(decoded: &[Vec<Vec2>], observed: &[Vec2], sigma_obs: f64, gamma_bar: &[f64]) -> Result<f64> {
    if gamma_bar.len() != decoded.len() {
        return Err(Error::LengthMismatch { left: gamma_bar.len(), right: decoded.len() });
    }
    if !(sigma_obs > 0.0) {
        return Err(Error::InvalidInput("sigma_obs must be > 0".into()));
    }
    let mut tape = Tape::new();
    let states = constants(&mut tape, decoded)?;
    if states.len() != observed.len() {
        return Err(Error::LengthMismatch { left: states.len(), right: observed.len() });
    }
    let targets: Vec<Var> = observed
        .iter()
        .map(|x| tape.constant(Mat::from_fn(decoded.len(), LATENT_DIM, |_, c| x.to_array()[c])))
        .collect();
    let w = tape.constant(Mat::from_vec(gamma_bar.len(), 1, gamma_bar.to_vec()));
    let v = recon_on_tape(&mut tape, &states, &targets, w, sigma_obs, decoded.len())?;
    Ok(tape.value(v).item())
}
