//! Variational SDE layered on a frozen flow drift.
//!
//! A GRU encoder summarizes an observed trajectory prefix into a Gaussian
//! posterior over the initial latent state plus a context vector. A
//! posterior network adds a clamped control to the flow drift and modulates
//! a decaying diffusion schedule. Latent states live in physical
//! coordinates, so decoded paths are compared to observations directly.

mod infer;
mod loss;
mod train;

pub use infer::{cnf_baseline, infer_batch, infer_ensemble, Ensemble, InferenceRequest};
pub use loss::{
    control_cost, elbo, energy_loss, kl_gaussian, pde_residual_loss, reconstruction_loglik, ElboComponents, ElboWeights,
    PdeConstants,
};
pub use train::{prefix_len, train_vsde, BatchNoise, LossSpec, RadiusMode, TrainBatch, VsdeTrainConfig, VsdeTraining};

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::cnf::{CnfModel, LATENT_DIM};
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::integrate::{step_deterministic, StepMethod};
use crate::nn::{fourier_embed, Bound, Dense, Gru, Mat, Mlp, ParamId, ParamStore, Tape, Var};
use crate::rng::{self, domain, Stream};
#[allow(unused_imports)] // test builds link std, whose inherent methods take precedence
use num_traits::Float;

/// Lower and upper clamp for `log σ` of the posterior.
pub const LOG_SIGMA_MIN: f64 = -4.0 * core::f64::consts::LN_10;
pub const LOG_SIGMA_MAX: f64 = core::f64::consts::LN_10;

/// Per-step encoder features: position and time.
pub const ENCODER_INPUT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VsdeArch {
    pub encoder_hidden: usize,
    pub ctx_dim: usize,
    pub hidden: usize,
    /// Hidden layers of the posterior network.
    pub depth: usize,
    pub n_freqs: usize,
}

impl Default for VsdeArch {
    fn default() -> Self {
        Self { encoder_hidden: 32, ctx_dim: 16, hidden: 64, depth: 2, n_freqs: 4 }
    }
}

impl VsdeArch {
    pub fn posterior_sizes(&self) -> Vec<usize> {
        let mut s = vec![LATENT_DIM + 2 * self.n_freqs + self.ctx_dim];
        s.extend(core::iter::repeat_n(self.hidden, self.depth));
        s.push(LATENT_DIM + 1);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_hidden == 0 || self.hidden == 0 || self.depth == 0 {
            return Err(Error::InvalidInput("encoder and posterior sizes must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuardrailConfig {
    /// Validity radius `R`.
    pub radius: f64,
    /// Sharpness `α_g`.
    pub alpha: f64,
    pub u_max: f64,
}

impl GuardrailConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("radius", self.radius), ("alpha", self.alpha), ("u_max", self.u_max)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("guardrail {name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `exp(-α max(‖z‖ - R, 0)²)`.
pub fn guardrail_weight(z: Vec2, cfg: &GuardrailConfig) -> f64 {
    let excess = (z.norm() - cfg.radius).max(0.0);
    (-cfg.alpha * excess * excess).exp()
}

/// Componentwise clamp to `[-u_max, u_max]`.
pub fn clamp_control(u: Vec2, u_max: f64) -> Vec2 {
    Vec2::new(u.x.clamp(-u_max, u_max), u.y.clamp(-u_max, u_max))
}

/// `μ + σ ⊙ ε`.
pub fn reparameterize(mu: &[f64], sigma: &[f64], eps: &[f64]) -> Vec<f64> {
    mu.iter().zip(sigma).zip(eps).map(|((m, s), e)| m + s * e).collect()
}

/// Diffusion schedule `g(t) = exp(log_g0) (1 - t/T)`.
pub fn diffusion_scale(log_g0: f64, t: f64, span: f64) -> f64 {
    log_g0.exp() * (1.0 - t / span)
}

/// Per-step noise amplitude `sqrt(2 g) (1 + ½ tanh g̃)`.
pub fn noise_amplitude(g: f64, g_tilde: f64) -> f64 {
    (2.0 * g).sqrt() * (1.0 + 0.5 * g_tilde.tanh())
}

/// Which parts of the stochastic dynamics a rollout uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutOptions {
    pub controls: bool,
    pub diffusion: bool,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self { controls: true, diffusion: true }
    }
}

/// Encoder output for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
    pub ctx: Vec<f64>,
}

pub(crate) struct EncodedVars {
    pub mu: Var,
    pub log_sigma: Var,
    pub ctx: Var,
}

pub(crate) struct StepVars {
    pub next: Var,
    /// Clamped control from the first drift stage.
    pub control: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct VsdeModel {
    store: ParamStore,
    gru: Gru,
    mu_head: Dense,
    log_sigma_head: Dense,
    ctx_head: Dense,
    posterior: Mlp,
    log_g0: ParamId,
    arch: VsdeArch,
    pub guardrail: GuardrailConfig,
    cnf_checksum: u64,
}

impl VsdeModel {
    pub fn new(arch: VsdeArch, guardrail: GuardrailConfig, log_g0: f64, cnf: &CnfModel, stream: &mut Stream) -> Result<Self> {
        arch.validate()?;
        guardrail.validate()?;
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "encoder.gru", ENCODER_INPUT, arch.encoder_hidden, stream);
        let mu_head = Dense::new(&mut store, "encoder.mu", arch.encoder_hidden, LATENT_DIM, stream);
        let log_sigma_head = Dense::new(&mut store, "encoder.log_sigma", arch.encoder_hidden, LATENT_DIM, stream);
        let ctx_head = Dense::new(&mut store, "encoder.ctx", arch.encoder_hidden, arch.ctx_dim, stream);
        let posterior = Mlp::new(&mut store, "posterior", &arch.posterior_sizes(), stream);
        let log_g0 = store.add("log_g0", Mat::scalar(log_g0));
        Ok(Self { store, gru, mu_head, log_sigma_head, ctx_head, posterior, log_g0, arch, guardrail, cnf_checksum: cnf.checksum() })
    }

    /// Every encoder and posterior weight zero; `log_g0` as given.
    pub fn zeroed(arch: VsdeArch, guardrail: GuardrailConfig, log_g0: f64, cnf: &CnfModel) -> Result<Self> {
        let mut m = Self::new(arch, guardrail, log_g0, cnf, &mut rng::substream(0, domain::INIT, 1))?;
        for p in m.store.iter_mut() {
            if p.name != "log_g0" {
                p.value = Mat::zeros(p.value.rows(), p.value.cols());
            }
        }
        Ok(m)
    }

    /// Reassembles a model from stored parameters.
    pub fn from_parts(store: ParamStore, arch: VsdeArch, guardrail: GuardrailConfig, cnf_checksum: u64) -> Result<Self> {
        arch.validate()?;
        guardrail.validate()?;
        let dense = |name: &str, fan_in: usize, fan_out: usize| -> Result<Dense> {
            let find = |key: String, shape: (usize, usize)| {
                let id = store.id(&key).ok_or_else(|| Error::ShapeMismatch(format!("missing parameter {key}")))?;
                if store.value(id).shape() != shape {
                    return Err(Error::ShapeMismatch(format!("{key} has the wrong shape")));
                }
                Ok(id)
            };
            Ok(Dense { weight: find(format!("{name}.weight"), (fan_in, fan_out))?, bias: find(format!("{name}.bias"), (1, fan_out))? })
        };
        let gru = Gru::from_store(&store, "encoder.gru", ENCODER_INPUT, arch.encoder_hidden)?;
        let mu_head = dense("encoder.mu", arch.encoder_hidden, LATENT_DIM)?;
        let log_sigma_head = dense("encoder.log_sigma", arch.encoder_hidden, LATENT_DIM)?;
        let ctx_head = dense("encoder.ctx", arch.encoder_hidden, arch.ctx_dim)?;
        let posterior = Mlp::from_store(&store, "posterior", &arch.posterior_sizes())?;
        let log_g0 = store.id("log_g0").ok_or_else(|| Error::ShapeMismatch("missing parameter log_g0".into()))?;
        if store.value(log_g0).shape() != (1, 1) {
            return Err(Error::ShapeMismatch("log_g0 must be 1×1".into()));
        }
        Ok(Self { store, gru, mu_head, log_sigma_head, ctx_head, posterior, log_g0, arch, guardrail, cnf_checksum })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn arch(&self) -> &VsdeArch {
        &self.arch
    }

    pub fn log_g0(&self) -> f64 {
        self.store.value(self.log_g0).item()
    }

    pub fn set_log_g0(&mut self, v: f64) {
        *self.store.value_mut(self.log_g0) = Mat::scalar(v);
    }

    pub(crate) fn log_g0_id(&self) -> ParamId {
        self.log_g0
    }

    /// Checksum of the flow this model was trained on.
    pub fn cnf_checksum(&self) -> u64 {
        self.cnf_checksum
    }

    pub fn check_backbone(&self, cnf: &CnfModel) -> Result<()> {
        if cnf.checksum() != self.cnf_checksum {
            return Err(Error::InvalidInput(format!(
                "flow checksum {:016x} differs from the one recorded at training time ({:016x})",
                cnf.checksum(),
                self.cnf_checksum
            )));
        }
        Ok(())
    }

    /// Encodes a batch of equally long sequences, one `B×3` matrix per step.
    pub(crate) fn encode_on_tape(&self, tape: &mut Tape, p: &Bound, seq: &[Var]) -> Result<EncodedVars> {
        let h = self.gru.encode(tape, p, seq)?;
        let mu = self.mu_head.forward(tape, p, h);
        let ls = self.log_sigma_head.forward(tape, p, h);
        let log_sigma = tape.clamp(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
        let ctx = self.ctx_head.forward(tape, p, h);
        Ok(EncodedVars { mu, log_sigma, ctx })
    }

    /// Posterior over the initial state from an observed path and its times.
    pub fn encode_posterior(&self, path: &[Vec2], times: &[f64]) -> Result<Posterior> {
        if path.is_empty() {
            return Err(Error::EmptySequence);
        }
        if path.len() != times.len() {
            return Err(Error::LengthMismatch { left: path.len(), right: times.len() });
        }
        let mut tape = Tape::new();
        let p = tape.bind(&self.store, false);
        let seq: Vec<Var> = path.iter().zip(times).map(|(x, &t)| tape.constant(Mat::row_vector(&[x.x, x.y, t]))).collect();
        let e = self.encode_on_tape(&mut tape, &p, &seq)?;
        let mu = tape.value(e.mu);
        let ls = tape.value(e.log_sigma);
        Ok(Posterior {
            mu: [mu.get(0, 0), mu.get(0, 1)],
            sigma: [ls.get(0, 0).exp(), ls.get(0, 1).exp()],
            ctx: tape.value(e.ctx).row(0).to_vec(),
        })
    }

    fn posterior_input(&self, tape: &mut Tape, z: Var, t: f64, ctx: Var) -> Result<Var> {
        let (rows, cols) = tape.shape(ctx);
        if cols != self.arch.ctx_dim || rows != tape.shape(z).0 {
            return Err(Error::ShapeMismatch(format!("posterior context is {rows}×{cols}, expected {}×{}", tape.shape(z).0, self.arch.ctx_dim)));
        }
        let e = fourier_embed(t, self.arch.n_freqs);
        let emb = tape.constant(Mat::from_fn(rows, e.len(), |_, c| e[c]));
        Ok(tape.concat(&[z, emb, ctx]))
    }

    /// Raw control (B×2) and softplus diffusion correction (B×1).
    pub(crate) fn posterior_on_tape(&self, tape: &mut Tape, p: &Bound, z: Var, t: f64, ctx: Var) -> Result<(Var, Var)> {
        let x = self.posterior_input(tape, z, t, ctx)?;
        let out = self.posterior.forward(tape, p, x)?;
        let u = tape.slice(out, 0, LATENT_DIM);
        let raw = tape.slice(out, LATENT_DIM, 1);
        Ok((u, tape.softplus(raw)))
    }

    /// Unclamped control and diffusion correction `g̃ ≥ 0` at one state.
    pub fn posterior_drift(&self, z: Vec2, t: f64, ctx: &[f64]) -> Result<(Vec2, f64)> {
        let mut tape = Tape::new();
        let p = tape.bind(&self.store, false);
        let zv = tape.constant(Mat::row_vector(&[z.x, z.y]));
        let cv = tape.constant(Mat::row_vector(ctx));
        let (u, g) = self.posterior_on_tape(&mut tape, &p, zv, t, cv)?;
        let u = tape.value(u);
        Ok((Vec2::new(u.get(0, 0), u.get(0, 1)), tape.value(g).item()))
    }

    /// One rollout step: flow drift plus clamped control through `method`,
    /// then the scheduled diffusion increment `dw` (already `√Δt`-scaled).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn step_on_tape(
        &self,
        tape: &mut Tape,
        pv: &Bound,
        pc: &Bound,
        cnf: &CnfModel,
        z: Var,
        t: f64,
        dt: f64,
        method: StepMethod,
        ctx: Var,
        cnf_ctx: Var,
        dw: Option<&Mat>,
        opts: RolloutOptions,
    ) -> Result<StepVars> {
        let u_max = self.guardrail.u_max;
        let mut first: Option<(Var, Var)> = None;
        let mut drift = |tape: &mut Tape, s: &Var, tt: f64| -> Result<Var> {
            let f = cnf.drift_on_tape(tape, pc, *s, tt, cnf_ctx)?;
            if !opts.controls {
                return Ok(f);
            }
            let (u, g) = self.posterior_on_tape(tape, pv, *s, tt, ctx)?;
            let u = tape.clamp(u, -u_max, u_max);
            if first.is_none() {
                first = Some((u, g));
            }
            Ok(tape.add(f, u))
        };
        let det = step_deterministic(tape, method, &mut drift, &z, t, dt)?;
        let control = first.map(|(u, _)| u);
        let remaining = 1.0 - t;
        let next = match dw {
            Some(dw) if opts.diffusion && remaining > 0.0 => {
                let rows = tape.shape(z).0;
                let half = tape.scale(pv.var(self.log_g0), 0.5);
                let root_g0 = tape.exp(half);
                let modulation = match first {
                    Some((_, g)) => {
                        let th = tape.tanh(g);
                        let th = tape.scale(th, 0.5);
                        tape.offset(th, 1.0)
                    }
                    None => tape.constant(Mat::filled(rows, 1, 1.0)),
                };
                let amp = tape.mul_scalar(modulation, root_g0);
                let amp = tape.scale(amp, (2.0 * remaining).sqrt());
                let w = tape.constant(dw.clone());
                let noise = tape.mul_col(w, amp);
                tape.add(det, noise)
            }
            _ => det,
        };
        Ok(StepVars { next, control })
    }

    /// Exact Jacobian of the combined drift `f_θ + clamp(u_φ)` with respect to `z`.
    pub fn combined_jacobian(&self, cnf: &CnfModel, z: Vec2, t: f64, ctx: &[f64], cnf_ctx: &[f64]) -> Result<[[f64; 2]; 2]> {
        let mut tape = Tape::new();
        let pv = tape.bind(&self.store, false);
        let pc = cnf.bind_frozen(&mut tape);
        let zv = tape.constant(Mat::row_vector(&[z.x, z.y]));
        let cc = tape.constant(cnf.context_rows(&Mat::row_vector(cnf_ctx), 1)?);
        let cv = tape.constant(Mat::row_vector(ctx));
        let (_, jf) = cnf.drift_with_jacobian_on_tape(&mut tape, &pc, zv, t, cc)?;
        let x = self.posterior_input(&mut tape, zv, t, cv)?;
        let (out, ju) = self.posterior.forward_with_tangents(&mut tape, &pv, x, &[0, 1])?;
        let u = tape.value(out);
        let mut j = [[0.0; 2]; 2];
        for (a, (jf_a, ju_a)) in jf.iter().zip(&ju).enumerate() {
            let (jf_a, ju_a) = (tape.value(*jf_a), tape.value(*ju_a));
            for (i, row) in j.iter_mut().enumerate() {
                let pass = if u.get(0, i).abs() < self.guardrail.u_max { 1.0 } else { 0.0 };
                row[a] = jf_a.get(0, i) + pass * ju_a.get(0, i);
            }
        }
        Ok(j)
    }
}

/// Largest eigenvalue magnitude of a 2×2 matrix.
pub fn spectral_radius(j: &[[f64; 2]; 2]) -> f64 {
    let tr = j[0][0] + j[1][1];
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    let disc = 0.25 * tr * tr - det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        (0.5 * tr + s).abs().max((0.5 * tr - s).abs())
    } else {
        det.abs().sqrt()
    }
}

/// Linear interpolation of `path` at `n + 1` evenly spaced fractional indices.
pub fn resample_path(path: &[Vec2], n: usize) -> Result<Vec<Vec2>> {
    if path.is_empty() {
        return Err(Error::EmptySequence);
    }
    let last = (path.len() - 1) as f64;
    Ok((0..=n)
        .map(|k| {
            let pos = if n == 0 { 0.0 } else { k as f64 * last / n as f64 };
            let i = (pos.floor() as usize).min(path.len() - 1);
            let frac = pos - i as f64;
            if frac == 0.0 || i + 1 >= path.len() {
                path[i]
            } else {
                path[i] + (path[i + 1] - path[i]) * frac
            }
        })
        .collect())
}
