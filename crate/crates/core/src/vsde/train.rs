use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::loss::{control_cost_on_tape, energy_on_tape, kl_on_tape, pde_on_tape, recon_on_tape, ElboComponents, ElboWeights};
use super::{resample_path, GuardrailConfig, RolloutOptions, VsdeArch, VsdeModel, ENCODER_INPUT};
use crate::cnf::{schedule_for, CnfModel, LATENT_DIM};
use crate::error::{Error, Result};
use crate::flow::{FlowFieldSpec, TrajectoryBundle};
use crate::integrate::{brownian_increment, StepMethod};
use crate::nn::{clip_grad_norm, AdamW, AdamWConfig, Bound, Mat, Tape, Var};
use crate::rng::{self, domain, Stream};
#[allow(unused_imports)] // test builds link std, whose inherent methods take precedence
use num_traits::Float;

/// Rows recorded on one tape; larger minibatches accumulate gradients.
const MAX_TAPE_ROWS: usize = 256;

/// How the guardrail radius is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RadiusMode {
    /// `factor × max training-state norm`.
    Auto { factor: f64 },
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VsdeTrainConfig {
    pub arch: VsdeArch,
    pub weights: ElboWeights,
    /// Trajectories per minibatch.
    pub batch_size: usize,
    pub epochs: usize,
    /// Latent samples per trajectory.
    pub n_particles: usize,
    /// Rollout steps over unit flow time.
    pub n_steps: usize,
    pub method: StepMethod,
    pub optim: AdamWConfig,
    /// Fraction of each trajectory shown to the encoder.
    pub prefix_fraction: f64,
    pub radius: RadiusMode,
    pub alpha: f64,
    pub u_max: f64,
    pub learnable_diffusion: bool,
    pub log_g0_init: f64,
    /// Fraction of training over which the physics weights ramp up from zero.
    pub physics_ramp: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for VsdeTrainConfig {
    fn default() -> Self {
        Self {
            arch: VsdeArch::default(),
            weights: ElboWeights::default(),
            batch_size: 2048,
            epochs: 50,
            n_particles: 64,
            n_steps: 120,
            method: StepMethod::Euler,
            optim: AdamWConfig { lr: 0.01, ..AdamWConfig::default() },
            prefix_fraction: 0.25,
            radius: RadiusMode::Auto { factor: 1.1 },
            alpha: 1.0,
            u_max: 10.0,
            learnable_diffusion: true,
            log_g0_init: -4.0,
            physics_ramp: 0.25,
            grad_clip: 100.0,
            seed: 0,
        }
    }
}

impl VsdeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 || self.n_particles == 0 {
            return Err(Error::InvalidInput("batch size and particles must be >= 1".into()));
        }
        if self.n_steps < 2 {
            return Err(Error::InvalidInput(format!("rollout needs at least 2 steps, got {}", self.n_steps)));
        }
        if !(self.prefix_fraction > 0.0 && self.prefix_fraction <= 1.0) {
            return Err(Error::InvalidInput("prefix fraction must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.physics_ramp) {
            return Err(Error::InvalidInput("physics ramp must lie in [0, 1]".into()));
        }
        let radius_ok = match self.radius {
            RadiusMode::Auto { factor } => factor > 0.0,
            RadiusMode::Fixed(r) => r > 0.0,
        };
        if !radius_ok || !(self.alpha > 0.0) || !(self.u_max > 0.0) {
            return Err(Error::InvalidInput("guardrail radius, alpha and u_max must be > 0".into()));
        }
        if !(self.optim.lr > 0.0) || !(self.grad_clip > 0.0) || !self.log_g0_init.is_finite() {
            return Err(Error::InvalidInput("learning rate and gradient clip must be > 0, log_g0 finite".into()));
        }
        Ok(())
    }

    pub fn guardrail_for(&self, bundle: &TrajectoryBundle) -> GuardrailConfig {
        let radius = match self.radius {
            RadiusMode::Auto { factor } => factor * bundle.max_state_norm(),
            RadiusMode::Fixed(r) => r,
        };
        GuardrailConfig { radius, alpha: self.alpha, u_max: self.u_max }
    }
}

/// Number of leading states shown to the encoder.
pub fn prefix_len(n_states: usize, fraction: f64) -> usize {
    ((fraction * n_states as f64).ceil() as usize).clamp(1, n_states)
}

/// Encoder inputs, rollout-grid targets and flow contexts for a set of
/// trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    /// One `B×3` matrix of `(x, y, t)` per prefix step.
    pub seqs: Vec<Mat>,
    /// One `B×2` matrix per rollout grid point.
    pub targets: Vec<Mat>,
    /// Standardized flow context, `B×c`.
    pub cnf_ctx: Mat,
}

impl TrainBatch {
    pub fn from_bundle(bundle: &TrajectoryBundle, indices: &[usize], cnf: &CnfModel, prefix: usize, n_steps: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        let times = bundle.time_grid();
        let prefix = prefix.clamp(1, times.len());
        let seqs = (0..prefix)
            .map(|s| {
                Mat::from_fn(indices.len(), ENCODER_INPUT, |r, c| {
                    let x = bundle.trajectory(indices[r])[s];
                    [x.x, x.y, times[s]][c]
                })
            })
            .collect();
        let resampled: Vec<Vec<_>> = indices.iter().map(|&i| resample_path(bundle.trajectory(i), n_steps)).collect::<Result<_>>()?;
        let targets = (0..=n_steps)
            .map(|k| Mat::from_fn(indices.len(), LATENT_DIM, |r, c| resampled[r][k].to_array()[c]))
            .collect();
        let ctx: Vec<Vec<f64>> = indices.iter().map(|&i| cnf.context(&bundle.field, bundle.diffusion, bundle.initial_position(i))).collect();
        let cnf_ctx = Mat::from_fn(indices.len(), cnf.context_dim(), |r, c| ctx[r][c]);
        Ok(Self { seqs, targets, cnf_ctx })
    }

    pub fn n_trajectories(&self) -> usize {
        self.cnf_ctx.rows()
    }

    pub fn n_steps(&self) -> usize {
        self.targets.len().saturating_sub(1)
    }
}

/// Reparameterization draws and Brownian increments for one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNoise {
    /// `R×2`, one row per particle.
    pub eps: Mat,
    /// One `R×2` increment per step, already scaled by `√Δt`.
    pub dw: Vec<Mat>,
}

impl BatchNoise {
    pub fn draw(rows: usize, n_steps: usize, stream: &mut Stream) -> Self {
        let mut streams = [stream.clone()];
        let mut eps = Mat::zeros(rows, LATENT_DIM);
        for v in eps.data_mut() {
            *v = rng::normal(&mut streams[0]);
        }
        let dt = 1.0 / n_steps as f64;
        let dw = (0..n_steps)
            .map(|_| {
                let flat = brownian_increment(&mut streams, rows * LATENT_DIM, dt);
                Mat::from_vec(rows, LATENT_DIM, flat.data().to_vec())
            })
            .collect();
        *stream = streams[0].clone();
        Self { eps, dw }
    }
}

/// Everything besides data and noise that the minibatch objective needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub weights: ElboWeights,
    /// Multiplier on the physics weights (the ramp).
    pub physics_scale: f64,
    pub n_particles: usize,
    pub method: StepMethod,
    pub field: FlowFieldSpec,
    /// Physical time per rollout step, for the PDE time derivative.
    pub phys_dt: f64,
}

struct LossVars {
    total: Var,
    parts: [Var; 5],
}

impl VsdeModel {
    #[allow(clippy::too_many_arguments)]
    fn loss_on_tape(&self, tape: &mut Tape, pv: &Bound, pc: &Bound, cnf: &CnfModel, batch: &TrainBatch, noise: &BatchNoise, spec: &LossSpec) -> Result<LossVars> {
        let np = spec.n_particles;
        let bt = batch.n_trajectories();
        let rows = bt * np;
        let k_steps = batch.n_steps();
        if noise.eps.shape() != (rows, LATENT_DIM) || noise.dw.len() != k_steps {
            return Err(Error::ShapeMismatch(format!("noise does not match {rows} rows × {k_steps} steps")));
        }
        if batch.seqs.iter().any(|s| s.rows() != bt) || batch.targets.iter().any(|t| t.rows() != bt) {
            return Err(Error::ShapeMismatch("minibatch matrices disagree on the trajectory count".into()));
        }
        let seq: Vec<Var> = batch.seqs.iter().map(|m| tape.constant(m.clone())).collect();
        let enc = self.encode_on_tape(tape, pv, &seq)?;
        let mu = tape.repeat_rows(enc.mu, np);
        let ls = tape.repeat_rows(enc.log_sigma, np);
        let sigma = tape.exp(ls);
        let eps = tape.constant(noise.eps.clone());
        let spread = tape.mul(sigma, eps);
        let z0 = tape.add(mu, spread);
        let ctx = tape.repeat_rows(enc.ctx, np);
        let cnf_ctx = tape.constant(Mat::from_fn(rows, batch.cnf_ctx.cols(), |r, c| batch.cnf_ctx.get(r / np, c)));

        let g = self.guardrail;
        let dt = 1.0 / k_steps as f64;
        let mut states = Vec::with_capacity(k_steps + 1);
        let mut controls = Vec::with_capacity(k_steps);
        let mut gamma = tape.guardrail(z0, g.radius, g.alpha);
        states.push(z0);
        for k in 0..k_steps {
            let s = self.step_on_tape(tape, pv, pc, cnf, states[k], k as f64 * dt, dt, spec.method, ctx, cnf_ctx, Some(&noise.dw[k]), RolloutOptions::default())?;
            let gk = tape.guardrail(s.next, g.radius, g.alpha);
            gamma = tape.add(gamma, gk);
            states.push(s.next);
            controls.extend(s.control);
        }
        let targets: Vec<Var> = batch
            .targets
            .iter()
            .map(|t| tape.constant(Mat::from_fn(rows, LATENT_DIM, |r, c| t.get(r / np, c))))
            .collect();
        let w = &spec.weights;
        let recon = recon_on_tape(tape, &states, &targets, gamma, w.sigma_obs, np)?;
        let kl = kl_on_tape(tape, enc.mu, enc.log_sigma);
        let control = control_cost_on_tape(tape, &controls, dt).ok_or(Error::EmptySequence)?;
        let energy = energy_on_tape(tape, &states, w.consts.rho)?;
        let pde = pde_on_tape(tape, &states, &spec.field, &w.consts, spec.phys_dt, w.stencil_h)?;

        let mut total = tape.scale(recon, -1.0);
        for (v, lambda) in [(kl, w.kl), (control, w.control), (energy, spec.physics_scale * w.phys), (pde, spec.physics_scale * w.pde)] {
            total = tape.add_scaled(total, v, lambda);
        }
        Ok(LossVars { total, parts: [recon, kl, control, energy, pde] })
    }

    fn components(tape: &Tape, v: &LossVars) -> ElboComponents {
        let p = v.parts.map(|x| tape.value(x).item());
        ElboComponents { recon_loglik: p[0], kl: p[1], control: p[2], energy: p[3], pde: p[4] }
    }

    /// Minibatch objective value and its terms.
    pub fn minibatch_loss(&self, cnf: &CnfModel, batch: &TrainBatch, noise: &BatchNoise, spec: &LossSpec) -> Result<(f64, ElboComponents)> {
        let mut tape = Tape::new();
        let pv = tape.bind(&self.store, false);
        let pc = cnf.bind_frozen(&mut tape);
        let v = self.loss_on_tape(&mut tape, &pv, &pc, cnf, batch, noise, spec)?;
        Ok((tape.value(v.total).item(), Self::components(&tape, &v)))
    }

    /// Objective value, terms, and gradients for every parameter in store order.
    pub fn minibatch_gradients(&self, cnf: &CnfModel, batch: &TrainBatch, noise: &BatchNoise, spec: &LossSpec) -> Result<(f64, ElboComponents, Vec<Mat>)> {
        let mut tape = Tape::new();
        let pv = tape.bind(&self.store, true);
        let pc = cnf.bind_frozen(&mut tape);
        let v = self.loss_on_tape(&mut tape, &pv, &pc, cnf, batch, noise, spec)?;
        let grads = tape.backward(v.total)?;
        let mut store = self.store.clone();
        store.zero_grads();
        pv.accumulate_grads(&grads, &mut store);
        let g = store.iter().map(|p| p.grad.clone()).collect();
        Ok((tape.value(v.total).item(), Self::components(&tape, &v), g))
    }
}

#[derive(Debug, Clone)]
pub struct VsdeTraining {
    pub model: VsdeModel,
    /// Mean minibatch objective per epoch.
    pub epoch_losses: Vec<f64>,
    /// Trajectory-weighted mean of each term over the last epoch.
    pub last_components: ElboComponents,
    pub optimizer_steps: u64,
}

/// Fits encoder, posterior network and diffusion level against a frozen flow.
pub fn train_vsde(bundle: &TrajectoryBundle, cnf: &CnfModel, cfg: &VsdeTrainConfig) -> Result<VsdeTraining> {
    cfg.validate()?;
    let mut model = VsdeModel::new(cfg.arch, cfg.guardrail_for(bundle), cfg.log_g0_init, cnf, &mut rng::substream(cfg.seed, domain::INIT, 1))?;
    let n = bundle.n_particles();
    let prefix = prefix_len(bundle.n_steps() + 1, cfg.prefix_fraction);
    let per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total_updates = per_epoch * cfg.epochs as u64;
    let mut opt = AdamW::new(schedule_for(cfg.optim, total_updates), model.store());
    let ramp_updates = (cfg.physics_ramp * total_updates as f64).ceil();
    let spec_for = |update: u64| LossSpec {
        weights: cfg.weights,
        physics_scale: if ramp_updates > 0.0 { (update as f64 / ramp_updates).min(1.0) } else { 1.0 },
        n_particles: cfg.n_particles,
        method: cfg.method,
        field: bundle.field,
        phys_dt: bundle.duration() / cfg.n_steps as f64,
    };
    let log_g0 = model.log_g0_id();
    // Decay would pull the diffusion level toward exp(0).
    opt.set_decay(log_g0, false);

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut last_components = ElboComponents::default();
    let mut tape = Tape::new();
    let mut update = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::substream(cfg.seed, domain::SHUFFLE, 1 << 32 | epoch as u64));
        let mut total = 0.0;
        let mut sums = [0.0; 5];
        for chunk in order.chunks(cfg.batch_size) {
            let rows = chunk.len() * cfg.n_particles;
            let noise = BatchNoise::draw(rows, cfg.n_steps, &mut rng::substream(cfg.seed, domain::VSDE_TRAIN, update));
            let spec = spec_for(update);
            // Every term is a mean over trajectories, so the minibatch gradient
            // is the trajectory-weighted sum over tapes of bounded size.
            let per_tape = (MAX_TAPE_ROWS / cfg.n_particles).max(1);
            let mut value = 0.0;
            let mut comps = [0.0; 5];
            for (s, sub) in chunk.chunks(per_tape).enumerate() {
                let batch = TrainBatch::from_bundle(bundle, sub, cnf, prefix, cfg.n_steps)?;
                let (r0, nr) = (s * per_tape * cfg.n_particles, sub.len() * cfg.n_particles);
                let sub_noise = BatchNoise { eps: noise.eps.slice_rows(r0, nr), dw: noise.dw.iter().map(|m| m.slice_rows(r0, nr)).collect() };
                let frac = sub.len() as f64 / chunk.len() as f64;
                tape.clear();
                let pv = tape.bind(model.store(), true);
                let pc = cnf.bind_frozen(&mut tape);
                let vars = model.loss_on_tape(&mut tape, &pv, &pc, cnf, &batch, &sub_noise, &spec).map_err(|e| match e {
                    Error::StepDiverged { step, norm } => Error::NonFinite {
                        component: "vsde_rollout".into(),
                        detail: format!("rollout diverged at step {step} (norm {norm}) in epoch {epoch}"),
                    },
                    other => other,
                })?;
                let v = tape.value(vars.total).item();
                let c = VsdeModel::components(&tape, &vars);
                if !v.is_finite() {
                    return Err(Error::NonFinite { component: "vsde_loss".into(), detail: format!("epoch {epoch}: {}", c.describe()) });
                }
                value += frac * v;
                for (acc, (_, x)) in comps.iter_mut().zip(c.named()) {
                    *acc += frac * x;
                }
                let weighted = tape.scale(vars.total, frac);
                let grads = tape.backward(weighted)?;
                pv.accumulate_grads(&grads, model.store_mut());
            }
            if !cfg.learnable_diffusion {
                let g = &mut model.store_mut().iter_mut().nth(log_g0.0).expect("log_g0 registered").grad;
                *g = Mat::zeros(1, 1);
            }
            clip_grad_norm(model.store_mut(), cfg.grad_clip);
            opt.step(model.store_mut())?;
            let w = chunk.len() as f64;
            total += value * w;
            for (s, v) in sums.iter_mut().zip(comps) {
                *s += v * w;
            }
            update += 1;
        }
        epoch_losses.push(total / n as f64);
        let m = sums.map(|s| s / n as f64);
        last_components = ElboComponents { recon_loglik: m[0], kl: m[1], control: m[2], energy: m[3], pde: m[4] };
    }
    Ok(VsdeTraining { model, epoch_losses, last_components, optimizer_steps: opt.step_count() })
}
