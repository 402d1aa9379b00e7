//! Conditional continuous normalizing flow on the plane.
//!
//! The flow integrates `dz/dt = g(z, t, c)` over unit time. Log-density
//! changes are tracked jointly with the state using the exact trace of the
//! 2×2 drift Jacobian, obtained from forward-mode tangents recorded on the
//! tape (so the trace itself stays differentiable for training).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::flow::{FlowFieldSpec, TrajectoryBundle};
use crate::geom::Vec2;
use crate::integrate::{step_deterministic, Plain, StepMethod, TimeGrid};
use crate::nn::{clip_grad_norm, fourier_embed, AdamW, AdamWConfig, Bound, Mat, Mlp, ParamStore, Tape, Var};
use crate::rng::{self, domain, Stream};
#[allow(unused_imports)] // test builds link std, whose inherent methods take precedence
use num_traits::Float;

pub const LATENT_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CnfObjective {
    /// Maximum likelihood of trajectory endpoints.
    Mle,
    /// Squared distance between endpoints and noise pushed through the flow.
    EndpointMse,
}

impl CnfObjective {
    pub fn name(self) -> &'static str {
        match self {
            CnfObjective::Mle => "mle",
            CnfObjective::EndpointMse => "endpoint_mse",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [CnfObjective::Mle, CnfObjective::EndpointMse].into_iter().find(|o| o.name() == s)
    }
}

/// One scalar of the conditioning vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextFeature {
    /// Velocity scale of the field (`U_max`, `Γ` or `γ`).
    Strength,
    /// Length scale of the field (`H`, `r_c` or `U_0`).
    Length,
    Diffusion,
    StartX,
    StartY,
}

impl ContextFeature {
    pub const ALL: [ContextFeature; 5] = [
        ContextFeature::Strength,
        ContextFeature::Length,
        ContextFeature::Diffusion,
        ContextFeature::StartX,
        ContextFeature::StartY,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ContextFeature::Strength => "strength",
            ContextFeature::Length => "length",
            ContextFeature::Diffusion => "diffusion",
            ContextFeature::StartX => "start_x",
            ContextFeature::StartY => "start_y",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }

    pub fn value(self, field: &FlowFieldSpec, diffusion: f64, x0: Vec2) -> f64 {
        match self {
            ContextFeature::Strength => field.scale_features()[0],
            ContextFeature::Length => field.scale_features()[1],
            ContextFeature::Diffusion => diffusion,
            ContextFeature::StartX => x0.x,
            ContextFeature::StartY => x0.y,
        }
    }
}

/// Unstandardized conditioning vector.
pub fn raw_context(features: &[ContextFeature], field: &FlowFieldSpec, diffusion: f64, x0: Vec2) -> Vec<f64> {
    features.iter().map(|f| f.value(field, diffusion, x0)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnfArch {
    pub hidden: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub n_freqs: usize,
    pub features: Vec<ContextFeature>,
}

impl Default for CnfArch {
    fn default() -> Self {
        Self {
            hidden: 64,
            depth: 3,
            n_freqs: 4,
            features: vec![ContextFeature::Strength, ContextFeature::Length, ContextFeature::Diffusion],
        }
    }
}

impl CnfArch {
    pub fn context_dim(&self) -> usize {
        self.features.len()
    }

    pub fn input_dim(&self) -> usize {
        LATENT_DIM + 2 * self.n_freqs + self.context_dim()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(core::iter::repeat_n(self.hidden, self.depth));
        s.push(LATENT_DIM);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.depth == 0 {
            return Err(Error::InvalidInput("drift network needs hidden >= 1 and depth >= 1".into()));
        }
        Ok(())
    }
}

/// Fixed-grid solver settings for the flow map over `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSolver {
    pub method: StepMethod,
    pub n_steps: usize,
}

impl Default for FlowSolver {
    fn default() -> Self {
        Self { method: StepMethod::Rk4, n_steps: 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Backbone {
    Network(Mlp),
    /// `g(z) = A z`, independent of time and context.
    Linear([[f64; 2]; 2]),
}

#[derive(Debug, Clone)]
pub struct CnfModel {
    store: ParamStore,
    backbone: Backbone,
    arch: CnfArch,
    ctx_mean: Vec<f64>,
    ctx_std: Vec<f64>,
    pub objective: CnfObjective,
}

impl CnfModel {
    /// Randomly initialized drift network.
    pub fn new(arch: CnfArch, stream: &mut Stream) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let net = Mlp::new(&mut store, "cnf", &arch.sizes(), stream);
        let c = arch.context_dim();
        Ok(Self {
            store,
            backbone: Backbone::Network(net),
            arch,
            ctx_mean: vec![0.0; c],
            ctx_std: vec![1.0; c],
            objective: CnfObjective::Mle,
        })
    }

    /// Drift network with every parameter set to zero.
    pub fn zeroed(arch: CnfArch) -> Result<Self> {
        let mut m = Self::new(arch, &mut rng::substream(0, domain::INIT, 0))?;
        for p in m.store.iter_mut() {
            p.value = Mat::zeros(p.value.rows(), p.value.cols());
        }
        Ok(m)
    }

    /// Analytic linear drift `g(z) = A z`; context is accepted but ignored.
    pub fn linear(a: [[f64; 2]; 2], arch: CnfArch) -> Self {
        let c = arch.context_dim();
        Self {
            store: ParamStore::new(),
            backbone: Backbone::Linear(a),
            arch,
            ctx_mean: vec![0.0; c],
            ctx_std: vec![1.0; c],
            objective: CnfObjective::Mle,
        }
    }

    /// Reassembles a network model from stored parameters.
    pub fn from_parts(store: ParamStore, arch: CnfArch, ctx_mean: Vec<f64>, ctx_std: Vec<f64>, objective: CnfObjective) -> Result<Self> {
        arch.validate()?;
        let net = Mlp::from_store(&store, "cnf", &arch.sizes())?;
        if net.layers().len() * 2 != store.len() {
            return Err(Error::ShapeMismatch(format!("expected {} drift parameters, found {}", net.layers().len() * 2, store.len())));
        }
        let mut m = Self { store, backbone: Backbone::Network(net), arch, ctx_mean: vec![], ctx_std: vec![], objective };
        m.set_context_stats(ctx_mean, ctx_std)?;
        Ok(m)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn arch(&self) -> &CnfArch {
        &self.arch
    }

    pub fn context_dim(&self) -> usize {
        self.arch.context_dim()
    }

    pub fn context_stats(&self) -> (&[f64], &[f64]) {
        (&self.ctx_mean, &self.ctx_std)
    }

    pub fn set_context_stats(&mut self, mean: Vec<f64>, std: Vec<f64>) -> Result<()> {
        let c = self.context_dim();
        if mean.len() != c || std.len() != c {
            return Err(Error::LengthMismatch { left: mean.len().max(std.len()), right: c });
        }
        if std.iter().any(|s| !(*s > 0.0 && s.is_finite())) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidInput("context statistics must be finite with positive spread".into()));
        }
        self.ctx_mean = mean;
        self.ctx_std = std;
        Ok(())
    }

    /// Parameter checksum; constant while the model is frozen.
    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    /// Standardized conditioning vector for one trajectory.
    pub fn context(&self, field: &FlowFieldSpec, diffusion: f64, x0: Vec2) -> Vec<f64> {
        self.standardize(&raw_context(&self.arch.features, field, diffusion, x0))
    }

    pub fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().zip(&self.ctx_mean).zip(&self.ctx_std).map(|((v, m), s)| (v - m) / s).collect()
    }

    /// Parameters as frozen tape leaves.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        tape.bind(&self.store, false)
    }

    /// Broadcasts a 1-row context to `rows` rows, or checks a per-row one.
    pub fn context_rows(&self, ctx: &Mat, rows: usize) -> Result<Mat> {
        if ctx.cols() != self.context_dim() {
            return Err(Error::ShapeMismatch(format!("context has {} entries, model expects {}", ctx.cols(), self.context_dim())));
        }
        match ctx.rows() {
            r if r == rows => Ok(ctx.clone()),
            1 => Ok(Mat::from_fn(rows, ctx.cols(), |_, c| ctx.get(0, c))),
            r => Err(Error::ShapeMismatch(format!("context has {r} rows for a batch of {rows}"))),
        }
    }

    fn net_input(&self, tape: &mut Tape, z: Var, t: f64, ctx: Var) -> Var {
        let rows = tape.shape(z).0;
        let e = fourier_embed(t, self.arch.n_freqs);
        let emb = tape.constant(Mat::from_fn(rows, e.len(), |_, c| e[c]));
        tape.concat(&[z, emb, ctx])
    }

    fn linear_const(tape: &mut Tape, a: &[[f64; 2]; 2]) -> Var {
        tape.constant(Mat::from_fn(2, 2, |i, j| a[j][i]))
    }

    /// Drift on the tape for a B×2 state and B×c standardized context.
    pub fn drift_on_tape(&self, tape: &mut Tape, p: &Bound, z: Var, t: f64, ctx: Var) -> Result<Var> {
        match &self.backbone {
            Backbone::Network(net) => {
                let x = self.net_input(tape, z, t, ctx);
                net.forward(tape, p, x)
            }
            Backbone::Linear(a) => {
                let at = Self::linear_const(tape, a);
                Ok(tape.matmul(z, at))
            }
        }
    }

    /// Drift plus its exact Jacobian columns `∂g/∂z_0`, `∂g/∂z_1` (each B×2).
    pub fn drift_with_jacobian_on_tape(&self, tape: &mut Tape, p: &Bound, z: Var, t: f64, ctx: Var) -> Result<(Var, [Var; 2])> {
        match &self.backbone {
            Backbone::Network(net) => {
                let x = self.net_input(tape, z, t, ctx);
                let (g, tan) = net.forward_with_tangents(tape, p, x, &[0, 1])?;
                Ok((g, [tan[0], tan[1]]))
            }
            Backbone::Linear(a) => {
                let rows = tape.shape(z).0;
                let at = Self::linear_const(tape, a);
                let g = tape.matmul(z, at);
                Ok((g, [tape.broadcast_row(at, 0, rows), tape.broadcast_row(at, 1, rows)]))
            }
        }
    }

    /// Drift and its divergence (B×1) on the tape.
    pub fn drift_and_divergence_on_tape(&self, tape: &mut Tape, p: &Bound, z: Var, t: f64, ctx: Var) -> Result<(Var, Var)> {
        let (g, [j0, j1]) = self.drift_with_jacobian_on_tape(tape, p, z, t, ctx)?;
        let d0 = tape.slice(j0, 0, 1);
        let d1 = tape.slice(j1, 1, 1);
        Ok((g, tape.add(d0, d1)))
    }

    /// Drift of the augmented state `[z, ℓ]` with `dℓ/dt = -div g`.
    fn augmented_drift_on_tape(&self, tape: &mut Tape, p: &Bound, s: Var, t: f64, ctx: Var) -> Result<Var> {
        let z = tape.slice(s, 0, LATENT_DIM);
        let (g, div) = self.drift_and_divergence_on_tape(tape, p, z, t, ctx)?;
        let neg = tape.scale(div, -1.0);
        Ok(tape.concat(&[g, neg]))
    }

    fn eval_plain<F>(&self, state: &Mat, ctx: &Mat, f: F) -> Result<Mat>
    where
        F: FnOnce(&Self, &mut Tape, &Bound, Var, Var) -> Result<Var>,
    {
        let ctx = self.context_rows(ctx, state.rows())?;
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let s = tape.constant(state.clone());
        let c = tape.constant(ctx);
        let out = f(self, &mut tape, &p, s, c)?;
        Ok(tape.value(out).clone())
    }

    /// Drift at every row of the B×2 state `z`.
    pub fn cnf_drift(&self, z: &Mat, t: f64, ctx: &Mat) -> Result<Mat> {
        check_state(z)?;
        self.eval_plain(z, ctx, |m, tape, p, z, c| m.drift_on_tape(tape, p, z, t, c))
    }

    /// Exact `tr(∂g/∂z)` per row.
    pub fn divergence(&self, z: &Mat, t: f64, ctx: &Mat) -> Result<Vec<f64>> {
        check_state(z)?;
        let d = self.eval_plain(z, ctx, |m, tape, p, z, c| Ok(m.drift_and_divergence_on_tape(tape, p, z, t, c)?.1))?;
        Ok(d.data().to_vec())
    }

    /// Drift Jacobian `[[∂g0/∂z0, ∂g0/∂z1], [∂g1/∂z0, ∂g1/∂z1]]` per row.
    pub fn jacobian(&self, z: &Mat, t: f64, ctx: &Mat) -> Result<Vec<[[f64; 2]; 2]>> {
        check_state(z)?;
        let cols = self.eval_plain(z, ctx, |m, tape, p, z, c| {
            let (_, [j0, j1]) = m.drift_with_jacobian_on_tape(tape, p, z, t, c)?;
            Ok(tape.concat(&[j0, j1]))
        })?;
        Ok((0..z.rows())
            .map(|r| [[cols.get(r, 0), cols.get(r, 2)], [cols.get(r, 1), cols.get(r, 3)]])
            .collect())
    }

    fn run_augmented(&self, start: &Mat, ctx: &Mat, solver: FlowSolver, reverse: bool) -> Result<Mat> {
        check_state(start)?;
        if solver.n_steps == 0 {
            return Err(Error::InvalidInput("flow solver needs at least one step".into()));
        }
        let ctx = self.context_rows(ctx, start.rows())?;
        let h = 1.0 / solver.n_steps as f64;
        let mut s = Mat::hcat(&[start, &Mat::zeros(start.rows(), 1)]);
        let mut drift = |_: &mut Plain, s: &Mat, t: f64| self.eval_plain(s, &ctx, |m, tape, p, s, c| m.augmented_drift_on_tape(tape, p, s, t, c));
        for k in 0..solver.n_steps {
            let (t, dt) = if reverse { (1.0 - k as f64 * h, -h) } else { (k as f64 * h, h) };
            s = step_deterministic(&mut Plain, solver.method, &mut drift, &s, t, dt).map_err(|e| at_step(e, k + 1))?;
        }
        Ok(s)
    }

    fn split_augmented(s: Mat) -> (Mat, Vec<f64>) {
        let l = (0..s.rows()).map(|r| s.get(r, LATENT_DIM)).collect();
        (s.slice_cols(0, LATENT_DIM), l)
    }

    /// Pushes base samples to `t = 1`; returns the endpoints and `∫₀¹ -div dt` per row.
    pub fn forward_map(&self, z0: &Mat, ctx: &Mat, solver: FlowSolver) -> Result<(Mat, Vec<f64>)> {
        Ok(Self::split_augmented(self.run_augmented(z0, ctx, solver, false)?))
    }

    /// Integrates the same ODE from `t = 1` back to `t = 0`.
    ///
    /// The returned log-density change is accumulated along the reversed
    /// path, so it is the negative of the forward one.
    pub fn inverse_map(&self, x: &Mat, ctx: &Mat, solver: FlowSolver) -> Result<(Mat, Vec<f64>)> {
        Ok(Self::split_augmented(self.run_augmented(x, ctx, solver, true)?))
    }

    /// Model log-density of every row of `x`.
    pub fn log_prob(&self, x: &Mat, ctx: &Mat, solver: FlowSolver) -> Result<Vec<f64>> {
        let (z0, dl_rev) = self.inverse_map(x, ctx, solver)?;
        Ok((0..x.rows()).map(|r| std_normal_logpdf(z0.row(r)) - dl_rev[r]).collect())
    }

    /// Deterministic flow path on `grid` (no log-density tracking).
    pub fn cnf_path(&self, z0: &Mat, ctx: &Mat, method: StepMethod, grid: &TimeGrid) -> Result<Vec<Mat>> {
        check_state(z0)?;
        let ctx = self.context_rows(ctx, z0.rows())?;
        let dt = grid.dt();
        let mut drift = |_: &mut Plain, z: &Mat, t: f64| self.eval_plain(z, &ctx, |m, tape, p, z, c| m.drift_on_tape(tape, p, z, t, c));
        let mut path = Vec::with_capacity(grid.n_steps + 1);
        path.push(z0.clone());
        for k in 0..grid.n_steps {
            let z = step_deterministic(&mut Plain, method, &mut drift, &path[k], grid.time(k), dt).map_err(|e| at_step(e, k + 1))?;
            path.push(z);
        }
        Ok(path)
    }

    /// `n` endpoints of the flow applied to standard normal draws.
    pub fn cnf_sample(&self, n: usize, ctx: &Mat, solver: FlowSolver, stream: &mut Stream) -> Result<Mat> {
        let z0 = standard_normal_rows(n, stream);
        Ok(self.forward_map(&z0, ctx, solver)?.0)
    }

    fn mle_loss(&self, tape: &mut Tape, p: &Bound, x: &Mat, ctx: &Mat, solver: FlowSolver) -> Result<Var> {
        let h = 1.0 / solver.n_steps as f64;
        let c = tape.constant(ctx.clone());
        let mut s = tape.constant(Mat::hcat(&[x, &Mat::zeros(x.rows(), 1)]));
        let mut drift = |tape: &mut Tape, s: &Var, t: f64| self.augmented_drift_on_tape(tape, p, *s, t, c);
        for k in 0..solver.n_steps {
            s = step_deterministic(tape, solver.method, &mut drift, &s, 1.0 - k as f64 * h, -h).map_err(|e| at_step(e, k + 1))?;
        }
        let z0 = tape.slice(s, 0, LATENT_DIM);
        let l = tape.slice(s, LATENT_DIM, 1);
        let sq = tape.square(z0);
        let r = tape.row_sum(sq);
        let half = tape.scale(r, 0.5);
        let nll = tape.add(half, l);
        let nll = tape.offset(nll, (2.0 * PI).ln());
        Ok(tape.mean_all(nll))
    }

    fn endpoint_mse_loss(&self, tape: &mut Tape, p: &Bound, x: &Mat, ctx: &Mat, solver: FlowSolver, stream: &mut Stream) -> Result<Var> {
        let h = 1.0 / solver.n_steps as f64;
        let c = tape.constant(ctx.clone());
        let mut z = tape.constant(standard_normal_rows(x.rows(), stream));
        let mut drift = |tape: &mut Tape, z: &Var, t: f64| self.drift_on_tape(tape, p, *z, t, c);
        for k in 0..solver.n_steps {
            z = step_deterministic(tape, solver.method, &mut drift, &z, k as f64 * h, h).map_err(|e| at_step(e, k + 1))?;
        }
        let target = tape.constant(x.clone());
        let d = tape.sub(z, target);
        let sq = tape.square(d);
        let total = tape.sum_all(sq);
        Ok(tape.scale(total, 1.0 / x.rows() as f64))
    }
}

fn check_state(z: &Mat) -> Result<()> {
    if z.cols() != LATENT_DIM {
        return Err(Error::ShapeMismatch(format!("state has {} columns, expected {LATENT_DIM}", z.cols())));
    }
    if !z.is_finite() {
        return Err(Error::InvalidInput("non-finite state".into()));
    }
    Ok(())
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::StepDiverged { norm, .. } => Error::StepDiverged { step, norm },
        other => other,
    }
}

/// `log N(z; 0, I)` in any dimension.
pub fn std_normal_logpdf(z: &[f64]) -> f64 {
    -0.5 * z.len() as f64 * (2.0 * PI).ln() - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

pub(crate) fn standard_normal_rows(n: usize, stream: &mut Stream) -> Mat {
    let mut m = Mat::zeros(n, LATENT_DIM);
    for r in 0..n {
        let [a, b] = rng::normal2(stream);
        m.set(r, 0, a);
        m.set(r, 1, b);
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnfTrainConfig {
    pub arch: CnfArch,
    pub objective: CnfObjective,
    pub batch_size: usize,
    pub epochs: usize,
    /// Maximum number of training endpoints used.
    pub limit: usize,
    pub optim: AdamWConfig,
    pub solver: FlowSolver,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for CnfTrainConfig {
    fn default() -> Self {
        Self {
            arch: CnfArch::default(),
            objective: CnfObjective::Mle,
            batch_size: 512,
            epochs: 8,
            limit: 1024,
            optim: AdamWConfig { lr: 0.002, ..AdamWConfig::default() },
            solver: FlowSolver { method: StepMethod::Rk4, n_steps: 8 },
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

impl CnfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.batch_size == 0 || self.limit == 0 || self.solver.n_steps == 0 {
            return Err(Error::InvalidInput("batch size, limit and solver steps must be >= 1".into()));
        }
        if !(self.optim.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::InvalidInput("learning rate and gradient clip must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CnfTraining {
    pub model: CnfModel,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub optimizer_steps: u64,
}

/// Total optimizer steps and a warmup no longer than a tenth of them.
pub(crate) fn schedule_for(base: AdamWConfig, total: u64) -> AdamWConfig {
    AdamWConfig { total_steps: total.max(1), warmup_steps: base.warmup_steps.min(total / 10), ..base }
}

/// Fits the flow to trajectory endpoints conditioned on their context.
pub fn train_cnf(bundle: &TrajectoryBundle, cfg: &CnfTrainConfig) -> Result<CnfTraining> {
    cfg.validate()?;
    let mut model = CnfModel::new(cfg.arch.clone(), &mut rng::substream(cfg.seed, domain::INIT, 0))?;
    model.objective = cfg.objective;

    let mut order: Vec<usize> = (0..bundle.n_particles()).collect();
    order.shuffle(&mut rng::substream(cfg.seed, domain::SHUFFLE, u64::MAX));
    order.truncate(cfg.limit);
    let n = order.len();
    let c = model.context_dim();
    let raw: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| raw_context(&cfg.arch.features, &bundle.field, bundle.diffusion, bundle.initial_position(i)))
        .collect();
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for j in 0..c {
        mean[j] = raw.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = raw.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
        std[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    model.set_context_stats(mean, std)?;
    let ctx: Vec<Vec<f64>> = raw.iter().map(|r| model.standardize(r)).collect();

    let per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let mut opt = AdamW::new(schedule_for(cfg.optim, per_epoch * cfg.epochs as u64), &model.store);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::substream(cfg.seed, domain::SHUFFLE, epoch as u64));
        let mut total = 0.0;
        for (b, chunk) in idx.chunks(cfg.batch_size).enumerate() {
            let x = Mat::from_fn(chunk.len(), LATENT_DIM, |r, col| bundle.final_position(order[chunk[r]]).to_array()[col]);
            let cm = Mat::from_fn(chunk.len(), c, |r, col| ctx[chunk[r]][col]);
            tape.clear();
            let p = tape.bind(&model.store, true);
            let loss = match cfg.objective {
                CnfObjective::Mle => model.mle_loss(&mut tape, &p, &x, &cm, cfg.solver),
                CnfObjective::EndpointMse => {
                    let mut s = rng::substream(cfg.seed, domain::CNF_BASE, (epoch as u64) << 32 | b as u64);
                    model.endpoint_mse_loss(&mut tape, &p, &x, &cm, cfg.solver, &mut s)
                }
            };
            let loss = loss.map_err(|e| match e {
                Error::StepDiverged { step, norm } => Error::NonFinite {
                    component: "cnf_loss".into(),
                    detail: format!("flow diverged at step {step} (norm {norm}) in epoch {epoch}, batch {b}"),
                },
                other => other,
            })?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite { component: "cnf_loss".into(), detail: format!("loss {value} in epoch {epoch}, batch {b}") });
            }
            let grads = tape.backward(loss)?;
            p.accumulate_grads(&grads, &mut model.store);
            clip_grad_norm(&mut model.store, cfg.grad_clip);
            opt.step(&mut model.store)?;
            total += value * chunk.len() as f64;
        }
        epoch_losses.push(total / n as f64);
    }
    Ok(CnfTraining { model, epoch_losses, optimizer_steps: opt.step_count() })
}
