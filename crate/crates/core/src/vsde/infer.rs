use alloc::vec::Vec;

use super::{guardrail_weight, RolloutOptions, VsdeModel};
use crate::cnf::{CnfModel, LATENT_DIM};
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::integrate::{brownian_increment, StepMethod, TimeGrid};
use crate::nn::{Mat, Tape};
use crate::rng::{self, Stream};
#[allow(unused_imports)] // test builds link std, whose inherent methods take precedence
use num_traits::Float;

/// Rows integrated together; results do not depend on this.
const MAX_ROWS: usize = 2048;

/// Observed data for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRequest<'a> {
    pub prefix: &'a [Vec2],
    pub times: &'a [f64],
    /// Standardized flow context.
    pub cnf_ctx: Vec<f64>,
}

/// Decoded particle paths for one trajectory with summary statistics.
#[derive(Debug, Clone)]
pub struct Ensemble {
    /// Surviving paths, `[particle][step]`.
    pub paths: Vec<Vec<Vec2>>,
    /// Original particle index of each surviving path.
    pub particle_ids: Vec<usize>,
    /// Particles that diverged.
    pub failures: Vec<(usize, Error)>,
    /// Mean guardrail weight per surviving particle.
    pub gamma_bar: Vec<f64>,
    pub mean_path: Vec<Vec2>,
    /// RMS distance from the mean path per step.
    pub spread: Vec<f64>,
    /// Largest recorded control component magnitude.
    pub max_abs_control: f64,
}

impl Ensemble {
    fn from_paths(paths: Vec<Vec<Vec2>>, particle_ids: Vec<usize>, failures: Vec<(usize, Error)>, gamma_bar: Vec<f64>, max_abs_control: f64) -> Self {
        let n_states = paths.first().map_or(0, |p| p.len());
        let n = paths.len() as f64;
        let mut mean_path = Vec::with_capacity(n_states);
        let mut spread = Vec::with_capacity(n_states);
        for k in 0..n_states {
            let mut m = Vec2::ZERO;
            for p in &paths {
                m = m + p[k];
            }
            m = m * (1.0 / n);
            let var = paths.iter().map(|p| (p[k] - m).norm_sq()).sum::<f64>() / n;
            mean_path.push(m);
            spread.push(var.sqrt());
        }
        Self { paths, particle_ids, failures, gamma_bar, mean_path, spread, max_abs_control }
    }

    /// Ensemble-mean final position.
    pub fn final_mean(&self) -> Result<Vec2> {
        self.mean_path.last().copied().ok_or(Error::EmptyEnsemble)
    }

    /// Final position of every surviving particle.
    pub fn finals(&self) -> Vec<Vec2> {
        self.paths.iter().map(|p| *p.last().expect("paths are non-empty")).collect()
    }
}

/// A particle's path and mean guardrail weight, or why it diverged.
type ParticleOutcome = core::result::Result<(Vec<Vec2>, f64), Error>;

struct RowResult {
    states: Vec<Mat>,
    max_abs_control: f64,
}

/// Rolls out every row of `z0`; noise is drawn from `streams` every step.
#[allow(clippy::too_many_arguments)]
fn rollout_rows(
    vsde: &VsdeModel,
    cnf: &CnfModel,
    z0: Mat,
    ctx: &Mat,
    cnf_ctx: &Mat,
    n_steps: usize,
    method: StepMethod,
    streams: &mut [Stream],
    opts: RolloutOptions,
) -> Result<RowResult> {
    let dt = 1.0 / n_steps as f64;
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(z0);
    let mut max_abs_control: f64 = 0.0;
    for k in 0..n_steps {
        let dw = brownian_increment(streams, LATENT_DIM, dt);
        let mut tape = Tape::new();
        let pv = tape.bind(vsde.store(), false);
        let pc = cnf.bind_frozen(&mut tape);
        let z = tape.constant(states[k].clone());
        let c = tape.constant(ctx.clone());
        let cc = tape.constant(cnf_ctx.clone());
        let s = vsde
            .step_on_tape(&mut tape, &pv, &pc, cnf, z, k as f64 * dt, dt, method, c, cc, Some(&dw), opts)
            .map_err(|e| match e {
                Error::StepDiverged { norm, .. } => Error::StepDiverged { step: k + 1, norm },
                other => other,
            })?;
        if let Some(u) = s.control {
            max_abs_control = tape.value(u).data().iter().fold(max_abs_control, |m, v| m.max(v.abs()));
        }
        states.push(tape.value(s.next).clone());
    }
    Ok(RowResult { states, max_abs_control })
}

/// Runs the rows together, falling back to one row at a time so that a
/// diverging particle does not take the others with it.
#[allow(clippy::too_many_arguments)]
fn rollout_resilient(
    vsde: &VsdeModel,
    cnf: &CnfModel,
    z0: &Mat,
    ctx: &Mat,
    cnf_ctx: &Mat,
    n_steps: usize,
    method: StepMethod,
    streams: &mut [Stream],
    opts: RolloutOptions,
) -> Result<Vec<ParticleOutcome>> {
    let saved: Vec<Stream> = streams.to_vec();
    match rollout_rows(vsde, cnf, z0.clone(), ctx, cnf_ctx, n_steps, method, streams, opts) {
        Ok(r) => Ok((0..z0.rows())
            .map(|row| {
                let path = r.states.iter().map(|m| Vec2::new(m.get(row, 0), m.get(row, 1))).collect();
                Ok((path, r.max_abs_control))
            })
            .collect()),
        Err(Error::StepDiverged { .. }) => {
            let mut out = Vec::with_capacity(z0.rows());
            for row in 0..z0.rows() {
                let mut s = [saved[row].clone()];
                let one = |m: &Mat| m.slice_rows(row, 1);
                let r = rollout_rows(vsde, cnf, one(z0), &one(ctx), &one(cnf_ctx), n_steps, method, &mut s, opts);
                streams[row] = s[0].clone();
                out.push(match r {
                    Ok(r) => Ok((r.states.iter().map(|m| Vec2::new(m.get(0, 0), m.get(0, 1))).collect(), r.max_abs_control)),
                    Err(e @ Error::StepDiverged { .. }) => Err(e),
                    Err(e) => return Err(e),
                });
            }
            Ok(out)
        }
        Err(e) => Err(e),
    }
}

/// Posterior ensembles for many trajectories.
///
/// `streams` holds `n_particles` streams per request, request-major. Each
/// stream first supplies its particle's reparameterization draw, then one
/// Brownian increment per step.
#[allow(clippy::too_many_arguments)]
pub fn infer_batch(
    vsde: &VsdeModel,
    cnf: &CnfModel,
    requests: &[InferenceRequest<'_>],
    n_particles: usize,
    n_steps: usize,
    method: StepMethod,
    streams: &mut [Stream],
    opts: RolloutOptions,
) -> Result<Vec<Ensemble>> {
    vsde.check_backbone(cnf)?;
    if n_particles == 0 || n_steps == 0 {
        return Err(Error::InvalidInput("ensemble needs particles >= 1 and steps >= 1".into()));
    }
    if streams.len() != requests.len() * n_particles {
        return Err(Error::LengthMismatch { left: streams.len(), right: requests.len() * n_particles });
    }
    let ctx_dim = vsde.arch().ctx_dim;
    let per_chunk = (MAX_ROWS / n_particles).max(1);
    let mut out = Vec::with_capacity(requests.len());
    for (ci, chunk) in requests.chunks(per_chunk).enumerate() {
        let rows = chunk.len() * n_particles;
        let streams = &mut streams[ci * per_chunk * n_particles..][..rows];
        let mut z0 = Mat::zeros(rows, LATENT_DIM);
        let mut ctx = Mat::zeros(rows, ctx_dim);
        let mut cnf_ctx = Mat::zeros(rows, cnf.context_dim());
        for (i, req) in chunk.iter().enumerate() {
            if req.cnf_ctx.len() != cnf.context_dim() {
                return Err(Error::LengthMismatch { left: req.cnf_ctx.len(), right: cnf.context_dim() });
            }
            let post = vsde.encode_posterior(req.prefix, req.times)?;
            for j in 0..n_particles {
                let r = i * n_particles + j;
                let eps = rng::normal2(&mut streams[r]);
                for (c, e) in eps.iter().enumerate() {
                    z0.set(r, c, post.mu[c] + post.sigma[c] * e);
                }
                ctx.row_mut(r).copy_from_slice(&post.ctx);
                cnf_ctx.row_mut(r).copy_from_slice(&req.cnf_ctx);
            }
        }
        let results = rollout_resilient(vsde, cnf, &z0, &ctx, &cnf_ctx, n_steps, method, streams, opts)?;
        for group in results.chunks(n_particles) {
            let (mut paths, mut ids, mut fails, mut gammas) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            let mut umax: f64 = 0.0;
            for (j, r) in group.iter().enumerate() {
                match r {
                    Ok((p, u)) => {
                        gammas.push(p.iter().map(|z| guardrail_weight(*z, &vsde.guardrail)).sum::<f64>() / p.len() as f64);
                        paths.push(p.clone());
                        ids.push(j);
                        umax = umax.max(*u);
                    }
                    Err(e) => fails.push((j, e.clone())),
                }
            }
            out.push(Ensemble::from_paths(paths, ids, fails, gammas, umax));
        }
    }
    Ok(out)
}

/// Posterior ensemble for one trajectory.
#[allow(clippy::too_many_arguments)]
pub fn infer_ensemble(
    vsde: &VsdeModel,
    cnf: &CnfModel,
    request: &InferenceRequest<'_>,
    n_particles: usize,
    n_steps: usize,
    method: StepMethod,
    streams: &mut [Stream],
    opts: RolloutOptions,
) -> Result<Ensemble> {
    let mut v = infer_batch(vsde, cnf, core::slice::from_ref(request), n_particles, n_steps, method, streams, opts)?;
    Ok(v.remove(0))
}

/// Flow-only ensemble: standard normal draws from `streams` pushed along the
/// deterministic flow path on the same unit grid.
pub fn cnf_baseline(cnf: &CnfModel, cnf_ctx: &[f64], n_steps: usize, method: StepMethod, streams: &mut [Stream]) -> Result<Ensemble> {
    let n = streams.len();
    if n == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let mut z0 = Mat::zeros(n, LATENT_DIM);
    for (r, s) in streams.iter_mut().enumerate() {
        let e = rng::normal2(s);
        z0.set(r, 0, e[0]);
        z0.set(r, 1, e[1]);
    }
    let path = cnf.cnf_path(&z0, &Mat::row_vector(cnf_ctx), method, &TimeGrid::unit(n_steps)?)?;
    let paths: Vec<Vec<Vec2>> = (0..n).map(|r| path.iter().map(|m| Vec2::new(m.get(r, 0), m.get(r, 1))).collect()).collect();
    Ok(Ensemble::from_paths(paths, (0..n).collect(), Vec::new(), alloc::vec![1.0; n], 0.0))
}
