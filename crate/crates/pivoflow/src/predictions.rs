//! Ensemble predictions for held-out trajectories and their on-disk form.

use std::path::Path;

use pivoflow_core::cnf::CnfModel;
use pivoflow_core::flow::TrajectoryBundle;
use pivoflow_core::integrate::StepMethod;
use pivoflow_core::rng::{self, domain, Stream};
use pivoflow_core::vsde::{cnf_baseline, infer_batch, prefix_len, InferenceRequest, RolloutOptions, VsdeModel};
use pivoflow_core::Vec2;

use crate::bundle_io::{check_version, read_checked};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::manifest::{join, Manifest};

pub const FORMAT_VERSION: &str = "1";
pub const MANIFEST: &str = "manifest.txt";

/// Stream domain for the flow-only baseline draws.
pub const BASELINE_DOMAIN: u64 = domain::CNF_BASE ^ domain::INFER;

#[derive(Debug, Clone, PartialEq)]
pub struct InferOptions {
    pub n_particles: usize,
    pub n_steps: usize,
    pub method: StepMethod,
    pub seed: u64,
    pub prefix_fraction: f64,
    /// Leading validation trajectories to predict; 0 means all.
    pub trajectories: usize,
    /// Leading trajectories re-predicted with every integrator; 0 disables.
    pub compare_trajectories: usize,
}

/// Finals from both models for one integrator.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodFinals {
    pub method: StepMethod,
    pub vsde: Vec<Vec<Vec2>>,
    pub cnf: Vec<Vec<Vec2>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub method: StepMethod,
    pub n_particles: usize,
    pub n_steps: usize,
    /// Physical time spanned by the unit flow-time grid.
    pub duration: f64,
    /// Validation-bundle index of each predicted trajectory.
    pub trajectory_ids: Vec<usize>,
    /// Surviving particle finals per trajectory.
    pub vsde_finals: Vec<Vec<Vec2>>,
    pub cnf_finals: Vec<Vec<Vec2>>,
    pub vsde_mean_paths: Vec<Vec<Vec2>>,
    pub cnf_mean_paths: Vec<Vec<Vec2>>,
    pub diverged_particles: usize,
    pub comparisons: Vec<MethodFinals>,
}

impl Predictions {
    /// Physical time step between consecutive predicted states.
    pub fn step_dt(&self) -> f64 {
        self.duration / self.n_steps as f64
    }
}

fn streams(seed: u64, domain: u64, ids: &[usize], np: usize) -> Vec<Stream> {
    ids.iter().flat_map(|&i| (0..np).map(move |j| rng::substream(seed, domain, (i * np + j) as u64))).collect()
}

struct Run {
    vsde_finals: Vec<Vec<Vec2>>,
    cnf_finals: Vec<Vec<Vec2>>,
    vsde_mean_paths: Vec<Vec<Vec2>>,
    cnf_mean_paths: Vec<Vec<Vec2>>,
    diverged: usize,
}

fn run(vsde: &VsdeModel, cnf: &CnfModel, val: &TrajectoryBundle, ids: &[usize], opts: &InferOptions, method: StepMethod) -> Result<Run> {
    let np = opts.n_particles;
    let prefix = prefix_len(val.n_steps() + 1, opts.prefix_fraction);
    let times = &val.time_grid()[..prefix];
    let ctxs: Vec<Vec<f64>> = ids.iter().map(|&i| cnf.context(&val.field, val.diffusion, val.initial_position(i))).collect();
    let requests: Vec<InferenceRequest> = ids
        .iter()
        .zip(&ctxs)
        .map(|(&i, c)| InferenceRequest { prefix: &val.trajectory(i)[..prefix], times, cnf_ctx: c.clone() })
        .collect();
    let mut vs = streams(opts.seed, domain::INFER, ids, np);
    let ensembles = infer_batch(vsde, cnf, &requests, np, opts.n_steps, method, &mut vs, RolloutOptions::default())?;
    let mut out = Run { vsde_finals: vec![], cnf_finals: vec![], vsde_mean_paths: vec![], cnf_mean_paths: vec![], diverged: 0 };
    for (k, e) in ensembles.into_iter().enumerate() {
        out.diverged += e.failures.len();
        out.vsde_finals.push(e.finals());
        out.vsde_mean_paths.push(e.mean_path);
        let mut bs = streams(opts.seed, BASELINE_DOMAIN, &ids[k..k + 1], np);
        let b = cnf_baseline(cnf, &ctxs[k], opts.n_steps, method, &mut bs)?;
        out.cnf_finals.push(b.finals());
        out.cnf_mean_paths.push(b.mean_path);
    }
    Ok(out)
}

/// Predicts held-out trajectories with the controller and the flow-only
/// baseline, using per-(trajectory, particle) streams so that every
/// integrator sees the same noise.
pub fn predict(vsde: &VsdeModel, cnf: &CnfModel, val: &TrajectoryBundle, opts: &InferOptions) -> Result<Predictions> {
    let n = if opts.trajectories == 0 { val.n_particles() } else { opts.trajectories.min(val.n_particles()) };
    let ids: Vec<usize> = (0..n).collect();
    let main = run(vsde, cnf, val, &ids, opts, opts.method)?;
    let mut comparisons = Vec::new();
    if opts.compare_trajectories > 0 {
        let sub = &ids[..opts.compare_trajectories.min(n)];
        for method in StepMethod::ALL {
            let r = run(vsde, cnf, val, sub, opts, method)?;
            comparisons.push(MethodFinals { method, vsde: r.vsde_finals, cnf: r.cnf_finals });
        }
    }
    Ok(Predictions {
        method: opts.method,
        n_particles: opts.n_particles,
        n_steps: opts.n_steps,
        duration: val.duration(),
        trajectory_ids: ids,
        vsde_finals: main.vsde_finals,
        cnf_finals: main.cnf_finals,
        vsde_mean_paths: main.vsde_mean_paths,
        cnf_mean_paths: main.cnf_mean_paths,
        diverged_particles: main.diverged,
        comparisons,
    })
}

/// Ragged point sets as (lengths, flat coordinates).
fn flatten(sets: &[Vec<Vec2>]) -> (Vec<f64>, Vec<f64>) {
    let lens = sets.iter().map(|s| s.len() as f64).collect();
    let flat = sets.iter().flatten().flat_map(|p| [p.x, p.y]).collect();
    (lens, flat)
}

fn unflatten(lens: &[f64], flat: &[f64]) -> Option<Vec<Vec<Vec2>>> {
    let mut out = Vec::with_capacity(lens.len());
    let mut at = 0;
    for &l in lens {
        if l < 0.0 || l.fract() != 0.0 {
            return None;
        }
        let l = l as usize;
        let pts = flat.get(2 * at..2 * (at + l))?;
        out.push(pts.chunks_exact(2).map(|c| Vec2::new(c[0], c[1])).collect());
        at += l;
    }
    (2 * at == flat.len()).then_some(out)
}

fn ragged_arrays(prefix: &str, sets: &[Vec<Vec2>]) -> [(String, Vec<f64>); 2] {
    let (lens, flat) = flatten(sets);
    [(format!("{prefix}.lens"), lens), (format!("{prefix}.points"), flat)]
}

pub fn write_predictions(dir: &Path, p: &Predictions) -> Result<()> {
    let mut arrays: Vec<(String, Vec<f64>)> = vec![("trajectory_ids".into(), p.trajectory_ids.iter().map(|&i| i as f64).collect())];
    arrays.extend(ragged_arrays("vsde_finals", &p.vsde_finals));
    arrays.extend(ragged_arrays("cnf_finals", &p.cnf_finals));
    arrays.extend(ragged_arrays("vsde_mean_paths", &p.vsde_mean_paths));
    arrays.extend(ragged_arrays("cnf_mean_paths", &p.cnf_mean_paths));
    for c in &p.comparisons {
        arrays.extend(ragged_arrays(&format!("compare.{}.vsde_finals", c.method.name()), &c.vsde));
        arrays.extend(ragged_arrays(&format!("compare.{}.cnf_finals", c.method.name()), &c.cnf));
    }
    let mut m = Manifest::new();
    m.push("format_version", FORMAT_VERSION)
        .push("integrator", p.method.name())
        .push("n_particles", p.n_particles)
        .push("n_steps", p.n_steps)
        .push("duration", p.duration)
        .push("diverged_particles", p.diverged_particles)
        .push("compared_integrators", join(&p.comparisons.iter().map(|c| c.method.name()).collect::<Vec<_>>()));
    let blobs: Vec<(String, Vec<u8>)> = arrays.into_iter().map(|(name, v)| (name, fsutil::f64s_to_le(v))).collect();
    for (name, bytes) in &blobs {
        m.push(format!("array.{name}.sha256"), fsutil::sha256_hex(bytes));
    }
    fsutil::replace_dir(dir, |stage| {
        for (name, bytes) in &blobs {
            fsutil::write_atomic(&stage.join(format!("{name}.f64le")), bytes)?;
        }
        m.write(&stage.join(MANIFEST))
    })
}

pub fn read_predictions(dir: &Path) -> Result<Predictions> {
    let mpath = dir.join(MANIFEST);
    let m = Manifest::read(&mpath)?;
    check_version(&m, &mpath, FORMAT_VERSION)?;
    let array = |name: &str| -> Result<Vec<f64>> {
        let path = dir.join(format!("{name}.f64le"));
        let bytes = read_checked(&path, m.get(&format!("array.{name}.sha256"))?)?;
        fsutil::le_to_f64s(&bytes).ok_or_else(|| Error::ShapeInconsistency { path, detail: "not a whole number of doubles".into() })
    };
    let ragged = |prefix: &str| -> Result<Vec<Vec<Vec2>>> {
        unflatten(&array(&format!("{prefix}.lens"))?, &array(&format!("{prefix}.points"))?)
            .ok_or_else(|| Error::ShapeInconsistency { path: dir.join(format!("{prefix}.points.f64le")), detail: "lengths do not match points".into() })
    };
    let method_of = |s: &str| StepMethod::from_name(s).ok_or_else(|| Error::Manifest { path: mpath.clone(), line: 0, detail: format!("unknown integrator {s}") });
    let mut comparisons = Vec::new();
    for name in m.parse_list::<String>("compared_integrators")? {
        comparisons.push(MethodFinals {
            method: method_of(&name)?,
            vsde: ragged(&format!("compare.{name}.vsde_finals"))?,
            cnf: ragged(&format!("compare.{name}.cnf_finals"))?,
        });
    }
    let p = Predictions {
        method: method_of(m.get("integrator")?)?,
        n_particles: m.parse_value("n_particles")?,
        n_steps: m.parse_value("n_steps")?,
        duration: m.parse_value("duration")?,
        trajectory_ids: array("trajectory_ids")?.into_iter().map(|v| v as usize).collect(),
        vsde_finals: ragged("vsde_finals")?,
        cnf_finals: ragged("cnf_finals")?,
        vsde_mean_paths: ragged("vsde_mean_paths")?,
        cnf_mean_paths: ragged("cnf_mean_paths")?,
        diverged_particles: m.parse_value("diverged_particles")?,
        comparisons,
    };
    let n = p.trajectory_ids.len();
    if [p.vsde_finals.len(), p.cnf_finals.len(), p.vsde_mean_paths.len(), p.cnf_mean_paths.len()].iter().any(|&l| l != n) {
        return Err(Error::ShapeInconsistency { path: mpath, detail: format!("arrays disagree on the trajectory count {n}") });
    }
    Ok(p)
}
