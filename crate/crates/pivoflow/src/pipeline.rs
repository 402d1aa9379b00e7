//! Stage driver: simulate, train the flow, train the controller, infer, evaluate.

use std::fmt::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pivoflow_core::cnf::train_cnf;
use pivoflow_core::flow::generate_bundle;
use pivoflow_core::vsde::train_vsde;

use crate::bundle_io::{self, read_bundle, write_bundle};
use crate::checkpoint::{self, read_cnf, read_vsde, write_cnf, write_vsde};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::predictions::{self, predict, read_predictions, write_predictions, InferOptions};
use crate::report::{emit_report, EvalReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    TrainCnf,
    TrainVsde,
    Infer,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Simulate, Stage::TrainCnf, Stage::TrainVsde, Stage::Infer, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::TrainCnf => "train-cnf",
            Stage::TrainVsde => "train-vsde",
            Stage::Infer => "infer",
            Stage::Eval => "eval",
        }
    }
}

/// Artifact locations with relative config paths resolved against a root.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub train: PathBuf,
    pub validation: PathBuf,
    pub cnf: PathBuf,
    pub vsde: PathBuf,
    pub predictions: PathBuf,
    pub report: PathBuf,
    pub logs: PathBuf,
}

impl Layout {
    pub fn new(cfg: &PipelineConfig, root: &Path) -> Self {
        let p = &cfg.paths;
        let data = root.join(&p.data_dir);
        let ckpt = root.join(&p.checkpoint_dir);
        Self {
            train: data.join("train"),
            validation: data.join("validation"),
            cnf: ckpt.join("cnf"),
            vsde: ckpt.join("vsde"),
            predictions: root.join(&p.predictions_dir),
            report: root.join(&p.report_dir),
            logs: root.join(&p.log_dir),
        }
    }

    pub fn log(&self, stage: Stage) -> PathBuf {
        self.logs.join(format!("{}.log", stage.name()))
    }
}

/// What one stage did, as written to its run log.
#[derive(Debug, Clone, PartialEq)]
pub struct StageLog {
    pub stage: Stage,
    pub wall_time_s: f64,
    /// `key: value` lines after the common header.
    pub entries: Vec<(String, String)>,
}

impl StageLog {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// SHA-256 over the sorted names and contents of every file in `dir`.
pub fn artifact_hash(dir: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    names.sort();
    let mut listing = String::new();
    for p in names.iter().filter(|p| p.is_file()) {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let _ = writeln!(listing, "{name} {}", fsutil::sha256_hex(&fsutil::read(p)?));
    }
    Ok(fsutil::sha256_hex(listing.as_bytes()))
}

fn require(stage: Stage, dir: &Path, manifest: &str, what: &str) -> Result<()> {
    if dir.join(manifest).is_file() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite { stage: stage.name(), what: format!("{what} ({})", dir.display()) })
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn run_stage(stage: Stage, cfg: &PipelineConfig, layout: &Layout) -> Result<Vec<(String, String)>> {
    let mut e: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| e.push((k.to_string(), v));
    match stage {
        Stage::Simulate => {
            let bundle = generate_bundle(&cfg.sim_config()?)?;
            let (train, val) = bundle.split(cfg.trajectory.validation_fraction)?;
            write_bundle(&layout.train, &train)?;
            write_bundle(&layout.validation, &val)?;
            put("seed", cfg.trajectory.seed.to_string());
            put("train_particles", train.n_particles().to_string());
            put("validation_particles", val.n_particles().to_string());
            put("train_sha256", artifact_hash(&layout.train)?);
            put("validation_sha256", artifact_hash(&layout.validation)?);
        }
        Stage::TrainCnf => {
            require(stage, &layout.train, bundle_io::MANIFEST, "training bundle")?;
            let train = read_bundle(&layout.train)?;
            let ccfg = cfg.cnf_train_config();
            let t = train_cnf(&train, &ccfg)?;
            write_cnf(&layout.cnf, &t.model, t.optimizer_steps)?;
            put("seed", ccfg.seed.to_string());
            put("input_sha256", artifact_hash(&layout.train)?);
            put("optimizer_steps", t.optimizer_steps.to_string());
            put("epoch_losses", fmt_list(&t.epoch_losses));
            put("final_loss", t.epoch_losses.last().map_or("none".into(), |v| v.to_string()));
            put("cnf_sha256", artifact_hash(&layout.cnf)?);
        }
        Stage::TrainVsde => {
            require(stage, &layout.train, bundle_io::MANIFEST, "training bundle")?;
            require(stage, &layout.cnf, checkpoint::MODEL_MANIFEST, "CNF checkpoint")?;
            let train = read_bundle(&layout.train)?;
            let cnf = read_cnf(&layout.cnf)?;
            let vcfg = cfg.vsde_train_config();
            let t = train_vsde(&train, &cnf, &vcfg)?;
            write_vsde(&layout.vsde, &t.model, t.optimizer_steps)?;
            put("seed", vcfg.seed.to_string());
            put("input_sha256", artifact_hash(&layout.train)?);
            put("cnf_sha256", artifact_hash(&layout.cnf)?);
            put("optimizer_steps", t.optimizer_steps.to_string());
            put("epoch_losses", fmt_list(&t.epoch_losses));
            put("final_loss", t.epoch_losses.last().map_or("none".into(), |v| v.to_string()));
            put("final_components", t.last_components.describe());
            put("log_g0", t.model.log_g0().to_string());
            put("vsde_sha256", artifact_hash(&layout.vsde)?);
        }
        Stage::Infer => {
            require(stage, &layout.validation, bundle_io::MANIFEST, "validation bundle")?;
            require(stage, &layout.cnf, checkpoint::MODEL_MANIFEST, "CNF checkpoint")?;
            require(stage, &layout.vsde, checkpoint::MODEL_MANIFEST, "VSDE checkpoint")?;
            let val = read_bundle(&layout.validation)?;
            let cnf = read_cnf(&layout.cnf)?;
            let vsde = read_vsde(&layout.vsde)?;
            let i = &cfg.inference;
            let opts = InferOptions {
                n_particles: i.particles,
                n_steps: i.steps,
                method: i.integrator,
                seed: i.seed,
                prefix_fraction: cfg.vsde.prefix_fraction,
                trajectories: i.trajectories,
                compare_trajectories: if i.compare_integrators { i.compare_trajectories } else { 0 },
            };
            let p = predict(&vsde, &cnf, &val, &opts)?;
            write_predictions(&layout.predictions, &p)?;
            put("seed", i.seed.to_string());
            put("integrator", i.integrator.name().to_string());
            put("trajectories", p.trajectory_ids.len().to_string());
            put("diverged_particles", p.diverged_particles.to_string());
            put("predictions_sha256", artifact_hash(&layout.predictions)?);
        }
        Stage::Eval => {
            require(stage, &layout.validation, bundle_io::MANIFEST, "validation bundle")?;
            require(stage, &layout.predictions, predictions::MANIFEST, "predictions")?;
            let val = read_bundle(&layout.validation)?;
            let p = read_predictions(&layout.predictions)?;
            let r = EvalReport::build(cfg.flow_regime(), &val, &p, &cfg.eval)?;
            let files = emit_report(&r, &layout.report)?;
            if let Some(c) = &r.comparison {
                put("cnf_mae", c.cnf.mean.to_string());
                put("vsde_mae", c.vsde.mean.to_string());
                put("reduction_pct", c.reduction_pct.map_or("none".into(), |v| v.to_string()));
            }
            for row in &r.integrators {
                put(&format!("vsde_mae.{}", row.method.name()), row.vsde_mae.to_string());
            }
            if let Some(s) = r.integrator_spread {
                put("integrator_spread", s.to_string());
            }
            put("report_files", files.files.len().to_string());
            put("report_sha256", artifact_hash(&layout.report)?);
        }
    }
    Ok(e)
}

fn write_log(layout: &Layout, cfg: &PipelineConfig, log: &StageLog) -> Result<()> {
    let mut text = format!("stage: {}\nconfig_sha256: {}\nwall_time_s: {:.3}\n", log.stage.name(), cfg.hash(), log.wall_time_s);
    for (k, v) in &log.entries {
        let _ = writeln!(text, "{k}: {v}");
    }
    fsutil::write_atomic(&layout.log(log.stage), text.as_bytes())
}

/// Runs the given stages in order, stopping at the first failure.
///
/// Every stage replaces its artifact directory atomically and writes a run
/// log; errors carry the failing stage's name.
pub fn run_stages(stages: &[Stage], cfg: &PipelineConfig, root: &Path, mut progress: impl FnMut(&StageLog)) -> Result<Vec<StageLog>> {
    cfg.validate()?;
    let layout = Layout::new(cfg, root);
    let mut logs = Vec::new();
    for &stage in stages {
        let start = Instant::now();
        let entries = run_stage(stage, cfg, &layout).map_err(|e| e.in_stage(stage.name()))?;
        let log = StageLog { stage, wall_time_s: start.elapsed().as_secs_f64(), entries };
        write_log(&layout, cfg, &log).map_err(|e| e.in_stage(stage.name()))?;
        progress(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// `all` expands to every stage.
pub fn stages_for(command: &str) -> Option<Vec<Stage>> {
    if command == "all" {
        return Some(Stage::ALL.to_vec());
    }
    Stage::ALL.into_iter().find(|s| s.name() == command).map(|s| vec![s])
}

pub fn run_pipeline(command: &str, cfg: &PipelineConfig, root: &Path) -> Result<Vec<StageLog>> {
    let stages = stages_for(command).ok_or_else(|| Error::Config(format!("unknown command {command:?}")))?;
    run_stages(&stages, cfg, root, |_| {})
}
