//! Parameter checkpoints and the model descriptions that accompany them.
//!
//! A checkpoint directory holds `params.txt` (names, shapes, optimizer step,
//! data checksum), `params.f64le` (values in store order, row-major) and
//! `model.txt` (architecture and everything else needed to rebuild).

use std::path::Path;

use pivoflow_core::cnf::{CnfArch, CnfModel, CnfObjective, ContextFeature, LATENT_DIM};
use pivoflow_core::nn::{Mat, ParamStore};
use pivoflow_core::vsde::{GuardrailConfig, VsdeArch, VsdeModel};

use crate::bundle_io::{check_version, read_checked};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::manifest::{join, Manifest};

pub const FORMAT_VERSION: &str = "1";
pub const PARAMS_MANIFEST: &str = "params.txt";
pub const PARAMS_DATA: &str = "params.f64le";
pub const MODEL_MANIFEST: &str = "model.txt";

fn params_manifest(store: &ParamStore, optimizer_step: u64, sha: &str) -> Manifest {
    let mut m = Manifest::new();
    m.push("format_version", FORMAT_VERSION).push("optimizer_step", optimizer_step).push("n_params", store.len());
    for (i, p) in store.iter().enumerate() {
        m.push(format!("param.{i}.name"), &p.name);
        m.push(format!("param.{i}.shape"), format!("{},{}", p.value.rows(), p.value.cols()));
    }
    m.push("data_sha256", sha);
    m
}

/// Writes `params.txt` and `params.f64le` into `dir`.
pub fn write_params(dir: &Path, store: &ParamStore, optimizer_step: u64) -> Result<()> {
    let data = fsutil::f64s_to_le(store.iter().flat_map(|p| p.value.data().to_vec()));
    fsutil::write_atomic(&dir.join(PARAMS_DATA), &data)?;
    params_manifest(store, optimizer_step, &fsutil::sha256_hex(&data)).write(&dir.join(PARAMS_MANIFEST))
}

/// Reads a parameter store and the optimizer step it was saved at.
pub fn read_params(dir: &Path) -> Result<(ParamStore, u64)> {
    let mpath = dir.join(PARAMS_MANIFEST);
    let m = Manifest::read(&mpath)?;
    check_version(&m, &mpath, FORMAT_VERSION)?;
    let step: u64 = m.parse_value("optimizer_step")?;
    let n: usize = m.parse_value("n_params")?;
    let mut shapes = Vec::with_capacity(n);
    for i in 0..n {
        let name = m.get(&format!("param.{i}.name"))?.to_string();
        let shape: Vec<usize> = m.parse_list(&format!("param.{i}.shape"))?;
        if shape.len() != 2 {
            return Err(Error::Manifest { path: mpath.clone(), line: 0, detail: format!("param.{i}.shape must be rows,cols") });
        }
        shapes.push((name, shape[0], shape[1]));
    }
    let dpath = dir.join(PARAMS_DATA);
    let data = read_checked(&dpath, m.get("data_sha256")?)?;
    let shape_err = |detail: String| Error::ShapeInconsistency { path: dpath.clone(), detail };
    let values = fsutil::le_to_f64s(&data).ok_or_else(|| shape_err("not a whole number of doubles".into()))?;
    let expected: usize = shapes.iter().map(|(_, r, c)| r * c).sum();
    if values.len() != expected {
        return Err(shape_err(format!("shapes need {expected} values, data holds {}", values.len())));
    }
    let mut store = ParamStore::new();
    let mut offset = 0;
    for (name, r, c) in shapes {
        store.add(name, Mat::from_vec(r, c, values[offset..offset + r * c].to_vec()));
        offset += r * c;
    }
    Ok((store, step))
}

fn model_error(path: &Path, detail: String) -> Error {
    Error::Manifest { path: path.to_path_buf(), line: 0, detail }
}

fn check_kind(m: &Manifest, path: &Path, kind: &str) -> Result<()> {
    check_version(m, path, FORMAT_VERSION)?;
    let found = m.get("model")?;
    if found != kind {
        return Err(model_error(path, format!("expected a {kind} checkpoint, found {found}")));
    }
    Ok(())
}

fn check_checksum(m: &Manifest, path: &Path, actual: u64) -> Result<()> {
    let expected = m.get("checksum")?;
    let found = format!("{actual:016x}");
    if expected != found {
        return Err(Error::ChecksumMismatch { path: path.to_path_buf(), expected: expected.to_string(), found });
    }
    Ok(())
}

pub fn write_cnf(dir: &Path, model: &CnfModel, optimizer_step: u64) -> Result<()> {
    let arch = model.arch();
    let (mean, std) = model.context_stats();
    let mut m = Manifest::new();
    m.push("format_version", FORMAT_VERSION)
        .push("model", "cnf")
        .push("latent_dim", LATENT_DIM)
        .push("context_dim", arch.context_dim())
        .push("context_features", arch.features.iter().map(|f| f.name()).collect::<Vec<_>>().join(","))
        .push("hidden", arch.hidden)
        .push("depth", arch.depth)
        .push("n_freqs", arch.n_freqs)
        .push("objective", model.objective.name())
        .push("ctx_mean", join(mean))
        .push("ctx_std", join(std))
        .push("checksum", format!("{:016x}", model.checksum()));
    fsutil::replace_dir(dir, |stage| {
        write_params(stage, model.store(), optimizer_step)?;
        m.write(&stage.join(MODEL_MANIFEST))
    })
}

pub fn read_cnf(dir: &Path) -> Result<CnfModel> {
    let mpath = dir.join(MODEL_MANIFEST);
    let m = Manifest::read(&mpath)?;
    check_kind(&m, &mpath, "cnf")?;
    let latent: usize = m.parse_value("latent_dim")?;
    if latent != LATENT_DIM {
        return Err(model_error(&mpath, format!("latent dimension {latent} is not supported")));
    }
    let features = m
        .get("context_features")?
        .split(',')
        .map(|s| ContextFeature::from_name(s).ok_or_else(|| model_error(&mpath, format!("unknown context feature {s}"))))
        .collect::<Result<Vec<_>>>()?;
    let context_dim: usize = m.parse_value("context_dim")?;
    if context_dim != features.len() {
        return Err(model_error(&mpath, format!("context_dim {context_dim} but {} features", features.len())));
    }
    let arch = CnfArch { hidden: m.parse_value("hidden")?, depth: m.parse_value("depth")?, n_freqs: m.parse_value("n_freqs")?, features };
    let objective_name = m.get("objective")?;
    let objective =
        CnfObjective::from_name(objective_name).ok_or_else(|| model_error(&mpath, format!("unknown objective {objective_name}")))?;
    let (store, _) = read_params(dir)?;
    let model = CnfModel::from_parts(store, arch, m.parse_list("ctx_mean")?, m.parse_list("ctx_std")?, objective)?;
    check_checksum(&m, &mpath, model.checksum())?;
    Ok(model)
}

pub fn write_vsde(dir: &Path, model: &VsdeModel, optimizer_step: u64) -> Result<()> {
    let a = model.arch();
    let g = model.guardrail;
    let mut m = Manifest::new();
    m.push("format_version", FORMAT_VERSION)
        .push("model", "vsde")
        .push("encoder_hidden", a.encoder_hidden)
        .push("ctx_dim", a.ctx_dim)
        .push("hidden", a.hidden)
        .push("depth", a.depth)
        .push("n_freqs", a.n_freqs)
        .push("guardrail.radius", g.radius)
        .push("guardrail.alpha", g.alpha)
        .push("guardrail.u_max", g.u_max)
        .push("cnf_checksum", format!("{:016x}", model.cnf_checksum()))
        .push("checksum", format!("{:016x}", model.store().checksum()));
    fsutil::replace_dir(dir, |stage| {
        write_params(stage, model.store(), optimizer_step)?;
        m.write(&stage.join(MODEL_MANIFEST))
    })
}

pub fn read_vsde(dir: &Path) -> Result<VsdeModel> {
    let mpath = dir.join(MODEL_MANIFEST);
    let m = Manifest::read(&mpath)?;
    check_kind(&m, &mpath, "vsde")?;
    let arch = VsdeArch {
        encoder_hidden: m.parse_value("encoder_hidden")?,
        ctx_dim: m.parse_value("ctx_dim")?,
        hidden: m.parse_value("hidden")?,
        depth: m.parse_value("depth")?,
        n_freqs: m.parse_value("n_freqs")?,
    };
    let guardrail = GuardrailConfig {
        radius: m.parse_value("guardrail.radius")?,
        alpha: m.parse_value("guardrail.alpha")?,
        u_max: m.parse_value("guardrail.u_max")?,
    };
    let raw = m.get("cnf_checksum")?;
    let cnf_checksum = u64::from_str_radix(raw, 16).map_err(|e| model_error(&mpath, format!("cnf_checksum {raw:?}: {e}")))?;
    let (store, _) = read_params(dir)?;
    let model = VsdeModel::from_parts(store, arch, guardrail, cnf_checksum)?;
    check_checksum(&m, &mpath, model.store().checksum())?;
    Ok(model)
}
