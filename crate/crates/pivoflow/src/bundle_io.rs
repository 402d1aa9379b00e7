//! Trajectory bundle directories: `manifest.txt` plus `positions.f64le`
//! holding `[particle][step][x, y]` little-endian doubles.

use std::path::Path;

use pivoflow_core::flow::{FieldKind, FlowFieldSpec, Split, TrajectoryBundle};
use pivoflow_core::Vec2;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::manifest::Manifest;

pub const FORMAT_VERSION: &str = "1";
pub const MANIFEST: &str = "manifest.txt";
pub const DATA: &str = "positions.f64le";

pub fn bundle_manifest(b: &TrajectoryBundle, data_sha256: &str) -> Manifest {
    let mut m = Manifest::new();
    m.push("format_version", FORMAT_VERSION)
        .push("n_particles", b.n_particles())
        .push("n_steps", b.n_steps())
        .push("dt", b.dt)
        .push("field_kind", b.field.kind().name());
    for (name, v) in b.field.kind().param_names().iter().zip(b.field.params()) {
        m.push(format!("field_params.{name}"), v);
    }
    m.push("diffusion_D", b.diffusion)
        .push("reflect_H", b.reflect_h.map_or("none".to_string(), |h| h.to_string()))
        .push("seed", b.seed)
        .push("split", b.split.name())
        .push("data_sha256", data_sha256);
    m
}

pub fn encode_positions(b: &TrajectoryBundle) -> Vec<u8> {
    fsutil::f64s_to_le(b.positions().iter().flat_map(|p| [p.x, p.y]))
}

/// Writes the bundle directory, replacing any previous one atomically.
pub fn write_bundle(dir: &Path, b: &TrajectoryBundle) -> Result<()> {
    let data = encode_positions(b);
    let manifest = bundle_manifest(b, &fsutil::sha256_hex(&data));
    fsutil::replace_dir(dir, |stage| {
        fsutil::write_atomic(&stage.join(DATA), &data)?;
        manifest.write(&stage.join(MANIFEST))
    })
}

pub fn check_version(m: &Manifest, path: &Path, expected: &str) -> Result<()> {
    let found = m.get("format_version")?;
    if found != expected {
        return Err(Error::VersionMismatch { path: path.to_path_buf(), found: found.to_string(), expected: expected.to_string() });
    }
    Ok(())
}

/// Reads a file and verifies it against a recorded SHA-256.
pub fn read_checked(path: &Path, expected: &str) -> Result<Vec<u8>> {
    let data = fsutil::read(path)?;
    let found = fsutil::sha256_hex(&data);
    if found != expected {
        return Err(Error::ChecksumMismatch { path: path.to_path_buf(), expected: expected.to_string(), found });
    }
    Ok(data)
}

pub fn read_bundle(dir: &Path) -> Result<TrajectoryBundle> {
    let mpath = dir.join(MANIFEST);
    let m = Manifest::read(&mpath)?;
    check_version(&m, &mpath, FORMAT_VERSION)?;
    let n_particles: usize = m.parse_value("n_particles")?;
    let n_steps: usize = m.parse_value("n_steps")?;
    let dt: f64 = m.parse_value("dt")?;
    let kind_name = m.get("field_kind")?;
    let kind = FieldKind::from_name(kind_name)
        .ok_or_else(|| Error::Manifest { path: mpath.clone(), line: 0, detail: format!("unknown field kind {kind_name}") })?;
    let params = kind
        .param_names()
        .iter()
        .map(|name| m.parse_value::<f64>(&format!("field_params.{name}")))
        .collect::<Result<Vec<_>>>()?;
    let field = FlowFieldSpec::from_params(kind, &params)?;
    let diffusion: f64 = m.parse_value("diffusion_D")?;
    let reflect_h = match m.get("reflect_H")? {
        "none" => None,
        _ => Some(m.parse_value::<f64>("reflect_H")?),
    };
    let seed: u64 = m.parse_value("seed")?;
    let split_name = m.get("split")?;
    let split = Split::from_name(split_name)
        .ok_or_else(|| Error::Manifest { path: mpath.clone(), line: 0, detail: format!("unknown split {split_name}") })?;

    let dpath = dir.join(DATA);
    let data = read_checked(&dpath, m.get("data_sha256")?)?;
    let shape_err = |detail: String| Error::ShapeInconsistency { path: dpath.clone(), detail };
    let values = fsutil::le_to_f64s(&data).ok_or_else(|| shape_err(format!("{} bytes is not a whole number of doubles", data.len())))?;
    let expected = n_particles * (n_steps + 1) * 2;
    if values.len() != expected {
        return Err(shape_err(format!(
            "manifest declares {n_particles} particles × {} states × 2 = {expected} values, data holds {}",
            n_steps + 1,
            values.len()
        )));
    }
    let positions = values.chunks_exact(2).map(|c| Vec2::new(c[0], c[1])).collect();
    Ok(TrajectoryBundle::new(field, diffusion, dt, n_steps, reflect_h, seed, split, positions)?)
}
