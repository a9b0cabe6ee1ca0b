//! Model checkpoints.
//!
//! Layout: the 5-byte magic `FADN1`, a little-endian `u32` format version, a
//! little-endian `u64` manifest length, the UTF-8 manifest, then every
//! parameter group as raw little-endian `f64` in manifest order. The manifest
//! is `key=value` text holding the model config, the training step, and one
//! `group=<name> <len>` line per group. Parameters round-trip bit-exactly.
//! Optimizer moments are not stored.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fadn_core::fractal::{FractalConfig, FractalModel};
use fadn_core::plan::LevelSpec;
use fadn_core::ScaleConfig;

use crate::config::{model_text, set_model_key};
use crate::error::{format_err, io_err, Result};

pub const MAGIC: &[u8; 5] = b"FADN1";
pub const VERSION: u32 = 1;

fn manifest(model: &FractalModel) -> String {
    let cfg = model.config();
    let mut s = String::new();
    let levels: Vec<String> =
        cfg.scale.levels().iter().map(|l| format!("{}:{}", l.resolution, l.patch)).collect();
    let _ = writeln!(s, "scale_levels={}", levels.join(","));
    let _ = writeln!(s, "d_min={}", cfg.scale.d_min());
    let _ = writeln!(s, "d_max={}", cfg.scale.d_max());
    s.push_str(&model_text(cfg));
    let _ = writeln!(s, "step={}", model.step());
    let index: Vec<String> = model.mlp_index().iter().map(|i| i.to_string()).collect();
    let _ = writeln!(s, "mlp_index={}", index.join(","));
    for g in model.param_groups() {
        let _ = writeln!(s, "group={} {}", g.name, g.values.len());
    }
    s
}

pub fn encode(model: &FractalModel) -> Vec<u8> {
    let text = manifest(model);
    let mut out = Vec::with_capacity(17 + text.len() + model.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for g in model.param_groups() {
        for v in g.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<FractalModel> {
    let bad = |msg: &str| format_err(path, msg);
    if bytes.len() < 17 || &bytes[..5] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(path, format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes")) as usize;
    let text = bytes
        .get(17..17usize.saturating_add(len))
        .and_then(|b| std::str::from_utf8(b).ok())
        .ok_or_else(|| bad("truncated or non-UTF-8 manifest"))?;
    let mut cfg = FractalConfig::default();
    let (mut levels, mut d_min, mut d_max) = (None, cfg.scale.d_min(), cfg.scale.d_max());
    let mut step = 0u64;
    let mut index: Option<Vec<usize>> = None;
    let mut groups: Vec<(String, usize)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (k, v) = line.split_once('=').ok_or_else(|| bad("malformed manifest line"))?;
        let num = |v: &str| v.parse::<f64>().map_err(|_| format_err(path, format!("bad number in {line:?}")));
        match k {
            "scale_levels" => {
                let parsed: Option<Vec<LevelSpec>> = v
                    .split(',')
                    .map(|p| {
                        let (r, q) = p.split_once(':')?;
                        Some(LevelSpec::new(r.parse().ok()?, q.parse().ok()?))
                    })
                    .collect();
                levels = Some(parsed.ok_or_else(|| bad("bad scale_levels"))?);
            }
            "d_min" => d_min = num(v)?,
            "d_max" => d_max = num(v)?,
            "step" => step = v.parse().map_err(|_| bad("bad step"))?,
            "mlp_index" => {
                index = Some(v.split(',').map(|s| s.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad mlp_index"))?)
            }
            "group" => {
                let (name, n) = v.rsplit_once(' ').ok_or_else(|| bad("bad group line"))?;
                groups.push((name.to_string(), n.parse().map_err(|_| bad("bad group length"))?));
            }
            _ => {
                if !set_model_key(&mut cfg, i + 1, k, v)? {
                    return Err(format_err(path, format!("unknown manifest key {k:?}")));
                }
            }
        }
    }
    let levels = levels.ok_or_else(|| bad("manifest lacks scale_levels"))?;
    cfg.scale = ScaleConfig::new(levels, d_min, d_max)?;
    let total: usize = groups.iter().map(|g| g.1).sum();
    let body = &bytes[17 + len..];
    if body.len() != total * 8 {
        return Err(format_err(path, format!("parameter block has {} bytes, manifest needs {}", body.len(), total * 8)));
    }
    let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let data: Vec<Vec<f64>> = groups.iter().map(|g| values.by_ref().take(g.1).collect()).collect();
    let model = FractalModel::from_parts(cfg, data, step)?;
    let names_match = model.param_groups().iter().map(|g| g.name).eq(groups.iter().map(|g| g.0.as_str()));
    if !names_match {
        return Err(bad("parameter group names do not match the model layout"));
    }
    if index.is_some_and(|ix| ix != model.mlp_index()) {
        return Err(bad("level-to-network index does not match the config"));
    }
    Ok(model)
}

pub fn save(path: &Path, model: &FractalModel) -> Result<()> {
    fs::write(path, encode(model)).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<FractalModel> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes, path)
}
