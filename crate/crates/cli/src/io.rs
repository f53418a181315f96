use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use nebp_core::simulator::Dataset;
use nebp_core::ModelParams;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Writes through a sibling temp file and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let name = path
        .file_name()
        .with_context(|| format!("not a file path: {}", path.display()))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// A scene file and its name (the file stem).
pub struct Scene {
    pub name: String,
    pub path: PathBuf,
    pub data: Dataset,
}

/// Loads one scene file, or every `scene_*.json` in a directory in name
/// order.
pub fn load_scenes(path: &Path) -> anyhow::Result<Vec<Scene>> {
    let paths = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let n = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                n.starts_with("scene_") && n.ends_with(".json")
            })
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if paths.is_empty() {
        bail!("no scene_*.json files in {}", path.display());
    }
    paths
        .into_iter()
        .map(|p| {
            let data = Dataset::load(&p).with_context(|| format!("loading scene {}", p.display()))?;
            data.config
                .validate()
                .with_context(|| format!("scene {}", p.display()))?;
            let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok(Scene { name, path: p, data })
        })
        .collect()
}

/// Explicit `--params`, else `params.json` beside the scenes.
pub fn resolve_params(data: &Path, explicit: Option<&Path>, particles: Option<usize>) -> anyhow::Result<(PathBuf, ModelParams)> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = if data.is_dir() {
                data.to_path_buf()
            } else {
                data.parent().map(Path::to_path_buf).unwrap_or_default()
            };
            let p = dir.join("params.json");
            if !p.exists() {
                bail!("no model parameters: pass --params or put params.json next to the scenes");
            }
            p
        }
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut params = ModelParams::from_json(&text).with_context(|| format!("parameters in {}", path.display()))?;
    if let Some(n) = particles {
        params.n_particles = n;
        params = params.validate()?;
    }
    Ok((path, params))
}

#[derive(Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> anyhow::Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        })
    }
}

/// Everything needed to rerun a command and check its outputs.
#[derive(Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a C,
    pub config_hash: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn write_manifest<C: Serialize>(out: &Path, command: &C, inputs: &[PathBuf], outputs: &[PathBuf]) -> anyhow::Result<()> {
    let canonical = serde_json::to_vec(command)?;
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_hash: sha256_hex(&canonical),
        inputs: inputs.iter().map(|p| FileDigest::of(p)).collect::<anyhow::Result<_>>()?,
        outputs: outputs.iter().map(|p| FileDigest::of(p)).collect::<anyhow::Result<_>>()?,
    };
    write_atomic(&out.join("manifest.json"), &serde_json::to_vec_pretty(&m)?)
}
