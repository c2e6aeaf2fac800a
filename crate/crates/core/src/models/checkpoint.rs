//! Checkpoints: a JSON manifest plus a flat little-endian parameter blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::digest::{digest, ParameterDigest};
use crate::nn::ParamSet;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest<A> {
    pub architecture: A,
    pub seed: u64,
    pub scalar: String,
    pub digest: ParameterDigest,
    pub parameters: Vec<ParameterEntry>,
}

fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.json")), dir.join(format!("{name}.bin")))
}

/// Writes `{name}.json` and `{name}.bin` under `dir`.
pub fn save_checkpoint<T: Scalar, A: Serialize + Clone>(
    dir: &Path,
    name: &str,
    architecture: &A,
    seed: u64,
    params: &ParamSet<T>,
) -> Result<Manifest<A>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        architecture: architecture.clone(),
        seed,
        scalar: T::NAME.to_string(),
        digest: digest(params),
        parameters: params
            .iter()
            .map(|(n, t)| ParameterEntry {
                name: n.to_string(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let (json, bin) = paths(dir, name);
    fs::write(&json, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&json, e))?;
    fs::write(&bin, params.to_le_bytes()).map_err(|e| Error::io(&bin, e))?;
    Ok(manifest)
}

/// Reads a checkpoint. `build` recreates the parameter layout from the
/// manifest; the blob then overwrites its values and the digest is verified.
pub fn load_checkpoint<T, A, M, F>(dir: &Path, name: &str, build: F) -> Result<(Manifest<A>, M)>
where
    T: Scalar,
    A: DeserializeOwned,
    F: FnOnce(&A, u64) -> M,
    M: AsMut<ParamSet<T>>,
{
    let (json, bin) = paths(dir, name);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: Manifest<A> = serde_json::from_str(&text)?;
    if manifest.scalar != T::NAME {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, requested {}",
            manifest.scalar,
            T::NAME
        )));
    }
    let mut model = build(&manifest.architecture, manifest.seed);
    let params = model.as_mut();
    let layout: Vec<ParameterEntry> = params
        .iter()
        .map(|(n, t)| ParameterEntry {
            name: n.to_string(),
            shape: t.shape.clone(),
        })
        .collect();
    if layout != manifest.parameters {
        return Err(Error::Format(
            "checkpoint parameter layout differs from the architecture".into(),
        ));
    }
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    params.load_le_bytes(&bytes)?;
    let got = digest(params);
    if got != manifest.digest {
        return Err(Error::Format(format!(
            "checkpoint digest mismatch: manifest {}, blob {got}",
            manifest.digest
        )));
    }
    Ok((manifest, model))
}
