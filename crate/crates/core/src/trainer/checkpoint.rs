//! Checkpoint directories: `meta.json` plus one NPY file per tensor.
//!
//! Vectors are stored as `1 x len` matrices. Directories are written to a
//! sibling temp path and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::ksae::{KSaeConfig, KSaeParams};
use crate::npy;
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

/// Decoder columns further than this from unit norm raise a load warning.
pub const LOAD_NORM_TOLERANCE: f64 = 1e-5;

const META: &str = "meta.json";
const W_ENC: &str = "w_enc.npy";
const B_ENC: &str = "b_enc.npy";
const W_DEC: &str = "w_dec.npy";
const B_PRE: &str = "b_pre.npy";
const RUNNING_MEAN: &str = "running_mean.npy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    ksae: KSaeConfig,
    /// Convenience copy of `expansion_factor * d`.
    n: usize,
    train: TrainConfig,
    step: u64,
    #[serde(default)]
    provenance: String,
}

/// First decoder column found off the unit sphere at load time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormViolation {
    pub column: usize,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub ksae: KSaeConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub provenance: String,
    pub params: KSaeParams<f32>,
    pub running_mean: Array1<f32>,
    /// Set by [`load_checkpoint`] when the unit-norm invariant does not hold.
    pub norm_violation: Option<NormViolation>,
}

fn write_matrix(dir: &Path, name: &str, rows: usize, cols: usize, values: Vec<f32>) -> Result<()> {
    let m = EmbeddingMatrix::new(rows, cols, values)?;
    npy::write_array(&m, dir.join(name))
}

fn temp_sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    dir.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    ckpt.params.check_shapes(&ckpt.ksae).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = temp_sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let meta = Meta {
        format_version: FORMAT_VERSION,
        ksae: ckpt.ksae.clone(),
        n: ckpt.ksae.n(),
        train: ckpt.train.clone(),
        step: ckpt.step,
        provenance: ckpt.provenance.clone(),
    };
    let meta_path = tmp.join(META);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")
        .map_err(|e| Error::io(&meta_path, e))?;

    let p = &ckpt.params;
    let (d, n) = (p.d(), p.n());
    let flat = |a: &Array2<f32>| a.iter().copied().collect::<Vec<_>>();
    write_matrix(&tmp, W_ENC, n, d, flat(&p.w_enc))?;
    write_matrix(&tmp, B_ENC, 1, n, p.b_enc.to_vec())?;
    write_matrix(&tmp, W_DEC, d, n, flat(&p.w_dec))?;
    write_matrix(&tmp, B_PRE, 1, d, p.b_pre.to_vec())?;
    write_matrix(&tmp, RUNNING_MEAN, 1, d, ckpt.running_mean.to_vec())?;

    if dir.exists() {
        let old = temp_sibling(dir, "old");
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn read_matrix(dir: &Path, name: &str, rows: usize, cols: usize) -> Result<Array2<f32>> {
    let m = npy::read_array(dir.join(name))?;
    if (m.rows(), m.dim()) != (rows, cols) {
        return Err(Error::Checkpoint(format!(
            "{name} has shape ({}, {}), config implies ({rows}, {cols})",
            m.rows(),
            m.dim()
        )));
    }
    Ok(m.to_array())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("unreadable {META}: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} unsupported (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    meta.ksae.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let (d, n) = (meta.ksae.d, meta.ksae.n());
    if meta.n != n {
        return Err(Error::Checkpoint(format!(
            "meta records n = {}, config implies {n}",
            meta.n
        )));
    }
    let row = |a: Array2<f32>| a.row(0).to_owned();
    let params = KSaeParams {
        w_enc: read_matrix(dir, W_ENC, n, d)?,
        b_enc: row(read_matrix(dir, B_ENC, 1, n)?),
        w_dec: read_matrix(dir, W_DEC, d, n)?,
        b_pre: row(read_matrix(dir, B_PRE, 1, d)?),
    };
    let running_mean = row(read_matrix(dir, RUNNING_MEAN, 1, d)?);

    let norm_violation = params
        .decoder_column_norms()
        .into_iter()
        .enumerate()
        .find(|(_, norm)| (norm - 1.0).abs() > LOAD_NORM_TOLERANCE)
        .map(|(column, norm)| NormViolation { column, norm });
    if let Some(v) = norm_violation {
        log::warn!(
            "checkpoint {}: decoder column {} has norm {} (unit-norm invariant violated)",
            dir.display(),
            v.column,
            v.norm
        );
    }
    Ok(Checkpoint {
        ksae: meta.ksae,
        train: meta.train,
        step: meta.step,
        provenance: meta.provenance,
        params,
        running_mean,
        norm_violation,
    })
}
