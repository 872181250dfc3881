//! Embedding matrices, dataset manifests, and seeded batch streaming.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy;

/// A dense row-major block of token embeddings (rows = tokens, columns = d).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f32>,
    /// Free-text origin: encoder name, layer index, prompt corpus id.
    pub provenance: String,
}

impl EmbeddingMatrix {
    /// Validates shape and finiteness. Non-finite entries are reported with
    /// their row index.
    pub fn new(rows: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::Data(format!(
                "embedding matrix must be non-empty, got {rows}x{dim}"
            )));
        }
        if values.len() != rows * dim {
            return Err(Error::Shape(format!(
                "{} values do not fill a {rows}x{dim} matrix",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value {} at row {}, column {}",
                values[pos],
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            rows,
            dim,
            values,
            provenance: String::new(),
        })
    }

    pub fn from_array(array: Array2<f32>) -> Result<Self> {
        let (rows, dim) = array.dim();
        let values = if array.is_standard_layout() {
            array.into_raw_vec_and_offset().0
        } else {
            array.iter().copied().collect()
        };
        Self::new(rows, dim, values)
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.rows, self.dim), &self.values).expect("shape checked at construction")
    }

    pub fn to_array(&self) -> Array2<f32> {
        self.view().to_owned()
    }

    /// Widened copy for 64-bit verification paths.
    pub fn to_f64(&self) -> Array2<f64> {
        self.view().mapv(f64::from)
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, ids: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(ids.len() * self.dim);
        for &i in ids {
            if i >= self.rows {
                return Err(Error::Data(format!("row {i} out of range for {} rows", self.rows)));
            }
            values.extend_from_slice(self.row(i));
        }
        Ok(Self::new(ids.len(), self.dim, values)?.with_provenance(self.provenance.clone()))
    }

    /// Stacks matrices of equal width.
    pub fn concat(parts: &[EmbeddingMatrix]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("nothing to concatenate".into()))?;
        let mut values = Vec::with_capacity(parts.iter().map(|p| p.values.len()).sum());
        for p in parts {
            if p.dim != first.dim {
                return Err(Error::Shape(format!("dim {} != {}", p.dim, first.dim)));
            }
            values.extend_from_slice(&p.values);
        }
        let rows = values.len() / first.dim;
        Ok(Self::new(rows, first.dim, values)?.with_provenance(first.provenance.clone()))
    }
}

/// JSON description of a sharded embedding dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Shard paths; relative entries resolve against the manifest's directory.
    pub shards: Vec<PathBuf>,
    pub total_rows: usize,
    pub dim: usize,
    pub shuffle_seed: u64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub provenance: String,
    #[serde(skip)]
    base_dir: Option<PathBuf>,
}

impl DatasetManifest {
    /// Builds a manifest by reading each shard's header.
    pub fn from_shards(shards: Vec<PathBuf>, shuffle_seed: u64) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::Config("manifest needs at least one shard".into()));
        }
        let mut dim = None;
        let mut total_rows = 0;
        for s in &shards {
            let header = npy::read_header(s)?;
            match dim {
                None => dim = Some(header.cols),
                Some(d) if d != header.cols => {
                    return Err(Error::Shape(format!(
                        "shard {} has dim {}, expected {d}",
                        s.display(),
                        header.cols
                    )))
                }
                _ => {}
            }
            total_rows += header.rows;
        }
        Ok(Self {
            shards,
            total_rows,
            dim: dim.unwrap_or(0),
            shuffle_seed,
            provenance: String::new(),
            base_dir: None,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Self = serde_json::from_str(&text)?;
        manifest.base_dir = path.parent().map(Path::to_path_buf);
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolved_shards(&self) -> Vec<PathBuf> {
        self.shards
            .iter()
            .map(|s| match &self.base_dir {
                Some(base) if s.is_relative() => base.join(s),
                _ => s.clone(),
            })
            .collect()
    }

    /// Loads every shard and checks the manifest's bookkeeping.
    pub fn load_dataset(&self) -> Result<Dataset> {
        if self.shards.is_empty() || self.total_rows == 0 {
            return Err(Error::Config("dataset is empty".into()));
        }
        let parts = self
            .resolved_shards()
            .iter()
            .map(npy::read_array)
            .collect::<Result<Vec<_>>>()?;
        for (p, path) in parts.iter().zip(&self.shards) {
            if p.dim() != self.dim {
                return Err(Error::Shape(format!(
                    "shard {} has dim {}, manifest says {}",
                    path.display(),
                    p.dim(),
                    self.dim
                )));
            }
        }
        let matrix = EmbeddingMatrix::concat(&parts)?.with_provenance(self.provenance.clone());
        if matrix.rows() != self.total_rows {
            return Err(Error::Data(format!(
                "shards hold {} rows, manifest says {}",
                matrix.rows(),
                self.total_rows
            )));
        }
        Ok(Dataset {
            matrix,
            shuffle_seed: self.shuffle_seed,
        })
    }
}

/// An in-memory dataset ready for batching.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub matrix: EmbeddingMatrix,
    pub shuffle_seed: u64,
}

impl Dataset {
    pub fn new(matrix: EmbeddingMatrix, shuffle_seed: u64) -> Self {
        Self {
            matrix,
            shuffle_seed,
        }
    }

    /// One epoch of batches in a seeded permutation order.
    pub fn batches(self: &Arc<Self>, batch_size: usize, epoch_seed: u64) -> Result<BatchStream> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let mut order: Vec<usize> = (0..self.matrix.rows()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.shuffle_seed);
        rng.set_stream(epoch_seed);
        order.shuffle(&mut rng);
        Ok(BatchStream {
            dataset: Arc::clone(self),
            order,
            batch_size,
            next: 0,
        })
    }
}

/// One training batch together with the dataset row ids it was drawn from.
#[derive(Debug, Clone)]
pub struct Batch {
    pub row_ids: Vec<usize>,
    pub matrix: EmbeddingMatrix,
}

/// Yields full batches only; the trailing remainder of the permutation is dropped.
#[derive(Debug)]
pub struct BatchStream {
    dataset: Arc<Dataset>,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl BatchStream {
    pub fn len(&self) -> usize {
        (self.order.len() - self.next) / self.batch_size
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Moves batch assembly to a worker thread with a bounded hand-off queue.
    /// Batch order is unchanged.
    pub fn prefetch(self, depth: usize) -> Prefetch {
        let (tx, rx) = sync_channel(depth.max(1));
        let worker = std::thread::spawn(move || {
            for batch in self {
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });
        Prefetch {
            rx,
            worker: Some(worker),
        }
    }
}

impl Iterator for BatchStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let end = self.next + self.batch_size;
        if end > self.order.len() {
            return None;
        }
        let row_ids = self.order[self.next..end].to_vec();
        self.next = end;
        let matrix = self
            .dataset
            .matrix
            .select_rows(&row_ids)
            .expect("permutation indices are in range");
        Some(Batch { row_ids, matrix })
    }
}

pub struct Prefetch {
    rx: Receiver<Batch>,
    worker: Option<JoinHandle<()>>,
}

impl Iterator for Prefetch {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        match self.rx.recv() {
            Ok(b) => Some(b),
            Err(_) => {
                if let Some(w) = self.worker.take() {
                    let _ = w.join();
                }
                None
            }
        }
    }
}

/// Loads the manifest's shards and streams one epoch.
pub fn stream_batches(
    manifest: &DatasetManifest,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<BatchStream> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Arc::new(manifest.load_dataset()?).batches(batch_size, epoch_seed)
}
