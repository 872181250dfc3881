//! Synthetic sparse-dictionary data with a known generating dictionary.
//!
//! Each sample is `D c + noise` where `D` has unit-norm columns and `c` has
//! exactly `sparsity` positive entries drawn from `[0.5, 2.0]`. Because the
//! dictionary is known, it serves as ground truth when checking whether a
//! trained autoencoder recovered the right decoder directions.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingMatrix;
use crate::error::{Error, Result};

pub const CODE_MIN: f64 = 0.5;
pub const CODE_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub atoms: usize,
    /// Active atoms per sample.
    pub sparsity: usize,
    pub samples: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Restrict sampling to the first `n` atoms; the rest never appear.
    #[serde(default)]
    pub active_atoms: Option<usize>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.atoms == 0 || self.samples == 0 {
            return Err(Error::Config("dim, atoms and samples must be positive".into()));
        }
        let pool = self.pool();
        if pool > self.atoms {
            return Err(Error::Config(format!(
                "active atoms {pool} exceed dictionary size {}",
                self.atoms
            )));
        }
        if self.sparsity > pool {
            return Err(Error::Config(format!(
                "sparsity {} exceeds the {pool} sampled atoms",
                self.sparsity
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise std must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn pool(&self) -> usize {
        self.active_atoms.unwrap_or(self.atoms)
    }
}

/// Ground-truth sparse code of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueCode {
    pub indices: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// `samples x dim`
    pub samples: EmbeddingMatrix,
    /// `dim x atoms`, unit-norm columns.
    pub dictionary: EmbeddingMatrix,
    pub codes: Vec<TrueCode>,
}

impl SyntheticData {
    /// Column `j` of the dictionary.
    pub fn atom(&self, j: usize) -> Vec<f32> {
        let m = self.dictionary.dim();
        (0..self.dictionary.rows())
            .map(|i| self.dictionary.values()[i * m + j])
            .collect()
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let (d, m) = (spec.dim, spec.atoms);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Column-major scratch so each atom is contiguous while normalizing.
    let mut atoms = vec![0f64; d * m];
    for col in atoms.chunks_exact_mut(d) {
        loop {
            for v in col.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                col.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
    }
    let mut dict = vec![0f32; d * m];
    for j in 0..m {
        for i in 0..d {
            dict[i * m + j] = atoms[j * d + i] as f32;
        }
    }
    let dictionary = EmbeddingMatrix::new(d, m, dict.clone())?.with_provenance("synthetic dictionary");

    let magnitude = Uniform::new_inclusive(CODE_MIN, CODE_MAX).expect("valid range");
    let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
    let pool = spec.pool();
    let mut samples = Vec::with_capacity(spec.samples * d);
    let mut codes = Vec::with_capacity(spec.samples);
    let mut row = vec![0f64; d];
    for _ in 0..spec.samples {
        let mut indices = index::sample(&mut rng, pool, spec.sparsity).into_vec();
        indices.sort_unstable();
        let values: Vec<f32> = indices.iter().map(|_| magnitude.sample(&mut rng) as f32).collect();
        row.iter_mut().for_each(|v| *v = 0.0);
        for (&j, &c) in indices.iter().zip(&values) {
            for (i, r) in row.iter_mut().enumerate() {
                *r += f64::from(dict[i * m + j]) * f64::from(c);
            }
        }
        if spec.noise_std > 0.0 {
            for r in row.iter_mut() {
                *r += noise.sample(&mut rng);
            }
        }
        samples.extend(row.iter().map(|&v| v as f32));
        codes.push(TrueCode { indices, values });
    }
    let samples = EmbeddingMatrix::new(spec.samples, d, samples)?.with_provenance(format!(
        "synthetic d={d} m={m} s={} noise={} seed={}",
        spec.sparsity, spec.noise_std, spec.seed
    ));
    Ok(SyntheticData {
        samples,
        dictionary,
        codes,
    })
}
