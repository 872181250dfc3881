//! k-sparse autoencoder parameters and the encoder/decoder passes.
//!
//! ```text
//! encode:  z = TopK(ReLU(W_enc (x - b_pre) + b_enc))
//! decode:  x_hat = W_dec z + b_pre
//! ```
//!
//! `W_enc` is `n x d`, `W_dec` is `d x n`; both are stored row-major. Every
//! operation is generic over [`Real`] so the same code runs in 32-bit for
//! training and in 64-bit for gradient checks.

use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Real;

/// How the auxiliary loss picks the latents it reconstructs from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxSelection {
    /// Within the tracker's dead mask, the `k_aux` largest ReLU pre-activations.
    #[default]
    TopDead,
    /// Ignore the tracker: the `k_aux` latents with the lowest mean ReLU
    /// activation over the batch, each contributing its own activation.
    LeastActivated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSaeConfig {
    /// Input embedding width.
    pub d: usize,
    pub expansion_factor: usize,
    pub k: usize,
    pub k_aux: usize,
    pub alpha: f64,
    #[serde(default)]
    pub aux_selection: AuxSelection,
}

impl KSaeConfig {
    pub fn new(d: usize, expansion_factor: usize, k: usize, k_aux: usize, alpha: f64) -> Self {
        Self {
            d,
            expansion_factor,
            k,
            k_aux,
            alpha,
            aux_selection: AuxSelection::default(),
        }
    }

    /// Latent width `n = expansion_factor * d`.
    pub fn n(&self) -> usize {
        self.expansion_factor * self.d
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.d == 0 || self.expansion_factor == 0 {
            return Err(Error::Config("d and expansion factor must be positive".into()));
        }
        if self.k == 0 || self.k > n {
            return Err(Error::Config(format!("k = {} must lie in 1..={n}", self.k)));
        }
        if self.k_aux > n {
            return Err(Error::Config(format!("k_aux = {} exceeds n = {n}", self.k_aux)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha = {} must be finite and >= 0", self.alpha)));
        }
        Ok(())
    }
}

/// The four learned tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct KSaeParams<T> {
    /// `n x d`
    pub w_enc: Array2<T>,
    /// `n`
    pub b_enc: Array1<T>,
    /// `d x n`; column `j` is the decoder direction of latent `j`.
    pub w_dec: Array2<T>,
    /// `d`, subtracted before encoding and added back after decoding.
    pub b_pre: Array1<T>,
}

impl<T: Real> KSaeParams<T> {
    pub fn zeros(d: usize, n: usize) -> Self {
        Self {
            w_enc: Array2::zeros((n, d)),
            b_enc: Array1::zeros(n),
            w_dec: Array2::zeros((d, n)),
            b_pre: Array1::zeros(d),
        }
    }

    pub fn d(&self) -> usize {
        self.b_pre.len()
    }

    pub fn n(&self) -> usize {
        self.b_enc.len()
    }

    pub fn cast<U: Real>(&self) -> KSaeParams<U> {
        let c = |v: &T| U::from_f64_lossy(v.to_f64_lossy());
        KSaeParams {
            w_enc: self.w_enc.map(c),
            b_enc: self.b_enc.map(c),
            w_dec: self.w_dec.map(c),
            b_pre: self.b_pre.map(c),
        }
    }

    /// Checks that tensor shapes agree with `config`.
    pub fn check_shapes(&self, config: &KSaeConfig) -> Result<()> {
        let (d, n) = (config.d, config.n());
        let expect = [
            ("W_enc", self.w_enc.dim(), (n, d)),
            ("b_enc", (1, self.b_enc.len()), (1, n)),
            ("W_dec", self.w_dec.dim(), (d, n)),
            ("b_pre", (1, self.b_pre.len()), (1, d)),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::Shape(format!("{name} is {got:?}, config implies {want:?}")));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.w_enc.iter().all(|v| v.is_finite())
            && self.b_enc.iter().all(|v| v.is_finite())
            && self.w_dec.iter().all(|v| v.is_finite())
            && self.b_pre.iter().all(|v| v.is_finite())
    }

    /// L2 norm of every decoder column, accumulated in 64-bit.
    pub fn decoder_column_norms(&self) -> Vec<f64> {
        self.w_dec
            .axis_iter(Axis(1))
            .map(|col| col.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt())
            .collect()
    }
}

/// Sparse latent code of one token: strictly increasing indices with positive values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatentCode<T> {
    pub indices: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Real> LatentCode<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, T)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn to_dense(&self, n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); n];
        for (j, v) in self.iter() {
            out[j] = v;
        }
        out
    }
}

/// Codes for a batch of tokens sharing latent width `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch<T> {
    pub n: usize,
    pub codes: Vec<LatentCode<T>>,
}

impl<T: Real> LatentBatch<T> {
    pub fn to_dense(&self) -> Array2<T> {
        let mut out = Array2::zeros((self.codes.len(), self.n));
        for (mut row, code) in out.axis_iter_mut(Axis(0)).zip(&self.codes) {
            for (j, v) in code.iter() {
                row[j] = v;
            }
        }
        out
    }

    pub fn active_count(&self) -> usize {
        self.codes.iter().map(LatentCode::len).sum()
    }
}

/// Seeded initialization: unit-norm Gaussian decoder columns, tied encoder,
/// zero encoder bias, and `b_pre` set to the sample mean.
pub fn init_params<T: Real>(
    config: &KSaeConfig,
    init_sample: ArrayView2<'_, T>,
    seed: u64,
) -> Result<KSaeParams<T>> {
    config.validate()?;
    let (rows, d) = init_sample.dim();
    if d != config.d {
        return Err(Error::Config(format!("init sample has dim {d}, config says {}", config.d)));
    }
    if rows == 0 {
        return Err(Error::Config("init sample is empty".into()));
    }
    let n = config.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = KSaeParams::<T>::zeros(d, n);
    let mut col = vec![0f64; d];
    for j in 0..n {
        let norm = loop {
            for v in col.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break norm;
            }
        };
        for (i, v) in col.iter().enumerate() {
            let w = T::from_f64_lossy(v / norm);
            params.w_dec[[i, j]] = w;
            params.w_enc[[j, i]] = w;
        }
    }
    for i in 0..d {
        let sum: f64 = init_sample.column(i).iter().map(|v| v.to_f64_lossy()).sum();
        params.b_pre[i] = T::from_f64_lossy(sum / rows as f64);
    }
    Ok(params)
}

fn check_dim<T>(params: &KSaeParams<T>, x: &ArrayView2<'_, T>) -> Result<()>
where
    T: Real,
{
    if x.ncols() != params.d() {
        return Err(Error::Shape(format!(
            "input has dim {}, model expects {}",
            x.ncols(),
            params.d()
        )));
    }
    Ok(())
}

/// `W_enc (x - b_pre) + b_enc` for every row of `x`.
pub fn preactivations<T: Real>(params: &KSaeParams<T>, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
    check_dim(params, &x)?;
    let centered = &x - &params.b_pre;
    let mut pre = centered.dot(&params.w_enc.t());
    pre += &params.b_enc;
    Ok(pre)
}

/// Dense ReLU encoder with no TopK truncation; the steering-time encoder.
pub fn encode_relu<T: Real>(
    params: &KSaeParams<T>,
    config: &KSaeConfig,
    x: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    check_config(params, config)?;
    let mut pre = preactivations(params, x)?;
    pre.mapv_inplace(relu);
    Ok(pre)
}

pub fn encode_topk<T: Real>(
    params: &KSaeParams<T>,
    config: &KSaeConfig,
    x: ArrayView2<'_, T>,
) -> Result<LatentBatch<T>> {
    check_config(params, config)?;
    let pre = preactivations(params, x)?;
    Ok(topk_rows(pre.view(), config.k))
}

fn check_config<T: Real>(params: &KSaeParams<T>, config: &KSaeConfig) -> Result<()> {
    if params.n() != config.n() || params.d() != config.d {
        return Err(Error::Shape(format!(
            "params are d={} n={}, config is d={} n={}",
            params.d(),
            params.n(),
            config.d,
            config.n()
        )));
    }
    Ok(())
}

pub(crate) fn relu<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

/// Row-wise TopK over ReLU of `pre`.
pub(crate) fn topk_rows<T: Real>(pre: ArrayView2<'_, T>, k: usize) -> LatentBatch<T> {
    let n = pre.ncols();
    let codes = (0..pre.nrows())
        .into_par_iter()
        .map(|r| topk_positive(pre.row(r), k, |_| true))
        .collect();
    LatentBatch { n, codes }
}

/// The `k` largest strictly positive entries of `row` among positions where
/// `allowed` holds. Ties go to the lower index; output indices ascend.
pub fn topk_positive<T: Real>(
    row: ArrayView1<'_, T>,
    k: usize,
    allowed: impl Fn(usize) -> bool,
) -> LatentCode<T> {
    let mut cand: Vec<(usize, T)> = row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > T::zero() && allowed(j))
        .map(|(j, &v)| (j, v))
        .collect();
    if cand.len() > k {
        let by_rank = |a: &(usize, T), b: &(usize, T)| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
        };
        if k == 0 {
            cand.clear();
        } else {
            cand.select_nth_unstable_by(k - 1, by_rank);
            cand.truncate(k);
        }
    }
    cand.sort_unstable_by_key(|&(j, _)| j);
    let (indices, values) = cand.into_iter().unzip();
    LatentCode { indices, values }
}

/// `W_dec z` by sparse accumulation, without `b_pre`.
pub fn decode_no_bias<T: Real>(params: &KSaeParams<T>, z: &LatentBatch<T>) -> Result<Array2<T>> {
    let n = params.n();
    if z.n != n {
        return Err(Error::Shape(format!("codes have n={}, model has n={n}", z.n)));
    }
    let d = params.d();
    let mut out = Array2::zeros((z.codes.len(), d));
    for (mut row, code) in out.axis_iter_mut(Axis(0)).zip(&z.codes) {
        for (j, v) in code.iter() {
            if j >= n {
                return Err(Error::Data(format!("latent index {j} out of range for n={n}")));
            }
            row.scaled_add(v, &params.w_dec.column(j));
        }
    }
    Ok(out)
}

/// `x_hat = W_dec z + b_pre`.
pub fn decode<T: Real>(params: &KSaeParams<T>, z: &LatentBatch<T>) -> Result<Array2<T>> {
    let mut out = decode_no_bias(params, z)?;
    out += &params.b_pre;
    Ok(out)
}
