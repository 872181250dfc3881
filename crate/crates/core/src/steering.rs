//! Test-time concept steering of embedding sequences.
//!
//! ```text
//! full: x_steered = x + W_dec (lambda * ENC(x_C))
//! v1:   x_steered = x + lambda * x_C
//! v2:   x_steered = x + lambda * x_C - lambda * b_pre
//! v3:   x_steered = x + lambda * x_C - lambda * Error,
//!       Error = x_C - (W_dec ENC(x_C) + b_pre)
//! ```
//!
//! The addition is element-wise per token position, so `x` and `x_C` must
//! share a token grid. `ENC` defaults to the encoder without TopK.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::ksae::{encode_relu, encode_topk, KSaeConfig, KSaeParams};
use crate::numeric::Real;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// ReLU encoder without TopK truncation.
    #[default]
    ReluOnly,
    TopK,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    V1,
    V2,
    V3,
}

#[derive(Debug, Clone)]
pub struct SteerRequest {
    /// Prompt embedding, one row per token.
    pub x: EmbeddingMatrix,
    /// Concept embedding on the same token grid.
    pub concept: EmbeddingMatrix,
    pub lambda: f32,
    pub encoder_mode: EncoderMode,
    pub variant: Variant,
}

impl SteerRequest {
    pub fn new(x: EmbeddingMatrix, concept: EmbeddingMatrix, lambda: f32) -> Self {
        Self {
            x,
            concept,
            lambda,
            encoder_mode: EncoderMode::default(),
            variant: Variant::default(),
        }
    }
}

/// Summary of the concept's latent activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDiagnostics {
    pub encoder_mode: EncoderMode,
    /// Positive latents per concept token.
    pub active_per_token: Vec<usize>,
    /// Strongest latents by activation averaged over tokens: `(latent, mean)`.
    pub top_latents: Vec<(usize, f32)>,
}

#[derive(Debug, Clone)]
pub struct SteerResult {
    pub x_steered: EmbeddingMatrix,
    /// `x_steered - x`
    pub offset: EmbeddingMatrix,
    pub diagnostics: ConceptDiagnostics,
}

const DIAGNOSTIC_TOP: usize = 10;

/// Dense concept code under the chosen encoder.
pub fn concept_code<T: Real>(
    params: &KSaeParams<T>,
    config: &KSaeConfig,
    concept: ArrayView2<'_, T>,
    mode: EncoderMode,
) -> Result<Array2<T>> {
    match mode {
        EncoderMode::ReluOnly => encode_relu(params, config, concept),
        EncoderMode::TopK => Ok(encode_topk(params, config, concept)?.to_dense()),
    }
}

/// The additive offset for `variant`, before it is added to `x`.
pub fn steering_offset<T: Real>(
    params: &KSaeParams<T>,
    config: &KSaeConfig,
    concept: ArrayView2<'_, T>,
    lambda: T,
    mode: EncoderMode,
    variant: Variant,
) -> Result<Array2<T>> {
    if concept.ncols() != params.d() {
        return Err(Error::Request(format!(
            "concept has dim {}, model expects {}",
            concept.ncols(),
            params.d()
        )));
    }
    match variant {
        Variant::Full => {
            let mut code = concept_code(params, config, concept, mode)?;
            code.mapv_inplace(|v| lambda * v);
            Ok(code.dot(&params.w_dec.t()))
        }
        Variant::V1 => Ok(concept.mapv(|v| lambda * v)),
        Variant::V2 => {
            let mut off = concept.mapv(|v| lambda * v);
            off.scaled_add(-lambda, &params.b_pre.view().insert_axis(Axis(0)));
            Ok(off)
        }
        Variant::V3 => {
            let error = reconstruction_error(params, config, concept, mode)?;
            Ok(concept.mapv(|v| lambda * v) - error.mapv(|v| lambda * v))
        }
    }
}

/// `x_C - (W_dec ENC(x_C) + b_pre)`.
pub fn reconstruction_error<T: Real>(
    params: &KSaeParams<T>,
    config: &KSaeConfig,
    concept: ArrayView2<'_, T>,
    mode: EncoderMode,
) -> Result<Array2<T>> {
    let code = concept_code(params, config, concept, mode)?;
    let mut recon = code.dot(&params.w_dec.t());
    recon += &params.b_pre;
    Ok(&concept - &recon)
}

/// Generic steering on raw arrays; `x` and `concept` must share a shape.
pub fn steer_array<T: Real>(
    params: &KSaeParams<T>,
    config: &KSaeConfig,
    x: ArrayView2<'_, T>,
    concept: ArrayView2<'_, T>,
    lambda: T,
    mode: EncoderMode,
    variant: Variant,
) -> Result<(Array2<T>, Array2<T>)> {
    if x.dim() != concept.dim() {
        return Err(Error::Request(format!(
            "prompt is {:?} but concept is {:?}; token grids must match",
            x.dim(),
            concept.dim()
        )));
    }
    if x.ncols() != params.d() {
        return Err(Error::Request(format!(
            "prompt has dim {}, model expects {}",
            x.ncols(),
            params.d()
        )));
    }
    if !lambda.is_finite() {
        return Err(Error::Request("lambda must be finite".into()));
    }
    if lambda == T::zero() {
        return Ok((x.to_owned(), Array2::zeros(x.dim())));
    }
    let offset = steering_offset(params, config, concept, lambda, mode, variant)?;
    let steered = &x + &offset;
    Ok((steered, offset))
}

/// Steers with the full formulation or one of the ablation variants,
/// as selected by `request.variant`.
pub fn steer(params: &KSaeParams<f32>, config: &KSaeConfig, request: &SteerRequest) -> Result<SteerResult> {
    let (steered, offset) = steer_array(
        params,
        config,
        request.x.view(),
        request.concept.view(),
        request.lambda,
        request.encoder_mode,
        request.variant,
    )?;
    let code = concept_code(params, config, request.concept.view(), request.encoder_mode)?;
    let provenance = format!(
        "{} steered lambda={} mode={:?} variant={:?}",
        request.x.provenance, request.lambda, request.encoder_mode, request.variant
    );
    Ok(SteerResult {
        x_steered: EmbeddingMatrix::from_array(steered)?.with_provenance(provenance),
        offset: EmbeddingMatrix::from_array(offset)?,
        diagnostics: diagnostics(&code, request.encoder_mode),
    })
}

/// Ablation variants only; rejects [`Variant::Full`].
pub fn steer_variant(
    params: &KSaeParams<f32>,
    config: &KSaeConfig,
    request: &SteerRequest,
) -> Result<SteerResult> {
    if request.variant == Variant::Full {
        return Err(Error::Request("steer_variant expects v1, v2 or v3".into()));
    }
    steer(params, config, request)
}

fn diagnostics(code: &Array2<f32>, mode: EncoderMode) -> ConceptDiagnostics {
    let active_per_token = code
        .axis_iter(Axis(0))
        .map(|r| r.iter().filter(|&&v| v > 0.0).count())
        .collect();
    let means = code.mean_axis(Axis(0)).expect("concept has rows");
    let mut ranked: Vec<(usize, f32)> = means.iter().copied().enumerate().filter(|&(_, v)| v > 0.0).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(DIAGNOSTIC_TOP);
    ConceptDiagnostics {
        encoder_mode: mode,
        active_per_token,
        top_latents: ranked,
    }
}

/// Token-wise mean of several concept embeddings of identical shape.
pub fn concept_from_prompts(embeddings: &[EmbeddingMatrix]) -> Result<EmbeddingMatrix> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Request("no concept embeddings given".into()))?;
    if embeddings.len() == 1 {
        return Ok(first.clone());
    }
    let shape = (first.rows(), first.dim());
    let mut acc = vec![0f64; first.values().len()];
    for e in embeddings {
        if (e.rows(), e.dim()) != shape {
            return Err(Error::Request(format!(
                "concept embeddings differ in shape: {:?} vs {:?}",
                (e.rows(), e.dim()),
                shape
            )));
        }
        for (a, &v) in acc.iter_mut().zip(e.values()) {
            *a += f64::from(v);
        }
    }
    let count = embeddings.len() as f64;
    let values = acc.into_iter().map(|v| (v / count) as f32).collect();
    Ok(EmbeddingMatrix::new(shape.0, shape.1, values)?.with_provenance(first.provenance.clone()))
}
