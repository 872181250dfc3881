//! Latent statistics, concept-to-latent matching and dictionary recovery scores.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::ksae::{encode_relu, encode_topk, KSaeConfig, KSaeParams};

pub const HISTOGRAM_BUCKETS: usize = 32;
pub const HISTOGRAM_MIN: f64 = 1e-4;
pub const HISTOGRAM_MAX: f64 = 1e2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentReport {
    pub rows: usize,
    pub n: usize,
    pub k: usize,
    /// Rows in which each latent appeared in the TopK code.
    pub fire_counts: Vec<u64>,
    /// Mean activation over the rows where the latent fired (0 if never).
    pub mean_activation: Vec<f64>,
    /// Latents that never fired on the sample.
    pub dead: Vec<bool>,
    pub dead_fraction: f64,
    /// Log-spaced bucket edges, `HISTOGRAM_BUCKETS + 1` values.
    pub histogram_edges: Vec<f64>,
    /// Counts of positive activations per bucket; outliers land in the edge buckets.
    pub histogram: Vec<u64>,
}

pub fn histogram_edges() -> Vec<f64> {
    let (lo, hi) = (HISTOGRAM_MIN.log10(), HISTOGRAM_MAX.log10());
    (0..=HISTOGRAM_BUCKETS)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / HISTOGRAM_BUCKETS as f64))
        .collect()
}

fn bucket(v: f64) -> usize {
    let (lo, hi) = (HISTOGRAM_MIN.log10(), HISTOGRAM_MAX.log10());
    let pos = (v.log10() - lo) / (hi - lo) * HISTOGRAM_BUCKETS as f64;
    (pos.floor().max(0.0) as usize).min(HISTOGRAM_BUCKETS - 1)
}

pub fn latent_report(params: &KSaeParams<f32>, config: &KSaeConfig, sample: &EmbeddingMatrix) -> Result<LatentReport> {
    let z = encode_topk(params, config, sample.view())?;
    let n = config.n();
    let mut fire_counts = vec![0u64; n];
    let mut sums = vec![0f64; n];
    let mut histogram = vec![0u64; HISTOGRAM_BUCKETS];
    for code in &z.codes {
        for (j, v) in code.iter() {
            fire_counts[j] += 1;
            sums[j] += f64::from(v);
            histogram[bucket(f64::from(v))] += 1;
        }
    }
    let mean_activation = sums
        .iter()
        .zip(&fire_counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let dead: Vec<bool> = fire_counts.iter().map(|&c| c == 0).collect();
    let dead_fraction = dead.iter().filter(|&&d| d).count() as f64 / n as f64;
    Ok(LatentReport {
        rows: sample.rows(),
        n,
        k: config.k,
        fire_counts,
        mean_activation,
        dead,
        dead_fraction,
        histogram_edges: histogram_edges(),
        histogram,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMatch {
    pub concept_id: String,
    /// `(latent, mean activation)`, best first.
    pub latents: Vec<(usize, f64)>,
}

/// Ranks latents by their ReLU activation averaged over every concept token.
pub fn match_concept(
    params: &KSaeParams<f32>,
    config: &KSaeConfig,
    concept_id: &str,
    concepts: &[EmbeddingMatrix],
    top_m: usize,
) -> Result<ConceptMatch> {
    let n = config.n();
    if top_m > n {
        return Err(Error::Config(format!("top_m = {top_m} exceeds n = {n}")));
    }
    if concepts.is_empty() {
        return Err(Error::Request("no concept embeddings given".into()));
    }
    let mut sums = vec![0f64; n];
    let mut rows = 0usize;
    for c in concepts {
        let a = encode_relu(params, config, c.view())?;
        for row in a.axis_iter(Axis(0)) {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s += f64::from(v);
            }
        }
        rows += c.rows();
    }
    let mut ranked: Vec<(usize, f64)> = sums.into_iter().map(|s| s / rows as f64).enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_m);
    Ok(ConceptMatch {
        concept_id: concept_id.to_string(),
        latents: ranked,
    })
}

/// For each true atom (column of `true_dictionary`, `d x m`), the largest
/// `|cos|` against any decoder column; averaged over atoms.
pub fn dictionary_similarity(params: &KSaeParams<f32>, true_dictionary: &EmbeddingMatrix) -> Result<f64> {
    let d = params.d();
    if true_dictionary.rows() != d {
        return Err(Error::Shape(format!(
            "dictionary has {} rows, model d = {d}",
            true_dictionary.rows()
        )));
    }
    let unit = |cols: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        cols.into_iter()
            .map(|c| {
                let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                c.into_iter().map(|v| if norm > 0.0 { v / norm } else { 0.0 }).collect()
            })
            .collect()
    };
    let truth = unit(
        true_dictionary
            .view()
            .axis_iter(Axis(1))
            .map(|c| c.iter().map(|&v| f64::from(v)).collect())
            .collect(),
    );
    let learned = unit(
        params
            .w_dec
            .axis_iter(Axis(1))
            .map(|c| c.iter().map(|&v| f64::from(v)).collect())
            .collect(),
    );
    let total: f64 = truth
        .iter()
        .map(|a| {
            learned
                .iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().abs())
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / truth.len() as f64)
}
