use crate::ksae::LatentBatch;
use crate::numeric::Real;

/// Per-latent bookkeeping of when each latent last appeared in a TopK code.
///
/// Latent `i` is dead once more than `threshold` tokens have passed since it
/// last fired. Fresh latents count as having fired at token 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeadLatentTracker {
    pub last_fired: Vec<u64>,
    pub tokens_seen: u64,
}

impl DeadLatentTracker {
    pub fn new(n: usize) -> Self {
        Self {
            last_fired: vec![0; n],
            tokens_seen: 0,
        }
    }

    /// Advances the token counter by the batch size, then stamps every latent
    /// that fired with a positive value anywhere in the batch.
    pub fn track_firing<T: Real>(&mut self, z: &LatentBatch<T>) {
        self.tokens_seen += z.codes.len() as u64;
        for code in &z.codes {
            for (j, v) in code.iter() {
                if v > T::zero() {
                    self.last_fired[j] = self.tokens_seen;
                }
            }
        }
    }

    pub fn dead_mask(&self, threshold: u64) -> Vec<bool> {
        self.last_fired
            .iter()
            .map(|&t| self.tokens_seen - t > threshold)
            .collect()
    }

    pub fn dead_count(&self, threshold: u64) -> usize {
        self.dead_mask(threshold).into_iter().filter(|&d| d).count()
    }
}
