//! k-sparse autoencoders over text-encoder token embeddings, and concept
//! steering of embedding sequences with a trained model.
//!
//! The crate covers the whole offline loop: load exported embeddings
//! ([`npy`], [`data`]), train a TopK sparse autoencoder with an auxiliary
//! dead-latent loss ([`ksae`], [`loss`], [`trainer`]), then shift prompt
//! embeddings toward or away from a concept ([`steering`]) and inspect what
//! the latents learned ([`analysis`]).

pub mod analysis;
pub mod data;
pub mod error;
pub mod ksae;
pub mod loss;
pub mod npy;
pub mod numeric;
pub mod presets;
pub mod steering;
pub mod synthetic;
pub mod trainer;

pub use data::{stream_batches, Batch, DatasetManifest, EmbeddingMatrix};
pub use error::{Error, Result};
pub use ksae::{decode, encode_relu, encode_topk, init_params, KSaeConfig, KSaeParams, LatentBatch, LatentCode};
pub use loss::{backward, forward_loss, ForwardResult, GradientSet};
pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};
