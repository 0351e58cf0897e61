//! Identity-specific universal cloaks for toy conditional diffusion models.
//!
//! The crate covers the full loop: a small DDIM-style denoiser and text
//! encoder, identity personalization and subspace modelling, cloak crafting,
//! a simulated personalization attacker with proxy identity metrics, and a
//! file-backed experiment workbench.

pub mod cloak;
pub mod diffusion;
pub mod error;
pub mod identity;
pub mod kv;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod threat;
pub mod tns;
pub mod workbench;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::Tensor;

use sha2::{Digest, Sha256};

/// Short content hash (first 16 hex chars of SHA-256).
pub(crate) fn hash_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn hash_f64s(parts: &[&[f64]]) -> String {
    let mut buf = Vec::new();
    for p in parts {
        buf.extend_from_slice(&(p.len() as u64).to_le_bytes());
        for v in *p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    hash_hex(&buf)
}
