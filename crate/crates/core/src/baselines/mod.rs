//! Comparison fusion methods: self-attention block, top-3 MoE and plain
//! (optionally masked) concatenation.

pub mod moe;
pub mod self_attn;

use alloc::vec::Vec;

pub use moe::{MoeOutput, MoeParams};
pub use self_attn::{SelfAttnCache, SelfAttnParams};

use crate::embedding::{apply_mask, sample_mask, CompoundEmbedding};
use crate::error::Result;

/// Concatenation baseline. With `with_mask` the compound is masked first
/// using the stream keyed by `seed`.
pub fn ensemble_forward(
    compound: &CompoundEmbedding,
    with_mask: bool,
    rho: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if !with_mask {
        return Ok(compound.flat().to_vec());
    }
    let mask = sample_mask(compound.shape(), rho, seed)?;
    Ok(apply_mask(compound, &mask)?.flat().to_vec())
}
