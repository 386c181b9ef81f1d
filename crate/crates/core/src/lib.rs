//! Text-driven image editing by optimizing diffusion latents under
//! attention-derived constraints.
//!
//! The target branch's latent is nudged at each denoising step by two
//! gradients: one keeps its self-attention maps close to the source branch's
//! (structure preservation), the other raises the cross-attention mass of the
//! edited words inside the edit mask (text alignment). A time-step scheduler
//! shifts weight from alignment to preservation as denoising proceeds.

pub mod array_io;
pub mod backend;
pub mod bench;
pub mod constraints;
pub mod error;
pub mod mask;
pub mod pipeline;
pub mod sampler;
pub mod scheduler;

pub use error::{Error, Result};
