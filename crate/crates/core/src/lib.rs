//! Online low-rank compression of saved autodiff activations.
//!
//! Activations are compressed to rank-`k` factors during the forward pass and
//! reconstructed for the backward pass; the forward computation itself is
//! never altered.

pub mod autodiff;
pub mod bounds;
pub mod compress;
pub mod decompose;
pub mod linalg;
pub mod synth;
pub mod transformer;
