//! Group-activity video hashing engine.
//!
//! The crate hosts the full desk-scale pipeline: a reverse-mode autodiff
//! core on dense f64 arrays, relation-graph construction from box
//! trajectories, a synthetic scene generator with RoIAlign feature
//! extraction, the interleaved and multi-focused hashing models with their
//! training losses, a learned filter matrix for cross-layer code
//! compression, Hamming-space retrieval with mAP evaluation, and the
//! binary/JSON file formats that tie the stages together.

pub mod adam;
pub mod array;
pub mod error;
pub mod filter;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod losses;
pub mod mstvh;
pub mod param;
pub mod retrieval;
pub mod stvh;
pub mod synth;
pub mod tape;
pub mod train;

pub use array::Array;
pub use error::{Error, Result};
pub use param::{Params, Parameter};
pub use tape::{Tape, Var};

/// Sign with the convention `sign(0) = +1`, used for every binarization in
/// the crate.
pub fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[cfg(test)]
mod tests {
    use super::sign;

    #[test]
    fn sign_of_zero_is_positive() {
        assert_eq!(sign(0.0), 1.0);
        assert_eq!(sign(-0.0), 1.0);
        assert_eq!(sign(3.2), 1.0);
        assert_eq!(sign(-0.001), -1.0);
    }
}
