//! Adaptive blind source separation with nonlinear-PCA RLS and EASI, and
//! their unrolled, trainable counterparts (Deep RLS, Deep EASI).
//!
//! The crate is layered bottom-up:
//!
//! * [`model`] draws mixtures `x = A s + n`.
//! * [`baseline`] runs the classical recursions.
//! * [`autograd`] records matrix computations for reverse-mode gradients.
//! * [`unrolled`] expresses the recursions as networks on the tape.
//! * [`loss`] and [`train`] fit those networks with Adam.
//! * [`eval`] scores runs and assembles convergence curves.
//! * [`oracle`] holds brute-force references used to check the above.
//!
//! Batch work (datasets, per-sequence gradients, evaluation) goes through
//! [`exec::Exec`], which uses rayon when the `parallel` feature is on and
//! preserves input order either way.

pub mod autograd;
pub mod baseline;
pub mod cli;
pub mod error;
pub mod eval;
pub mod exec;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod oracle;
pub mod train;
pub mod unrolled;

pub use error::{Error, Result};
pub use exec::Exec;
pub use linalg::Mat;

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Short stable fingerprint of a serializable configuration: the first 16
/// hex digits of the SHA-256 of its JSON form.
pub fn digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configs serialize to JSON");
    sha256_hex(&json)[..16].to_string()
}
