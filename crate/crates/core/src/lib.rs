//! FOCI: a post-hoc rationale selector over frozen multiple-instance
//! classifiers, and the reveal-based evaluation used to audit it.

pub mod backbones;
pub mod bags;
pub mod engine;
pub mod experiment;
pub mod optim;
pub mod report;
pub mod selector;
pub mod srp;
pub mod stats;
pub mod training;

use sha2::{Digest, Sha256};

use crate::optim::Param;

/// Hex SHA-256 over the shapes and raw bits of a parameter list.
pub fn params_checksum(params: &[Param]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update((p.value.rows() as u64).to_le_bytes());
        h.update((p.value.cols() as u64).to_le_bytes());
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
