//! Derivation of independent sub-seeds from one master seed.

use sha2::{Digest, Sha256};

/// A 64-bit seed for the stream named `label` under `master`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
