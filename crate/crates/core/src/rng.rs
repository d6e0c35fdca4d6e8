//! Labeled random substreams derived from a single master seed.
//!
//! Every stream is keyed by `(master_seed, label, indices...)` through SHA-256,
//! so adding participants or repetitions never perturbs any other stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Generator used for every simulation stream.
pub type Stream = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamLabel {
    Outcome,
    App,
    Policy,
    Fallback,
    Rep,
    EnvGen,
    Fit,
}

impl StreamLabel {
    fn tag(self) -> &'static [u8] {
        match self {
            StreamLabel::Outcome => b"outcome",
            StreamLabel::App => b"app",
            StreamLabel::Policy => b"policy",
            StreamLabel::Fallback => b"fallback",
            StreamLabel::Rep => b"rep",
            StreamLabel::EnvGen => b"env-gen",
            StreamLabel::Fit => b"fit",
        }
    }
}

/// Derive a 64-bit seed for the labeled substream.
pub fn derive_seed(master: u64, label: StreamLabel, indices: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.tag());
    for idx in indices {
        hasher.update(idx.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(master: u64, label: StreamLabel, indices: &[u64]) -> Stream {
    Stream::seed_from_u64(derive_seed(master, label, indices))
}

/// Seed for Monte Carlo repetition `rep` of an experiment.
pub fn rep_seed(master: u64, rep: u64) -> u64 {
    derive_seed(master, StreamLabel::Rep, &[rep])
}
