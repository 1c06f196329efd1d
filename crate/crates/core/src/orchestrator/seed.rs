use sha2::{Digest, Sha256};

/// Pseudo client id for server-side randomness (model initialization).
pub const SERVER_STREAM: u64 = u64::MAX;

/// Derives an independent generator seed for one (round, client, purpose).
///
/// The tuple is hashed with SHA-256, so any client's randomness depends only
/// on its own coordinates and never on execution order.
pub fn seed_stream(root_seed: u64, round: u64, client_id: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"fedsilo/seed-stream/v1");
    h.update(root_seed.to_le_bytes());
    h.update(round.to_le_bytes());
    h.update(client_id.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}
