//! Secret generation, salted hashing and constant-time verification.

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use rand::RngCore;
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

const SCHEME: &str = "sha256";

/// 256 random bits, URL-safe base64 without padding.
pub fn random_secret() -> String {
    let mut bytes = [0u8; 32];
    rand::rng().fill_bytes(&mut bytes);
    URL_SAFE_NO_PAD.encode(bytes)
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// `sha256$<salt hex>$<digest hex>` where digest = SHA-256(salt || secret).
pub fn hash_secret(secret: &str) -> String {
    let mut salt = [0u8; 16];
    rand::rng().fill_bytes(&mut salt);
    salted(&salt, secret)
}

fn salted(salt: &[u8], secret: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(salt);
    hasher.update(secret.as_bytes());
    format!("{SCHEME}${}${}", hex::encode(salt), hex::encode(hasher.finalize()))
}

/// Compares `secret` against a stored salted hash without early exit on the digest.
pub fn verify_secret(secret: &str, stored: &str) -> bool {
    let mut parts = stored.splitn(3, '$');
    let (Some(SCHEME), Some(salt_hex), Some(_)) = (parts.next(), parts.next(), parts.next()) else {
        return false;
    };
    let Ok(salt) = hex::decode(salt_hex) else {
        return false;
    };
    let candidate = salted(&salt, secret);
    candidate.len() == stored.len() && bool::from(candidate.as_bytes().ct_eq(stored.as_bytes()))
}

/// Burns the same hashing work as a real verification; used for unknown client ids.
pub fn verify_against_dummy(secret: &str) -> bool {
    const DUMMY: &str = "sha256$00000000000000000000000000000000$0000000000000000000000000000000000000000000000000000000000000000";
    let _ = verify_secret(secret, DUMMY);
    false
}

/// Unsalted digest comparison for high-entropy keys (agent keys, bearer tokens).
pub fn verify_key(key: &str, stored_hash: &str) -> bool {
    let candidate = sha256_hex(key.as_bytes());
    candidate.len() == stored_hash.len()
        && bool::from(candidate.as_bytes().ct_eq(stored_hash.as_bytes()))
}
