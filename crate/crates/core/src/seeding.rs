//! Deterministic derivation of per-component RNG seeds from one master seed.

/// FNV-1a over the tag bytes, mixed with the master seed.
///
/// Stable across platforms and Rust versions, unlike `DefaultHasher`.
pub fn subseed(master: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ master.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}
