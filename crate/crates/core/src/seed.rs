//! Deterministic seed derivation for independent random streams.

/// Mixes `base` with a path of stream tags (epoch, batch, ...) into a new seed.
///
/// Distinct paths give statistically independent seeds; the same path always
/// gives the same seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut state = splitmix64(base ^ 0x6a09_e667_f3bc_c908);
    for &tag in path {
        state = splitmix64(state ^ splitmix64(tag.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    state
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
