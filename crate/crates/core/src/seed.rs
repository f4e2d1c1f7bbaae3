//! Stable sub-seed derivation.
//!
//! A single root seed fans out into per-stage seeds by hashing fixed labels,
//! so each stage can be reproduced on its own. The hash (FNV-1a folded
//! through SplitMix64) is spelled out here because `std`'s hasher is not
//! stable across releases.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a sub-seed from `root` and an ordered list of labels.
pub fn derive(root: u64, labels: &[&str]) -> u64 {
    let mut h = FNV_OFFSET;
    for byte in root.to_le_bytes() {
        h = (h ^ byte as u64).wrapping_mul(FNV_PRIME);
    }
    for label in labels {
        for &byte in label.as_bytes() {
            h = (h ^ byte as u64).wrapping_mul(FNV_PRIME);
        }
        // separator so ["ab","c"] != ["a","bc"]
        h = (h ^ 0xff).wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}
