//! Per-component seed derivation.
//!
//! `derive(global, label)` hashes the label with FNV-1a, mixes it into the
//! global seed and runs one SplitMix64 finalization. Distinct labels give
//! independent-looking streams; the same inputs always give the same seed.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label
        .bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn derive(global: u64, label: &str) -> u64 {
    splitmix64(global ^ fnv1a(label))
}
