//! Labeled seed derivation. Every random stream in a run is a pure function
//! of the run seed, a label and a few counters, so results never depend on
//! scheduling or on how work is partitioned.

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base`, a label and a sequence of counters into a new seed.
pub fn derive(base: u64, label: &str, parts: &[u64]) -> u64 {
    let mut h = splitmix64(base);
    for b in label.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}
