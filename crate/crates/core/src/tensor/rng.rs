//! Seeded random streams.
//!
//! Every random draw in the crate comes from a PCG-64 (XSL-RR 128/64) generator.
//! A generator is identified by a 64-bit seed plus a textual stream label such
//! as `"init/CONV2.weight"` or `"noise/step/17"`. The label is hashed with
//! 64-bit FNV-1a into the PCG stream selector and the seed is expanded with
//! SplitMix64 into the 128-bit state, so two labels never share a sequence and
//! results do not depend on the order in which layers ask for randomness.

use rand_pcg::Pcg64;

pub use rand_pcg::Pcg64 as StreamRng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Generator for the stream `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> Pcg64 {
    let lo = splitmix64(seed);
    let hi = splitmix64(lo ^ seed.rotate_left(32));
    let state = (u128::from(hi) << 64) | u128::from(lo);
    Pcg64::new(state, u128::from(fnv1a(label)))
}

/// A child seed for a named sub-task, e.g. one epoch of shuffling.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ fnv1a(label))
}
