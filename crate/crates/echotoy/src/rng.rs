//! Deterministic random number plumbing.
//!
//! Every stochastic component in the pipeline draws from a [`ChaCha8Rng`]
//! seeded through [`derive_seed`], so a run is fully determined by one master
//! seed. Sub-streams (per stage, per sample, per training step) are derived
//! by mixing labels into the master seed with splitmix64 rather than by
//! sharing a mutable generator; this keeps results independent of evaluation
//! order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates consecutive or structured inputs.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive an independent stream seed from a master seed and a label pair.
///
/// `domain` separates pipeline stages (data generation, training, sampling,
/// ...); `index` separates items within a stage (sample index, step index).
pub fn derive_seed(master: u64, domain: u64, index: u64) -> u64 {
    let a = splitmix64(master ^ splitmix64(domain));
    splitmix64(a ^ splitmix64(index.wrapping_add(0x51_7c_c1_b7_27_22_0a_95)))
}

/// Construct the generator for a derived stream.
pub fn stream(master: u64, domain: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, domain, index))
}

/// Stage labels used for [`derive_seed`] domains. Centralised so two stages
/// can never collide by accident.
pub mod domains {
    pub const DATA: u64 = 1;
    pub const AVAE: u64 = 2;
    pub const LIFM: u64 = 3;
    pub const LVFM: u64 = 4;
    pub const REID: u64 = 5;
    pub const SAMPLER: u64 = 6;
    pub const EF: u64 = 7;
    pub const INIT: u64 = 8;
    pub const ASSEMBLE: u64 = 9;
}
