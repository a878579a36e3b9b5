//! Neural feedback strategies for two-player zero-sum differential games.

pub mod autodiff;
pub mod benchmarks;
pub mod dynamics;
pub mod error;
pub mod game;
pub mod metrics;
pub mod minimax;
pub mod nn;
pub mod oracle;

pub use error::{Error, Result};

/// Mixes a stream index into a seed (splitmix64 finalizer), so each
/// consumer of randomness gets an independent, reproducible stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
