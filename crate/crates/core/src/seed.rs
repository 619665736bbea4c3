//! Per-concern seeds derived from one master seed.
//!
//! `derive(master, concern, index) = splitmix64(master + GOLDEN * (concern * 2^32 + index + 1))`
//! with `GOLDEN = 0x9E3779B97F4A7C15`. Each concern owns a fixed tag, so
//! changing how much randomness one concern consumes never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Concern {
    /// Parameter initialization.
    Init = 1,
    /// Dataset generation and train/val/test partitioning.
    Data = 2,
    /// Mini-batch order, indexed by epoch.
    Shuffle = 3,
    /// Random strengths and Gaussian feature noise.
    Noise = 4,
    /// Hessian probes, power-iteration starts and landscape directions.
    Estimators = 5,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, concern: Concern, index: u64) -> u64 {
    let tag = ((concern as u64) << 32).wrapping_add(index).wrapping_add(1);
    splitmix64(master.wrapping_add(GOLDEN.wrapping_mul(tag)))
}

pub fn rng_for(master: u64, concern: Concern, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, concern, index))
}
