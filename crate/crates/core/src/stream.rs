//! Named deterministic random streams.
//!
//! Every stochastic quantity in the pipeline (masking, parameter init, Monte
//! Carlo draws, Gumbel noise, latent-noise samples, ...) pulls from its own
//! stream derived from one master seed, so runs are reproducible and the
//! consumption pattern of one stream cannot perturb another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream names used by the training pipeline.
pub mod names {
    pub const MASK: &str = "mask";
    pub const INIT: &str = "init";
    pub const MC: &str = "mc";
    pub const GUMBEL: &str = "gumbel";
    pub const LATENT: &str = "z";
    pub const SPLIT: &str = "split";
    pub const SHUFFLE: &str = "shuffle";
    pub const DATA: &str = "data";
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive the seed of a named stream from the master seed.
pub fn stream_seed(master: u64, name: &str) -> u64 {
    splitmix64(master ^ fnv1a(name))
}

/// RNG for a named stream.
pub fn stream(master: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, name))
}

/// Seed of an indexed substream, e.g. one per (epoch, batch) pair.
pub fn substream_seed(master: u64, name: &str, index: u64) -> u64 {
    splitmix64(stream_seed(master, name) ^ splitmix64(index))
}

/// RNG for an indexed substream.
pub fn substream(master: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(master, name, index))
}

/// Uniform draw in the open interval (0, 1).
pub fn open_unit(rng: &mut impl rand::Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 && u < 1.0 {
            return u;
        }
    }
}
