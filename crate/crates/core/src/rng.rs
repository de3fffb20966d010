//! Seed derivation for reproducible batch work.
//!
//! Every random draw comes from a ChaCha8 stream addressed by a path of
//! integer tags (run, trajectory, step, ...). Results never depend on the
//! order in which workers visit the tree.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A node in the seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    key: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self {
            key: splitmix64(seed),
        }
    }

    /// Derive the child stream labelled `tag`.
    pub fn child(self, tag: u64) -> Self {
        Self {
            key: splitmix64(self.key ^ splitmix64(tag.wrapping_add(0x632B_E59B_D9B4_E019))),
        }
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}

/// Well-known first-level tags so different consumers of one run seed never collide.
pub mod tags {
    pub const NOISE: u64 = 1;
    pub const DATA: u64 = 2;
    pub const PROJECTIONS: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const HELDOUT: u64 = 5;
    pub const INIT: u64 = 6;
    pub const PATHS: u64 = 7;
}

pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        scale * z
    })
}

/// Draw `count` initial states x_T ~ N(0, T^2 I), one stream per index.
pub fn prior_batch(seeds: SeedTree, count: usize, dim: usize, t_max: f64) -> Vec<DVector<f64>> {
    (0..count)
        .map(|i| gaussian_vector(&mut seeds.child(i as u64).rng(), dim, t_max))
        .collect()
}
