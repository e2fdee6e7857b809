//! Seeded random streams.
//!
//! Every random quantity in the toolkit comes from xoshiro256++ seeded
//! through SplitMix64 (`seed_from_u64`). Standard normals use the
//! Box–Muller transform, consuming two 64-bit draws per pair of normals in
//! the order `(cos, sin)`. Uniforms take the top 53 bits of a draw.
//!
//! Independent sub-streams (one per analysis sample) are obtained by
//! applying the 2^128-step jump `index` times to the base stream, so a
//! sample's input depends only on `(seed, index)`.

use rand_xoshiro::rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

const INV_2_53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Debug, Clone)]
pub struct NormalStream {
    rng: Xoshiro256PlusPlus,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare: None,
        }
    }

    /// The `index`-th non-overlapping sub-stream of `seed`.
    pub fn substream(seed: u64, index: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        for _ in 0..index {
            rng.jump();
        }
        Self { rng, spare: None }
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * INV_2_53
    }

    /// Uniform in (0, 1], safe for `ln`.
    fn uniform_open_low(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * INV_2_53
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open_low();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let phi = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * phi.sin());
        r * phi.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }
}
