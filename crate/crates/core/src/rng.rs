//! Seeded, platform-independent random numbers.
//!
//! The generator is xoshiro256** with its state expanded from a 64-bit seed
//! by splitmix64. All derived draws (uniform floats, bounded integers,
//! Box-Muller normals) are defined here so that sequences are bit-exact
//! everywhere.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Rng {
    inner: Xoshiro256StarStar,
}

/// splitmix64 output function; used to mix stream identifiers into seeds.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    /// Independent generator for a numbered stream under `seed`. A stream is
    /// a pure function of `(seed, path)`, which is what makes parallel work
    /// reproduce the sequential result.
    pub fn stream(seed: u64, path: &[u64]) -> Self {
        let mixed = path.iter().fold(mix64(seed), |acc, &p| mix64(acc ^ mix64(p)));
        Rng::new(mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        debug_assert!(lo < hi);
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer in `[0, n)`, by rejection so every value is equally
    /// likely.
    pub fn uniform_int(&mut self, n: usize) -> Result<usize> {
        if n == 0 {
            return Err(Error::invalid("uniform_int: n must be at least 1"));
        }
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return Ok((x % n) as usize);
            }
        }
    }

    /// Standard normal via Box-Muller; consumes two uniforms per call.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.unit(); // (0, 1]
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_int(i + 1).expect("i + 1 >= 1");
            items.swap(i, j);
        }
    }
}
