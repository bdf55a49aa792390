//! The crate's one random generator, fixed so other implementations can
//! reproduce weights and synthetic data exactly.
//!
//! * Stream: ChaCha8 seeded with `ChaCha8Rng::seed_from_u64(seed)`.
//! * Uniform: `(next_u64() >> 11) * 2^-53`, in `[0, 1)`.
//! * Normal: Box-Muller on two consecutive uniforms `u1, u2`, using only the
//!   cosine branch: `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`. `ln`, `cos` and
//!   `sqrt` come from `libm` so results do not depend on the platform math
//!   library. The f64 result is multiplied by the std and rounded to f32.
//! * Integer below `n`: `next_u64() % n`.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(1.0 - u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
    }

    pub fn normal_vec(&mut self, n: usize, std: f64) -> Vec<f32> {
        (0..n).map(|_| (self.normal() * std) as f32).collect()
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next_u64() % n
    }

    /// Fisher-Yates, walking from the last index down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in selection order: the first `k`
    /// slots of a forward partial Fisher-Yates shuffle.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k.min(n) {
            let j = i + self.below((n - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx.truncate(k.min(n));
        idx
    }
}
