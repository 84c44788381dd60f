//! Seeded random number generation for parameter init, data synthesis,
//! and randomized tests. One wrapper type so every consumer draws from
//! the same deterministic stream implementation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::DenseTensor;

pub struct SeededRng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Independent substream; `label` keeps call sites order-insensitive.
    pub fn derive(&self, seed: u64, label: u64) -> Self {
        Self::new(seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.inner.gen::<f64>() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1: f64 = self.inner.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = self.inner.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> DenseTensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.uniform(lo, hi)).collect();
        DenseTensor::new(shape.to_vec(), data).expect("shape/data consistent by construction")
    }

    /// Kaiming-style uniform init: bound = sqrt(1 / fan_in).
    pub fn linear_init(&mut self, shape: &[usize], fan_in: usize) -> DenseTensor {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        self.uniform_tensor(shape, -bound, bound)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    /// Deterministic sample of `k` distinct indices from `0..n`, ascending.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut all: Vec<usize> = (0..n).collect();
        self.shuffle(&mut all);
        let mut picked: Vec<usize> = all.into_iter().take(k.min(n)).collect();
        picked.sort_unstable();
        picked
    }
}
