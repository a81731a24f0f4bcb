use rand::seq::index;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

/// Seeded random stream. Child streams derived with [`Rng::fork`] depend only
/// on the parent seed and the tag, never on how many values the parent drew.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fork(&self, tag: u64) -> Rng {
        Rng::new(splitmix64(
            self.seed ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D)),
        ))
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn beta(&mut self, a: f64, b: f64) -> f64 {
        Beta::new(a, b)
            .expect("beta parameters must be positive")
            .sample(&mut self.inner)
    }

    /// Uniform integer in [0, n). Panics when `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniform draw from [0, n) excluding `skip`. Requires `n >= 2`.
    pub fn below_except(&mut self, n: usize, skip: usize) -> usize {
        debug_assert!(n >= 2 && skip < n);
        let v = self.below(n - 1);
        if v >= skip {
            v + 1
        } else {
            v
        }
    }

    /// `amount` distinct indices from [0, n), in draw order.
    pub fn choose_indices(&mut self, n: usize, amount: usize) -> Vec<usize> {
        index::sample(&mut self.inner, n, amount).into_vec()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
