use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Seeded counter-based generator.
///
/// Backed by ChaCha8: the keystream is a pure function of `(seed, stream,
/// word position)`, so outputs are identical on every platform. `split`
/// derives a child stream from a 64-bit key by mixing it into the seed with
/// SplitMix64 finalisation; different keys give disjoint, reproducible
/// sequences regardless of how much the parent has been consumed.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a `(seed, key)` pair.
pub fn hash_pair(seed: u64, key: u64) -> u64 {
    mix64(mix64(seed) ^ key.rotate_left(17) ^ 0xA076_1D64_78BD_642F)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child generator keyed by `key`. Does not advance `self`.
    pub fn split(&self, key: u64) -> Rng {
        Rng::with_stream(hash_pair(self.seed, key), self.stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Standard Gumbel sample `-ln(-ln u)` with `u` clamped to
    /// `[1e-10, 1 - 1e-10]`.
    pub fn gumbel(&mut self) -> f64 {
        let u = self.uniform().clamp(1e-10, 1.0 - 1e-10);
        -(-u.ln()).ln()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
