//! Portable deterministic random stream.
//!
//! The generator is PCG64 (`XSL-RR 128/64`, the `Lcg128Xsl64` variant). A
//! 64-bit user seed is expanded with SplitMix64 into the 128-bit state and
//! stream selector, so any port that implements SplitMix64 and PCG64 gets
//! the same bits. Derived draws are defined here rather than delegated to
//! `rand` so their exact algorithms stay fixed:
//!
//! * `uniform()` takes the top 53 bits of one `u64`: `(u >> 11) * 2^-53`.
//! * `below(n)` rejects draws from the biased tail of `u64` and reduces mod `n`.
//! * `normal()` is the cosine branch of Box-Muller on two uniforms, with the
//!   first mapped to `(0, 1]` so the logarithm is finite.

use rand_core::Rng as _;
use rand_pcg::Pcg64;

const STREAM_SALT: u64 = 0xda94_2042_e4dd_58b5;

/// One SplitMix64 step. Returns the output and advances `state`.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a parent seed with an index into an independent child seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut s = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    splitmix64(&mut s);
    splitmix64(&mut s)
}

#[derive(Debug, Clone)]
pub struct DetRng {
    inner: Pcg64,
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let hi = splitmix64(&mut sm) as u128;
        let lo = splitmix64(&mut sm) as u128;
        let mut sm2 = seed ^ STREAM_SALT;
        let stream = ((splitmix64(&mut sm2) as u128) << 64) | splitmix64(&mut sm2) as u128;
        Self {
            inner: Pcg64::new((hi << 64) | lo, stream),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n) - 1;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn int_in(&mut self, lo: i64, hi: i64) -> i64 {
        assert!(lo <= hi);
        lo + self.below((hi - lo) as u64 + 1) as i64
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates, high index first.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // First outputs of SplitMix64 seeded with 0 (published reference sequence).
        let mut s = 0u64;
        assert_eq!(splitmix64(&mut s), 0xe220_a839_7b1d_cdaf);
        assert_eq!(splitmix64(&mut s), 0x6e78_9e6a_a1b9_65f4);
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = DetRng::new(42);
        let mut b = DetRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = DetRng::new(43);
        assert_ne!(DetRng::new(42).next_u64(), c.next_u64());
    }

    #[test]
    fn ranges_are_respected() {
        let mut r = DetRng::new(1);
        for _ in 0..10_000 {
            let v = r.int_in(-10, 10);
            assert!((-10..=10).contains(&v));
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_moments() {
        let mut r = DetRng::new(9);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn derived_seeds_differ() {
        let a: Vec<u64> = (0..50).map(|i| derive_seed(7, i)).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(a.len(), b.len());
    }
}
