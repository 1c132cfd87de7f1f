use crate::error::{Error, Result};

/// xoshiro256** generator seeded through splitmix64.
///
/// The integer stream is a pure function of the seed and identical on every
/// platform, which is what makes every sampled artifact in this crate
/// reproducible from a single u64.
#[derive(Clone, Debug)]
pub struct Prng {
    state: [u64; 4],
    seed: u64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Prng {
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Prng { state, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Unbiased uniform integer in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        // Reject the top 2^64 mod n values so the modulo is exact.
        let reject = (u64::MAX % n + 1) % n;
        loop {
            let x = self.next_u64();
            if reject == 0 || x <= u64::MAX - reject {
                return x % n;
            }
        }
    }

    /// Standard normal via Box-Muller; two uniforms per draw, no caching,
    /// so the stream position is a fixed function of the call count.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.next_normal()
    }

    /// `k` distinct values drawn uniformly from [1, n], sorted ascending.
    ///
    /// Partial Fisher-Yates over the identity permutation; every k-subset of
    /// {1..n} is equally likely.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > n {
            return Err(Error::InvalidArgument(format!(
                "sample_without_replacement requires 1 <= k <= n, got k={k}, n={n}"
            )));
        }
        let mut pool: Vec<usize> = (1..=n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        let mut picked = pool[..k].to_vec();
        picked.sort_unstable();
        Ok(picked)
    }

    /// Weighted index draw; weights must be non-negative with positive sum.
    pub fn weighted_index(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.next_f64() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        weights.len() - 1
    }

    /// Vector of token ids uniform in [0, vocab).
    pub fn tokens(&mut self, len: usize, vocab: u32) -> Vec<u32> {
        (0..len).map(|_| self.below(vocab as u64) as u32).collect()
    }
}
