//! Counter-based splittable randomness.
//!
//! Every draw is a pure function of (seed, stream name, index), so random
//! choices are reproducible regardless of evaluation order or worker count,
//! and training can resume mid-run without replaying a sequential generator.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// A named stream of independent draws under one seed.
#[derive(Clone, Copy, Debug)]
pub struct Stream {
    key: u64,
}

impl Stream {
    pub fn new(seed: u64, name: &str) -> Self {
        Stream {
            key: splitmix64(seed ^ fnv1a(name.as_bytes())),
        }
    }

    /// Derives a sub-stream, e.g. one per training step.
    pub fn substream(&self, index: u64) -> Stream {
        Stream {
            key: splitmix64(self.key ^ splitmix64(index)),
        }
    }

    #[inline]
    pub fn u64_at(&self, index: u64) -> u64 {
        splitmix64(self.key ^ splitmix64(index ^ GOLDEN))
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn uniform_at(&self, index: u64) -> f64 {
        (self.u64_at(index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform_in(&self, index: u64, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_at(index)
    }

    /// Standard normal via Box-Muller; one value per index.
    pub fn normal_at(&self, index: u64) -> f64 {
        // u1 in (0, 1] so the log never sees zero.
        let u1 = ((self.u64_at(index.wrapping_mul(2)) >> 11) + 1) as f64
            / (1u64 << 53) as f64;
        let u2 = self.uniform_at(index.wrapping_mul(2).wrapping_add(1));
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Gumbel(0, 1) noise: -ln(-ln(u)) with u in (0, 1).
    pub fn gumbel_at(&self, index: u64) -> f64 {
        let u = ((self.u64_at(index) >> 11) + 1) as f64 / ((1u64 << 53) + 1) as f64;
        -(-u.ln()).ln()
    }
}
