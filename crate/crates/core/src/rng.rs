//! Counter-based random streams.
//!
//! Every draw is a pure function of `(key, counter)`, so a stream can be split
//! into named substreams (per step, per repeat, per worker) without any shared
//! mutable state. Output bits come from the SplitMix64 finalizer; Gaussian
//! variates use the Box–Muller transform.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Substream tags used across the crate. Distinct tags keep data, init and
/// evaluation draws independent for the same user seed.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const RESAMPLE: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const PARTICLES: u64 = 6;
    pub const ORACLE: u64 = 7;
}

#[derive(Clone, Debug)]
pub struct Stream {
    key: u64,
    counter: u64,
    spare: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream {
            key: mix64(seed ^ 0x6A09_E667_F3BC_C908),
            counter: 0,
            spare: None,
        }
    }

    /// Independent child stream identified by `(tag, index)`.
    pub fn substream(&self, tag: u64, index: u64) -> Stream {
        let k = mix64(self.key ^ mix64(tag.wrapping_mul(GAMMA) ^ 0x3C6E_F372_FE94_F82B));
        Stream {
            key: mix64(k ^ mix64(index.wrapping_add(0xA54F_F53A_5F1D_36F1))),
            counter: 0,
            spare: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let z = self.key.wrapping_add(self.counter.wrapping_add(1).wrapping_mul(GAMMA));
        self.counter = self.counter.wrapping_add(1);
        mix64(z)
    }

    /// Uniform in the open interval (0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(radius * s);
        radius * c
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    /// Uniform integer in `0..n` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
