//! Deterministic PRNG streams.
//!
//! One named stream per consumer (init, dropout-syn, dropout-aut, shuffle) so
//! adding a consumer never perturbs the draws seen by the others. State is a
//! single u64 per stream, which makes checkpointing it trivial.

use serde::{Deserialize, Serialize};

/// splitmix64: seed expander used to derive independent stream seeds.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// xorshift64* stream. Never reaches state 0 when seeded via splitmix64.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    state: u64,
}

impl RngStream {
    /// Derive a stream from a master seed and a consumer name.
    pub fn named(seed: u64, name: &str) -> Self {
        let mut s = seed;
        for &b in name.as_bytes() {
            s = s.wrapping_mul(0x100_0000_01b3).wrapping_add(u64::from(b));
        }
        let mut expand = s;
        let mut state = splitmix64(&mut expand);
        if state == 0 {
            state = 0x9e37_79b9_7f4a_7c15;
        }
        RngStream { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_f491_4f6c_dd1d)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via the polar method. Draws until acceptance; the
    /// spare value is discarded so the stream needs no carry state.
    pub fn normal(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn restore(state: u64) -> Self {
        RngStream { state }
    }
}

/// The named streams a training run consumes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngBundle {
    pub init: RngStream,
    pub dropout_syn: RngStream,
    pub dropout_aut: RngStream,
    pub shuffle: RngStream,
}

impl RngBundle {
    pub fn from_seed(seed: u64) -> Self {
        RngBundle {
            init: RngStream::named(seed, "init"),
            dropout_syn: RngStream::named(seed, "dropout-syn"),
            dropout_aut: RngStream::named(seed, "dropout-aut"),
            shuffle: RngStream::named(seed, "shuffle"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_deterministic() {
        let mut a = RngStream::named(7, "init");
        let mut b = RngStream::named(7, "init");
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn named_streams_differ() {
        let mut a = RngStream::named(7, "init");
        let mut b = RngStream::named(7, "shuffle");
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn uniform_stays_in_range() {
        let mut r = RngStream::named(3, "t");
        for _ in 0..1000 {
            let x = r.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut r = RngStream::named(11, "t");
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn restore_resumes_stream() {
        let mut a = RngStream::named(5, "x");
        a.next_u64();
        let snap = a.state();
        let ahead: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let mut b = RngStream::restore(snap);
        let replay: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        assert_eq!(ahead, replay);
    }
}
