//! Deterministic random number generator.
//!
//! xoshiro256++ seeded through splitmix64. The algorithm is fixed so that a
//! seed produces the same draw sequence on every platform and in every build;
//! checkpoints store the raw generator state and restore it bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rng {
    state: [u64; 4],
    /// Spare normal deviate from the last Box-Muller pair.
    cached_normal: Option<f64>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        Rng {
            state: [
                splitmix64(&mut sm),
                splitmix64(&mut sm),
                splitmix64(&mut sm),
                splitmix64(&mut sm),
            ],
            cached_normal: None,
        }
    }

    /// Derive an independent generator for a named sub-stream.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut sm = seed ^ stream.wrapping_mul(0xd1b54a32d192ed03);
        let mixed = splitmix64(&mut sm);
        Rng::new(mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
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

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal deviate (Box-Muller, spare value cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.cached_normal.take() {
            return v;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(radius * theta.sin());
        radius * theta.cos()
    }

    /// Uniform integer in [0, n). Rejection sampling keeps the draw unbiased.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Exponential deviate with the given mean.
    pub fn exponential(&mut self, mean: f64) -> f64 {
        // 1 - u in (0, 1].
        -mean * (1.0 - self.next_f64()).ln()
    }

    /// Gamma deviate with shape 2: sum of two exponentials.
    pub fn gamma2(&mut self, mean: f64) -> f64 {
        let scale = mean / 2.0;
        self.exponential(scale) + self.exponential(scale)
    }

    /// Poisson deviate (Knuth's product method; fine for small means).
    pub fn poisson(&mut self, mean: f64) -> usize {
        if mean <= 0.0 {
            return 0;
        }
        let limit = (-mean).exp();
        let mut k = 0usize;
        let mut p = 1.0;
        loop {
            p *= self.next_f64();
            if p <= limit {
                return k;
            }
            k += 1;
        }
    }

    /// Geometric deviate: number of failures before the first success.
    pub fn geometric(&mut self, success_prob: f64) -> usize {
        if success_prob >= 1.0 {
            return 0;
        }
        let u = 1.0 - self.next_f64();
        (u.ln() / (1.0 - success_prob).ln()).floor() as usize
    }

    /// Serialize the generator state as a compact string for checkpoints.
    pub fn state_string(&self) -> String {
        let cache = match self.cached_normal {
            Some(v) => format!("{:016x}", v.to_bits()),
            None => "-".to_string(),
        };
        format!(
            "xo256pp:{:016x}:{:016x}:{:016x}:{:016x}:{}",
            self.state[0], self.state[1], self.state[2], self.state[3], cache
        )
    }

    pub fn from_state_string(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 6 || parts[0] != "xo256pp" {
            return Err(Error::Corrupt(format!("bad rng state '{s}'")));
        }
        let word = |p: &str| {
            u64::from_str_radix(p, 16).map_err(|_| Error::Corrupt(format!("bad rng word '{p}'")))
        };
        let cached_normal = if parts[5] == "-" {
            None
        } else {
            Some(f64::from_bits(word(parts[5])?))
        };
        Ok(Rng {
            state: [word(parts[1])?, word(parts[2])?, word(parts[3])?, word(parts[4])?],
            cached_normal,
        })
    }
}
