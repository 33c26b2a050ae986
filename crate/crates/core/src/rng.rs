//! Reproducible random streams.
//!
//! Every stream is a ChaCha8 keystream whose key is derived from
//! `(seed, experiment)` and whose 64-bit stream id encodes
//! `(replicate, role)`. Replicate `i` therefore draws the same numbers no
//! matter which thread runs it or in which order replicates are scheduled.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct roles never share numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum StreamRole {
    ChainStart = 1,
    ChainSteps = 2,
    Reference = 3,
    Floor = 4,
    Directions = 5,
    Gaussian = 6,
    Auxiliary = 7,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub experiment: u64,
    pub replicate: u64,
    pub role: StreamRole,
}

impl StreamKey {
    pub fn new(seed: u64, role: StreamRole) -> Self {
        Self {
            seed,
            experiment: 0,
            replicate: 0,
            role,
        }
    }

    pub fn experiment(mut self, experiment: u64) -> Self {
        self.experiment = experiment;
        self
    }

    pub fn replicate(mut self, replicate: u64) -> Self {
        self.replicate = replicate;
        self
    }

    pub fn role(mut self, role: StreamRole) -> Self {
        self.role = role;
        self
    }

    pub fn stream(&self) -> RandomStream {
        RandomStream::new(*self)
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit id for a label, e.g. an experiment name plus grid point.
pub fn label_id(label: &str, index: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325_u64;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    mix64(h ^ mix64(index))
}

#[derive(Debug, Clone)]
pub struct RandomStream {
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RandomStream {
    pub fn new(key: StreamKey) -> Self {
        let mut seed = [0u8; 32];
        let words = [
            mix64(key.seed),
            mix64(key.seed ^ 0x5851_f42d_4c95_7f2d),
            mix64(key.experiment),
            mix64(key.experiment ^ 0x1405_7b7e_f767_814f),
        ];
        for (chunk, w) in seed.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        assert!(key.replicate < 1 << 56, "replicate index out of range");
        rng.set_stream((key.replicate << 8) | key.role as u64);
        Self {
            rng,
            spare_normal: None,
        }
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Standard normal by the Marsaglia polar method.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let factor = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * factor);
                return u * factor;
            }
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}
