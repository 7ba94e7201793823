//! Counter-based randomness derived from one root seed.
//!
//! Every consumer gets a named stream: `StreamRng::new(root_seed, "data.train")`
//! hashes the name (FNV-1a) into the root seed and finalizes with the
//! splitmix64 mixer. Draw `i` of a stream is a pure function of
//! `(root_seed, name, i)` — there is no mutable generator state to thread
//! through the code, so per-item draws are order-independent and a training
//! step can address its slice of the stream as `step * batch + item`.
//!
//! Gaussians come from Box-Muller over two counter slots, which keeps each
//! normal pair addressable the same way.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 output mixer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A named random stream: a pure `counter -> draw` map.
#[derive(Clone, Copy, Debug)]
pub struct StreamRng {
    key: u64,
}

impl StreamRng {
    pub fn new(root_seed: u64, name: &str) -> Self {
        StreamRng { key: mix(root_seed ^ fnv1a(name.as_bytes())) }
    }

    pub fn u64_at(&self, counter: u64) -> u64 {
        mix(self.key.wrapping_add(counter.wrapping_mul(GOLDEN).wrapping_add(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 bits of mantissa.
    pub fn uniform_at(&self, counter: u64) -> f64 {
        (self.u64_at(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn index_at(&self, counter: u64, n: usize) -> usize {
        assert!(n > 0, "index_at needs a non-empty range");
        (self.u64_at(counter) % n as u64) as usize
    }

    /// Standard-normal pair from Box-Muller over counter slots `2c` and `2c+1`.
    pub fn normal_pair_at(&self, counter: u64) -> (f64, f64) {
        // Shift u1 into (0, 1] so the log never sees zero.
        let u1 = ((self.u64_at(2 * counter) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform_at(2 * counter + 1);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }

    pub fn normal_at(&self, counter: u64) -> f64 {
        self.normal_pair_at(counter).0
    }
}
