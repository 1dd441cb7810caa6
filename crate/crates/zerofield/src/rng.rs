//! Counter-keyed deterministic random streams.
//!
//! Every random quantity in the simulator draws from a stream keyed by
//! (seed, domain, frame, pixel, ...), so output never depends on evaluation
//! order or thread count. The stream itself is SplitMix64: fast, stable
//! across platforms, and statistically fine for noise synthesis. Not for
//! secrets.

use rand::RngCore;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline(always)]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Domain separators so different uses of the same (seed, indices) key
/// never collide.
#[derive(Debug, Clone, Copy)]
pub enum Domain {
    ClusterTexture = 1,
    ShotNoise = 2,
    ReadNoise = 3,
    MonteCarlo = 4,
}

/// A SplitMix64 stream seeded from an arbitrary key tuple.
#[derive(Debug, Clone)]
pub struct CounterRng {
    state: u64,
}

impl CounterRng {
    /// Derives an independent stream from the key parts. Each part is
    /// absorbed through a full avalanche round.
    pub fn from_key(parts: &[u64]) -> Self {
        let mut state = 0x243F_6A88_85A3_08D3; // pi fraction, arbitrary nonzero
        for &p in parts {
            state = mix(state ^ p.wrapping_mul(GOLDEN));
        }
        CounterRng { state }
    }

    pub fn for_pixel(seed: u64, domain: Domain, frame: u64, pixel: u64) -> Self {
        CounterRng::from_key(&[seed, domain as u64, frame, pixel])
    }

    #[inline(always)]
    pub fn next_raw(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in [0, 1).
    #[inline(always)]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_raw() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_raw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_raw()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let v = self.next_raw().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}
