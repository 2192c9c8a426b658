//! Deterministic parameter generator.
//!
//! Each tensor gets its own SplitMix64 stream. The stream state is the
//! model seed mixed with the FNV-1a hash of the tensor name, so adding or
//! reordering tensors never shifts the values of the others.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Stream for a named tensor under a model seed.
    pub fn for_tensor(seed: u64, name: &str) -> Self {
        let mut mixer = Self::new(seed ^ fnv1a64(name.as_bytes()));
        // one warm-up round decorrelates nearby seeds
        let state = mixer.next_u64();
        Self::new(state)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [-1, 1) with 24 bits of mantissa, exact in f32.
    pub fn next_symmetric(&mut self) -> f32 {
        let bits = (self.next_u64() >> 40) as u32;
        (bits as f32) * (2.0 / 16_777_216.0) - 1.0
    }
}
