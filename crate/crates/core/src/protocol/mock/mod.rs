//! In-process backends for tests, CI and offline experiments.
//!
//! Both mocks write real bytes to the shared blob store, so everything
//! downstream (distance, scoring, accounting) sees ordinary image refs. Mock
//! images are small binary PGM files whose header comment carries a latent
//! quality value that the mock scorer and reasoner read back.

mod scripted;
mod stochastic;

use sha2::{Digest, Sha256};

pub use scripted::{Script, ScriptEntry, ScriptError, ScriptedMock, TranscriptEntry};
pub use stochastic::{InvalidPolicy, Satisfaction, StochasticMock, StochasticPolicy};

pub const MOCK_MEDIA_TYPE: &str = "image/x-portable-graymap";
pub const MOCK_SIDE: usize = 16;

/// Uniform value in `[0, 1)` derived from a seed and labelled parts.
pub(crate) fn unit(seed: u64, parts: &[&[u8]]) -> f64 {
    let bytes = hash(seed, parts);
    let x = u64::from_be_bytes(bytes[..8].try_into().unwrap());
    (x >> 11) as f64 / (1u64 << 53) as f64
}

pub(crate) fn hash(seed: u64, parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    for p in parts {
        h.update((p.len() as u64).to_be_bytes());
        h.update(p);
    }
    h.finalize().into()
}

/// Decoded mock image.
#[derive(Clone, Debug, PartialEq)]
pub struct MockImage {
    pub quality: f64,
    pub pixels: Vec<u8>,
}

impl MockImage {
    /// Deterministic pixels and the given quality.
    pub fn synthesize(seed: u64, label: &[u8], quality: f64) -> Self {
        let mut pixels = Vec::with_capacity(MOCK_SIDE * MOCK_SIDE);
        let mut block = 0u64;
        while pixels.len() < MOCK_SIDE * MOCK_SIDE {
            pixels.extend_from_slice(&hash(seed, &[label, &block.to_be_bytes()]));
            block += 1;
        }
        pixels.truncate(MOCK_SIDE * MOCK_SIDE);
        MockImage { quality, pixels }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n# quality={:.6}\n{MOCK_SIDE} {MOCK_SIDE}\n255\n", self.quality).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        let mut lines = Vec::new();
        let mut rest = bytes;
        for _ in 0..4 {
            let nl = rest.iter().position(|b| *b == b'\n')?;
            lines.push(std::str::from_utf8(&rest[..nl]).ok()?);
            rest = &rest[nl + 1..];
        }
        if lines[0] != "P5" || lines[2] != format!("{MOCK_SIDE} {MOCK_SIDE}") || lines[3] != "255" {
            return None;
        }
        let quality = lines[1].strip_prefix("# quality=")?.parse().ok()?;
        if rest.len() != MOCK_SIDE * MOCK_SIDE {
            return None;
        }
        Some(MockImage {
            quality,
            pixels: rest.to_vec(),
        })
    }

    /// Mean absolute pixel difference scaled to `[0, 1]`.
    pub fn distance(&self, other: &MockImage) -> f64 {
        let total: u64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| u64::from(a.abs_diff(*b)))
            .sum();
        total as f64 / (255.0 * self.pixels.len() as f64)
    }

    /// Shifts every pixel by up to `magnitude` (fraction of full scale), deterministically.
    pub fn perturb(&self, seed: u64, label: &[u8], magnitude: f64) -> Vec<u8> {
        let noise = MockImage::synthesize(seed, label, 0.0).pixels;
        self.pixels
            .iter()
            .zip(noise)
            .map(|(p, n)| {
                let delta = ((f64::from(n) / 255.0) * 2.0 - 1.0) * magnitude * 255.0;
                (f64::from(*p) + delta).round().clamp(0.0, 255.0) as u8
            })
            .collect()
    }
}
