//! Counter-based random streams.
//!
//! Every random quantity in the crate is a pure function of a master seed,
//! a domain tag and a stream index (usually a particle id or a step). Streams
//! are ChaCha8 keystreams, so any draw can be reached by seeking instead of
//! replaying, and coupled experiments can share realizations across widths,
//! variants and worker counts.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Domain tags that keep independent uses of one master seed apart.
pub mod domain {
    pub const INIT: u64 = 0x01;
    pub const MASK: u64 = 0x02;
    pub const CLOCK: u64 = 0x03;
    pub const EVENTS: u64 = 0x04;
    pub const CRITICAL: u64 = 0x05;
    pub const SLICED: u64 = 0x06;
    pub const MONTE_CARLO: u64 = 0x07;
    pub const TEACHER: u64 = 0x08;
    pub const DATA: u64 = 0x09;
    pub const COUPLING: u64 = 0x0a;
    pub const THINNING: u64 = 0x0b;
}

/// Mask lanes. Two mask rows drawn from the same (seed, lane, step) are the
/// same realization.
pub mod lane {
    pub const PRIMARY: u64 = 0;
    pub const TILDE: u64 = 1;
    pub const FORWARD: u64 = 2;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keystream for `(seed, domain)` positioned at the start of `stream`.
pub fn stream(seed: u64, domain: u64, stream: u64) -> ChaCha8Rng {
    let mut state = seed ^ domain.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Uniform draw in [0, 1) with 53 random bits.
#[inline]
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Identifies which stream a mask row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskKey {
    pub seed: u64,
    pub lane: u64,
    pub step: u64,
}

/// One step's dropout variables `eta^i`, one per particle.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRow {
    q: f64,
    eta: Vec<f64>,
    key: Option<MaskKey>,
}

impl MaskRow {
    /// Row from explicit values. Entries must be `(1-q)/q` or `-1`.
    pub fn from_values(q: f64, eta: Vec<f64>) -> Result<Self> {
        check_keep_rate(q)?;
        let up = (1.0 - q) / q;
        if let Some(bad) = eta.iter().find(|&&e| e != up && e != -1.0) {
            return Err(Error::param(format!(
                "mask value {bad} is neither {up} nor -1 for q = {q}"
            )));
        }
        Ok(Self { q, eta, key: None })
    }

    pub(crate) fn from_parts(q: f64, eta: Vec<f64>) -> Self {
        Self { q, eta, key: None }
    }

    /// Same values with the stream identity dropped.
    pub fn detached(&self) -> Self {
        Self::from_parts(self.q, self.eta.clone())
    }

    /// All particles kept (`eta = 0`), i.e. the q = 1 row.
    pub fn unmasked(n: usize) -> Self {
        Self {
            q: 1.0,
            eta: vec![0.0; n],
            key: None,
        }
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    /// Rescaling factor `1 + eta^i`, either `1/q` or `0`.
    #[inline]
    pub fn factor(&self, i: usize) -> f64 {
        1.0 + self.eta[i]
    }

    pub fn key(&self) -> Option<MaskKey> {
        self.key
    }

    pub fn active_count(&self) -> usize {
        self.eta.iter().filter(|&&e| e > -1.0).count()
    }
}

pub(crate) fn check_keep_rate(q: f64) -> Result<()> {
    if q.is_finite() && q > 0.0 && q <= 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("keep rate q must lie in (0, 1], got {q}")))
    }
}

/// Anything that can hand out one mask row per step.
pub trait MaskSource {
    fn row(&self, step: u64, n: usize) -> MaskRow;
}

/// Seeded generator of i.i.d. dropout variables with keep rate `q`.
///
/// `eta(i, k)` is a pure function of `(seed, lane, i, k)`: the k-th step
/// uses ChaCha stream `k`, and particle `i` reads the i-th 64-bit word.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskStream {
    q: f64,
    seed: u64,
    lane: u64,
}

impl MaskStream {
    pub fn new(q: f64, seed: u64) -> Result<Self> {
        check_keep_rate(q)?;
        Ok(Self {
            q,
            seed,
            lane: lane::PRIMARY,
        })
    }

    pub fn with_lane(self, lane: u64) -> Self {
        Self { lane, ..self }
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn lane(&self) -> u64 {
        self.lane
    }

    fn step_rng(&self, step: u64) -> ChaCha8Rng {
        stream(self.seed, domain::MASK ^ (self.lane << 8), step)
    }

    /// The mask variable of `particle` at `step`.
    pub fn eta(&self, particle: usize, step: u64) -> f64 {
        let mut rng = self.step_rng(step);
        rng.set_word_pos(2 * particle as u128);
        self.map(unit_f64(&mut rng))
    }

    #[inline]
    fn map(&self, u: f64) -> f64 {
        if u < self.q {
            (1.0 - self.q) / self.q
        } else {
            -1.0
        }
    }
}

impl MaskSource for MaskStream {
    fn row(&self, step: u64, n: usize) -> MaskRow {
        let mut rng = self.step_rng(step);
        let eta = (0..n).map(|_| self.map(unit_f64(&mut rng))).collect();
        MaskRow {
            q: self.q,
            eta,
            key: Some(MaskKey {
                seed: self.seed,
                lane: self.lane,
                step,
            }),
        }
    }
}

/// Source that never masks (q = 1).
#[derive(Debug, Clone, Copy, Default)]
pub struct NoMasks;

impl MaskSource for NoMasks {
    fn row(&self, _step: u64, n: usize) -> MaskRow {
        MaskRow::unmasked(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_matches_random_access() {
        let masks = MaskStream::new(0.3, 17).unwrap();
        let row = masks.row(5, 100);
        for i in [0, 1, 37, 99] {
            assert_eq!(row.eta()[i], masks.eta(i, 5));
        }
    }

    #[test]
    fn row_prefix_is_width_independent() {
        let masks = MaskStream::new(0.5, 3).unwrap();
        let short = masks.row(2, 16);
        let long = masks.row(2, 64);
        assert_eq!(short.eta(), &long.eta()[..16]);
    }

    #[test]
    fn lanes_are_distinct_realizations() {
        let a = MaskStream::new(0.5, 3).unwrap();
        let b = a.with_lane(lane::TILDE);
        assert_ne!(a.row(0, 64).eta(), b.row(0, 64).eta());
    }

    #[test]
    fn q_one_is_all_zero() {
        let row = MaskStream::new(1.0, 9).unwrap().row(0, 32);
        assert!(row.eta().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn rejects_bad_keep_rate() {
        assert!(MaskStream::new(0.0, 1).is_err());
        assert!(MaskStream::new(1.5, 1).is_err());
        assert!(MaskStream::new(f64::NAN, 1).is_err());
    }

    #[test]
    fn from_values_validates_support() {
        assert!(MaskRow::from_values(0.5, vec![1.0, -1.0]).is_ok());
        assert!(MaskRow::from_values(0.5, vec![0.5]).is_err());
    }
}
