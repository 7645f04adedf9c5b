//! Bernoulli mask generation for Monte Carlo Dropout.
//!
//! Three Fibonacci LFSRs each produce fair bits; a three-input NAND turns
//! them into a stream that is zero with probability 1/8, which is the
//! dropout rate used by every Bayesian layer. Masks are drawn once per MC
//! sample and reused for every time step of that sample.

use thiserror::Error;

/// Probability that a mask bit is zero.
pub const DROPOUT_P: f64 = 0.125;

/// Number of LFSRs feeding the NAND gate.
pub const N_LFSR: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RngError {
    #[error("LFSR state must be nonzero")]
    ZeroState,
    #[error("invalid LFSR: {0}")]
    InvalidLfsr(String),
    #[error("sampler seeds must be distinct and nonzero, got {0:?}")]
    BadSeeds([u32; N_LFSR]),
}

/// Fibonacci linear feedback shift register.
///
/// Tap positions are 1-based from the output end in the usual polynomial
/// notation: tap `t` reads bit `width - t` of the state, so taps `{16, 14,
/// 13, 11}` on a 16-bit register realize x^16 + x^14 + x^13 + x^11 + 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Lfsr {
    width: u32,
    taps: Vec<u32>,
    tap_mask: u32,
    state: u32,
}

impl Lfsr {
    pub fn new(width: u32, taps: &[u32], seed: u32) -> Result<Lfsr, RngError> {
        if !(2..=32).contains(&width) {
            return Err(RngError::InvalidLfsr(format!("width {width} not in 2..=32")));
        }
        if taps.is_empty() || taps.iter().any(|&t| t == 0 || t > width) {
            return Err(RngError::InvalidLfsr(format!("taps {taps:?} out of range for width {width}")));
        }
        let state = seed & Self::width_mask(width);
        if state == 0 {
            return Err(RngError::ZeroState);
        }
        let tap_mask = taps.iter().fold(0u32, |m, &t| m | 1 << (width - t));
        let mut taps = taps.to_vec();
        taps.sort_unstable_by(|a, b| b.cmp(a));
        taps.dedup();
        Ok(Lfsr { width, taps, tap_mask, state })
    }

    /// 16-bit register with the maximal-length taps {16, 14, 13, 11}.
    pub fn maximal16(seed: u32) -> Result<Lfsr, RngError> {
        Lfsr::new(16, &[16, 14, 13, 11], seed)
    }

    /// 4-bit register with the maximal-length taps {4, 3}.
    pub fn maximal4(seed: u32) -> Result<Lfsr, RngError> {
        Lfsr::new(4, &[4, 3], seed)
    }

    fn width_mask(width: u32) -> u32 {
        if width == 32 {
            u32::MAX
        } else {
            (1u32 << width) - 1
        }
    }

    /// Output bit and successor register; `self` is left untouched.
    pub fn next(&self) -> (bool, Lfsr) {
        let mut succ = self.clone();
        let bit = succ.step();
        (bit, succ)
    }

    /// Emits the LSB and shifts the XOR of the tapped bits in at the top.
    pub fn step(&mut self) -> bool {
        let out = self.state & 1 == 1;
        let feedback = (self.state & self.tap_mask).count_ones() & 1;
        self.state = (self.state >> 1) | (feedback << (self.width - 1));
        out
    }

    pub fn state(&self) -> u32 {
        self.state
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn taps(&self) -> &[u32] {
        &self.taps
    }
}

/// Register geometry for the sampler's three LFSRs.
///
/// `Taps16` reads "4-tap" as four feedback taps on a 16-bit register;
/// `Register4` reads it as a 4-bit register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LfsrMode {
    #[default]
    Taps16,
    Register4,
}

impl LfsrMode {
    fn width(self) -> u32 {
        match self {
            LfsrMode::Taps16 => 16,
            LfsrMode::Register4 => 4,
        }
    }

    fn build(self, seed: u32) -> Result<Lfsr, RngError> {
        match self {
            LfsrMode::Taps16 => Lfsr::maximal16(seed),
            LfsrMode::Register4 => Lfsr::maximal4(seed),
        }
    }
}

/// A source of mask bits. `true` keeps a feature, `false` drops it.
pub trait BitStream {
    fn next_bit(&mut self) -> bool;
}

pub fn nand3(a: bool, b: bool, c: bool) -> bool {
    !(a && b && c)
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Three LFSRs combined through a NAND gate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BernoulliSampler {
    lfsrs: [Lfsr; N_LFSR],
}

impl BernoulliSampler {
    pub fn from_lfsrs(lfsrs: [Lfsr; N_LFSR]) -> Result<Self, RngError> {
        let states = [lfsrs[0].state(), lfsrs[1].state(), lfsrs[2].state()];
        if states[0] == states[1] || states[1] == states[2] || states[0] == states[2] {
            return Err(RngError::BadSeeds(states));
        }
        Ok(BernoulliSampler { lfsrs })
    }

    pub fn with_seeds(mode: LfsrMode, seeds: [u32; N_LFSR]) -> Result<Self, RngError> {
        let lfsrs = [mode.build(seeds[0])?, mode.build(seeds[1])?, mode.build(seeds[2])?];
        Self::from_lfsrs(lfsrs).map_err(|_| RngError::BadSeeds(seeds))
    }

    /// Expands one user seed into three distinct nonzero register seeds.
    pub fn from_seed(seed: u64, mode: LfsrMode) -> Self {
        let mask = Lfsr::width_mask(mode.width());
        let mut sm = seed;
        let mut seeds = [0u32; N_LFSR];
        let mut filled = 0;
        while filled < N_LFSR {
            let s = (splitmix64(&mut sm) as u32) & mask;
            if s != 0 && !seeds[..filled].contains(&s) {
                seeds[filled] = s;
                filled += 1;
            }
        }
        Self::with_seeds(mode, seeds).expect("expanded seeds are distinct and nonzero")
    }

    /// Seed for MC sample `sample_index` of a run seeded with `seed`.
    pub fn for_sample(seed: u64, sample_index: usize, mode: LfsrMode) -> Self {
        let mut sm = seed;
        let base = splitmix64(&mut sm);
        Self::from_seed(base ^ (sample_index as u64).wrapping_mul(0xd1b5_4a32_d192_ed03), mode)
    }

    pub fn lfsrs(&self) -> &[Lfsr; N_LFSR] {
        &self.lfsrs
    }
}

impl BitStream for BernoulliSampler {
    fn next_bit(&mut self) -> bool {
        let [a, b, c] = &mut self.lfsrs;
        nand3(a.step(), b.step(), c.step())
    }
}

/// Emits the same bit forever.
#[derive(Debug, Clone, Copy)]
pub struct ConstantBits(pub bool);

impl BitStream for ConstantBits {
    fn next_bit(&mut self) -> bool {
        self.0
    }
}

/// Counts the bits drawn from an inner stream.
#[derive(Debug)]
pub struct CountingStream<S> {
    pub inner: S,
    pub drawn: usize,
}

impl<S: BitStream> CountingStream<S> {
    pub fn new(inner: S) -> Self {
        CountingStream { inner, drawn: 0 }
    }
}

impl<S: BitStream> BitStream for CountingStream<S> {
    fn next_bit(&mut self) -> bool {
        self.drawn += 1;
        self.inner.next_bit()
    }
}

/// The eight dropout masks of one Bayesian LSTM layer for one MC sample.
///
/// Gate order is i, f, g, o throughout.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskSet {
    pub x: [Vec<bool>; 4],
    pub h: [Vec<bool>; 4],
    pub sample_index: usize,
}

impl MaskSet {
    pub fn all_ones(input_dim: usize, hidden: usize) -> MaskSet {
        MaskSet {
            x: std::array::from_fn(|_| vec![true; input_dim]),
            h: std::array::from_fn(|_| vec![true; hidden]),
            sample_index: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.x[0].len()
    }

    pub fn hidden(&self) -> usize {
        self.h[0].len()
    }

    pub fn bit_len(&self) -> usize {
        4 * self.input_dim() + 4 * self.hidden()
    }

    pub fn zero_count(&self) -> usize {
        self.x.iter().chain(self.h.iter()).flatten().filter(|&&b| !b).count()
    }
}

/// Draws one layer's masks: x-masks for gates i, f, g, o, then h-masks in
/// the same gate order. Consumes exactly `4 * input_dim + 4 * hidden` bits.
pub fn sample_mask_set<S: BitStream>(
    input_dim: usize,
    hidden: usize,
    stream: &mut S,
    sample_index: usize,
) -> MaskSet {
    assert!(input_dim >= 1 && hidden >= 1, "layer dimensions must be positive");
    let x = std::array::from_fn(|_| (0..input_dim).map(|_| stream.next_bit()).collect());
    let h = std::array::from_fn(|_| (0..hidden).map(|_| stream.next_bit()).collect());
    MaskSet { x, h, sample_index }
}
