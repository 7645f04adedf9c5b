//! Signed fixed-point arithmetic matching the accelerator datapath.
//!
//! Weights and activations travel as 16-bit values (Q6.10 by default), MVM
//! accumulators and the LSTM cell state as 32-bit values (Q12.20). Every
//! narrowing conversion rounds to nearest, ties to even, and saturates.
//! Saturation never fails; it bumps a thread-local overflow counter that
//! diagnostics can read with [`overflow_count`].

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FxpError {
    #[error("invalid Q-format: {total_bits} total bits with {frac_bits} fractional bits")]
    InvalidFormat { total_bits: u32, frac_bits: u32 },
    #[error("cannot parse Q-format `{0}` (expected e.g. Q6.10)")]
    ParseFormat(String),
    #[error("format mismatch: {0}")]
    FormatMismatch(String),
    #[error("invalid activation table: {0}")]
    InvalidLut(String),
}

thread_local! {
    static OVERFLOWS: Cell<u64> = const { Cell::new(0) };
}

/// Number of saturating conversions performed on this thread.
pub fn overflow_count() -> u64 {
    OVERFLOWS.with(|c| c.get())
}

pub fn reset_overflow_count() {
    OVERFLOWS.with(|c| c.set(0));
}

fn note_overflow() {
    OVERFLOWS.with(|c| c.set(c.get() + 1));
}

/// Signed two's complement format with `frac_bits` fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QFormat {
    total_bits: u32,
    frac_bits: u32,
}

impl QFormat {
    /// 16-bit weights and activations.
    pub const Q6_10: QFormat = QFormat { total_bits: 16, frac_bits: 10 };
    /// 32-bit accumulators and cell state.
    pub const Q12_20: QFormat = QFormat { total_bits: 32, frac_bits: 20 };

    pub fn new(total_bits: u32, frac_bits: u32) -> Result<Self, FxpError> {
        if !(total_bits == 16 || total_bits == 32) || frac_bits == 0 || frac_bits >= total_bits {
            return Err(FxpError::InvalidFormat { total_bits, frac_bits });
        }
        Ok(QFormat { total_bits, frac_bits })
    }

    pub fn total_bits(self) -> u32 {
        self.total_bits
    }

    pub fn frac_bits(self) -> u32 {
        self.frac_bits
    }

    pub fn int_bits(self) -> u32 {
        self.total_bits - self.frac_bits
    }

    pub fn min_raw(self) -> i64 {
        -(1i64 << (self.total_bits - 1))
    }

    pub fn max_raw(self) -> i64 {
        (1i64 << (self.total_bits - 1)) - 1
    }

    /// Value of one least significant bit.
    pub fn lsb(self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn min_value(self) -> f64 {
        self.min_raw() as f64 * self.lsb()
    }

    pub fn max_value(self) -> f64 {
        self.max_raw() as f64 * self.lsb()
    }

    fn saturate(self, raw: i128) -> i32 {
        let (lo, hi) = (self.min_raw() as i128, self.max_raw() as i128);
        if raw > hi {
            note_overflow();
            hi as i32
        } else if raw < lo {
            note_overflow();
            lo as i32
        } else {
            raw as i32
        }
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}.{}", self.int_bits(), self.frac_bits)
    }
}

impl FromStr for QFormat {
    type Err = FxpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FxpError::ParseFormat(s.to_string());
        let body = s.trim().strip_prefix('Q').ok_or_else(bad)?;
        let (int, frac) = body.split_once('.').ok_or_else(bad)?;
        let int: u32 = int.parse().map_err(|_| bad())?;
        let frac: u32 = frac.parse().map_err(|_| bad())?;
        QFormat::new(int + frac, frac)
    }
}

/// A fixed-point value: `raw * 2^-frac_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fx {
    raw: i32,
    format: QFormat,
}

impl Fx {
    /// Builds a value from a raw integer, saturating into the format.
    pub fn from_raw(raw: i64, format: QFormat) -> Fx {
        Fx { raw: format.saturate(raw as i128), format }
    }

    pub fn zero(format: QFormat) -> Fx {
        Fx { raw: 0, format }
    }

    pub fn raw(self) -> i32 {
        self.raw
    }

    pub fn format(self) -> QFormat {
        self.format
    }

    pub fn to_f64(self) -> f64 {
        self.raw as f64 * self.format.lsb()
    }
}

/// Divides by `2^shift`, rounding to nearest with ties to even.
fn shift_right_rne(v: i128, shift: u32) -> i128 {
    if shift == 0 {
        return v;
    }
    let floor = v >> shift;
    let rem = v - (floor << shift);
    let half = 1i128 << (shift - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

/// Rounds `x * 2^frac_bits` to nearest-even and saturates. NaN maps to zero.
pub fn quantize(x: f64, f: QFormat) -> Fx {
    if x.is_nan() {
        note_overflow();
        return Fx::zero(f);
    }
    let scaled = (x * (f.frac_bits as f64).exp2()).round_ties_even();
    let raw = if scaled >= f.max_raw() as f64 {
        if scaled > f.max_raw() as f64 {
            note_overflow();
        }
        f.max_raw()
    } else if scaled <= f.min_raw() as f64 {
        if scaled < f.min_raw() as f64 {
            note_overflow();
        }
        f.min_raw()
    } else {
        scaled as i64
    };
    Fx { raw: raw as i32, format: f }
}

/// Moves `x` into format `f` with round-to-nearest-even and saturation.
pub fn requantize(x: Fx, f: QFormat) -> Fx {
    let from = x.format.frac_bits as i32;
    let to = f.frac_bits as i32;
    let v = x.raw as i128;
    let raw = if from >= to {
        shift_right_rne(v, (from - to) as u32)
    } else {
        v << (to - from)
    };
    Fx { raw: f.saturate(raw), format: f }
}

/// `acc + a*b` with a full-precision product and a saturating accumulate.
///
/// The accumulator must carry exactly `a.frac + b.frac` fractional bits so
/// that the product needs no alignment.
pub fn fx_mac(acc: Fx, a: Fx, b: Fx) -> Result<Fx, FxpError> {
    if acc.format.frac_bits != a.format.frac_bits + b.format.frac_bits {
        return Err(FxpError::FormatMismatch(format!(
            "accumulator {} cannot hold product of {} and {}",
            acc.format, a.format, b.format
        )));
    }
    let sum = acc.raw as i128 + a.raw as i128 * b.raw as i128;
    Ok(Fx { raw: acc.format.saturate(sum), format: acc.format })
}

/// Full-precision product of `a` and `b`, rounded into `out`.
pub fn fx_mul(a: Fx, b: Fx, out: QFormat) -> Fx {
    let prod = a.raw as i128 * b.raw as i128;
    let frac = (a.format.frac_bits + b.format.frac_bits) as i32;
    let to = out.frac_bits as i32;
    let raw = if frac >= to {
        shift_right_rne(prod, (frac - to) as u32)
    } else {
        prod << (to - frac)
    };
    Fx { raw: out.saturate(raw), format: out }
}

/// Saturating sum of two values in the same format.
pub fn fx_add(a: Fx, b: Fx) -> Result<Fx, FxpError> {
    if a.format != b.format {
        return Err(FxpError::FormatMismatch(format!(
            "cannot add {} and {}",
            a.format, b.format
        )));
    }
    Ok(Fx { raw: a.format.saturate(a.raw as i128 + b.raw as i128), format: a.format })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Limits as x goes to -inf and +inf.
    pub fn asymptotes(self) -> (f64, f64) {
        match self {
            Activation::Sigmoid => (0.0, 1.0),
            Activation::Tanh => (-1.0, 1.0),
        }
    }
}

/// Activation function stored as a table of precomputed outputs, one per
/// equal-width bin of the input range.
///
/// Bin `k` is centred on `lo + k * width`, so zero falls on a bin centre
/// and σ(0) and tanh(0) come out exact.
#[derive(Debug, Clone, PartialEq)]
pub struct ActLut {
    kind: Activation,
    in_range: (f64, f64),
    entries: Vec<Fx>,
    in_format: QFormat,
    out_format: QFormat,
    lo_raw: i64,
    span_raw: i64,
    below: Fx,
    above: Fx,
}

pub const DEFAULT_LUT_ENTRIES: usize = 2048;
pub const DEFAULT_LUT_RANGE: (f64, f64) = (-8.0, 8.0);

impl ActLut {
    /// Builds a table whose entry `k` is the activation of the midpoint of
    /// bin `k` (`lo + k * width`), quantized to `out_format`.
    pub fn build(
        kind: Activation,
        in_range: (f64, f64),
        n_entries: usize,
        in_format: QFormat,
        out_format: QFormat,
    ) -> Result<ActLut, FxpError> {
        let (lo, hi) = in_range;
        if !n_entries.is_power_of_two() || n_entries < 2 {
            return Err(FxpError::InvalidLut(format!("{n_entries} entries is not a power of two")));
        }
        if !(hi > 0.0) || lo != -hi || !hi.is_finite() {
            return Err(FxpError::InvalidLut(format!(
                "input range [{lo}, {hi}) is not symmetric about zero"
            )));
        }
        let lo_q = quantize(lo, in_format);
        let hi_q = quantize(hi, in_format);
        if lo_q.to_f64() != lo || hi_q.to_f64() != hi {
            return Err(FxpError::InvalidLut(format!(
                "range bounds are not representable in {in_format}"
            )));
        }
        let width = (hi - lo) / n_entries as f64;
        let entries = (0..n_entries)
            .map(|k| quantize(kind.eval(lo + k as f64 * width), out_format))
            .collect();
        let (a_lo, a_hi) = kind.asymptotes();
        Ok(ActLut {
            kind,
            in_range,
            entries,
            in_format,
            out_format,
            lo_raw: lo_q.raw as i64,
            span_raw: hi_q.raw as i64 - lo_q.raw as i64,
            below: quantize(a_lo, out_format),
            above: quantize(a_hi, out_format),
        })
    }

    /// Default datapath table: 2048 entries over [-8, 8).
    pub fn standard(kind: Activation, in_format: QFormat, out_format: QFormat) -> ActLut {
        ActLut::build(kind, DEFAULT_LUT_RANGE, DEFAULT_LUT_ENTRIES, in_format, out_format)
            .expect("default table parameters are valid")
    }

    /// Nearest-bin lookup. Inputs outside the table range return the
    /// corresponding asymptote.
    pub fn eval(&self, x: Fx) -> Fx {
        let x = if x.format == self.in_format { x } else { requantize(x, self.in_format) };
        let offset = x.raw as i64 - self.lo_raw;
        if offset < 0 {
            return self.below;
        }
        if offset >= self.span_raw {
            return self.above;
        }
        // round to the nearest bin centre, half-way cases up
        let n = self.entries.len() as i128;
        let idx = (offset as i128 * n + self.span_raw as i128 / 2) / self.span_raw as i128;
        self.entries[(idx as usize).min(self.entries.len() - 1)]
    }

    pub fn kind(&self) -> Activation {
        self.kind
    }

    pub fn entries(&self) -> &[Fx] {
        &self.entries
    }

    pub fn in_range(&self) -> (f64, f64) {
        self.in_range
    }

    pub fn in_format(&self) -> QFormat {
        self.in_format
    }

    pub fn out_format(&self) -> QFormat {
        self.out_format
    }

    /// Width of one input bin.
    pub fn bin_width(&self) -> f64 {
        (self.in_range.1 - self.in_range.0) / self.entries.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const Q16: QFormat = QFormat::Q6_10;
    const Q32: QFormat = QFormat::Q12_20;

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.5, Q16).raw(), 512);
        assert_eq!(quantize(0.0, Q16).raw(), 0);
        assert_eq!(quantize(100.0, Q16).raw(), 32767);
        assert_eq!(quantize(-100.0, Q16).raw(), -32768);
    }

    #[test]
    fn saturation_counts_overflow() {
        reset_overflow_count();
        quantize(1.0, Q16);
        assert_eq!(overflow_count(), 0);
        quantize(1e6, Q16);
        requantize(Fx::from_raw(i32::MAX as i64, Q32), Q16);
        assert_eq!(overflow_count(), 2);
    }

    #[test]
    fn format_validation() {
        assert!(QFormat::new(16, 0).is_err());
        assert!(QFormat::new(16, 16).is_err());
        assert!(QFormat::new(24, 8).is_err());
        assert_eq!("Q6.10".parse::<QFormat>().unwrap(), Q16);
        assert_eq!("Q12.20".parse::<QFormat>().unwrap(), Q32);
        assert!("6.10".parse::<QFormat>().is_err());
        assert_eq!(Q16.to_string(), "Q6.10");
        assert_eq!(Q16.max_value(), 32.0 - 1.0 / 1024.0);
        assert_eq!(Q16.min_value(), -32.0);
    }

    #[test]
    fn rounding_is_nearest_even() {
        // k * 2^-11 sits halfway between neighbours for odd k.
        let half = |k: i64| k as f64 * (-11f64).exp2();
        assert_eq!(quantize(half(1), Q16).raw(), 0);
        assert_eq!(quantize(half(3), Q16).raw(), 2);
        assert_eq!(quantize(half(5), Q16).raw(), 2);
        assert_eq!(quantize(half(7), Q16).raw(), 4);
        assert_eq!(quantize(half(-1), Q16).raw(), 0);
        assert_eq!(quantize(half(-3), Q16).raw(), -2);
        assert_eq!(quantize(half(-5), Q16).raw(), -2);
        // same rule on the integer path
        assert_eq!(requantize(Fx::from_raw(512, Q32), Q16).raw(), 0);
        assert_eq!(requantize(Fx::from_raw(1536, Q32), Q16).raw(), 2);
        assert_eq!(requantize(Fx::from_raw(-1536, Q32), Q16).raw(), -2);
        assert_eq!(requantize(Fx::from_raw(1537, Q32), Q16).raw(), 2);
        assert_eq!(requantize(Fx::from_raw(1535, Q32), Q16).raw(), 1);
    }

    #[test]
    fn requantize_examples() {
        assert_eq!(requantize(Fx::zero(Q32), Q16).raw(), 0);
        assert_eq!(requantize(quantize(0.25, Q32), Q16).raw(), 256);
        let big = Fx::from_raw(2048i64 << 20, Q32);
        assert_eq!(requantize(big, Q16).raw(), 32767);
        // widening is exact
        assert_eq!(requantize(quantize(-1.5, Q16), Q32).raw(), -(3 << 19));
    }

    #[test]
    fn mac_examples() {
        let one = quantize(1.0, Q16);
        assert_eq!(fx_mac(Fx::zero(Q32), one, one).unwrap().to_f64(), 1.0);
        let r = fx_mac(Fx::zero(Q32), quantize(0.5, Q16), quantize(-0.5, Q16)).unwrap();
        assert_eq!(r.to_f64(), -0.25);
        assert!(matches!(
            fx_mac(Fx::zero(Q16), one, one),
            Err(FxpError::FormatMismatch(_))
        ));
    }

    #[test]
    fn mac_saturates_at_accumulator_max() {
        let max16 = Fx::from_raw(Q16.max_raw(), Q16);
        let near = Fx::from_raw(Q32.max_raw() - 5, Q32);
        // oracle: exact integer sum exceeds i32::MAX
        let exact = num_bigint::BigInt::from(Q32.max_raw() - 5)
            + num_bigint::BigInt::from(Q16.max_raw()) * num_bigint::BigInt::from(Q16.max_raw());
        assert!(exact > num_bigint::BigInt::from(i32::MAX));
        assert_eq!(fx_mac(near, max16, max16).unwrap().raw(), i32::MAX);
        let min16 = Fx::from_raw(Q16.min_raw(), Q16);
        let low = Fx::from_raw(Q32.min_raw() + 5, Q32);
        assert_eq!(fx_mac(low, min16, max16).unwrap().raw(), i32::MIN);
    }

    #[test]
    fn mul_and_add() {
        let a = quantize(0.5, Q16);
        let c = quantize(-3.0, Q32);
        assert_eq!(fx_mul(a, c, Q32).to_f64(), -1.5);
        assert_eq!(fx_add(c, c).unwrap().to_f64(), -6.0);
        assert!(fx_add(a, c).is_err());
    }

    #[test]
    fn lut_examples() {
        let sig = ActLut::standard(Activation::Sigmoid, Q16, Q16);
        let tanh = ActLut::standard(Activation::Tanh, Q16, Q16);
        let lsb = Q16.lsb();
        assert_eq!(sig.eval(quantize(0.0, Q16)).to_f64(), 0.5);
        assert_eq!(tanh.eval(quantize(0.0, Q16)).to_f64(), 0.0);
        assert!((sig.eval(quantize(1.0, Q16)).to_f64() - 0.731_058_578_6).abs() <= lsb);
        assert_eq!(sig.eval(quantize(20.0, Q16)).to_f64(), 1.0);
        assert_eq!(sig.eval(quantize(-20.0, Q16)).to_f64(), 0.0);
        assert_eq!(tanh.eval(quantize(-20.0, Q16)).to_f64(), -1.0);
        assert_eq!(sig.entries().len(), 2048);
    }

    #[test]
    fn lut_construction_errors() {
        let b = |n, r| ActLut::build(Activation::Sigmoid, r, n, Q16, Q16);
        assert!(b(1000, (-8.0, 8.0)).is_err());
        assert!(b(1024, (-4.0, 8.0)).is_err());
        assert!(b(1024, (0.0, 0.0)).is_err());
        assert!(b(1024, (-4.0, 4.0)).is_ok());
    }

    #[test]
    fn lut_accepts_other_input_formats() {
        let sig = ActLut::standard(Activation::Sigmoid, Q16, Q16);
        let x32 = quantize(1.0, Q32);
        assert_eq!(sig.eval(x32), sig.eval(quantize(1.0, Q16)));
    }

    #[test]
    fn lut_exhaustive_bounds_and_monotonicity() {
        for kind in [Activation::Sigmoid, Activation::Tanh] {
            let lut = ActLut::standard(kind, Q16, Q16);
            let (lo, hi) = kind.asymptotes();
            let mut prev = i32::MIN;
            for raw in Q16.min_raw()..=Q16.max_raw() {
                let y = lut.eval(Fx::from_raw(raw, Q16));
                let v = y.to_f64();
                assert!(v >= lo && v <= hi, "{kind:?}({raw}) = {v}");
                assert!(y.raw() >= prev, "{kind:?} not monotone at raw {raw}");
                prev = y.raw();
            }
        }
    }

    #[test]
    fn lut_error_bound_against_f64() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for (kind, max_slope) in [(Activation::Sigmoid, 0.25), (Activation::Tanh, 1.0)] {
            let lut = ActLut::standard(kind, Q16, Q16);
            let bound = max_slope * lut.bin_width() / 2.0 + Q16.lsb();
            for _ in 0..1000 {
                let x = quantize(rng.gen_range(-8.0..8.0), Q16);
                let err = (lut.eval(x).to_f64() - kind.eval(x.to_f64())).abs();
                assert!(err <= bound, "{kind:?} at {}: err {err} > {bound}", x.to_f64());
            }
        }
    }

    #[test]
    fn mac_matches_bigint_on_million_random_cases() {
        use num_bigint::BigInt;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (lo, hi) = (BigInt::from(i32::MIN), BigInt::from(i32::MAX));
        let mut checked = 0;
        for _ in 0..1_000_000 {
            let acc: i32 = rng.gen();
            let a: i16 = rng.gen();
            let b: i16 = rng.gen();
            let exact = BigInt::from(acc) + BigInt::from(a) * BigInt::from(b);
            if exact < lo || exact > hi {
                continue;
            }
            let r = fx_mac(
                Fx::from_raw(acc as i64, Q32),
                Fx::from_raw(a as i64, Q16),
                Fx::from_raw(b as i64, Q16),
            )
            .unwrap();
            assert_eq!(BigInt::from(r.raw()), exact);
            checked += 1;
        }
        assert!(checked > 900_000);
    }

    proptest! {
        #[test]
        fn quantize_is_idempotent(x in -40.0f64..40.0) {
            for f in [Q16, Q32] {
                let q = quantize(x, f);
                prop_assert_eq!(quantize(q.to_f64(), f), q);
            }
        }

        #[test]
        fn mac_matches_wide_integer_arithmetic(
            acc in -(1i64 << 30)..(1i64 << 30),
            a in -32768i64..32768,
            b in -32768i64..32768,
        ) {
            let exact = acc as i128 + a as i128 * b as i128;
            prop_assume!(exact >= i32::MIN as i128 && exact <= i32::MAX as i128);
            let r = fx_mac(Fx::from_raw(acc, Q32), Fx::from_raw(a, Q16), Fx::from_raw(b, Q16)).unwrap();
            prop_assert_eq!(r.raw() as i128, exact);
        }
    }
}
