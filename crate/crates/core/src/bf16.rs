//! Bit-exact bfloat16 numerics and the scale-aware "unchanged weight" probe.
//!
//! A bf16 word keeps the f32 sign and 8-bit exponent but only 7 explicit
//! mantissa bits, so the spacing between neighbouring representable values
//! grows with magnitude: inside the binade `[2^e, 2^(e+1))` it is
//! `2^(e-7)`. A fixed absolute tolerance therefore cannot decide whether a
//! stored weight changed. The probe here uses a relative tolerance `eta`
//! instead; for every `eta < 2^-9` the test
//!
//! ```text
//! |w_hat - w| <= eta * max(|w|, |w_hat|)
//! ```
//!
//! agrees exactly with bitwise equality on normalized values, because two
//! distinct normalized bf16 numbers always differ by more than `2^-8` in
//! relative terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound (exclusive) on the probe tolerance.
pub const ETA_CEILING: f64 = 1.0 / 512.0;

/// Default probe tolerance.
pub const DEFAULT_ETA: f64 = 1e-3;

const SIGN_MASK: u16 = 0x8000;
const EXP_MASK: u16 = 0x7F80;
const MANT_MASK: u16 = 0x007F;
const EXP_BIAS: i32 = 127;
const MANT_BITS: i32 = 7;

/// A stored bfloat16 value, kept as its raw 16-bit pattern.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[repr(transparent)]
pub struct Bf16Word(pub u16);

impl std::fmt::Debug for Bf16Word {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Bf16Word({:#06x} = {})", self.0, self.to_f32())
    }
}

impl Bf16Word {
    pub const ZERO: Bf16Word = Bf16Word(0);
    pub const ONE: Bf16Word = Bf16Word(0x3F80);

    pub const fn from_bits(bits: u16) -> Self {
        Bf16Word(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Round-to-nearest-even encoding of an f32.
    pub fn from_f32(x: f32) -> Self {
        let bits = x.to_bits();
        if x.is_nan() {
            // keep the sign, force a quiet NaN
            return Bf16Word(((bits >> 16) as u16) | 0x0040);
        }
        let lsb = (bits >> 16) & 1;
        let rounded = bits.wrapping_add(0x7FFF + lsb);
        Bf16Word((rounded >> 16) as u16)
    }

    /// Round-to-nearest-even encoding of an f64.
    ///
    /// The value is first narrowed to f32 with round-to-odd, which carries
    /// enough sticky information that the second rounding to bf16 cannot
    /// double-round.
    pub fn from_f64(x: f64) -> Self {
        if x.is_nan() {
            return Self::from_f32(f32::NAN.copysign(x as f32));
        }
        let nearest = x as f32;
        if nearest as f64 == x {
            return Self::from_f32(nearest);
        }
        let bits = nearest.to_bits();
        // magnitude truncation toward zero
        let truncated = if (nearest as f64).abs() > x.abs() {
            bits - 1
        } else {
            bits
        };
        Self::from_f32(f32::from_bits(truncated | 1))
    }

    pub fn to_f32(self) -> f32 {
        f32::from_bits((self.0 as u32) << 16)
    }

    pub fn to_f64(self) -> f64 {
        self.to_f32() as f64
    }

    pub fn is_sign_negative(self) -> bool {
        self.0 & SIGN_MASK != 0
    }

    fn biased_exponent(self) -> u16 {
        (self.0 & EXP_MASK) >> MANT_BITS
    }

    pub fn is_nan(self) -> bool {
        self.0 & EXP_MASK == EXP_MASK && self.0 & MANT_MASK != 0
    }

    pub fn is_infinite(self) -> bool {
        self.0 & !SIGN_MASK == EXP_MASK
    }

    pub fn is_finite(self) -> bool {
        self.0 & EXP_MASK != EXP_MASK
    }

    pub fn is_zero(self) -> bool {
        self.0 & !SIGN_MASK == 0
    }

    pub fn is_subnormal(self) -> bool {
        self.biased_exponent() == 0 && self.0 & MANT_MASK != 0
    }

    /// Finite, nonzero and not subnormal.
    pub fn is_normal(self) -> bool {
        let e = self.biased_exponent();
        e != 0 && e != 0xFF
    }

    /// Unbiased exponent `e` such that `|x|` lies in `[2^e, 2^(e+1))`.
    /// Only meaningful for normalized values.
    pub fn exponent(self) -> i32 {
        self.biased_exponent() as i32 - EXP_BIAS
    }

    /// The next code up in magnitude with the same sign. Returns `None` once
    /// the exponent field would saturate.
    pub fn next_away_from_zero(self) -> Option<Self> {
        let next = Bf16Word(self.0 + 1);
        next.is_finite().then_some(next)
    }
}

impl From<f32> for Bf16Word {
    fn from(x: f32) -> Self {
        Self::from_f32(x)
    }
}

fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

/// Spacing between adjacent bf16 values at `x`: `2^(e-7)` for `|x|` in
/// `[2^e, 2^(e+1))`. Zeros and subnormals share the fixed subnormal spacing
/// `2^-133`.
pub fn ulp_bf16(x: Bf16Word) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Domain(format!(
            "ulp of non-finite bf16 value {:#06x}",
            x.0
        )));
    }
    if x.is_normal() {
        Ok(pow2(x.exponent() - MANT_BITS))
    } else {
        Ok(pow2(1 - EXP_BIAS - MANT_BITS))
    }
}

/// Smallest additive step that can flip the stored code of `x` under
/// round-to-nearest: half an ULP.
pub fn realization_threshold(x: Bf16Word) -> Result<f64> {
    Ok(0.5 * ulp_bf16(x)?)
}

/// How pairs involving zeros are classified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroPolicy {
    /// `+0` and `-0` count as the same stored value; zero against any
    /// nonzero value is a change.
    #[default]
    SignedZerosEqual,
    /// Zeros are compared by bit pattern, so `+0` vs `-0` is a change.
    BitExact,
}

/// Configuration of the relative-tolerance probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    eta: f64,
    pub zero_policy: ZeroPolicy,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            eta: DEFAULT_ETA,
            zero_policy: ZeroPolicy::default(),
        }
    }
}

impl ProbeConfig {
    /// Rejects any `eta` outside `(0, 2^-9)`; above the ceiling the
    /// relative test would start merging adjacent codes.
    pub fn new(eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta < ETA_CEILING) {
            return Err(Error::Config(format!(
                "probe eta must lie in (0, 2^-9 = {ETA_CEILING}), got {eta}"
            )));
        }
        Ok(ProbeConfig {
            eta,
            zero_policy: ZeroPolicy::default(),
        })
    }

    pub fn with_zero_policy(mut self, policy: ZeroPolicy) -> Self {
        self.zero_policy = policy;
        self
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }
}

/// The scale-aware unchanged predicate.
///
/// Normalized pairs use the relative test. Everything outside the
/// normalized range falls back to bit semantics: NaN is always "changed",
/// infinities and subnormals are unchanged only when their bits match, and
/// zeros follow [`ZeroPolicy`].
pub fn bf16_unchanged(w: Bf16Word, w_hat: Bf16Word, cfg: &ProbeConfig) -> bool {
    if w.is_nan() || w_hat.is_nan() {
        return false;
    }
    match (w.is_zero(), w_hat.is_zero()) {
        (true, true) => {
            return match cfg.zero_policy {
                ZeroPolicy::SignedZerosEqual => true,
                ZeroPolicy::BitExact => w == w_hat,
            }
        }
        (true, false) | (false, true) => return false,
        (false, false) => {}
    }
    if !(w.is_normal() && w_hat.is_normal()) {
        return w == w_hat;
    }
    let a = w.to_f64();
    let b = w_hat.to_f64();
    (b - a).abs() <= cfg.eta * a.abs().max(b.abs())
}

/// The fixed absolute-tolerance rule `|w_hat - w| <= tol`, applied to the
/// real values before any bf16 rounding. Kept for side-by-side comparisons.
pub fn absolute_rule_unchanged(w: f64, w_hat: f64, tol: f64) -> bool {
    (w_hat - w).abs() <= tol
}

/// Outcome of an exhaustive sweep over the bf16 code space.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub pairs_checked: u64,
    pub disagreements: u64,
    /// First few offending pairs (bit patterns), for diagnostics.
    pub examples: Vec<(u16, u16)>,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.pairs_checked > 0 && self.disagreements == 0
    }

    fn record(&mut self, agree: bool, a: u16, b: u16) {
        self.pairs_checked += 1;
        if !agree {
            self.disagreements += 1;
            if self.examples.len() < 8 {
                self.examples.push((a, b));
            }
        }
    }
}

/// Every normalized bf16 code, both signs.
pub fn normalized_codes() -> impl Iterator<Item = Bf16Word> {
    (0u16..=u16::MAX).map(Bf16Word).filter(|w| w.is_normal())
}

/// Checks that the relative probe agrees with bitwise equality on every
/// normalized code paired with itself and with its neighbour one code away
/// from zero (crossing binade boundaries included).
pub fn soundness_sweep(cfg: &ProbeConfig) -> SweepReport {
    let mut report = SweepReport::default();
    for w in normalized_codes() {
        report.record(bf16_unchanged(w, w, cfg), w.0, w.0);
        if let Some(next) = w.next_away_from_zero().filter(|n| n.is_normal()) {
            let probe = bf16_unchanged(w, next, cfg);
            let mirrored = bf16_unchanged(next, w, cfg);
            report.record(!probe && !mirrored, w.0, next.0);
        }
    }
    report
}

/// Relative gap between every pair of adjacent distinct normalized values in
/// the same binade must exceed `2^-8`. Adjacent pairs are the worst case, so
/// this covers all same-binade pairs.
pub fn gap_sweep() -> SweepReport {
    let floor = pow2(-8);
    let mut report = SweepReport::default();
    for w in normalized_codes().filter(|w| !w.is_sign_negative()) {
        let Some(next) = w.next_away_from_zero() else {
            continue;
        };
        if !next.is_normal() || next.exponent() != w.exponent() {
            continue;
        }
        let (a, b) = (w.to_f64(), next.to_f64());
        let rel = (b - a) / a.max(b);
        report.record(
            rel > floor && (b - a) >= pow2(w.exponent() - MANT_BITS),
            w.0,
            next.0,
        );
    }
    report
}

/// ULP relative to magnitude must lie in `(2^-8, 2^-7]` for normalized
/// values. Sweeps `count` codes spread evenly over the positive normalized
/// range.
pub fn ulp_lens_sweep(count: usize) -> SweepReport {
    let (lo, hi) = (0x0080u32, 0x7F7Fu32);
    let span = hi - lo;
    let mut report = SweepReport::default();
    for i in 0..count {
        let code = lo + (span as u64 * i as u64 / count.max(1) as u64) as u32;
        let w = Bf16Word(code as u16);
        let ulp = ulp_bf16(w).expect("normalized code");
        let rel = ulp / w.to_f64();
        report.record(rel > pow2(-8) && rel <= pow2(-7), w.0, w.0);
    }
    report
}
