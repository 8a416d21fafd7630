//! Software emulation of `Qm.n` fixed-point storage.
//!
//! A value in `Qm.n` is an integer multiple of `2^-n`. For signed formats the
//! `m` integer bits include the sign bit, so the range is
//! `[-2^(m-1), 2^(m-1) - 2^-n]`; unsigned formats cover `[0, 2^m - 2^-n]`.
//! A format with no bits at all represents only zero, which is how a neuron
//! is pruned.
//!
//! Quantized values are kept as `f64`. Every multiple of `2^-n` with at most
//! 53 significant bits is exact in binary64, which covers all formats used in
//! practice (`Q8.n` for `n <= 45`, `Q0.n` for `n <= 53`). Wider formats such as
//! the 64-bit `Q8.56`/`Q0.64` baseline are approximated at binary64 resolution.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum total bit-length of a format.
pub const MAX_TOTAL_BITS: u32 = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("format Q{int_bits}.{frac_bits} exceeds {MAX_TOTAL_BITS} total bits")]
    TooWide { int_bits: u32, frac_bits: u32 },
    #[error("cannot parse fixed-point format {0:?}, expected \"Qm.n\"")]
    Parse(String),
}

/// A `Qm.n` fixed-point format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "FormatRepr", into = "FormatRepr")]
pub struct FixedPointFormat {
    signed: bool,
    int_bits: u32,
    frac_bits: u32,
}

impl FixedPointFormat {
    pub fn new(signed: bool, int_bits: u32, frac_bits: u32) -> Result<Self, FormatError> {
        if int_bits + frac_bits > MAX_TOTAL_BITS {
            return Err(FormatError::TooWide {
                int_bits,
                frac_bits,
            });
        }
        Ok(Self {
            signed,
            int_bits,
            frac_bits,
        })
    }

    pub fn signed(int_bits: u32, frac_bits: u32) -> Result<Self, FormatError> {
        Self::new(true, int_bits, frac_bits)
    }

    pub fn unsigned(int_bits: u32, frac_bits: u32) -> Result<Self, FormatError> {
        Self::new(false, int_bits, frac_bits)
    }

    /// The format that holds only zero.
    pub const fn zero_bits() -> Self {
        Self {
            signed: false,
            int_bits: 0,
            frac_bits: 0,
        }
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    pub fn int_bits(&self) -> u32 {
        self.int_bits
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn total_bits(&self) -> u32 {
        self.int_bits + self.frac_bits
    }

    /// Same signedness and integer bits, different fractional bits, with the
    /// fractional part capped so the total stays within 64 bits.
    pub fn with_frac_bits(&self, frac_bits: u32) -> Self {
        let frac_bits = frac_bits.min(MAX_TOTAL_BITS - self.int_bits);
        Self { frac_bits, ..*self }
    }

    /// Grid spacing `2^-n`.
    pub fn step(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    /// Smallest and largest representable integer multiples of the step.
    fn code_range(&self) -> (f64, f64) {
        let total = self.total_bits();
        if total == 0 {
            return (0.0, 0.0);
        }
        if self.signed {
            let half = ((total - 1) as f64).exp2();
            (-half, half - 1.0)
        } else {
            (0.0, (total as f64).exp2() - 1.0)
        }
    }

    /// Inclusive representable range `(min, max)`.
    pub fn range(&self) -> (f64, f64) {
        let (lo, hi) = self.code_range();
        let step = self.step();
        (lo * step, hi * step)
    }

    /// Nearest representable value to `x` after saturating into range.
    /// Ties round away from zero.
    #[inline]
    pub fn quantize(&self, x: f64) -> f64 {
        debug_assert!(x.is_finite(), "quantize of non-finite value {x}");
        let (lo, hi) = self.code_range();
        let scale = (self.frac_bits as f64).exp2();
        // `f64::round` rounds half away from zero; scaling by a power of two
        // is exact, so this is the exact nearest grid point.
        let code = (x * scale).round().clamp(lo, hi);
        // `+ 0.0` folds a negative zero into positive zero.
        code / scale + 0.0
    }

    pub fn is_representable(&self, x: f64) -> bool {
        self.quantize(x) == x
    }
}

/// Element-wise [`FixedPointFormat::quantize`].
pub fn quantize(x: f64, fmt: FixedPointFormat) -> f64 {
    fmt.quantize(x)
}

/// Quantizes every element of `values` into a new vector.
pub fn quantize_all(values: &[f64], fmt: FixedPointFormat) -> Vec<f64> {
    values.iter().map(|&v| fmt.quantize(v)).collect()
}

/// Quantizes in place.
pub fn quantize_slice_mut(values: &mut [f64], fmt: FixedPointFormat) {
    for v in values {
        *v = fmt.quantize(*v);
    }
}

impl fmt::Display for FixedPointFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}Q{}.{}",
            if self.signed { "" } else { "u" },
            self.int_bits,
            self.frac_bits
        )
    }
}

/// Parses the `"Qm.n"` part of a format string.
fn parse_q(s: &str) -> Result<(u32, u32), FormatError> {
    let err = || FormatError::Parse(s.to_string());
    let body = s.trim().strip_prefix('Q').ok_or_else(err)?;
    let (m, n) = body.split_once('.').ok_or_else(err)?;
    Ok((m.parse().map_err(|_| err())?, n.parse().map_err(|_| err())?))
}

impl FromStr for FixedPointFormat {
    type Err = FormatError;

    /// Accepts `Q8.8` (signed) and `uQ0.8` (unsigned).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (signed, q) = match s.strip_prefix('u') {
            Some(rest) => (false, rest),
            None => (true, s),
        };
        let (m, n) = parse_q(q)?;
        Self::new(signed, m, n)
    }
}

/// Serialized form: `{"q": "Q8.8", "signed": true}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FormatRepr {
    q: String,
    signed: bool,
}

impl From<FixedPointFormat> for FormatRepr {
    fn from(f: FixedPointFormat) -> Self {
        Self {
            q: format!("Q{}.{}", f.int_bits, f.frac_bits),
            signed: f.signed,
        }
    }
}

impl TryFrom<FormatRepr> for FixedPointFormat {
    type Error = FormatError;

    fn try_from(r: FormatRepr) -> Result<Self, Self::Error> {
        let (m, n) = parse_q(&r.q)?;
        Self::new(r.signed, m, n)
    }
}
