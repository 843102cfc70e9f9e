//! Fast `log2`/`exp2` over IEEE 754 single precision.
//!
//! Both functions split the float into exponent and mantissa and evaluate a
//! degree-5 polynomial with Horner's scheme on the fractional part. The
//! arithmetic goes through [`Arith`] so the same code path can be run with
//! [`CountingArith`] to tally multiplications and additions.

use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum ApproxError {
    #[error("{0} is outside the domain (must be positive, finite and normal)")]
    Domain(f32),
}

pub type Result<T> = std::result::Result<T, ApproxError>;

/// Sign, biased exponent and 23 fraction bits of an `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FloatParts {
    pub sign: bool,
    pub exponent: u8,
    pub mantissa: u32,
}

const MANTISSA_BITS: u32 = 23;
const MANTISSA_MASK: u32 = (1 << MANTISSA_BITS) - 1;
const EXPONENT_BIAS: i32 = 127;

impl FloatParts {
    pub fn from_bits(bits: u32) -> Self {
        Self {
            sign: bits >> 31 == 1,
            exponent: ((bits >> MANTISSA_BITS) & 0xff) as u8,
            mantissa: bits & MANTISSA_MASK,
        }
    }

    pub fn to_bits(self) -> u32 {
        (u32::from(self.sign) << 31) | (u32::from(self.exponent) << MANTISSA_BITS) | self.mantissa
    }

    pub fn to_f32(self) -> f32 {
        f32::from_bits(self.to_bits())
    }

    /// The mantissa as a value in `[0, 1)`.
    pub fn fraction(self) -> f32 {
        // Exact: 23 bits fit in the f32 significand.
        self.mantissa as f32 / (1u32 << MANTISSA_BITS) as f32
    }
}

/// Splits a positive normal float into its parts.
pub fn split_float(x: f32) -> Result<FloatParts> {
    if x <= 0.0 || !x.is_normal() {
        return Err(ApproxError::Domain(x));
    }
    Ok(FloatParts::from_bits(x.to_bits()))
}

/// Six polynomial coefficients, lowest degree first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyCoeffs(pub [f64; 6]);

/// `log2(1 + y)` on `[0, 1)`: values and first derivatives matched at 0, 0.5 and 1.
// c1 is log2(e) rounded to 8 digits, kept as given.
#[allow(clippy::approx_constant)]
pub const LOG2_COEFFS: PolyCoeffs = PolyCoeffs([
    0.0,
    1.44269504,
    -0.71249131,
    0.42046732,
    -0.1955884,
    0.04491735,
]);

/// `2^f` on `[0, 1)`, fitted the same way (values and derivatives at 0, 0.5, 1).
pub const EXP2_COEFFS: PolyCoeffs = PolyCoeffs([
    1.0,
    std::f64::consts::LN_2,
    0.240_174_405_741_580_77,
    0.055_811_747_933_210_69,
    0.008_970_203_549_164_45,
    0.001_896_462_216_098_780_4,
]);

/// Arithmetic backend for the polynomial evaluators.
pub trait Arith {
    fn mul(&mut self, a: f32, b: f32) -> f32;
    fn add(&mut self, a: f32, b: f32) -> f32;
}

/// Plain IEEE arithmetic.
#[derive(Debug, Default, Clone, Copy)]
pub struct PlainArith;

impl Arith for PlainArith {
    #[inline(always)]
    fn mul(&mut self, a: f32, b: f32) -> f32 {
        a * b
    }
    #[inline(always)]
    fn add(&mut self, a: f32, b: f32) -> f32 {
        a + b
    }
}

/// Counts every multiplication and addition it performs.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct CountingArith {
    pub mul: u32,
    pub add: u32,
}

impl Arith for CountingArith {
    fn mul(&mut self, a: f32, b: f32) -> f32 {
        self.mul += 1;
        a * b
    }
    fn add(&mut self, a: f32, b: f32) -> f32 {
        self.add += 1;
        a + b
    }
}

/// Horner evaluation of `c5 y^5 + ... + c1 y`, without the constant term.
#[inline(always)]
fn horner_no_constant<A: Arith>(coeffs: &[f32; 6], y: f32, arith: &mut A) -> f32 {
    let mut acc = coeffs[5];
    for &c in coeffs[1..5].iter().rev() {
        let t = arith.mul(acc, y);
        acc = arith.add(t, c);
    }
    arith.mul(acc, y)
}

fn coeffs_f32(c: &PolyCoeffs) -> [f32; 6] {
    c.0.map(|v| v as f32)
}

/// `log2(x)` as `(e - 127) + p(y)`.
///
/// The constant term is folded into the exponent offset, so one evaluation
/// costs 5 multiplications and 6 additions, the exponent unbiasing included.
pub fn log2_approx_with<A: Arith>(x: f32, arith: &mut A) -> Result<f32> {
    let parts = split_float(x)?;
    let c = coeffs_f32(&LOG2_COEFFS);
    let y = parts.fraction();
    let frac = horner_no_constant(&c, y, arith);
    let offset = (LOG2_COEFFS.0[0] - f64::from(EXPONENT_BIAS)) as f32;
    let base = arith.add(f32::from(parts.exponent), offset);
    Ok(arith.add(frac, base))
}

pub fn log2_approx(x: f32) -> Result<f32> {
    log2_approx_with(x, &mut PlainArith)
}

/// Runs [`log2_approx`] under a fresh counter and returns both.
pub fn log2_approx_counted(x: f32) -> Result<(f32, CountingArith)> {
    let mut counter = CountingArith::default();
    let y = log2_approx_with(x, &mut counter)?;
    Ok((y, counter))
}

/// Result of [`exp2_approx_flagged`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exp2 {
    pub value: f32,
    /// Set when the input fell outside the representable range and the result
    /// was clamped to `f32::MAX` (overflow) or `0.0` (underflow).
    pub saturated: bool,
}

pub fn exp2_approx_with<A: Arith>(x: f32, arith: &mut A) -> Exp2 {
    if x.is_nan() {
        return Exp2 {
            value: f32::NAN,
            saturated: true,
        };
    }
    let n = x.floor();
    if n + EXPONENT_BIAS as f32 > 254.0 {
        return Exp2 {
            value: f32::MAX,
            saturated: true,
        };
    }
    if n + (EXPONENT_BIAS as f32) < 1.0 {
        return Exp2 {
            value: 0.0,
            saturated: true,
        };
    }
    let f = arith.add(x, -n);
    let c = coeffs_f32(&EXP2_COEFFS);
    let poly = horner_no_constant(&c, f, arith);
    let q = arith.add(poly, c[0]);
    let scale = f32::from_bits(((n as i32 + EXPONENT_BIAS) as u32) << MANTISSA_BITS);
    Exp2 {
        value: arith.mul(q, scale),
        saturated: false,
    }
}

pub fn exp2_approx_flagged(x: f32) -> Exp2 {
    exp2_approx_with(x, &mut PlainArith)
}

/// `2^x`, saturating outside the normal range.
pub fn exp2_approx(x: f32) -> f32 {
    exp2_approx_flagged(x).value
}

pub fn ln_approx(x: f32) -> Result<f32> {
    Ok(log2_approx(x)? * std::f32::consts::LN_2)
}

pub fn exp_approx(x: f32) -> f32 {
    exp2_approx(x * std::f32::consts::LOG2_E)
}
