//! Signed log-domain arithmetic.
//!
//! Surrogate-loss bookkeeping needs quantities of the form e^{z} − e^{−z}
//! summed across groups, where z = ηV can reach hundreds for long streams.
//! [`SignedLog`] stores sign and ln(magnitude) separately so those sums stay
//! finite and keep relative precision even when e^{z} overflows f64.

use std::cmp::Ordering;

/// A real number stored as (sign, ln|x|). Zero is the canonical
/// (0, −∞) pair.
#[derive(Clone, Copy, Debug)]
pub struct SignedLog {
    sign: i8,
    ln_mag: f64,
}

impl SignedLog {
    pub const ZERO: SignedLog = SignedLog { sign: 0, ln_mag: f64::NEG_INFINITY };

    pub fn from_value(v: f64) -> Self {
        if v == 0.0 {
            Self::ZERO
        } else if v > 0.0 {
            Self { sign: 1, ln_mag: v.ln() }
        } else {
            Self { sign: -1, ln_mag: (-v).ln() }
        }
    }

    pub fn from_sign_ln(sign: i8, ln_mag: f64) -> Self {
        debug_assert!(matches!(sign, -1 | 0 | 1));
        if sign == 0 || ln_mag == f64::NEG_INFINITY {
            Self::ZERO
        } else {
            Self { sign, ln_mag }
        }
    }

    /// e^{z} − e^{−z} (twice the hyperbolic sine), computed without forming
    /// either exponential: ln|·| = |z| + ln(1 − e^{−2|z|}).
    pub fn sym_exp_diff(z: f64) -> Self {
        if z == 0.0 {
            return Self::ZERO;
        }
        let a = z.abs();
        let ln_mag = a + (-f64::exp_m1(-2.0 * a)).ln();
        Self { sign: if z > 0.0 { 1 } else { -1 }, ln_mag }
    }

    /// e^{z} + e^{−z} (twice the hyperbolic cosine): ln = |z| + ln(1 + e^{−2|z|}).
    pub fn sym_exp_sum(z: f64) -> Self {
        let a = z.abs();
        Self { sign: 1, ln_mag: a + f64::ln_1p((-2.0 * a).exp()) }
    }

    pub fn is_zero(&self) -> bool {
        self.sign == 0
    }

    pub fn sign(&self) -> i8 {
        self.sign
    }

    /// ln of the magnitude; −∞ for zero.
    pub fn ln_abs(&self) -> f64 {
        self.ln_mag
    }

    pub fn neg(&self) -> Self {
        Self { sign: -self.sign, ln_mag: self.ln_mag }
    }

    pub fn abs(&self) -> Self {
        Self { sign: self.sign.abs(), ln_mag: self.ln_mag }
    }

    /// Multiplies by e^{t} (a log-domain rescale).
    pub fn mul_exp(&self, t: f64) -> Self {
        if self.sign == 0 {
            Self::ZERO
        } else {
            Self { sign: self.sign, ln_mag: self.ln_mag + t }
        }
    }

    /// Multiplies by an ordinary real constant.
    pub fn scale(&self, c: f64) -> Self {
        if c == 0.0 || self.sign == 0 {
            return Self::ZERO;
        }
        let sign = if c > 0.0 { self.sign } else { -self.sign };
        Self { sign, ln_mag: self.ln_mag + c.abs().ln() }
    }

    pub fn add(&self, other: &Self) -> Self {
        if self.sign == 0 {
            return *other;
        }
        if other.sign == 0 {
            return *self;
        }
        // Order so that `hi` carries the larger magnitude.
        let (hi, lo) = if self.ln_mag >= other.ln_mag { (self, other) } else { (other, self) };
        let delta = lo.ln_mag - hi.ln_mag;
        if hi.sign == lo.sign {
            Self { sign: hi.sign, ln_mag: hi.ln_mag + f64::ln_1p(delta.exp()) }
        } else if delta == 0.0 {
            Self::ZERO
        } else {
            Self { sign: hi.sign, ln_mag: hi.ln_mag + f64::ln_1p(-delta.exp()) }
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.neg())
    }

    /// The represented value; overflows to ±∞ when ln|x| exceeds f64 range.
    pub fn to_value(&self) -> f64 {
        f64::from(self.sign) * self.ln_mag.exp()
    }

    /// Total order consistent with the represented real values.
    pub fn cmp_value(&self, other: &Self) -> Ordering {
        match self.sign.cmp(&other.sign) {
            Ordering::Equal => {}
            ord => return ord,
        }
        match self.sign {
            0 => Ordering::Equal,
            1 => self.ln_mag.partial_cmp(&other.ln_mag).unwrap_or(Ordering::Equal),
            _ => other.ln_mag.partial_cmp(&self.ln_mag).unwrap_or(Ordering::Equal),
        }
    }
}
