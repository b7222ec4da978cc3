//! Double-double arithmetic: an unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi)/2`,
//! giving roughly 106 bits of significand. Only the operations the
//! finite-difference oracle needs are provided.

use core::cmp::Ordering;
use core::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd::new(core::f64::consts::LN_2, 2.3190468138462996e-17);
const EXP_SQUARINGS: i32 = 10;

// 1/k! for k = 3..=10.
const INV_FACT: [Dd; 8] = [
    Dd::new(0.16666666666666666, 9.25185853854297e-18),
    Dd::new(0.041666666666666664, 2.3129646346357427e-18),
    Dd::new(0.008333333333333333, 1.1564823173178714e-19),
    Dd::new(0.001388888888888889, -5.300543954373577e-20),
    Dd::new(0.0001984126984126984, 1.7209558293420705e-22),
    Dd::new(2.48015873015873e-05, 2.1511947866775882e-23),
    Dd::new(2.7557319223985893e-06, -1.858393274046472e-22),
    Dd::new(2.755731922398589e-07, 2.3767714622250297e-23),
];

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, libm::fma(a, b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd::new(0.0, 0.0);
    pub const ONE: Dd = Dd::new(1.0, 0.0);

    pub const fn new(hi: f64, lo: f64) -> Self {
        Self { hi, lo }
    }

    fn renorm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Self { hi, lo }
    }

    /// Multiplication by a power of two is exact.
    fn ldexp(self, k: i32) -> Self {
        Self { hi: libm::scalbn(self.hi, k), lo: libm::scalbn(self.lo, k) }
    }

    pub fn max_f64(self, floor: f64) -> Self {
        if self < Dd::from(floor) {
            Dd::from(floor)
        } else {
            self
        }
    }

    pub fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::ZERO;
        }
        let x = Dd::from(libm::sqrt(self.hi));
        x + (self - x * x) / (x + x)
    }

    pub fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Dd::from(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        let k = libm::round(self.hi / LN2.hi);
        let r = (self - LN2 * Dd::from(k)).ldexp(-EXP_SQUARINGS);
        // exp(r) − 1 by Taylor series, then undo the scaling by repeated
        // squaring in the form (1 + s)² − 1 = s·(2 + s).
        let mut s = r + r * r * Dd::from(0.5);
        let mut power = r * r;
        for c in INV_FACT {
            power = power * r;
            s = s + power * c;
        }
        for _ in 0..EXP_SQUARINGS {
            s = s * (s + Dd::from(2.0));
        }
        (s + Dd::ONE).ldexp(k as i32)
    }

    /// Natural logarithm by one Newton step on `exp(y) = x`.
    pub fn ln(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::from(f64::NEG_INFINITY);
        }
        let y = Dd::from(libm::log(self.hi));
        y + self * (-y).exp() - Dd::ONE
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }
}

impl From<Dd> for f64 {
    fn from(x: Dd) -> f64 {
        x.hi + x.lo
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            o => Some(o),
        }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s1, s2) = two_sum(self.hi, b.hi);
        let (t1, t2) = two_sum(self.lo, b.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        Dd::renorm(s1, s2 + t2)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let (p1, p2) = two_prod(self.hi, b.hi);
        Dd::renorm(p1, p2 + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b * Dd::from(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Dd::from(q2);
        let q3 = r.hi / b.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        Dd::new(q1, q2) + Dd::from(q3)
    }
}

impl core::iter::Sum for Dd {
    fn sum<I: Iterator<Item = Dd>>(iter: I) -> Dd {
        iter.fold(Dd::ZERO, |a, b| a + b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(x: Dd, hi: f64, lo: f64, tol: f64) {
        let err = (x.hi - hi) + (x.lo - lo);
        assert!(err.abs() <= tol * hi.abs(), "{x:?} vs ({hi:e}, {lo:e}): {err:e}");
    }

    // Reference digits from a 60-digit evaluation.
    #[test]
    fn transcendentals_match_high_precision_values() {
        close(Dd::from(0.7).ln(), -0.35667494393873245, 4.82556379937662e-18, 1e-30);
        close(Dd::from(1.0).exp(), core::f64::consts::E, 1.4456468917292502e-16, 1e-30);
        close(Dd::from(-13.3).exp(), 1.674493209434266e-06, -2.202685074731935e-23, 1e-30);
        close(Dd::from(2.0).sqrt(), core::f64::consts::SQRT_2, -9.667293313452913e-17, 1e-30);
        close(Dd::from(1.0) / Dd::from(3.0), 0.3333333333333333, 1.850371707708594e-17, 1e-31);
    }

    #[test]
    fn exp_ln_roundtrip() {
        for x in [-600.0, -30.5, -1e-8, 0.0, 3.25, 12.0, 300.0] {
            let y = Dd::from(x).exp().ln();
            assert!((f64::from(y - Dd::from(x))).abs() <= 1e-29 * x.abs().max(1.0), "{x}");
        }
    }
}
