use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Scalar field used by all differentiable model code.
///
/// Branching functions (`max`, `min`, `clamp_cst`, `abs`) select a branch
/// from the primal value and differentiate the selected branch.
pub trait Real:
    Copy
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    /// A value carrying no derivative information.
    fn cst(v: f64) -> Self;

    /// Primal value.
    fn value(self) -> f64;

    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tan(self) -> Self;
    fn atan(self) -> Self;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;

    /// `a * x + b * y` as a single operation.
    fn lin2(a: Self, x: Self, b: Self, y: Self) -> Self {
        a * x + b * y
    }

    /// Inner product of two equally long slices.
    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = Self::zero();
        for (x, y) in a.iter().zip(b) {
            acc += *x * *y;
        }
        acc
    }

    /// Inner product with constant coefficients.
    fn dot_cst(w: &[f64], x: &[Self]) -> Self {
        debug_assert_eq!(w.len(), x.len());
        let mut acc = Self::zero();
        for (c, v) in w.iter().zip(x) {
            acc += *v * *c;
        }
        acc
    }

    fn sum(xs: &[Self]) -> Self {
        let mut acc = Self::zero();
        for x in xs {
            acc += *x;
        }
        acc
    }

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn one() -> Self {
        Self::cst(1.0)
    }

    fn is_finite(self) -> bool {
        self.value().is_finite()
    }

    fn powi(self, n: i32) -> Self {
        match n {
            0 => Self::one(),
            1 => self,
            n if n < 0 => Self::one() / self.powi(-n),
            n => {
                let half = self.powi(n / 2);
                let sq = half * half;
                if n % 2 == 1 {
                    sq * self
                } else {
                    sq
                }
            }
        }
    }

    fn abs(self) -> Self {
        if self.value() < 0.0 {
            -self
        } else {
            self
        }
    }

    fn max(self, other: Self) -> Self {
        if self.value() >= other.value() {
            self
        } else {
            other
        }
    }

    fn min(self, other: Self) -> Self {
        if self.value() <= other.value() {
            self
        } else {
            other
        }
    }

    /// Clamp to constant bounds; derivative is zero outside `[lo, hi]`.
    fn clamp_cst(self, lo: f64, hi: f64) -> Self {
        let v = self.value();
        if v < lo {
            Self::cst(lo)
        } else if v > hi {
            Self::cst(hi)
        } else {
            self
        }
    }

    fn softplus(self) -> Self {
        // log(1 + e^x) = max(x, 0) + log(1 + e^-|x|)
        let v = self.value();
        if v > 0.0 {
            self + (-self).exp().ln_1p()
        } else {
            self.exp().ln_1p()
        }
    }

    fn ln_1p(self) -> Self {
        (self + 1.0).ln()
    }

    fn sigmoid(self) -> Self {
        let v = self.value();
        if v >= 0.0 {
            Self::one() / ((-self).exp() + 1.0)
        } else {
            let e = self.exp();
            e / (e + 1.0)
        }
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn tan(self) -> Self {
        f64::tan(self)
    }
    #[inline]
    fn atan(self) -> Self {
        f64::atan(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    #[inline]
    fn lin2(a: Self, x: Self, b: Self, y: Self) -> Self {
        a * x + b * y
    }
    #[inline]
    fn dot(a: &[Self], b: &[Self]) -> Self {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
    #[inline]
    fn dot_cst(w: &[f64], x: &[Self]) -> Self {
        w.iter().zip(x).map(|(c, v)| c * v).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert!((Real::softplus(800.0_f64) - 800.0).abs() < 1e-12);
        assert!(Real::softplus(-800.0_f64) >= 0.0);
        assert!((Real::softplus(0.0_f64) - 2f64.ln()).abs() < 1e-15);
    }
}
