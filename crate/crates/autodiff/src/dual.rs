use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::Real;

/// Forward-mode number with `N` tangent directions over a base scalar `S`.
#[derive(Clone, Copy, Debug)]
pub struct Dual<S: Real, const N: usize> {
    pub v: S,
    pub d: [S; N],
}

impl<S: Real, const N: usize> Dual<S, N> {
    pub fn constant(v: S) -> Self {
        Self {
            v,
            d: [S::zero(); N],
        }
    }

    /// Seed direction `k` with unit tangent.
    pub fn seeded(v: S, k: usize) -> Self {
        let mut d = [S::zero(); N];
        d[k] = S::one();
        Self { v, d }
    }

    #[inline]
    fn chain(self, v: S, dv: S) -> Self {
        let mut d = self.d;
        for t in d.iter_mut() {
            *t = dv * *t;
        }
        Self { v, d }
    }
}

impl<S: Real, const N: usize> Add for Dual<S, N> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a += b;
        }
        Self { v: self.v + o.v, d }
    }
}

impl<S: Real, const N: usize> Sub for Dual<S, N> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a -= b;
        }
        Self { v: self.v - o.v, d }
    }
}

impl<S: Real, const N: usize> Mul for Dual<S, N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a = S::lin2(self.v, b, o.v, *a);
        }
        Self { v: self.v * o.v, d }
    }
}

impl<S: Real, const N: usize> Div for Dual<S, N> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let q = self.v / o.v;
        let inv = S::one() / o.v;
        let mq = -q * inv;
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a = S::lin2(inv, *a, mq, b);
        }
        Self { v: q, d }
    }
}

impl<S: Real, const N: usize> Neg for Dual<S, N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        let mut d = self.d;
        for a in d.iter_mut() {
            *a = -*a;
        }
        Self { v: -self.v, d }
    }
}

impl<S: Real, const N: usize> Add<f64> for Dual<S, N> {
    type Output = Self;
    fn add(self, c: f64) -> Self {
        Self {
            v: self.v + c,
            d: self.d,
        }
    }
}

impl<S: Real, const N: usize> Sub<f64> for Dual<S, N> {
    type Output = Self;
    fn sub(self, c: f64) -> Self {
        Self {
            v: self.v - c,
            d: self.d,
        }
    }
}

impl<S: Real, const N: usize> Mul<f64> for Dual<S, N> {
    type Output = Self;
    fn mul(self, c: f64) -> Self {
        let mut d = self.d;
        for a in d.iter_mut() {
            *a = *a * c;
        }
        Self { v: self.v * c, d }
    }
}

impl<S: Real, const N: usize> Div<f64> for Dual<S, N> {
    type Output = Self;
    fn div(self, c: f64) -> Self {
        self * (1.0 / c)
    }
}

impl<S: Real, const N: usize> AddAssign for Dual<S, N> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<S: Real, const N: usize> SubAssign for Dual<S, N> {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<S: Real, const N: usize> MulAssign for Dual<S, N> {
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl<S: Real, const N: usize> Real for Dual<S, N> {
    fn cst(v: f64) -> Self {
        Self::constant(S::cst(v))
    }

    fn value(self) -> f64 {
        self.v.value()
    }

    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }

    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }

    fn tan(self) -> Self {
        let t = self.v.tan();
        self.chain(t, t * t + 1.0)
    }

    fn atan(self) -> Self {
        self.chain(self.v.atan(), S::one() / (self.v * self.v + 1.0))
    }

    fn tanh(self) -> Self {
        let t = self.v.tanh();
        self.chain(t, S::one() - t * t)
    }

    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }

    fn ln(self) -> Self {
        self.chain(self.v.ln(), S::one() / self.v)
    }

    fn ln_1p(self) -> Self {
        self.chain(self.v.ln_1p(), S::one() / (self.v + 1.0))
    }

    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, S::cst(0.5) / s)
    }

    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::one();
        }
        let p = self.v.powi(n - 1);
        self.chain(p * self.v, p * n as f64)
    }

    fn softplus(self) -> Self {
        self.chain(self.v.softplus(), self.v.sigmoid())
    }
}
