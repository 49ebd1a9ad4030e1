//! Reverse-mode differentiation on a thread-local Wengert list.
//!
//! Each node stores its primal value implicitly (inside the [`Var`] handle)
//! and explicitly the list of `(parent, local partial)` pairs. Constants never
//! reach the tape; operations whose inputs are all constant fold to a constant.
//!
//! One tape exists per thread. [`with_tape`] clears it before and after the
//! closure, so independent computations can run on worker threads without
//! sharing state. Handles from a cleared tape are detected by a generation
//! counter.

use std::cell::RefCell;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::Real;

const CONST: u32 = u32::MAX;

struct Tape {
    generation: u32,
    offsets: Vec<u32>,
    parents: Vec<u32>,
    weights: Vec<f64>,
}

impl Tape {
    fn new() -> Self {
        Self {
            generation: 0,
            offsets: vec![0],
            parents: Vec::new(),
            weights: Vec::new(),
        }
    }

    fn clear(&mut self) {
        self.generation = self.generation.wrapping_add(1);
        self.offsets.clear();
        self.offsets.push(0);
        self.parents.clear();
        self.weights.clear();
    }

    #[inline]
    fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    fn close_node(&mut self) -> u32 {
        let idx = self.len() as u32;
        self.offsets.push(self.parents.len() as u32);
        idx
    }

    #[inline]
    fn edge(&mut self, parent: Var, w: f64) {
        if parent.idx != CONST && w != 0.0 {
            debug_assert_eq!(parent.gen, self.generation, "stale Var from a cleared tape");
            self.parents.push(parent.idx);
            self.weights.push(w);
        }
    }

    /// Finish a node whose edges were pushed starting at `start`. Returns a
    /// constant if no edge was recorded.
    #[inline]
    fn finish(&mut self, start: usize, val: f64) -> Var {
        if self.parents.len() == start {
            Var::constant(val)
        } else {
            let idx = self.close_node();
            Var {
                val,
                idx,
                gen: self.generation,
            }
        }
    }
}

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape::new());
}

/// Run `f` on a freshly cleared tape of the current thread.
pub fn with_tape<R>(f: impl FnOnce() -> R) -> R {
    TAPE.with(|t| t.borrow_mut().clear());
    let out = f();
    TAPE.with(|t| t.borrow_mut().clear());
    out
}

/// Number of nodes currently recorded on this thread's tape.
pub fn tape_len() -> usize {
    TAPE.with(|t| t.borrow().len())
}

/// Number of recorded edges (partial derivatives) on this thread's tape.
pub fn tape_edges() -> usize {
    TAPE.with(|t| t.borrow().parents.len())
}

/// Handle to a tape node (or a constant).
#[derive(Clone, Copy, Debug)]
pub struct Var {
    val: f64,
    idx: u32,
    gen: u32,
}

impl Var {
    /// An independent variable: a leaf on the current tape.
    pub fn variable(val: f64) -> Self {
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let idx = t.close_node();
            Var {
                val,
                idx,
                gen: t.generation,
            }
        })
    }

    pub fn constant(val: f64) -> Self {
        Var {
            val,
            idx: CONST,
            gen: 0,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.idx == CONST
    }

    #[inline]
    fn unary(self, val: f64, d: f64) -> Var {
        if self.idx == CONST {
            return Var::constant(val);
        }
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let start = t.parents.len();
            t.edge(self, d);
            t.finish(start, val)
        })
    }

    #[inline]
    fn binary(a: Var, da: f64, b: Var, db: f64, val: f64) -> Var {
        if a.idx == CONST && b.idx == CONST {
            return Var::constant(val);
        }
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let start = t.parents.len();
            t.edge(a, da);
            t.edge(b, db);
            t.finish(start, val)
        })
    }

    /// Back-propagate from this node. The result holds the adjoint of every
    /// node recorded so far on the current tape.
    pub fn grad(self) -> Gradient {
        TAPE.with(|t| {
            let t = t.borrow();
            let n = t.len();
            let mut adj = vec![0.0; n];
            if self.idx != CONST {
                assert_eq!(self.gen, t.generation, "stale Var from a cleared tape");
                adj[self.idx as usize] = 1.0;
                for i in (0..=self.idx as usize).rev() {
                    let a = adj[i];
                    if a == 0.0 {
                        continue;
                    }
                    let lo = t.offsets[i] as usize;
                    let hi = t.offsets[i + 1] as usize;
                    for k in lo..hi {
                        adj[t.parents[k] as usize] += t.weights[k] * a;
                    }
                }
            }
            Gradient {
                adj,
                gen: t.generation,
            }
        })
    }
}

/// Adjoints produced by [`Var::grad`].
pub struct Gradient {
    adj: Vec<f64>,
    gen: u32,
}

impl Gradient {
    /// Derivative of the seed with respect to `v` (zero for constants).
    pub fn wrt(&self, v: Var) -> f64 {
        if v.idx == CONST {
            return 0.0;
        }
        assert_eq!(v.gen, self.gen, "Var belongs to a different tape");
        self.adj[v.idx as usize]
    }

    pub fn wrt_slice(&self, vs: &[Var]) -> Vec<f64> {
        vs.iter().map(|v| self.wrt(*v)).collect()
    }
}

impl Add for Var {
    type Output = Var;
    #[inline]
    fn add(self, o: Var) -> Var {
        Var::binary(self, 1.0, o, 1.0, self.val + o.val)
    }
}

impl Sub for Var {
    type Output = Var;
    #[inline]
    fn sub(self, o: Var) -> Var {
        Var::binary(self, 1.0, o, -1.0, self.val - o.val)
    }
}

impl Mul for Var {
    type Output = Var;
    #[inline]
    fn mul(self, o: Var) -> Var {
        Var::binary(self, o.val, o, self.val, self.val * o.val)
    }
}

impl Div for Var {
    type Output = Var;
    #[inline]
    fn div(self, o: Var) -> Var {
        let q = self.val / o.val;
        Var::binary(self, 1.0 / o.val, o, -q / o.val, q)
    }
}

impl Neg for Var {
    type Output = Var;
    #[inline]
    fn neg(self) -> Var {
        self.unary(-self.val, -1.0)
    }
}

impl Add<f64> for Var {
    type Output = Var;
    #[inline]
    fn add(self, c: f64) -> Var {
        self.unary(self.val + c, 1.0)
    }
}

impl Sub<f64> for Var {
    type Output = Var;
    #[inline]
    fn sub(self, c: f64) -> Var {
        self.unary(self.val - c, 1.0)
    }
}

impl Mul<f64> for Var {
    type Output = Var;
    #[inline]
    fn mul(self, c: f64) -> Var {
        self.unary(self.val * c, c)
    }
}

impl Div<f64> for Var {
    type Output = Var;
    #[inline]
    fn div(self, c: f64) -> Var {
        self.unary(self.val / c, 1.0 / c)
    }
}

impl AddAssign for Var {
    fn add_assign(&mut self, o: Var) {
        *self = *self + o;
    }
}

impl SubAssign for Var {
    fn sub_assign(&mut self, o: Var) {
        *self = *self - o;
    }
}

impl MulAssign for Var {
    fn mul_assign(&mut self, o: Var) {
        *self = *self * o;
    }
}

impl Real for Var {
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }

    fn value(self) -> f64 {
        self.val
    }

    fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }

    fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }

    fn tan(self) -> Self {
        let t = self.val.tan();
        self.unary(t, 1.0 + t * t)
    }

    fn atan(self) -> Self {
        self.unary(self.val.atan(), 1.0 / (1.0 + self.val * self.val))
    }

    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }

    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }

    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }

    fn ln_1p(self) -> Self {
        self.unary(self.val.ln_1p(), 1.0 / (1.0 + self.val))
    }

    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }

    fn powi(self, n: i32) -> Self {
        let d = if n == 0 {
            0.0
        } else {
            n as f64 * self.val.powi(n - 1)
        };
        self.unary(self.val.powi(n), d)
    }

    fn softplus(self) -> Self {
        let v = self.val;
        let out = if v > 0.0 {
            v + (-v).exp().ln_1p()
        } else {
            v.exp().ln_1p()
        };
        // d/dx softplus = sigmoid
        let d = if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        };
        self.unary(out, d)
    }

    fn lin2(a: Self, x: Self, b: Self, y: Self) -> Self {
        let val = a.val * x.val + b.val * y.val;
        if a.idx == CONST && x.idx == CONST && b.idx == CONST && y.idx == CONST {
            return Var::constant(val);
        }
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let start = t.parents.len();
            t.edge(a, x.val);
            t.edge(x, a.val);
            t.edge(b, y.val);
            t.edge(y, b.val);
            t.finish(start, val)
        })
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let start = t.parents.len();
            let mut val = 0.0;
            for (x, y) in a.iter().zip(b) {
                val += x.val * y.val;
                t.edge(*x, y.val);
                t.edge(*y, x.val);
            }
            t.finish(start, val)
        })
    }

    fn dot_cst(w: &[f64], x: &[Self]) -> Self {
        debug_assert_eq!(w.len(), x.len());
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let start = t.parents.len();
            let mut val = 0.0;
            for (c, v) in w.iter().zip(x) {
                val += c * v.val;
                t.edge(*v, *c);
            }
            t.finish(start, val)
        })
    }

    fn sum(xs: &[Self]) -> Self {
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let start = t.parents.len();
            let mut val = 0.0;
            for v in xs {
                val += v.val;
                t.edge(*v, 1.0);
            }
            t.finish(start, val)
        })
    }
}
