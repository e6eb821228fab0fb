//! Truncated Taylor jets with respect to the 3-D query coordinate, built
//! from tape operations so that parameter gradients flow through every
//! derivative channel (forward-over-reverse).
//!
//! A jet of order 2 carries a value, three first derivatives and the six
//! distinct second derivatives. Channels may hold broadcastable shapes
//! (e.g. a `1×m` row shared by every query).

use ndarray::Array2;

use crate::real::Real;
use crate::tape::{Tape, Var};

/// Index pairs `(k, l)` with `k ≤ l` for the stored second derivatives.
pub const PAIRS: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

pub fn pair_index(k: usize, l: usize) -> usize {
    let (k, l) = if k <= l { (k, l) } else { (l, k) };
    match (k, l) {
        (0, 0) => 0,
        (0, 1) => 1,
        (0, 2) => 2,
        (1, 1) => 3,
        (1, 2) => 4,
        _ => 5,
    }
}

#[derive(Debug, Clone)]
pub struct Jet {
    pub v: Var,
    pub d1: Vec<Var>,
    pub d2: Vec<Var>,
}

impl Jet {
    pub fn constant(v: Var) -> Jet {
        Jet {
            v,
            d1: Vec::new(),
            d2: Vec::new(),
        }
    }

    pub fn order(&self) -> usize {
        if !self.d2.is_empty() {
            2
        } else if !self.d1.is_empty() {
            1
        } else {
            0
        }
    }

    pub fn truncate(&self, order: usize) -> Jet {
        Jet {
            v: self.v,
            d1: if order >= 1 { self.d1.clone() } else { Vec::new() },
            d2: if order >= 2 { self.d2.clone() } else { Vec::new() },
        }
    }

    fn with_order(v: Var, d1: Vec<Var>, d2: Vec<Var>) -> Jet {
        Jet { v, d1, d2 }
    }
}

/// Jet of the identity map at the `n×3` points `x`.
pub fn input<F: Real>(t: &mut Tape<F>, x: Array2<F>, order: usize) -> Jet {
    let v = t.constant(x);
    let mut d1 = Vec::new();
    let mut d2 = Vec::new();
    if order >= 1 {
        for k in 0..3 {
            let mut e = Array2::zeros((1, 3));
            e[[0, k]] = F::one();
            d1.push(t.constant(e));
        }
    }
    if order >= 2 {
        let zero = t.constant(Array2::zeros((1, 3)));
        d2 = vec![zero; 6];
    }
    Jet::with_order(v, d1, d2)
}

/// Applies the same linear map to every channel and adds `offset` to the
/// value channel only.
pub fn linear<F: Real>(t: &mut Tape<F>, j: &Jet, map: impl Fn(&mut Tape<F>, Var) -> Var, offset: Option<Var>) -> Jet {
    let mut v = map(t, j.v);
    if let Some(b) = offset {
        v = t.add(v, b);
    }
    let d1 = j.d1.iter().map(|&d| map(t, d)).collect();
    let d2 = j.d2.iter().map(|&d| map(t, d)).collect();
    Jet::with_order(v, d1, d2)
}

/// Affine layer `x·Wᵀ + b`.
pub fn affine<F: Real>(t: &mut Tape<F>, j: &Jet, w: Var, b: Var) -> Jet {
    linear(t, j, |t, x| t.matmul_wt(x, w), Some(b))
}

/// Elementwise `g(u)` given `g(u)`, `g'(u)` and (for order 2) `g''(u)`.
pub fn chain<F: Real>(t: &mut Tape<F>, j: &Jet, g0: Var, g1: Var, g2: Option<Var>) -> Jet {
    let d1: Vec<Var> = j.d1.iter().map(|&d| t.mul(g1, d)).collect();
    let mut d2 = Vec::new();
    if !j.d2.is_empty() {
        let g2 = g2.expect("second derivative required for an order-2 jet");
        for (p, &(k, l)) in PAIRS.iter().enumerate() {
            let first = t.mul(g1, j.d2[p]);
            let cross = t.mul(j.d1[k], j.d1[l]);
            let curv = t.mul(g2, cross);
            d2.push(t.add(first, curv));
        }
    }
    Jet::with_order(g0, d1, d2)
}

/// `sin(ω·u)`.
pub fn sin<F: Real>(t: &mut Tape<F>, j: &Jet, omega: F) -> Jet {
    let s = t.sin(j.v, omega);
    if j.order() == 0 {
        return Jet::constant(s);
    }
    let c = t.cos(j.v, omega);
    let g1 = t.scale(c, omega);
    let g2 = (j.order() >= 2).then(|| t.scale(s, -omega * omega));
    chain(t, j, s, g1, g2)
}

pub fn tanh<F: Real>(t: &mut Tape<F>, j: &Jet) -> Jet {
    let th = t.tanh(j.v);
    if j.order() == 0 {
        return Jet::constant(th);
    }
    // 1 − tanh²
    let sq = t.square(th);
    let neg = t.neg(sq);
    let g1 = t.add_scalar(neg, F::one());
    let g2 = (j.order() >= 2).then(|| {
        let p = t.mul(th, g1);
        t.scale(p, -F::of(2.0))
    });
    chain(t, j, th, g1, g2)
}

pub fn exp<F: Real>(t: &mut Tape<F>, j: &Jet) -> Jet {
    let e = t.exp(j.v);
    chain(t, j, e, e, Some(e))
}

pub fn sqrt<F: Real>(t: &mut Tape<F>, j: &Jet) -> Jet {
    let r = t.sqrt(j.v);
    if j.order() == 0 {
        return Jet::constant(r);
    }
    let inv = t.recip(r);
    let g1 = t.scale(inv, F::of(0.5));
    let g2 = (j.order() >= 2).then(|| {
        // −¼ u^{-3/2}
        let inv2 = t.square(inv);
        let inv3 = t.mul(inv2, inv);
        t.scale(inv3, -F::of(0.25))
    });
    chain(t, j, r, g1, g2)
}

pub fn recip<F: Real>(t: &mut Tape<F>, j: &Jet) -> Jet {
    let r = t.recip(j.v);
    if j.order() == 0 {
        return Jet::constant(r);
    }
    let r2 = t.square(r);
    let g1 = t.neg(r2);
    let g2 = (j.order() >= 2).then(|| {
        let r3 = t.mul(r2, r);
        t.scale(r3, F::of(2.0))
    });
    chain(t, j, r, g1, g2)
}

/// `max(u, c)`, treating clamped entries as constants.
pub fn clamp_min<F: Real>(t: &mut Tape<F>, j: &Jet, c: F) -> Jet {
    let v = t.clamp_min(j.v, c);
    let mask = t.value(j.v).mapv(|x| if x > c { F::one() } else { F::zero() });
    let m = t.constant(mask);
    let d1 = j.d1.iter().map(|&d| t.mul(m, d)).collect();
    let d2 = j.d2.iter().map(|&d| t.mul(m, d)).collect();
    Jet::with_order(v, d1, d2)
}

fn min_order(a: &Jet, b: &Jet) -> usize {
    a.order().min(b.order())
}

pub fn add<F: Real>(t: &mut Tape<F>, a: &Jet, b: &Jet) -> Jet {
    let o = min_order(a, b);
    let v = t.add(a.v, b.v);
    let d1 = if o >= 1 { (0..3).map(|k| t.add(a.d1[k], b.d1[k])).collect() } else { Vec::new() };
    let d2 = if o >= 2 { (0..6).map(|p| t.add(a.d2[p], b.d2[p])).collect() } else { Vec::new() };
    Jet::with_order(v, d1, d2)
}

pub fn sub<F: Real>(t: &mut Tape<F>, a: &Jet, b: &Jet) -> Jet {
    let o = min_order(a, b);
    let v = t.sub(a.v, b.v);
    let d1 = if o >= 1 { (0..3).map(|k| t.sub(a.d1[k], b.d1[k])).collect() } else { Vec::new() };
    let d2 = if o >= 2 { (0..6).map(|p| t.sub(a.d2[p], b.d2[p])).collect() } else { Vec::new() };
    Jet::with_order(v, d1, d2)
}

/// Product rule; shapes broadcast as in [`Tape::mul`].
pub fn mul<F: Real>(t: &mut Tape<F>, a: &Jet, b: &Jet) -> Jet {
    let o = min_order(a, b);
    let v = t.mul(a.v, b.v);
    let mut d1 = Vec::new();
    if o >= 1 {
        for k in 0..3 {
            let x = t.mul(a.d1[k], b.v);
            let y = t.mul(a.v, b.d1[k]);
            d1.push(t.add(x, y));
        }
    }
    let mut d2 = Vec::new();
    if o >= 2 {
        for (p, &(k, l)) in PAIRS.iter().enumerate() {
            let x = t.mul(a.d2[p], b.v);
            let y = t.mul(a.v, b.d2[p]);
            let u = t.mul(a.d1[k], b.d1[l]);
            let w = t.mul(a.d1[l], b.d1[k]);
            let s1 = t.add(x, y);
            let s2 = t.add(u, w);
            d2.push(t.add(s1, s2));
        }
    }
    Jet::with_order(v, d1, d2)
}

/// Multiplies every channel by a constant (non-jet) factor.
pub fn mul_const<F: Real>(t: &mut Tape<F>, j: &Jet, c: Var) -> Jet {
    linear(t, j, |t, x| t.mul(x, c), None)
}

pub fn scale<F: Real>(t: &mut Tape<F>, j: &Jet, c: F) -> Jet {
    linear(t, j, |t, x| t.scale(x, c), None)
}

pub fn add_scalar<F: Real>(t: &mut Tape<F>, j: &Jet, c: F) -> Jet {
    let v = t.add_scalar(j.v, c);
    Jet::with_order(v, j.d1.clone(), j.d2.clone())
}

pub fn sum_cols<F: Real>(t: &mut Tape<F>, j: &Jet) -> Jet {
    linear(t, j, |t, x| t.sum_cols(x), None)
}

pub fn slice_cols<F: Real>(t: &mut Tape<F>, j: &Jet, start: usize, len: usize) -> Jet {
    linear(t, j, |t, x| t.slice_cols(x, start, len), None)
}

pub fn concat_cols<F: Real>(t: &mut Tape<F>, parts: &[Jet]) -> Jet {
    let o = parts.iter().map(Jet::order).min().unwrap_or(0);
    let v = t.concat_cols(&parts.iter().map(|p| p.v).collect::<Vec<_>>());
    let d1 = if o >= 1 {
        (0..3).map(|k| t.concat_cols(&parts.iter().map(|p| p.d1[k]).collect::<Vec<_>>())).collect()
    } else {
        Vec::new()
    };
    let d2 = if o >= 2 {
        (0..6).map(|q| t.concat_cols(&parts.iter().map(|p| p.d2[q]).collect::<Vec<_>>())).collect()
    } else {
        Vec::new()
    };
    Jet::with_order(v, d1, d2)
}

/// Gradient row vectors `n×3` of a scalar jet.
pub fn gradient<F: Real>(t: &mut Tape<F>, j: &Jet) -> Var {
    assert!(j.order() >= 1, "gradient needs an order-1 jet");
    t.concat_cols(&j.d1)
}

/// The gradient of a scalar order-2 jet as an order-1 jet of `n×3` vectors.
pub fn gradient_jet<F: Real>(t: &mut Tape<F>, j: &Jet) -> Jet {
    assert!(j.order() >= 2, "gradient jet needs an order-2 jet");
    let v = t.concat_cols(&j.d1);
    let d1 = (0..3)
        .map(|k| {
            let row: Vec<Var> = (0..3).map(|l| j.d2[pair_index(k, l)]).collect();
            t.concat_cols(&row)
        })
        .collect();
    Jet::with_order(v, d1, Vec::new())
}
