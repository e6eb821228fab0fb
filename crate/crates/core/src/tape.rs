//! Reverse-mode differentiation over batched 2-D arrays.
//!
//! Every node holds an `Array2` value. Binary elementwise ops broadcast
//! singleton rows/columns in either operand; gradients are summed back over
//! the broadcast axes.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{IdfError, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Compressed sparse row matrix used for constant linear row maps
/// (interpolation, scatter, stencil shifts).
#[derive(Debug, Clone, PartialEq)]
pub struct Csr<F> {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<F>,
}

impl<F: Real> Csr<F> {
    /// Builds from per-row `(column, weight)` lists.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, F)>]) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in rows {
            for &(c, w) in row {
                debug_assert!(c < cols);
                indices.push(c);
                values.push(w);
            }
            indptr.push(indices.len());
        }
        Csr {
            rows: rows.len(),
            cols,
            indptr,
            indices,
            values,
        }
    }

    /// `self · a`.
    pub fn apply(&self, a: ArrayView2<F>) -> Array2<F> {
        assert_eq!(a.nrows(), self.cols, "sparse map expects {} rows", self.cols);
        let mut out = Array2::zeros((self.rows, a.ncols()));
        for r in 0..self.rows {
            let mut dst = out.row_mut(r);
            for j in self.indptr[r]..self.indptr[r + 1] {
                dst.scaled_add(self.values[j], &a.row(self.indices[j]));
            }
        }
        out
    }

    /// `selfᵀ · g`.
    pub fn apply_transpose(&self, g: ArrayView2<F>) -> Array2<F> {
        let mut out = Array2::zeros((self.cols, g.ncols()));
        for r in 0..self.rows {
            let src = g.row(r);
            for j in self.indptr[r]..self.indptr[r + 1] {
                out.row_mut(self.indices[j]).scaled_add(self.values[j], &src);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Constant,
    Param,
    MatMulWt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Sin(Var, F),
    Cos(Var, F),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    Sqrt(Var),
    Recip(Var),
    ClampMin(Var, F),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sparse(Var, Rc<Csr<F>>),
    NonDifferentiable(&'static str),
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients<F> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when no path reached it.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Array2<F> {
        self.grads
            .get_mut(v.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}

#[derive(Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

fn unbroadcast<F: Real>(g: Array2<F>, shape: (usize, usize)) -> Array2<F> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> F {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "not a scalar node");
        a[[0, 0]]
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, a: Var, value: Array2<F>, op: Op<F>) -> Var {
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    /// Input that is not differentiated.
    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn constant_scalar(&mut self, value: F) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Param, true)
    }

    /// `a · wᵀ` for `a: n×k`, `w: m×k`.
    pub fn matmul_wt(&mut self, a: Var, w: Var) -> Var {
        let value = self.value(a).dot(&self.value(w).t());
        let rg = self.rg(a) || self.rg(w);
        self.push(value, Op::MatMulWt(a, w), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) / self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a) * c;
        self.unary(a, value, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -F::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a) + c;
        self.unary(a, value, Op::AddScalar(a))
    }

    /// `sin(ω·a)`.
    pub fn sin(&mut self, a: Var, omega: F) -> Var {
        let value = self.value(a).mapv(|x| (omega * x).sin());
        self.unary(a, value, Op::Sin(a, omega))
    }

    /// `cos(ω·a)`.
    pub fn cos(&mut self, a: Var, omega: F) -> Var {
        let value = self.value(a).mapv(|x| (omega * x).cos());
        self.unary(a, value, Op::Cos(a, omega))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(F::tanh);
        self.unary(a, value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(F::exp);
        self.unary(a, value, Op::Exp(a))
    }

    /// Absolute value; the derivative at zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(F::abs);
        self.unary(a, value, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(F::sqrt);
        self.unary(a, value, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(F::recip);
        self.unary(a, value, Op::Recip(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// `max(a, c)`; gradient flows only where `a > c`.
    pub fn clamp_min(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a).mapv(|x| if x > c { x } else { c });
        self.unary(a, value, Op::ClampMin(a, c))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.unary(a, value, Op::Sum(a))
    }

    /// Mean of all entries, as a 1×1 node.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Array2::from_elem((1, 1), v.sum() / F::of(v.len() as f64));
        self.unary(a, value, Op::Mean(a))
    }

    /// Row sums, `n×m → n×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(a, value, Op::SumCols(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.unary(a, value, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.unary(a, value, Op::SliceRows(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = parts.iter().map(|&p| self.shape(p).0).max().unwrap_or(0);
        let views: Vec<Array2<F>> = parts
            .iter()
            .map(|&p| {
                let v = self.value(p);
                if v.nrows() == rows {
                    v.clone()
                } else {
                    v.broadcast((rows, v.ncols())).expect("row broadcast").to_owned()
                }
            })
            .collect();
        let value = ndarray::concatenate(Axis(1), &views.iter().map(|v| v.view()).collect::<Vec<_>>())
            .expect("concat_cols shapes");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<F>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows shapes");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// `m · a` for a constant sparse `m`.
    pub fn sparse(&mut self, m: Rc<Csr<F>>, a: Var) -> Var {
        let value = m.apply(self.value(a).view());
        self.unary(a, value, Op::Sparse(a, m))
    }

    /// Elementwise sign. Backpropagating into it is an error.
    pub fn sign(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| if x > F::zero() { F::one() } else if x < F::zero() { -F::one() } else { F::zero() });
        self.unary(a, value, Op::NonDifferentiable("sign"))
    }

    /// Gradients of the 1×1 node `loss` with respect to every node on a
    /// differentiable path.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<F>>> = (0..n).map(|_| None).collect();
        if self.value(loss).dim() != (1, 1) {
            return Err(IdfError::Shape(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc<F: Real>(grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Constant | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMulWt(a, w) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.dot(self.value(*w)));
                    }
                    if self.rg(*w) {
                        acc(&mut grads, *w, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let negate = matches!(node.op, Op::Sub(..));
                    if self.rg(*b) {
                        let gb = unbroadcast(if negate { g.mapv(|x| -x) } else { g.clone() }, self.shape(*b));
                        acc(&mut grads, *b, gb);
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, unbroadcast(g, self.shape(*a)));
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, unbroadcast(&g * self.value(*b), self.shape(*a)));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, unbroadcast(&g * self.value(*a), self.shape(*b)));
                    }
                }
                Op::Div(a, b) => {
                    // out = a / b
                    if self.rg(*a) {
                        acc(&mut grads, *a, unbroadcast(&g / self.value(*b), self.shape(*a)));
                    }
                    if self.rg(*b) {
                        let gb = -(&g * out) / self.value(*b);
                        acc(&mut grads, *b, unbroadcast(gb, self.shape(*b)));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Sin(a, w) => {
                    let w = *w;
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |g, &x| *g = *g * w * (w * x).cos());
                    acc(&mut grads, *a, ga);
                }
                Op::Cos(a, w) => {
                    let w = *w;
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |g, &x| *g = -*g * w * (w * x).sin());
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(out, |g, &t| *g = *g * (F::one() - t * t));
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * out),
                Op::Abs(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |g, &x| {
                        *g = if x > F::zero() {
                            *g
                        } else if x < F::zero() {
                            -*g
                        } else {
                            F::zero()
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let half = F::of(0.5);
                    let mut ga = g;
                    ga.zip_mut_with(out, |g, &r| *g = *g * half / r);
                    acc(&mut grads, *a, ga);
                }
                Op::Recip(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(out, |g, &r| *g = -*g * r * r);
                    acc(&mut grads, *a, ga);
                }
                Op::ClampMin(a, c) => {
                    let c = *c;
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |g, &x| {
                        if x <= c {
                            *g = F::zero()
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let shape = self.shape(*a);
                    acc(&mut grads, *a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::Mean(a) => {
                    let shape = self.shape(*a);
                    let scale = g[[0, 0]] / F::of((shape.0 * shape.1) as f64);
                    acc(&mut grads, *a, Array2::from_elem(shape, scale));
                }
                Op::SumCols(a) => {
                    let shape = self.shape(*a);
                    let ga = g.broadcast(shape).expect("sum_cols broadcast").to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let shape = self.shape(p);
                        if self.rg(p) {
                            let gp = g.slice(s![.., col..col + shape.1]).to_owned();
                            acc(&mut grads, p, unbroadcast(gp, shape));
                        }
                        col += shape.1;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let rows = self.shape(p).0;
                        if self.rg(p) {
                            acc(&mut grads, p, g.slice(s![row..row + rows, ..]).to_owned());
                        }
                        row += rows;
                    }
                }
                Op::Sparse(a, m) => acc(&mut grads, *a, m.apply_transpose(g.view())),
                Op::NonDifferentiable(name) => {
                    return Err(IdfError::Unsupported(format!("cannot differentiate through '{name}'")));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in ndarray::indices(x.dim()) {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[idx] += h;
            m[idx] -= h;
            g[idx] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn check(x: Array2<f64>, build: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let out = build(&mut t, v);
        let mut grads = t.backward(out).unwrap();
        let analytic = grads.take_or_zeros(v, x.dim());
        let numeric = numeric_grad(&x, |x| {
            let mut t = Tape::new();
            let v = t.param(x.clone());
            let o = build(&mut t, v);
            t.scalar(o)
        });
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "analytic {a} numeric {n}");
        }
    }

    fn sample() -> Array2<f64> {
        array![[0.3, -0.7, 1.1], [0.5, 0.2, -0.4]]
    }

    #[test]
    fn elementwise_ops() {
        check(sample(), |t, v| {
            let s = t.sin(v, 3.0);
            let c = t.cos(v, 2.0);
            let e = t.exp(c);
            let th = t.tanh(s);
            let m = t.mul(e, th);
            let sq = t.square(v);
            let sq = t.add_scalar(sq, 0.5);
            let r = t.sqrt(sq);
            let q = t.recip(r);
            let d = t.div(m, r);
            let a = t.abs(v);
            let z = t.add(d, q);
            let z = t.sub(z, a);
            t.sum(z)
        });
    }

    #[test]
    fn broadcasting_and_reductions() {
        check(sample(), |t, v| {
            let col = t.sum_cols(v);
            let row = t.slice_rows(v, 1, 1);
            let x = t.mul(v, col);
            let y = t.div(x, row);
            let z = t.sub(row, y);
            let w = t.scale(z, 0.3);
            t.mean(w)
        });
    }

    #[test]
    fn matmul_and_layout() {
        check(sample(), |t, v| {
            let w = t.constant(array![[0.2, -0.1, 0.4], [1.0, 0.5, -0.3]]);
            let a = t.matmul_wt(v, w);
            let b = t.matmul_wt(w, v);
            let c = t.slice_cols(v, 1, 2);
            let cat = t.concat_cols(&[a, c]);
            let cat2 = t.concat_rows(&[cat, cat]);
            let sq = t.square(cat2);
            let s = t.sum(sq);
            let bs = t.sum(b);
            let bs = t.square(bs);
            let total = t.add(s, bs);
            t.clamp_min(total, -100.0)
        });
    }

    #[test]
    fn sparse_map() {
        let m = Rc::new(Csr::from_rows(2, &[vec![(0, 0.25), (1, 0.75)], vec![], vec![(1, 2.0), (1, -1.0)]]));
        check(sample(), |t, v| {
            let o = t.sparse(m.clone(), v);
            let o = t.sin(o, 1.5);
            t.sum(o)
        });
    }

    #[test]
    fn non_differentiable_op_is_rejected() {
        let mut t = Tape::<f64>::new();
        let v = t.param(sample());
        let s = t.sign(v);
        let l = t.sum(s);
        assert!(matches!(t.backward(l), Err(IdfError::Unsupported(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(sample());
        let p = t.param(sample());
        let m = t.mul(c, p);
        let l = t.sum(m);
        let g = t.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &sample());
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut t = Tape::<f64>::new();
        let p = t.param(sample());
        let z = t.scale(p, 0.0);
        let k = t.sum(z);
        let l = t.add_scalar(k, 3.0);
        let mut g = t.backward(l).unwrap();
        assert!(g.take_or_zeros(p, (2, 3)).iter().all(|&x| x == 0.0));
    }
}
