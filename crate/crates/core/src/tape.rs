//! Reverse-mode differentiation over a fixed operator set.
//!
//! A [`Tape`] records matrix-valued nodes in creation order; [`Tape::backward`]
//! sweeps them once in reverse. Parameters are slices of one flat vector so
//! the gradient comes back aligned with the network's parameter layout.

use ndarray::{Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
    Sine,
}

const GELU_C: f64 = 0.044_715;

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => {
                let u = T::lit((2.0 / std::f64::consts::PI).sqrt()) * (x + T::lit(GELU_C) * x * x * x);
                T::lit(0.5) * x * (T::one() + u.tanh())
            }
            Activation::Sine => x.sin(),
        }
    }

    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
                let u = k * (x + T::lit(GELU_C) * x * x * x);
                let th = u.tanh();
                let du = k * (T::one() + T::lit(3.0 * GELU_C) * x * x);
                T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * du
            }
            Activation::Sine => x.cos(),
        }
    }

    /// Upper bound on `|σ'(x)|`, used for Lipschitz bounds.
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Relu | Activation::Sine => 1.0,
            // max of the tanh-approximated GELU derivative
            Activation::Gelu => 1.13,
        }
    }
}

/// `x · wᵀ + b` for `x: N×in`, `w: out×in`, `b: 1×out`.
pub fn affine<T: Real>(x: &Array2<T>, w: &Array2<T>, b: &Array2<T>) -> Array2<T> {
    let mut y = x.dot(&w.t());
    y += b;
    y
}

pub fn activate<T: Real>(x: &Array2<T>, kind: Activation) -> Array2<T> {
    x.mapv(|v| kind.apply(v))
}

/// Adjacency scores `[1 - (d_ij - d̂_ij)² / d_thr²]₊` with unit diagonal,
/// where `d` uses `points` and `d̂` uses `points + flow`.
pub fn adjacency_matrix<T: Real>(points: &Array2<T>, flow: &Array2<T>, d_thr: T) -> Array2<T> {
    let n = points.nrows();
    let mut buf = adjacency_upper(points, flow, d_thr);
    for i in 1..n {
        for j in 0..i {
            buf[i * n + j] = buf[j * n + i];
        }
    }
    Array2::from_shape_vec((n, n), buf).expect("n × n buffer")
}

/// Row-major `n × n` buffer holding only the upper triangle (diagonal
/// included) of `adjacency_matrix`; the rest is zero.
fn adjacency_upper<T: Real>(points: &Array2<T>, flow: &Array2<T>, d_thr: T) -> Vec<T> {
    let n = points.nrows();
    let c = Columns::new(points, flow);
    let inv = T::one() / (d_thr * d_thr);
    let mut buf = vec![T::zero(); n * n];
    let mut e = vec![T::zero(); n];
    for i in 0..n {
        c.residuals(i, &mut e[i + 1..]);
        let row = &mut buf[i * n..(i + 1) * n];
        row[i] = T::one();
        for (dst, &e) in row[i + 1..].iter_mut().zip(&e[i + 1..]) {
            *dst = (T::one() - e * e * inv).max(T::zero());
        }
    }
    buf
}

/// `A v` for symmetric `A` given by its upper triangle; reads each entry once.
fn upper_matvec<T: Real>(buf: &[T], v: &[T]) -> Vec<T> {
    let n = v.len();
    let mut y = vec![T::zero(); n];
    for i in 0..n {
        let row = &buf[i * n + i + 1..(i + 1) * n];
        let vi = v[i];
        let (head, tail) = y.split_at_mut(i + 1);
        head[i] += buf[i * n + i] * vi + dot(row, &v[i + 1..]);
        for (yj, &aij) in tail.iter_mut().zip(row) {
            *yj += aij * vi;
        }
    }
    y
}

/// Coordinates before (`p`) and after (`q`) the flow, one vector per axis.
struct Columns<T> {
    p: [Vec<T>; 3],
    q: [Vec<T>; 3],
}

impl<T: Real> Columns<T> {
    fn new(points: &Array2<T>, flow: &Array2<T>) -> Self {
        let p = [0, 1, 2].map(|k| points.column(k).to_vec());
        let q = [0, 1, 2].map(|k| {
            points
                .column(k)
                .iter()
                .zip(flow.column(k))
                .map(|(a, b)| *a + *b)
                .collect()
        });
        Self { p, q }
    }

    /// `out[m] = d(i, i+1+m) - d̂(i, i+1+m)`.
    #[inline]
    fn residuals(&self, i: usize, out: &mut [T]) {
        let j0 = i + 1;
        let m = out.len();
        let [px, py, pz] = &self.p;
        let [qx, qy, qz] = &self.q;
        let (pix, piy, piz) = (px[i], py[i], pz[i]);
        let (qix, qiy, qiz) = (qx[i], qy[i], qz[i]);
        let (px, py, pz) = (&px[j0..j0 + m], &py[j0..j0 + m], &pz[j0..j0 + m]);
        let (qx, qy, qz) = (&qx[j0..j0 + m], &qy[j0..j0 + m], &qz[j0..j0 + m]);
        for k in 0..m {
            let (dx, dy, dz) = (pix - px[k], piy - py[k], piz - pz[k]);
            let (ex, ey, ez) = (qix - qx[k], qiy - qy[k], qiz - qz[k]);
            out[k] = (dx * dx + dy * dy + dz * dz).sqrt() - (ex * ex + ey * ey + ez * ez).sqrt();
        }
    }
}

/// Dot product with four independent accumulators.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: T = ra.iter().zip(rb).map(|(x, y)| *x * *y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `A v` for a square row-major `A`.
pub fn square_matvec<T: Real>(a: &Array2<T>, v: &[T]) -> Vec<T> {
    let a = a.as_standard_layout();
    let n = a.nrows();
    let buf = a.as_slice().expect("standard layout");
    (0..n).map(|i| dot(&buf[i * n..(i + 1) * n], v)).collect()
}

/// `iterations` steps of `v ← A v / ‖A v‖` from the all-ones vector.
pub fn power_iterate<T: Real>(a: &Array2<T>, iterations: usize) -> Result<Vec<T>> {
    power_iterate_with(a.nrows(), iterations, |v| square_matvec(a, v))
}

fn power_iterate_with<T: Real>(n: usize, iterations: usize, matvec: impl Fn(&[T]) -> Vec<T>) -> Result<Vec<T>> {
    let mut v = vec![T::one(); n];
    for step in 0..iterations {
        let u = matvec(&v);
        let norm = dot(&u, &u).sqrt();
        if !(norm > T::zero()) {
            return Err(Error::DegeneratePowerIteration { step });
        }
        v = u.into_iter().map(|x| x / norm).collect();
    }
    Ok(v)
}

/// `(1/n) vᵀ A v`.
pub fn rayleigh_score<T: Real>(a: &Array2<T>, v: &[T]) -> T {
    let av = square_matvec(a, v);
    dot(v, &av) / T::lit(a.nrows() as f64)
}

#[derive(Debug, Clone)]
enum Op<T> {
    Constant,
    Param { offset: usize },
    Affine { x: Var, w: Var, b: Var },
    Activation { x: Var, kind: Activation },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Sum(Var),
    RowSum(Var),
    Log(Var),
    Sqrt(Var),
    MinConst(Var, T),
    MaxConst(Var, T),
    Gather { x: Var, rows: Vec<usize> },
    ConcatCols(Var, Var),
    MatVec { a: Var, v: Var },
    DivScalar { x: Var, s: Var },
    Adjacency { points: Array2<T>, flow: Var, d_thr: T },
    /// `(1/n) vᵀ A(flow) v` with `v` held fixed.
    SpectralFixed { points: Array2<T>, flow: Var, d_thr: T, v: Vec<T> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation from parameters to a scalar loss.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_len: usize,
}

/// Result of one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: Vec<T>,
    nodes: Vec<Option<Array2<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn into_params(self) -> Vec<T> {
        self.params
    }

    /// Gradient with respect to an intermediate node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_err(what: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::param(what, format!("incompatible shapes {a:?} and {b:?}"))
}

impl<T: Real> Tape<T> {
    /// Empty tape for a parameter vector of length `param_len`.
    pub fn new(param_len: usize) -> Self {
        Self {
            nodes: Vec::new(),
            param_len,
        }
    }

    pub fn param_len(&self) -> usize {
        self.param_len
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar_constant(&mut self, value: T) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Registers the parameter block `θ[offset .. offset + rows·cols]` (row-major).
    pub fn param(&mut self, offset: usize, value: Array2<T>) -> Result<Var> {
        if offset + value.len() > self.param_len {
            return Err(Error::param(
                "param",
                format!(
                    "block [{offset}, {}) exceeds parameter length {}",
                    offset + value.len(),
                    self.param_len
                ),
            ));
        }
        Ok(self.push(value, Op::Param { offset }, true))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (_, fin) = self.shape(x);
        let (fout, win) = self.shape(w);
        if fin != win || self.shape(b) != (1, fout) {
            return Err(shape_err("affine", self.shape(x), self.shape(w)));
        }
        let y = affine(self.value(x), self.value(w), self.value(b));
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(y, Op::Affine { x, w, b }, ng))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let y = activate(self.value(x), kind);
        let ng = self.needs(x);
        self.push(y, Op::Activation { x, kind }, ng)
    }

    fn same_shape(&self, what: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let y = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let y = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let y = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let y = self.value(a) * c;
        let ng = self.needs(a);
        self.push(y, Op::Scale(a, c), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|v| v * v);
        let ng = self.needs(a);
        self.push(y, Op::Square(a), ng)
    }

    /// Sum of all entries, as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Per-row sums, `N×k → N×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let y = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.needs(a);
        self.push(y, Op::RowSum(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(T::ln);
        let ng = self.needs(a);
        self.push(y, Op::Log(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(T::sqrt);
        let ng = self.needs(a);
        self.push(y, Op::Sqrt(a), ng)
    }

    /// Elementwise `min(a, c)`; clamped entries pass no gradient.
    pub fn min_const(&mut self, a: Var, c: T) -> Var {
        let y = self.value(a).mapv(|v| v.min(c));
        let ng = self.needs(a);
        self.push(y, Op::MinConst(a, c), ng)
    }

    /// Elementwise `max(a, c)`; clamped entries pass no gradient.
    pub fn max_const(&mut self, a: Var, c: T) -> Var {
        let y = self.value(a).mapv(|v| v.max(c));
        let ng = self.needs(a);
        self.push(y, Op::MaxConst(a, c), ng)
    }

    /// Rows of `x` selected (with repetition) by `rows`.
    pub fn gather(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let src = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= src.nrows()) {
            return Err(Error::param(
                "gather",
                format!("row {bad} out of range for {} rows", src.nrows()),
            ));
        }
        let y = src.select(Axis(0), &rows);
        let ng = self.needs(x);
        Ok(self.push(y, Op::Gather { x, rows }, ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).0 != self.shape(b).0 {
            return Err(shape_err("concat_cols", self.shape(a), self.shape(b)));
        }
        let y = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("row counts checked");
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::ConcatCols(a, b), ng))
    }

    /// `A · v` for `A: n×n` and `v: n×1`.
    pub fn matvec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        if self.shape(v) != (m, 1) {
            return Err(shape_err("matvec", (n, m), self.shape(v)));
        }
        let y = self.value(a).dot(self.value(v));
        let ng = self.needs(a) || self.needs(v);
        Ok(self.push(y, Op::MatVec { a, v }, ng))
    }

    /// `x / s` for a `1×1` node `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(shape_err("div_scalar", self.shape(x), self.shape(s)));
        }
        let y = self.value(x) / self.scalar(s);
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(y, Op::DivScalar { x, s }, ng))
    }

    /// Adjacency matrix of a cluster (`points` fixed, `flow` differentiable).
    pub fn adjacency(&mut self, points: Array2<T>, flow: Var, d_thr: T) -> Result<Var> {
        if points.ncols() != 3 || self.shape(flow) != points.dim() {
            return Err(shape_err("adjacency", points.dim(), self.shape(flow)));
        }
        let a = adjacency_matrix(&points, self.value(flow), d_thr);
        let ng = self.needs(flow);
        Ok(self.push(
            a,
            Op::Adjacency {
                points,
                flow,
                d_thr,
            },
            ng,
        ))
    }

    /// Spectral score `(1/n) v*ᵀ A v*` of a cluster, with `v*` from
    /// `power_iters` steps of power iteration treated as a constant.
    /// Equivalent to `adjacency` followed by a fixed-vector quadratic form,
    /// without materializing `∂s/∂A`.
    pub fn spectral_fixed(&mut self, points: Array2<T>, flow: Var, d_thr: T, power_iters: usize) -> Result<Var> {
        if points.ncols() != 3 || self.shape(flow) != points.dim() {
            return Err(shape_err("spectral_fixed", points.dim(), self.shape(flow)));
        }
        let a = adjacency_upper(&points, self.value(flow), d_thr);
        let v = power_iterate_with(points.nrows(), power_iters, |v| upper_matvec(&a, v))?;
        let s = dot(&v, &upper_matvec(&a, &v)) / T::lit(v.len() as f64);
        let ng = self.needs(flow);
        Ok(self.push(
            Array2::from_elem((1, 1), s),
            Op::SpectralFixed {
                points,
                flow,
                d_thr,
                v,
            },
            ng,
        ))
    }

    /// Exact reverse-mode gradient of the scalar node `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let (rows, cols) = self.shape(root);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarRoot { rows, cols });
        }
        let mut params = vec![T::zero(); self.param_len];
        let mut grads: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), T::one()));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = Some(g);
                continue;
            }
            let acc = |v: Var, d: Array2<T>, grads: &mut Vec<Option<Array2<T>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(e) => *e += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    for (dst, &src) in params[*offset..*offset + g.len()].iter_mut().zip(g.iter()) {
                        *dst += src;
                    }
                }
                Op::Affine { x, w, b } => {
                    if self.needs(*x) {
                        acc(*x, g.dot(self.value(*w)), &mut grads);
                    }
                    if self.needs(*w) {
                        acc(*w, g.t().dot(self.value(*x)), &mut grads);
                    }
                    if self.needs(*b) {
                        acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                }
                Op::Activation { x, kind } => {
                    let mut d = self.value(*x).mapv(|v| kind.derivative(v));
                    d *= &g;
                    acc(*x, d, &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g.clone(), &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g.mapv(|v| -v), &mut grads);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * self.value(*b), &mut grads);
                    acc(*b, &g * self.value(*a), &mut grads);
                }
                Op::Scale(a, c) => acc(*a, &g * *c, &mut grads),
                Op::Square(a) => {
                    let d = self.value(*a) * &g * T::lit(2.0);
                    acc(*a, d, &mut grads);
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    acc(*a, Array2::from_elem(self.shape(*a), s), &mut grads);
                }
                Op::RowSum(a) => {
                    let (n, k) = self.shape(*a);
                    let d = Array2::from_shape_fn((n, k), |(i, _)| g[[i, 0]]);
                    acc(*a, d, &mut grads);
                }
                Op::Log(a) => acc(*a, &g / self.value(*a), &mut grads),
                Op::Sqrt(a) => {
                    let d = Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|&gi, &y| gi / (T::lit(2.0) * y));
                    acc(*a, d, &mut grads);
                }
                Op::MinConst(a, c) => {
                    let d = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&gi, &x| if x < *c { gi } else { T::zero() });
                    acc(*a, d, &mut grads);
                }
                Op::MaxConst(a, c) => {
                    let d = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&gi, &x| if x > *c { gi } else { T::zero() });
                    acc(*a, d, &mut grads);
                }
                Op::Gather { x, rows } => {
                    let mut d = Array2::zeros(self.shape(*x));
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = d.row_mut(src);
                        dst += &g.row(r);
                    }
                    acc(*x, d, &mut grads);
                }
                Op::ConcatCols(a, b) => {
                    let k = self.shape(*a).1;
                    acc(*a, g.slice(ndarray::s![.., ..k]).to_owned(), &mut grads);
                    acc(*b, g.slice(ndarray::s![.., k..]).to_owned(), &mut grads);
                }
                Op::MatVec { a, v } => {
                    if self.needs(*a) {
                        acc(*a, g.dot(&self.value(*v).t()), &mut grads);
                    }
                    if self.needs(*v) {
                        acc(*v, self.value(*a).t().dot(&g), &mut grads);
                    }
                }
                Op::DivScalar { x, s } => {
                    let sv = self.scalar(*s);
                    if self.needs(*x) {
                        acc(*x, &g / sv, &mut grads);
                    }
                    if self.needs(*s) {
                        // d(x/s)/ds = -x/s² = -y/s
                        let ds = -(&g * &node.value).sum() / sv;
                        acc(*s, Array2::from_elem((1, 1), ds), &mut grads);
                    }
                }
                Op::Adjacency {
                    points,
                    flow,
                    d_thr,
                } => {
                    let d = adjacency_backward(points, self.value(*flow), *d_thr, |i, j| g[[i, j]] + g[[j, i]]);
                    acc(*flow, d, &mut grads);
                }
                Op::SpectralFixed {
                    points,
                    flow,
                    d_thr,
                    v,
                } => {
                    let scale = g[[0, 0]] * T::lit(2.0) / T::lit(v.len() as f64);
                    let d = adjacency_backward(points, self.value(*flow), *d_thr, |i, j| scale * v[i] * v[j]);
                    acc(*flow, d, &mut grads);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }
}

/// Gradient of `Σ_ij G_ij A_ij` with respect to the flow rows, where
/// `coeff(i, j) = G_ij + G_ji` for `i < j`.
fn adjacency_backward<T: Real>(
    points: &Array2<T>,
    flow: &Array2<T>,
    d_thr: T,
    coeff: impl Fn(usize, usize) -> T,
) -> Array2<T> {
    let n = points.nrows();
    let c = Columns::new(points, flow);
    let inv = T::one() / (d_thr * d_thr);
    let two = T::lit(2.0);
    let mut out = [vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]];
    let mut w = vec![T::zero(); n];
    for i in 0..n {
        let rest = &mut w[i + 1..];
        c.residuals(i, rest);
        let [qx, qy, qz] = &c.q;
        let mut gi = [T::zero(); 3];
        for (m, wm) in rest.iter_mut().enumerate() {
            let j = i + 1 + m;
            let e = *wm;
            *wm = T::zero();
            if T::one() - e * e * inv <= T::zero() {
                continue;
            }
            let diff = [qx[i] - qx[j], qy[i] - qy[j], qz[i] - qz[j]];
            let dh = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
            if dh == T::zero() {
                continue;
            }
            let cij = coeff(i, j);
            // dA/dd̂ = 2e/d_thr², dd̂/dp̂_i = (p̂_i - p̂_j)/d̂
            let s = cij * two * e * inv / dh;
            for k in 0..3 {
                gi[k] += s * diff[k];
                out[k][j] -= s * diff[k];
            }
        }
        for k in 0..3 {
            out[k][i] += gi[k];
        }
    }
    Array2::from_shape_fn((n, 3), |(i, k)| out[k][i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::<f64>::new(4);
        let _p = tape.param(0, array![[1.0, 2.0, 3.0, 4.0]]).unwrap();
        let c = tape.scalar_constant(5.0);
        let g = tape.backward(c).unwrap();
        assert_eq!(g.params(), &[0.0; 4]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let theta = array![[0.5, -1.5], [2.0, 3.0]];
        let mut tape = Tape::new(4);
        let p = tape.param(0, theta.clone()).unwrap();
        let sq = tape.square(p);
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.params(), &[1.0, -3.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new(2);
        let p = tape.param(0, array![[1.0, 2.0]]).unwrap();
        assert!(matches!(
            tape.backward(p),
            Err(Error::NonScalarRoot { rows: 1, cols: 2 })
        ));
    }

    #[test]
    fn param_block_out_of_range() {
        let mut tape = Tape::<f64>::new(2);
        assert!(tape.param(1, array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn activation_derivatives_match_differences() {
        for kind in [Activation::Relu, Activation::Gelu, Activation::Sine] {
            for &x in &[-2.3f64, -0.7, 0.3, 1.1, 2.9] {
                let h = 1e-6;
                let fd = (kind.apply(x + h) - kind.apply(x - h)) / (2.0 * h);
                assert!((fd - kind.derivative(x)).abs() < 1e-8, "{kind:?} at {x}");
            }
        }
    }

    #[test]
    fn gelu_derivative_bound_holds() {
        let max = (-4000..4000)
            .map(|i| Activation::Gelu.derivative(i as f64 * 1e-3).abs())
            .fold(0.0, f64::max);
        assert!(max <= Activation::Gelu.lipschitz());
    }

    #[test]
    fn adjacency_hinge_values() {
        let pts = array![[0.0f64, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let flow = array![[0.0, 0.0, 0.0], [0.015, 0.0, 0.0]];
        let a = adjacency_matrix(&pts, &flow, 0.03);
        assert_eq!(a[[0, 0]], 1.0);
        assert!((a[[0, 1]] - 0.75).abs() < 1e-12);
        assert_eq!(a[[0, 1]], a[[1, 0]]);
        let flow = array![[0.0, 0.0, 0.0], [0.03, 0.0, 0.0]];
        assert_eq!(adjacency_matrix(&pts, &flow, 0.03)[[0, 1]], 0.0);
    }

    #[test]
    fn upper_triangle_path_matches_full_matrix() {
        let n = 37;
        let pts = Array2::from_shape_fn((n, 3), |(i, k)| ((i * 7 + k * 3) % 11) as f64 * 0.1);
        let flow = Array2::from_shape_fn((n, 3), |(i, k)| ((i * 5 + k) % 13) as f64 * 1e-3);
        let full = adjacency_matrix(&pts, &flow, 0.03);
        let upper = adjacency_upper(&pts, &flow, 0.03);
        let v: Vec<f64> = (0..n).map(|i| 1.0 + (i % 4) as f64).collect();
        for (a, b) in square_matvec(&full, &v).iter().zip(upper_matvec(&upper, &v)) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut tape = Tape::new(0);
        let f = tape.constant(flow.clone());
        let s = tape.spectral_fixed(pts.clone(), f, 0.03, 10).unwrap();
        let want = rayleigh_score(&full, &power_iterate(&full, 10).unwrap());
        assert!((tape.scalar(s) - want).abs() < 1e-12);
    }
}
