//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value to a [`Tape`].
//! [`Tape::backward`] walks the nodes in reverse and accumulates adjoints.
//! Values are dense `f64` matrices; elementwise binary ops broadcast rows or
//! columns of extent one, and the adjoint is summed back to the operand shape.
//!
//! Besides the usual arithmetic and activation ops, the tape carries a few
//! fused quaternion ops (rows are `[w, x, y, z]`) with hand-written adjoints,
//! since composing them from scalar pieces would blow up the graph.

use std::cell::RefCell;
use std::ops;

use ndarray::{s, Array2, ArrayView1, Axis, Zip};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Softplus(usize),
    Clamp(usize, f64, f64),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    SegmentSum(usize, usize),
    RepeatRows(usize, usize),
    SegmentLogSumExp(usize, usize),
    NormalizeRows(usize),
    QuatMul(usize, usize),
    QuatExp(usize),
    QuatRotate(usize, usize),
    QuatAngleSq(usize, usize),
}

struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

/// Records a computation graph. Create one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence the output.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Matrix> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zeros when disconnected.
    pub fn wrt_or_zero(&self, v: Var<'_>) -> Matrix {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => Matrix::zeros(v.shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Matrix::from_elem((1, 1), value))
    }

    fn push(&self, value: Matrix, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].tracked)
    }

    fn unary(&self, a: usize, f: impl FnOnce(&Matrix) -> Matrix, op: Op) -> Var<'_> {
        let value = f(&self.nodes.borrow()[a].value);
        let tracked = self.tracked(&[a]);
        self.push(value, op, tracked)
    }

    fn binary(&self, a: usize, b: usize, f: impl FnOnce(&Matrix, &Matrix) -> Matrix, op: Op) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        let tracked = self.tracked(&[a, b]);
        self.push(value, op, tracked)
    }

    /// Reverse sweep from a 1×1 output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = vec![None; output.id + 1];
        grads[output.id] = Some(Matrix::ones((1, 1)));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let value = &node.value;
            let val = |i: usize| &nodes[i].value;
            let mut acc = |i: usize, contrib: Matrix| {
                if !nodes[i].tracked {
                    return;
                }
                let contrib = reduce_to(contrib, nodes[i].value.dim());
                match &mut grads[i] {
                    Some(existing) => *existing += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * val(*b));
                    acc(*b, &g * val(*a));
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    acc(*a, &g / bv);
                    acc(*b, -(&g * value) / bv);
                }
                Op::Neg(a) => acc(*a, -g),
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::Offset(a) => acc(*a, g),
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&val(*b).t()));
                    acc(*b, val(*a).t().dot(&g));
                }
                Op::Tanh(a) => acc(*a, &g * &value.mapv(|y| 1.0 - y * y)),
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(*a, d);
                }
                Op::Exp(a) => acc(*a, &g * value),
                Op::Log(a) => acc(*a, &g / val(*a)),
                Op::Sqrt(a) => acc(*a, &g / &value.mapv(|y| 2.0 * y)),
                Op::Square(a) => acc(*a, &g * &val(*a).mapv(|x| 2.0 * x)),
                Op::Softplus(a) => acc(*a, &g * &val(*a).mapv(sigmoid)),
                Op::Clamp(a, lo, hi) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        if x < *lo || x > *hi {
                            *d = 0.0
                        }
                    });
                    acc(*a, d);
                }
                Op::SumAll(a) => acc(*a, Matrix::from_elem(val(*a).dim(), g[[0, 0]])),
                Op::SumRows(a) | Op::SumCols(a) => {
                    let shape = val(*a).dim();
                    acc(*a, g.broadcast(shape).expect("sum adjoint").to_owned());
                }
                Op::SliceCols(a, start) => {
                    let mut d = Matrix::zeros(val(*a).dim());
                    let w = g.ncols();
                    d.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        acc(p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let mut d = Matrix::zeros(val(*a).dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &g.row(r);
                    }
                    acc(*a, d);
                }
                Op::SegmentSum(a, group) => acc(*a, repeat_rows(&g, *group)),
                Op::RepeatRows(a, group) => acc(*a, segment_sum(&g, *group)),
                Op::SegmentLogSumExp(a, group) => {
                    let av = val(*a);
                    let mut d = Matrix::zeros(av.dim());
                    for r in 0..av.nrows() {
                        let b = r / group;
                        for c in 0..av.ncols() {
                            let out = value[[b, c]];
                            if out.is_finite() {
                                d[[r, c]] = g[[b, c]] * (av[[r, c]] - out).exp();
                            }
                        }
                    }
                    acc(*a, d);
                }
                Op::NormalizeRows(a) => {
                    let av = val(*a);
                    let mut d = Matrix::zeros(av.dim());
                    for r in 0..av.nrows() {
                        let norm = av.row(r).dot(&av.row(r)).sqrt();
                        let y = value.row(r);
                        let gy = g.row(r).dot(&y);
                        let mut dr = d.row_mut(r);
                        dr.assign(&(&g.row(r) - &(&y * gy)));
                        dr /= norm;
                    }
                    acc(*a, d);
                }
                Op::QuatMul(a, b) => {
                    let (da, db) = quat_mul_adjoint(val(*a), val(*b), &g);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::QuatExp(a) => acc(*a, quat_exp_adjoint(val(*a), &g)),
                Op::QuatRotate(q, v) => {
                    let (dq, dv) = quat_rotate_adjoint(val(*q), val(*v), &g);
                    acc(*q, dq);
                    acc(*v, dv);
                }
                Op::QuatAngleSq(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let mut da = Matrix::zeros(av.dim());
                    let mut db = Matrix::zeros(bv.dim());
                    for r in 0..av.nrows() {
                        let (u, m) = chord(av.row(r), bv.row(r));
                        let sign = if av.row(r).dot(&bv.row(r)) < 0.0 { -1.0 } else { 1.0 };
                        let k = 16.0 * asin_ratio(m) * g[[r, 0]];
                        da.row_mut(r).assign(&(&u * k));
                        db.row_mut(r).assign(&(&u * (-sign * k)));
                    }
                    acc(*a, da);
                    acc(*b, db);
                }
            }
        }
        Gradients { grads }
    }
}

fn reduce_to(mut g: Matrix, shape: (usize, usize)) -> Matrix {
    if g.dim() == shape {
        return g;
    }
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    debug_assert_eq!(g.dim(), shape);
    g
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn segment_sum(m: &Matrix, group: usize) -> Matrix {
    assert!(
        group > 0 && m.nrows().is_multiple_of(group),
        "rows not divisible by group"
    );
    let n = m.nrows() / group;
    let mut out = Matrix::zeros((n, m.ncols()));
    for r in 0..m.nrows() {
        let mut row = out.row_mut(r / group);
        row += &m.row(r);
    }
    out
}

fn repeat_rows(m: &Matrix, group: usize) -> Matrix {
    let mut out = Matrix::zeros((m.nrows() * group, m.ncols()));
    for r in 0..out.nrows() {
        out.row_mut(r).assign(&m.row(r / group));
    }
    out
}

/// acos(c) / sqrt(1 - c^2), continuous at c = 1.
/// `a - σb` with `σ = sign(a·b)`, and its norm.
fn chord(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> (ndarray::Array1<f64>, f64) {
    let u = if a.dot(&b) < 0.0 { &a + &b } else { &a - &b };
    let m = u.dot(&u).sqrt();
    (u, m)
}

/// `asin(m/2) / (m sqrt(1 - m²/4))`, finite at `m = 0`.
fn asin_ratio(m: f64) -> f64 {
    if m < 1e-6 {
        0.5 + m * m / 12.0
    } else {
        let h = (0.5 * m).min(1.0);
        h.asin() / (m * (1.0 - h * h).max(1e-300).sqrt())
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn vec3(row: ArrayView1<'_, f64>, offset: usize) -> [f64; 3] {
    [row[offset], row[offset + 1], row[offset + 2]]
}

fn quat_mul_rows(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.dim(), b.dim(), "quaternion product needs equal shapes");
    assert_eq!(a.ncols(), 4);
    let mut out = Matrix::zeros(a.dim());
    for r in 0..a.nrows() {
        let (aw, av) = (a[[r, 0]], vec3(a.row(r), 1));
        let (bw, bv) = (b[[r, 0]], vec3(b.row(r), 1));
        let c = cross(av, bv);
        out[[r, 0]] = aw * bw - dot3(av, bv);
        for k in 0..3 {
            out[[r, k + 1]] = aw * bv[k] + bw * av[k] + c[k];
        }
    }
    out
}

fn quat_mul_adjoint(a: &Matrix, b: &Matrix, g: &Matrix) -> (Matrix, Matrix) {
    let mut da = Matrix::zeros(a.dim());
    let mut db = Matrix::zeros(b.dim());
    for r in 0..a.nrows() {
        let (aw, av) = (a[[r, 0]], vec3(a.row(r), 1));
        let (bw, bv) = (b[[r, 0]], vec3(b.row(r), 1));
        let (gw, gv) = (g[[r, 0]], vec3(g.row(r), 1));
        let bxg = cross(bv, gv);
        let gxa = cross(gv, av);
        da[[r, 0]] = gw * bw + dot3(gv, bv);
        db[[r, 0]] = gw * aw + dot3(gv, av);
        for k in 0..3 {
            da[[r, k + 1]] = -gw * bv[k] + bw * gv[k] + bxg[k];
            db[[r, k + 1]] = -gw * av[k] + aw * gv[k] + gxa[k];
        }
    }
    (da, db)
}

/// sin(θ/2)/θ and (d/dθ of it)/θ, with series near zero.
fn half_sinc_terms(theta: f64) -> (f64, f64) {
    if theta < 1e-4 {
        let t2 = theta * theta;
        (0.5 - t2 / 48.0, -1.0 / 24.0 + t2 / 960.0)
    } else {
        let (s, c) = (theta / 2.0).sin_cos();
        let k = s / theta;
        let dk = (0.5 * theta * c - s) / (theta * theta * theta);
        (k, dk)
    }
}

fn quat_exp_rows(r: &Matrix) -> Matrix {
    assert_eq!(r.ncols(), 3, "rotation vectors need 3 columns");
    let mut out = Matrix::zeros((r.nrows(), 4));
    for i in 0..r.nrows() {
        let v = vec3(r.row(i), 0);
        let theta = dot3(v, v).sqrt();
        let (k, _) = half_sinc_terms(theta);
        out[[i, 0]] = (theta / 2.0).cos();
        for j in 0..3 {
            out[[i, j + 1]] = k * v[j];
        }
    }
    out
}

fn quat_exp_adjoint(r: &Matrix, g: &Matrix) -> Matrix {
    let mut d = Matrix::zeros(r.dim());
    for i in 0..r.nrows() {
        let v = vec3(r.row(i), 0);
        let theta = dot3(v, v).sqrt();
        let (k, dk_over_theta) = half_sinc_terms(theta);
        let gw = g[[i, 0]];
        let gv = vec3(g.row(i), 1);
        let gv_dot_v = dot3(gv, v);
        for j in 0..3 {
            // d cos(θ/2)/dv = -k v / 2
            d[[i, j]] = -0.5 * gw * k * v[j] + k * gv[j] + dk_over_theta * gv_dot_v * v[j];
        }
    }
    d
}

fn quat_rotate_rows(q: &Matrix, v: &Matrix) -> Matrix {
    assert_eq!(q.nrows(), v.nrows(), "rotation needs one quaternion per vector");
    assert_eq!((q.ncols(), v.ncols()), (4, 3));
    let mut out = Matrix::zeros(v.dim());
    for r in 0..q.nrows() {
        let (w, u) = (q[[r, 0]], vec3(q.row(r), 1));
        let x = vec3(v.row(r), 0);
        let uxx = cross(u, x);
        let a = w * w - dot3(u, u);
        let b = 2.0 * dot3(u, x);
        for k in 0..3 {
            out[[r, k]] = a * x[k] + b * u[k] + 2.0 * w * uxx[k];
        }
    }
    out
}

fn quat_rotate_adjoint(q: &Matrix, v: &Matrix, g: &Matrix) -> (Matrix, Matrix) {
    let mut dq = Matrix::zeros(q.dim());
    let mut dv = Matrix::zeros(v.dim());
    for r in 0..q.nrows() {
        let (w, u) = (q[[r, 0]], vec3(q.row(r), 1));
        let x = vec3(v.row(r), 0);
        let gg = vec3(g.row(r), 0);
        let gx = dot3(gg, x);
        let ug = dot3(u, gg);
        let ux = dot3(u, x);
        let uxx = cross(u, x);
        let xxg = cross(x, gg);
        let gxu = cross(gg, u);
        dq[[r, 0]] = 2.0 * w * gx + 2.0 * dot3(gg, uxx);
        let a = w * w - dot3(u, u);
        for k in 0..3 {
            dq[[r, k + 1]] = -2.0 * u[k] * gx + 2.0 * (ug * x[k] + ux * gg[k]) + 2.0 * w * xxg[k];
            dv[[r, k]] = a * gg[k] + 2.0 * ug * u[k] + 2.0 * w * gxu[k];
        }
    }
    (dq, dv)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Matrix {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Matrix) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.with_value(|m| m.dim())
    }

    pub fn item(&self) -> f64 {
        self.with_value(|m| {
            assert_eq!(m.dim(), (1, 1), "item() needs a 1x1 value");
            m[[0, 0]]
        })
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn check_broadcast(&self, other: &Var<'t>) {
        let (a, b) = (self.shape(), other.shape());
        let ok = |x: usize, y: usize| x == y || x == 1 || y == 1;
        assert!(ok(a.0, b.0) && ok(a.1, b.1), "cannot broadcast {a:?} with {b:?}");
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, other.id, |a, b| a.dot(b), Op::MatMul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| a * c, Op::Scale(self.id, c))
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| a + c, Op::Offset(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.mapv(f64::tanh), Op::Tanh(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.mapv(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.mapv(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.mapv(f64::ln), Op::Log(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.mapv(f64::sqrt), Op::Sqrt(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.mapv(|x| x * x), Op::Square(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.mapv(softplus), Op::Softplus(self.id))
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape
            .unary(self.id, |a| a.mapv(|x| x.clamp(lo, hi)), Op::Clamp(self.id, lo, hi))
    }

    pub fn sum(self) -> Var<'t> {
        self.tape
            .unary(self.id, |a| Matrix::from_elem((1, 1), a.sum()), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.with_value(|m| m.len()) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Column sums as a 1×m row.
    pub fn sum_rows(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| a.sum_axis(Axis(0)).insert_axis(Axis(0)),
            Op::SumRows(self.id),
        )
    }

    /// Row sums as an n×1 column.
    pub fn sum_cols(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| a.sum_axis(Axis(1)).insert_axis(Axis(1)),
            Op::SumCols(self.id),
        )
    }

    /// Columns `start..end`.
    pub fn cols(self, start: usize, end: usize) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| a.slice(s![.., start..end]).to_owned(),
            Op::SliceCols(self.id, start),
        )
    }

    pub fn gather_rows(self, idx: &[usize]) -> Var<'t> {
        let idx = idx.to_vec();
        let rows = idx.clone();
        self.tape
            .unary(self.id, move |a| a.select(Axis(0), &rows), Op::GatherRows(self.id, idx))
    }

    /// Sums consecutive blocks of `group` rows.
    pub fn segment_sum(self, group: usize) -> Var<'t> {
        self.tape
            .unary(self.id, |a| segment_sum(a, group), Op::SegmentSum(self.id, group))
    }

    /// Repeats every row `group` times consecutively.
    pub fn repeat_rows(self, group: usize) -> Var<'t> {
        self.tape
            .unary(self.id, |a| repeat_rows(a, group), Op::RepeatRows(self.id, group))
    }

    /// log-sum-exp over consecutive blocks of `group` rows, per column.
    pub fn segment_logsumexp(self, group: usize) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| {
                assert!(group > 0 && a.nrows() % group == 0);
                let n = a.nrows() / group;
                let mut out = Matrix::zeros((n, a.ncols()));
                for b in 0..n {
                    for c in 0..a.ncols() {
                        let block = a.slice(s![b * group..(b + 1) * group, c]);
                        let m = block.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                        out[[b, c]] = if m == f64::NEG_INFINITY {
                            m
                        } else {
                            m + block.fold(0.0, |s, &x| s + (x - m).exp()).ln()
                        };
                    }
                }
                out
            },
            Op::SegmentLogSumExp(self.id, group),
        )
    }

    pub fn normalize_rows(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| {
                let mut out = a.clone();
                for mut row in out.rows_mut() {
                    let n = row.dot(&row).sqrt();
                    row /= n;
                }
                out
            },
            Op::NormalizeRows(self.id),
        )
    }

    /// Row-wise Hamilton product `self * other`.
    pub fn quat_mul(self, other: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, other.id, quat_mul_rows, Op::QuatMul(self.id, other.id))
    }

    /// Rotation vectors (n×3) to unit quaternions (n×4).
    pub fn quat_exp(self) -> Var<'t> {
        self.tape.unary(self.id, quat_exp_rows, Op::QuatExp(self.id))
    }

    /// Rotates the n×3 vectors `v` by the n×4 quaternions `self`.
    pub fn quat_rotate(self, v: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, v.id, quat_rotate_rows, Op::QuatRotate(self.id, v.id))
    }

    /// Conjugate quaternion rows.
    pub fn quat_conj(self) -> Var<'t> {
        let sign = self
            .tape
            .constant(Matrix::from_shape_vec((1, 4), vec![1.0, -1.0, -1.0, -1.0]).unwrap());
        self * sign
    }

    /// Squared geodesic angle between unit quaternion rows, as n×1.
    ///
    /// Evaluated from the chord `|a ∓ b|` rather than `acos(a·b)`, which keeps
    /// full precision for nearly equal rotations.
    pub fn quat_angle_sq(self, other: Var<'t>) -> Var<'t> {
        self.tape.binary(
            self.id,
            other.id,
            |a, b| {
                assert_eq!(a.dim(), b.dim());
                let mut out = Matrix::zeros((a.nrows(), 1));
                for r in 0..a.nrows() {
                    let (_, m) = chord(a.row(r), b.row(r));
                    let angle = 4.0 * (0.5 * m).min(1.0).asin();
                    out[[r, 0]] = angle * angle;
                }
                out
            },
            Op::QuatAngleSq(self.id, other.id),
        )
    }
}

/// Concatenates along columns; all parts need the same row count.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let value = {
        let nodes = tape.nodes.borrow();
        let views: Vec<_> = ids.iter().map(|&i| nodes[i].value.view()).collect();
        ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch")
    };
    let tracked = tape.tracked(&ids);
    tape.push(value, Op::ConcatCols(ids), tracked)
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $variant:ident, $sym:tt) => {
        impl<'t> ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.check_broadcast(&rhs);
                self.tape
                    .binary(self.id, rhs.id, |a, b| a $sym b, Op::$variant(self.id, rhs.id))
            }
        }
    };
}

binary_op!(Add, add, Add, +);
binary_op!(Sub, sub, Sub, -);
binary_op!(Mul, mul, Mul, *);
binary_op!(Div, div, Div, /);

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self.id, |a| -a, Op::Neg(self.id))
    }
}

impl<'t> ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.scale(c)
    }
}

impl<'t> ops::Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.offset(c)
    }
}

impl<'t> ops::Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self.offset(-c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn broadcast_add_reduces_adjoint() {
        let tape = Tape::new();
        let a = tape.var(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let b = tape.var(array![[10.0, 20.0]]);
        let y = (a + b).sum();
        let g = tape.backward(y);
        assert_eq!(g.wrt(b).unwrap(), &array![[3.0, 3.0]]);
        assert_eq!(g.wrt(a).unwrap(), &Matrix::ones((3, 2)));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let a = tape.var(array![[2.0]]);
        let c = tape.constant(array![[3.0]]);
        let y = a * c;
        let g = tape.backward(y);
        assert_eq!(g.wrt(a).unwrap()[[0, 0]], 3.0);
        assert!(g.wrt(c).is_none());
    }

    #[test]
    fn detach_blocks_flow() {
        let tape = Tape::new();
        let a = tape.var(array![[2.0]]);
        let y = (a * a.detach()).sum();
        let g = tape.backward(y);
        assert_eq!(g.wrt(a).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn segment_logsumexp_handles_all_negative_infinity() {
        let tape = Tape::new();
        let a = tape.var(array![[f64::NEG_INFINITY], [f64::NEG_INFINITY], [0.0], [0.0]]);
        let l = a.segment_logsumexp(2);
        let v = l.value();
        assert_eq!(v[[0, 0]], f64::NEG_INFINITY);
        assert!((v[[1, 0]] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn quat_angle_matches_quarter_turn() {
        let tape = Tape::new();
        let h = std::f64::consts::FRAC_PI_4;
        let a = tape.constant(array![[1.0, 0.0, 0.0, 0.0]]);
        let b = tape.constant(array![[h.cos(), 0.0, 0.0, h.sin()]]);
        let d2 = a.quat_angle_sq(b).item();
        assert!((d2.sqrt() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn quat_exp_of_zero_is_identity() {
        let tape = Tape::new();
        let r = tape.constant(Matrix::zeros((1, 3)));
        assert_eq!(r.quat_exp().value(), array![[1.0, 0.0, 0.0, 0.0]]);
    }
}
