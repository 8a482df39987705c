//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every forward op in creation order, so the node list
//! is already a topological order and `backward` is a single reverse sweep.
//! Leaves keep persistent gradient accumulators; interior gradients are
//! transient and dropped at the end of each sweep.

use super::rng::RngStream;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `b` is broadcast over the leading axes of `a`.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `a` (.., m, k) flattened to (M, k) times `b` (k, p).
    MatMul(Var, Var),
    /// Batched product (B, m, k) x (B, k, p), or x (B, p, k)^T when `trans_b`.
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Repeat(Var, usize),
    SumAxis(Var, usize),
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    InterpRows {
        x: Var,
        lo: Vec<usize>,
        frac: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Pick {
        x: Var,
        indices: Vec<usize>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    finite: bool,
    /// Persistent accumulator, leaves only.
    grad: Option<Vec<f64>>,
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// out (m,p) += a (m,k) * b (k,p)
fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    // four output rows per pass share each row of b
    let mut i = 0;
    while i + 4 <= m {
        let (o0, rest) = out[i * p..(i + 4) * p].split_at_mut(p);
        let (o1, rest) = rest.split_at_mut(p);
        let (o2, o3) = rest.split_at_mut(p);
        for kk in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + kk], a[(i + 1) * k + kk], a[(i + 2) * k + kk], a[(i + 3) * k + kk]);
            let brow = &b[kk * p..(kk + 1) * p];
            let (o0, o1, o2, o3) = (&mut o0[..p], &mut o1[..p], &mut o2[..p], &mut o3[..p]);
            for j in 0..p {
                let bv = brow[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

// out (m,p) += a (m,k) * b^T where b is (p,k)
fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            out[i * p + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with four interleaved partial sums.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (u, v) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += u[l] * v[l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (u, v) in xr.iter().zip(yr) {
        s += u * v;
    }
    s
}

// out (k,p) += a^T b where a is (m,k), b is (m,p)
fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    let mut i = 0;
    while i + 4 <= m {
        let (b0, b1, b2, b3) = (
            &b[i * p..(i + 1) * p],
            &b[(i + 1) * p..(i + 2) * p],
            &b[(i + 2) * p..(i + 3) * p],
            &b[(i + 3) * p..(i + 4) * p],
        );
        for kk in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + kk], a[(i + 1) * k + kk], a[(i + 2) * k + kk], a[(i + 3) * k + kk]);
            let orow = &mut out[kk * p..(kk + 1) * p];
            for j in 0..p {
                orow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
        }
        i += 4;
    }
    for i in i..m {
        let brow = &b[i * p..(i + 1) * p];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            let orow = &mut out[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// Source row index and weight of the upper neighbour for align-corners
/// resampling of `n_src` rows to `n_dst` rows.
pub fn interp_coords(n_src: usize, n_dst: usize) -> (Vec<usize>, Vec<f64>) {
    let mut lo = Vec::with_capacity(n_dst);
    let mut frac = Vec::with_capacity(n_dst);
    for j in 0..n_dst {
        if n_dst == 1 {
            lo.push(0);
            frac.push(0.0);
            continue;
        }
        let num = j * (n_src - 1);
        let den = n_dst - 1;
        let i0 = (num / den).min(n_src - 2);
        let f = (num - i0 * den) as f64 / den as f64;
        lo.push(i0);
        frac.push(f);
    }
    (lo, frac)
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.data.clone()).expect("node shape invariant")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).data[0]
    }

    /// Accumulated gradient of a leaf, if any backward sweep reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = inputs.iter().any(|v| self.node(*v).requires_grad);
        let finite = if cfg!(debug_assertions) {
            let ok = data.iter().all(|x| x.is_finite());
            let inputs_finite = inputs.iter().all(|v| self.node(*v).finite);
            debug_assert!(
                ok || !inputs_finite || matches!(op, Op::Leaf),
                "non-finite output from finite inputs in {op:?}"
            );
            ok
        } else {
            true
        };
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            finite,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `t` as a leaf; gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, &[]);
        self.nodes[v.0].requires_grad = t.requires_grad();
        self.nodes[v.0].finite = t.is_finite();
        v
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.broadcast_check(name, a, b)?;
        let da = self.data(a);
        let db = self.data(b);
        let m = db.len();
        let mut out = Vec::with_capacity(da.len());
        for chunk in da.chunks(m) {
            out.extend(chunk.iter().zip(db).map(|(&x, &y)| f(x, y)));
        }
        Ok(self.push(self.shape(a).to_vec(), out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * c).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = sb[0];
        let p = sb[1];
        let m = numel(&sa) / k;
        let mut out = vec![0.0; m * p];
        mm_nn(self.data(a), self.data(b), &mut out, m, k, p);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = p;
        Ok(self.push(shape, out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let p = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; bs * m * p];
        {
            let (da, db) = (self.data(a), self.data(b));
            for i in 0..bs {
                let ai = &da[i * m * k..(i + 1) * m * k];
                let bi = &db[i * k * p..(i + 1) * k * p];
                let oi = &mut out[i * m * p..(i + 1) * m * p];
                if trans_b {
                    mm_nt(ai, bi, oi, m, k, p);
                } else {
                    mm_nn(ai, bi, oi, m, k, p);
                }
            }
        }
        Ok(self.push(vec![bs, m, p], out, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.data(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidInput(format!(
                "permutation {perm:?} invalid for shape {sx:?}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let src = self.data(x);
        let out = permute_data(src, &sx, perm);
        Ok(self.push(out_shape, out, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::InvalidInput("transpose needs rank 2".into()));
        }
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidInput(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat(xs.to_vec(), axis), xs))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(Error::InvalidInput(format!(
                "narrow {start}+{len} on axis {axis} of {sx:?}"
            )));
        }
        let (outer, n, inner) = axis_split(&sx, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Gathers `indices` along `axis` (repeats allowed).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || indices.is_empty() || indices.iter().any(|&i| i >= sx[axis]) {
            return Err(Error::InvalidInput(format!(
                "index_select {indices:?} on axis {axis} of {sx:?}"
            )));
        }
        let (outer, n, inner) = axis_split(&sx, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * n + i) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut shape = sx;
        shape[axis] = indices.len();
        Ok(self.push(
            shape,
            out,
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    /// Picks position `index` along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let picked = self.index_select(x, axis, &[index])?;
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.reshape(picked, &shape)
    }

    /// Tiles `x` along a new leading axis of length `count`.
    pub fn repeat(&mut self, x: Var, count: usize) -> Var {
        let src = self.data(x);
        let mut out = Vec::with_capacity(src.len() * count);
        for _ in 0..count {
            out.extend_from_slice(src);
        }
        let mut shape = vec![count];
        shape.extend_from_slice(self.shape(x));
        self.push(shape, out, Op::Repeat(x, count), &[x])
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(axis);
        if s.is_empty() {
            s.push(1);
        }
        s
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::InvalidInput(format!(
                "axis {axis} out of range for {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let sx = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&sx, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let base = (o * n + i) * inner;
                for j in 0..inner {
                    out[o * inner + j] += src[base + j];
                }
            }
        }
        Ok(self.push(Self::reduced_shape(&sx, axis), out, Op::SumAxis(x, axis), &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Max along `axis`; ties resolve to the lowest index for the gradient.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let sx = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&sx, axis);
        let src = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let base = (o * n + i) * inner;
                for j in 0..inner {
                    let v = src[base + j];
                    if v > out[o * inner + j] {
                        out[o * inner + j] = v;
                        argmax[o * inner + j] = i;
                    }
                }
            }
        }
        Ok(self.push(
            Self::reduced_shape(&sx, axis),
            out,
            Op::MaxAxis { x, axis, argmax },
            &[x],
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(vec![1], vec![s], Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.data(x).len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        self.check_axis(x, axis)?;
        let sx = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&sx, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let mx = (0..n).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..n {
                    let e = (src[idx(i)] - mx).exp();
                    out[idx(i)] = e;
                    z += e;
                }
                if log {
                    let lz = z.ln();
                    for i in 0..n {
                        out[idx(i)] = src[idx(i)] - mx - lz;
                    }
                } else {
                    for i in 0..n {
                        out[idx(i)] /= z;
                    }
                }
            }
        }
        let op = if log {
            Op::LogSoftmax(x, axis)
        } else {
            Op::Softmax(x, axis)
        };
        Ok(self.push(sx, out, op, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &sx, self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidInput("layer_norm eps must be > 0".into()));
        }
        let rows = numel(&sx) / d;
        let src = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        Ok(self.push(
            sx,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| gelu_scalar(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), &[x])
    }

    /// Align-corners linear resampling of the rows of a rank-2 tensor.
    pub fn interp_rows(&mut self, x: Var, n_dst: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::InvalidInput(format!(
                "interp_rows needs rank 2, got {sx:?}"
            )));
        }
        let (n_src, d) = (sx[0], sx[1]);
        if n_src < 2 {
            return Err(Error::InvalidInput(format!(
                "interp_rows needs at least 2 source rows, got {n_src}"
            )));
        }
        if n_dst == 0 {
            return Err(Error::InvalidInput("interp_rows to 0 rows".into()));
        }
        let (lo, frac) = interp_coords(n_src, n_dst);
        let src = self.data(x);
        let mut out = Vec::with_capacity(n_dst * d);
        for (&i0, &f) in lo.iter().zip(&frac) {
            let a = &src[i0 * d..(i0 + 1) * d];
            if f == 0.0 {
                out.extend_from_slice(a);
            } else if f == 1.0 {
                out.extend_from_slice(&src[(i0 + 1) * d..(i0 + 2) * d]);
            } else {
                let b = &src[(i0 + 1) * d..(i0 + 2) * d];
                out.extend(a.iter().zip(b).map(|(u, v)| (1.0 - f) * u + f * v));
            }
        }
        Ok(self.push(vec![n_dst, d], out, Op::InterpRows { x, lo, frac }, &[x]))
    }

    /// Inverted dropout; identity when `p == 0` or outside training.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, rng: &mut RngStream) -> Var {
        if !train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.data(x).len())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let out = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, &[x])
    }

    /// For rank-2 `x` (B, K), picks `x[b, indices[b]]`.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[0] != indices.len() || indices.iter().any(|&i| i >= sx[1]) {
            return Err(Error::InvalidInput(format!(
                "pick {indices:?} from shape {sx:?}"
            )));
        }
        let k = sx[1];
        let src = self.data(x);
        let out = indices
            .iter()
            .enumerate()
            .map(|(b, &i)| src[b * k + i])
            .collect();
        Ok(self.push(
            vec![indices.len()],
            out,
            Op::Pick {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    /// Reverse sweep seeded with ones at `root`; leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) {
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0; self.data(root).len()]);
        for id in (0..=root.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(g) => g.iter_mut().zip(&gout).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(gout),
                }
                continue;
            }
            self.propagate(id, &gout, &mut grads);
        }
    }

    fn propagate(&self, id: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].data.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |g| g.iter_mut().zip(gout).for_each(|(x, y)| *x += y));
                let m = self.nodes[b.0].data.len();
                acc(*b, &mut |g| {
                    for chunk in gout.chunks(m) {
                        g.iter_mut().zip(chunk).for_each(|(x, y)| *x += sign * y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                let m = db.len();
                acc(*a, &mut |g| {
                    for (gc, yc) in g.chunks_mut(m).zip(gout.chunks(m)) {
                        for ((x, y), w) in gc.iter_mut().zip(yc).zip(db) {
                            *x += y * w;
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for (yc, ac) in gout.chunks(m).zip(da.chunks(m)) {
                        for ((x, y), w) in g.iter_mut().zip(yc).zip(ac) {
                            *x += y * w;
                        }
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |g| g.iter_mut().zip(gout).for_each(|(a, y)| *a += c * y));
            }
            Op::MatMul(a, b) => {
                let sb = &self.nodes[b.0].shape;
                let (k, p) = (sb[0], sb[1]);
                let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                let m = da.len() / k;
                acc(*a, &mut |g| mm_nt(gout, db, g, m, p, k));
                acc(*b, &mut |g| mm_tn(da, gout, g, m, k, p));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = &self.nodes[a.0].shape;
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let p = node.shape[2];
                let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                acc(*a, &mut |g| {
                    for i in 0..bs {
                        let go = &gout[i * m * p..(i + 1) * m * p];
                        let bi = &db[i * k * p..(i + 1) * k * p];
                        let gi = &mut g[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            mm_nn(go, bi, gi, m, p, k);
                        } else {
                            mm_nt(go, bi, gi, m, p, k);
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..bs {
                        let go = &gout[i * m * p..(i + 1) * m * p];
                        let ai = &da[i * m * k..(i + 1) * m * k];
                        let gi = &mut g[i * k * p..(i + 1) * k * p];
                        if *trans_b {
                            mm_tn(go, ai, gi, m, p, k);
                        } else {
                            mm_tn(ai, go, gi, m, k, p);
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |g| g.iter_mut().zip(gout).for_each(|(a, y)| *a += y));
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(gout, &node.shape, &inv);
                acc(*x, &mut |g| g.iter_mut().zip(&back).for_each(|(a, y)| *a += y));
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.nodes[v.0].shape[*axis];
                    acc(v, &mut |g| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * n * inner;
                            for j in 0..n * inner {
                                g[dst + j] += gout[src + j];
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let sx = &self.nodes[x.0].shape;
                let (outer, n, inner) = axis_split(sx, *axis);
                let len = node.shape[*axis];
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            g[dst + j] += gout[src + j];
                        }
                    }
                });
            }
            Op::IndexSelect { x, axis, indices } => {
                let sx = &self.nodes[x.0].shape;
                let (outer, n, inner) = axis_split(sx, *axis);
                let len = indices.len();
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for (k, &i) in indices.iter().enumerate() {
                            let dst = (o * n + i) * inner;
                            let src = (o * len + k) * inner;
                            for j in 0..inner {
                                g[dst + j] += gout[src + j];
                            }
                        }
                    }
                });
            }
            Op::Repeat(x, count) => {
                let m = self.nodes[x.0].data.len();
                acc(*x, &mut |g| {
                    for c in 0..*count {
                        for j in 0..m {
                            g[j] += gout[c * m + j];
                        }
                    }
                });
            }
            Op::SumAxis(x, axis) => {
                let (outer, n, inner) = axis_split(&self.nodes[x.0].shape, *axis);
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..n {
                            for j in 0..inner {
                                g[(o * n + i) * inner + j] += gout[o * inner + j];
                            }
                        }
                    }
                });
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (_, n, inner) = axis_split(&self.nodes[x.0].shape, *axis);
                acc(*x, &mut |g| {
                    for (r, (&am, y)) in argmax.iter().zip(gout).enumerate() {
                        let (o, j) = (r / inner, r % inner);
                        g[(o * n + am) * inner + j] += y;
                    }
                });
            }
            Op::SumAll(x) => {
                acc(*x, &mut |g| g.iter_mut().for_each(|a| *a += gout[0]));
            }
            Op::Softmax(x, axis) | Op::LogSoftmax(x, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, n, inner) = axis_split(&node.shape, *axis);
                let y = &node.data;
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * n + i) * inner + j;
                            if log {
                                let s: f64 = (0..n).map(|i| gout[idx(i)]).sum();
                                for i in 0..n {
                                    g[idx(i)] += gout[idx(i)] - y[idx(i)].exp() * s;
                                }
                            } else {
                                let s: f64 = (0..n).map(|i| gout[idx(i)] * y[idx(i)]).sum();
                                for i in 0..n {
                                    g[idx(i)] += y[idx(i)] * (gout[idx(i)] - s);
                                }
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let rows = rstd.len();
                let gv = &self.nodes[gain.0].data;
                acc(*x, &mut |g| {
                    for r in 0..rows {
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for c in 0..d {
                            let dh = gout[r * d + c] * gv[c];
                            m1 += dh;
                            m2 += dh * xhat[r * d + c];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for c in 0..d {
                            let dh = gout[r * d + c] * gv[c];
                            g[r * d + c] += rstd[r] * (dh - m1 - xhat[r * d + c] * m2);
                        }
                    }
                });
                acc(*gain, &mut |g| {
                    for r in 0..rows {
                        for c in 0..d {
                            g[c] += gout[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                acc(*bias, &mut |g| {
                    for r in 0..rows {
                        for c in 0..d {
                            g[c] += gout[r * d + c];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &self.nodes[x.0].data;
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * gelu_grad_scalar(xv[i]);
                    }
                });
            }
            Op::InterpRows { x, lo, frac } => {
                let d = node.shape[1];
                acc(*x, &mut |g| {
                    for (j, (&i0, &f)) in lo.iter().zip(frac).enumerate() {
                        for c in 0..d {
                            let y = gout[j * d + c];
                            g[i0 * d + c] += (1.0 - f) * y;
                            if f != 0.0 {
                                g[(i0 + 1) * d + c] += f * y;
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * mask[i];
                    }
                });
            }
            Op::Pick { x, indices } => {
                let k = self.nodes[x.0].shape[1];
                acc(*x, &mut |g| {
                    for (b, &i) in indices.iter().enumerate() {
                        g[b * k + i] += gout[b];
                    }
                });
            }
        }
    }
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // stride in the source for each output axis
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
