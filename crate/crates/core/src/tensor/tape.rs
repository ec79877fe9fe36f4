use std::sync::Arc;

use super::{Precision, Tensor};
use crate::error::{CktError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate defects used to show that the gradient check can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    pub wrong_gelu_backward: bool,
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Gelu,
    Exp,
    Softplus,
}

enum Op {
    Leaf,
    Reshape(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        a_off: Vec<usize>,
        b_off: Vec<usize>,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        map_a: Option<Vec<usize>>,
        map_b: Option<Vec<usize>>,
    },
    Scale(Var, f64),
    Unary(UnaryKind, Var),
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    ReduceAxis {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
        scale: f64,
    },
    SumAll(Var),
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    /// `out[i] = in[map[i]]`; covers index-select, permute and broadcast.
    Gather(Var, Vec<usize>),
    /// `out[map[i]] += in[i]` into a zero buffer.
    Scatter(Var, Vec<usize>),
    Rope {
        a: Var,
        cos: Arc<Vec<f64>>,
        sin: Arc<Vec<f64>>,
        rows: usize,
        half: usize,
    },
    MseMasked {
        pred: Var,
        target: Var,
        coef: Vec<f64>,
        row: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed ops. Ops are appended after their inputs, so
/// backward is a single reverse sweep over the node list.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    faults: Faults,
    seed: u64,
    step: u64,
    stochastic_calls: u64,
    mul_adds: u64,
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of `src` it reads under
/// broadcasting. `src` must be broadcast-compatible with `out`.
pub(crate) fn broadcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let n = out.len();
    let pad = n - src.len();
    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i + pad] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64, faulty: bool) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    if faulty {
        return 0.5 * (1.0 + t);
    }
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in [0, 1) from a counter-based stream keyed by (seed, call, step, i).
fn counter_uniform(seed: u64, call: u64, step: u64, i: u64) -> f64 {
    let key = splitmix64(seed ^ splitmix64(call ^ splitmix64(step.wrapping_add(0x51))));
    (splitmix64(key ^ i) >> 11) as f64 / (1u64 << 53) as f64
}

fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn acc_into(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
            faults: Faults::default(),
            seed: 0,
            step: 0,
            stochastic_calls: 0,
            mul_adds: 0,
        }
    }

    /// Seed and step for the counter-based dropout stream.
    pub fn with_stream(mut self, seed: u64, step: u64) -> Self {
        self.seed = seed;
        self.step = step;
        self
    }

    pub fn with_faults(mut self, faults: Faults) -> Self {
        self.faults = faults;
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-adds performed by matmuls so far.
    pub fn mul_adds(&self) -> u64 {
        self.mul_adds
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_shared(n.shape.clone(), Arc::clone(&n.value))
    }

    fn push(&mut self, shape: Vec<usize>, mut data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        self.precision.round_slice(&mut data);
        self.push_shared(shape, Arc::new(data), op, needs_grad)
    }

    fn push_shared(&mut self, shape: Vec<usize>, value: Arc<Vec<f64>>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bind a tensor as a leaf. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_shared(t.shape().to_vec(), t.shared(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(CktError::shape("constant", shape, &[data.len()]));
        }
        Ok(self.push_shared(shape.to_vec(), Arc::new(data), Op::Leaf, false))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[a.0];
        if shape.iter().product::<usize>() != n.value.len() {
            return Err(CktError::shape("reshape", &n.shape, shape));
        }
        let (value, needs) = (Arc::clone(&n.value), n.needs_grad);
        Ok(self.push_shared(shape.to_vec(), value, Op::Reshape(a), needs))
    }

    /// Batched matrix product `[..., m, k] x [..., k, n]` with broadcast
    /// batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(CktError::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch = broadcast_shape(ba, bb).ok_or_else(|| CktError::shape("matmul", &sa, &sb))?;
        let a_off = broadcast_map(&batch, ba);
        let b_off = broadcast_map(&batch, bb);
        let nb = a_off.len();
        let mut out = vec![0.0; nb * m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for (bi, (&ia, &ib)) in a_off.iter().zip(&b_off).enumerate() {
                gemm(
                    &av[ia * m * k..(ia + 1) * m * k],
                    &bv[ib * k * n..(ib + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        self.mul_adds += (nb * m * k * n) as u64;
        let mut shape = batch;
        shape.extend([m, n]);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                a_off,
                b_off,
            },
            needs,
        ))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        if sa == sb {
            let out: Vec<f64> = self
                .value(a)
                .iter()
                .zip(self.value(b))
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Ok(self.push(
                sa,
                out,
                Op::Binary {
                    kind,
                    a,
                    b,
                    map_a: None,
                    map_b: None,
                },
                needs,
            ));
        }
        let shape = broadcast_shape(&sa, &sb).ok_or_else(|| CktError::shape(name, &sa, &sb))?;
        let map_a = (shape != sa).then(|| broadcast_map(&shape, &sa));
        let map_b = (shape != sb).then(|| broadcast_map(&shape, &sb));
        let total: usize = shape.iter().product();
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<f64> = (0..total)
            .map(|i| {
                let x = av[map_a.as_ref().map_or(i, |m| m[i])];
                let y = bv[map_b.as_ref().map_or(i, |m| m[i])];
                f(x, y)
            })
            .collect();
        Ok(self.push(
            shape,
            out,
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let (shape, needs) = (self.shape(a).to_vec(), self.needs_grad(a));
        self.push(shape, out, Op::Scale(a, c), needs)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f = match kind {
            UnaryKind::Gelu => gelu,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Softplus => softplus,
        };
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let (shape, needs) = (self.shape(a).to_vec(), self.needs_grad(a));
        self.push(shape, out, Op::Unary(kind, a), needs)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a)
    }

    fn check_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<()> {
        let r = self.shape(a).len();
        if axis >= r {
            return Err(CktError::Range(format!("{op}: axis {axis} for rank {r}")));
        }
        Ok(())
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "softmax")?;
        let shape = self.shape(a).to_vec();
        let x = self.value(a);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CktError::Numeric("softmax input".into()));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let needs = self.needs_grad(a);
        Ok(self.push(shape, out, Op::Softmax { a, outer, len, inner }, needs))
    }

    /// Normalize over the last axis, then scale by `gamma` and shift by `beta`
    /// when given.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| CktError::shape("layer_norm", &shape, &[]))?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(CktError::shape("layer_norm", &shape, self.shape(p)));
            }
        }
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * rs;
            }
        }
        let g = gamma.map(|g| self.value(g).to_vec());
        let b = beta.map(|b| self.value(b).to_vec());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let j = i % d;
                h * g.as_ref().map_or(1.0, |g| g[j]) + b.as_ref().map_or(0.0, |b| b[j])
            })
            .collect();
        let needs =
            self.needs_grad(x) || gamma.is_some_and(|g| self.needs_grad(g)) || beta.is_some_and(|b| self.needs_grad(b));
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Inverted dropout. Identity (the same `Var`) when `!train` or `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(CktError::config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let call = self.stochastic_calls;
        self.stochastic_calls += 1;
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n as u64)
            .map(|i| {
                if counter_uniform(self.seed, call, self.step, i) < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let (shape, needs) = (self.shape(a).to_vec(), self.needs_grad(a));
        Ok(self.push(shape, out, Op::Dropout(a, mask), needs))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check_axis(a, axis, "reduce")?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let x = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * len + j) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let mut oshape = shape;
        oshape.remove(axis);
        let needs = self.needs_grad(a);
        Ok(self.push(
            oshape,
            out,
            Op::ReduceAxis {
                a,
                outer,
                len,
                inner,
                scale,
            },
            needs,
        ))
    }

    /// Mean over `axis`; the axis is removed.
    pub fn mean_pool(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Sum of all entries as a 0-d scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let needs = self.needs_grad(a);
        self.push(vec![], vec![s], Op::SumAll(a), needs)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| CktError::config("concat of zero tensors"))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(CktError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        let lens: Vec<(Var, usize)> = parts.iter().map(|&p| (p, self.shape(p)[axis])).collect();
        for o in 0..outer {
            for &(p, len) in &lens {
                let v = self.value(p);
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = parts.iter().any(|&p| self.needs_grad(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: lens,
                outer,
                inner,
            },
            needs,
        ))
    }

    fn gather(&mut self, a: Var, shape: Vec<usize>, map: Vec<usize>) -> Var {
        let v = self.value(a);
        let out = map.iter().map(|&i| v[i]).collect();
        let needs = self.needs_grad(a);
        self.push(shape, out, Op::Gather(a, map), needs)
    }

    /// Pick `indices` along `axis`.
    pub fn select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.check_axis(a, axis, "select")?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(CktError::Range(format!("select index {bad} of {len}")));
        }
        let mut map = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &j in indices {
                map.extend((0..inner).map(|i| (o * len + j) * inner + i));
            }
        }
        let mut oshape = shape;
        oshape[axis] = indices.len();
        Ok(self.gather(a, oshape, map))
    }

    /// Slice `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.select(a, axis, &idx)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(CktError::shape("permute", &shape, perm));
        }
        let mut strides = vec![1usize; r];
        for d in (0..r.saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * shape[d + 1];
        }
        let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let ostrides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
        let total: usize = shape.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; r];
        let mut off = 0usize;
        for _ in 0..total {
            map.push(off);
            for d in (0..r).rev() {
                idx[d] += 1;
                off += ostrides[d];
                if idx[d] < oshape[d] {
                    break;
                }
                off -= ostrides[d] * idx[d];
                idx[d] = 0;
            }
        }
        Ok(self.gather(a, oshape, map))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(CktError::shape("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        match broadcast_shape(&s, shape) {
            Some(b) if b == shape => {}
            _ => return Err(CktError::shape("broadcast_to", &s, shape)),
        }
        let map = broadcast_map(shape, &s);
        Ok(self.gather(a, shape.to_vec(), map))
    }

    /// Place the rows of `a` (leading axis) at `rows` of a zero tensor with
    /// `total` rows.
    pub fn scatter_rows(&mut self, a: Var, rows: &[usize], total: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.first() != Some(&rows.len()) {
            return Err(CktError::shape("scatter_rows", &s, &[rows.len()]));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= total) {
            return Err(CktError::Range(format!("scatter row {bad} of {total}")));
        }
        let row: usize = s[1..].iter().product();
        let map: Vec<usize> = rows.iter().flat_map(|&r| (0..row).map(move |i| r * row + i)).collect();
        let mut out = vec![0.0; total * row];
        for (i, &o) in map.iter().enumerate() {
            out[o] += self.value(a)[i];
        }
        let mut shape = s;
        shape[0] = total;
        let needs = self.needs_grad(a);
        Ok(self.push(shape, out, Op::Scatter(a, map), needs))
    }

    /// Rotate consecutive pairs of the last axis. `cos`/`sin` are `[L, d/2]`
    /// and `a` is `[..., L, d]`.
    pub fn rope(&mut self, a: Var, cos: Arc<Vec<f64>>, sin: Arc<Vec<f64>>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 || !shape[r - 1].is_multiple_of(2) || cos.len() != shape[r - 2] * shape[r - 1] / 2 || cos.len() != sin.len() {
            return Err(CktError::shape("rope", &shape, &[cos.len(), sin.len()]));
        }
        let (rows, half) = (shape[r - 2], shape[r - 1] / 2);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        let block = rows * half * 2;
        for (o, chunk) in x.chunks(block).enumerate() {
            for l in 0..rows {
                for p in 0..half {
                    let (c, s) = (cos[l * half + p], sin[l * half + p]);
                    let i = l * half * 2 + 2 * p;
                    let (x0, x1) = (chunk[i], chunk[i + 1]);
                    out[o * block + i] = x0 * c - x1 * s;
                    out[o * block + i + 1] = x0 * s + x1 * c;
                }
            }
        }
        let needs = self.needs_grad(a);
        Ok(self.push(
            shape,
            out,
            Op::Rope {
                a,
                cos,
                sin,
                rows,
                half,
            },
            needs,
        ))
    }

    /// `1/B * sum_b sum_t mask[b,t] * weight[b] * ||pred[b,t] - target[b,t]||^2`
    /// for `[B, T, D]` inputs.
    pub fn mse_masked(&mut self, pred: Var, target: Var, mask: &[f64], weights: &[f64]) -> Result<Var> {
        let sp = self.shape(pred).to_vec();
        if sp.len() != 3 || self.shape(target) != sp.as_slice() {
            return Err(CktError::shape("mse_masked", &sp, self.shape(target)));
        }
        let (b, t, d) = (sp[0], sp[1], sp[2]);
        if mask.len() != b * t || weights.len() != b {
            return Err(CktError::shape("mse_masked", &[b, t], &[mask.len(), weights.len()]));
        }
        let coef: Vec<f64> = (0..b * t).map(|i| mask[i] * weights[i / t] / b as f64).collect();
        let (pv, tv) = (self.value(pred), self.value(target));
        let mut loss = 0.0;
        for (r, &c) in coef.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let sq: f64 = (0..d)
                .map(|j| {
                    let e = pv[r * d + j] - tv[r * d + j];
                    e * e
                })
                .sum();
            loss += c * sq;
        }
        let needs = self.needs_grad(pred) || self.needs_grad(target);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::MseMasked {
                pred,
                target,
                coef,
                row: d,
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Only nodes that need gradients
    /// receive one; leaves the loss does not depend on stay `None`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(CktError::shape("backward", &self.nodes[loss.0].shape, &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let need = |v: Var| self.nodes[v.0].needs_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(a) => {
                let ga = acc_into(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                a_off,
                b_off,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if need(*a) {
                    let la = len(*a);
                    let ga = acc_into(grads, *a, la);
                    for (bi, (&ia, &ib)) in a_off.iter().zip(b_off).enumerate() {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let bm = &bv[ib * k * n..(ib + 1) * k * n];
                        let gam = &mut ga[ia * m * k..(ia + 1) * m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += gc[i * n + j] * bm[p * n + j];
                                }
                                gam[i * k + p] += s;
                            }
                        }
                    }
                }
                if need(*b) {
                    let lb = len(*b);
                    let gb = acc_into(grads, *b, lb);
                    for (bi, (&ia, &ib)) in a_off.iter().zip(b_off).enumerate() {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let am = &av[ia * m * k..(ia + 1) * m * k];
                        let gbm = &mut gb[ib * k * n..(ib + 1) * k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let aip = am[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                let row = &mut gbm[p * n..(p + 1) * n];
                                for (r, gv) in row.iter_mut().zip(&gc[i * n..(i + 1) * n]) {
                                    *r += aip * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let xa = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
                let xb = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
                if need(*a) {
                    let la = len(*a);
                    let ga = acc_into(grads, *a, la);
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => gi,
                            BinaryKind::Mul => gi * bv[xb(i)],
                            BinaryKind::Div => gi / bv[xb(i)],
                        };
                        ga[xa(i)] += d;
                    }
                }
                if need(*b) {
                    let lb = len(*b);
                    let gb = acc_into(grads, *b, lb);
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * av[xa(i)],
                            BinaryKind::Div => {
                                let y = bv[xb(i)];
                                -gi * av[xa(i)] / (y * y)
                            }
                        };
                        gb[xb(i)] += d;
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = acc_into(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
            Op::Unary(kind, a) => {
                let x = &self.nodes[a.0].value;
                let faulty = self.faults.wrong_gelu_backward;
                let ga = acc_into(grads, *a, g.len());
                for i in 0..g.len() {
                    let d = match kind {
                        UnaryKind::Gelu => gelu_grad(x[i], faulty),
                        UnaryKind::Exp => node.value[i],
                        UnaryKind::Softplus => sigmoid(x[i]),
                    };
                    ga[i] += g[i] * d;
                }
            }
            Op::Softmax {
                a,
                outer,
                len: n,
                inner,
            } => {
                let y = &node.value;
                let ga = acc_into(grads, *a, g.len());
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..*n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*n {
                            ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let rows = xhat.len() / d;
                let gam = gamma.map(|v| self.nodes[v.0].value.clone());
                if let Some(gv) = gamma.filter(|v| need(*v)) {
                    let gg = acc_into(grads, gv, d);
                    for (i, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[i % d] += gi * h;
                    }
                }
                if let Some(bv) = beta.filter(|v| need(*v)) {
                    let gb = acc_into(grads, bv, d);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % d] += gi;
                    }
                }
                if need(*x) {
                    let gx = acc_into(grads, *x, xhat.len());
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let v = g[r * d + j] * gam.as_ref().map_or(1.0, |gv| gv[j]);
                            dxhat[j] = v;
                            m1 += v;
                            m2 += v * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                let ga = acc_into(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * mask[i];
                }
            }
            Op::ReduceAxis {
                a,
                outer,
                len: n,
                inner,
                scale,
            } => {
                let la = len(*a);
                let ga = acc_into(grads, *a, la);
                for o in 0..*outer {
                    for j in 0..*n {
                        for i in 0..*inner {
                            ga[(o * n + j) * inner + i] += scale * g[o * inner + i];
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let la = len(*a);
                let ga = acc_into(grads, *a, la);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(p, plen) in parts {
                    if need(p) {
                        let lp = len(p);
                        let gp = acc_into(grads, p, lp);
                        for o in 0..*outer {
                            let src = &g[(o * total + off) * inner..(o * total + off + plen) * inner];
                            let dst = &mut gp[o * plen * inner..(o + 1) * plen * inner];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    off += plen;
                }
            }
            Op::Gather(a, map) => {
                let la = len(*a);
                let ga = acc_into(grads, *a, la);
                for (i, &src) in map.iter().enumerate() {
                    ga[src] += g[i];
                }
            }
            Op::Scatter(a, map) => {
                let la = len(*a);
                let ga = acc_into(grads, *a, la);
                for (i, &dst) in map.iter().enumerate() {
                    ga[i] += g[dst];
                }
            }
            Op::Rope {
                a,
                cos,
                sin,
                rows,
                half,
            } => {
                let ga = acc_into(grads, *a, g.len());
                let block = rows * half * 2;
                for o in 0..g.len() / block {
                    for l in 0..*rows {
                        for p in 0..*half {
                            let (c, s) = (cos[l * half + p], sin[l * half + p]);
                            let i = o * block + l * half * 2 + 2 * p;
                            let (g0, g1) = (g[i], g[i + 1]);
                            ga[i] += g0 * c + g1 * s;
                            ga[i + 1] += -g0 * s + g1 * c;
                        }
                    }
                }
            }
            Op::MseMasked {
                pred,
                target,
                coef,
                row,
            } => {
                let pv = &self.nodes[pred.0].value;
                let tv = &self.nodes[target.0].value;
                let diff = |i: usize| 2.0 * g[0] * coef[i / row] * (pv[i] - tv[i]);
                if need(*pred) {
                    let gp = acc_into(grads, *pred, pv.len());
                    for (i, x) in gp.iter_mut().enumerate() {
                        *x += diff(i);
                    }
                }
                if need(*target) {
                    let gt = acc_into(grads, *target, tv.len());
                    for (i, x) in gt.iter_mut().enumerate() {
                        *x -= diff(i);
                    }
                }
            }
        }
    }
}
