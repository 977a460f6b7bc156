//! Per-pass computation tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! creation order, so parents always precede children. [`Graph::backward`]
//! walks the records once in reverse and may only run once per tape.

use std::collections::HashMap;

use crate::error::{shape_err, Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{
    axis_split, broadcast_map, broadcast_shape, numel, strides, Precision, Tensor,
};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Pow(f64),
    Exp,
    Log,
    Abs,
    Relu,
    Gelu,
    Sigmoid,
    LogSigmoid,
    Tanh,
    Sin,
    Cos,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Param(ParamId),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        map: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Reverse-mode tape. Owned by one thread from forward through backward.
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    precision: Precision,
    params: HashMap<ParamId, Var>,
    pub(crate) grads: Option<Vec<Option<Vec<f64>>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            params: HashMap::new(),
            grads: None,
        }
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

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.precision.round_slice(value.data_mut());
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

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is kept and readable through [`Graph::grad`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter to this tape. Repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(
            store.value(id).clone(),
            Op::Param(id),
            store.is_trainable(id),
        );
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| shape_err(name, &sa, &sb))?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let da = self.value(a).data();
        let db = self.value(b).data();
        let data: Vec<f64> = if sa == out_shape && sb == out_shape {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if sa == out_shape && is_suffix(&sb, &out_shape) && !db.is_empty() {
            let mut out = Vec::with_capacity(da.len());
            for row in da.chunks_exact(db.len()) {
                out.extend(row.iter().zip(db).map(|(&x, &y)| f(x, y)));
            }
            out
        } else {
            let ma = broadcast_map(&sa, &out_shape);
            let mb = broadcast_map(&sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let value = self.value(x).map(|v| unary_forward(kind, v));
        let rg = self.rg(x);
        self.push(value, Op::Unary(kind, x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(Unary::Scale(factor), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::AddScalar(c), x)
    }

    pub fn powf(&mut self, x: Var, exponent: f64) -> Var {
        self.unary(Unary::Pow(exponent), x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    /// `ln(sigmoid(x))`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::LogSigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(Unary::Sin, x)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(Unary::Cos, x)
    }

    // ---- linear algebra ----------------------------------------------------

    /// Batched matrix product `[.., m, k] x [.., k, n]` with broadcast batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let plan = MatMulPlan::new(&sa, &sb)?;
        let da = self.value(a).data();
        let db = self.value(b).data();
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![0.0; plan.batch_count * m * n];
        for bi in 0..plan.batch_count {
            let ao = plan.a_batch[bi] * m * k;
            let bo = plan.b_batch[bi] * k * n;
            let oo = bi * m * n;
            for i in 0..m {
                for p in 0..k {
                    let av = da[ao + i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &db[bo + p * n..bo + (p + 1) * n];
                    let orow = &mut out[oo + i * n..oo + (i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(plan.out_shape, out)?, Op::MatMul(a, b), rg))
    }

    /// `x · w + b` for `x: [.., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        let (outer, dim, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..dim {
                let base = (o * dim + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        let dim = shape[axis].max(1) as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / dim))
    }

    // ---- normalisation -----------------------------------------------------

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        let out = softmax_along(self.value(x).data(), &shape, axis, false);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        let out = softmax_along(self.value(x).data(), &shape, axis, true);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax { x, axis }, rg))
    }

    /// Normalises over the last axis, then applies per-channel gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| TensorError::Usage("layer_norm on a scalar".into()))?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(shape_err("layer_norm", &shape, self.shape(gain)));
        }
        let rows = numel(&shape) / c.max(1);
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mu) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- layout ------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err("permute", &shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let n = numel(&shape);
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            map.push((0..rank).map(|d| idx[d] * in_strides[perm[d]]).sum());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let d = self.value(x).data();
        let out = map.iter().map(|&i| d[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute { x, map }, rg))
    }

    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        check_axis(a, rank)?;
        check_axis(b, rank)?;
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis(axis, base.len())?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let dim = self.shape(v)[axis];
                let chunk = dim * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        if start + len > shape[axis] {
            return Err(shape_err("narrow", &shape, &[axis, start, len]));
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * dim + start) * inner;
            out.extend_from_slice(&d[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Narrow { x, axis, start },
            rg,
        ))
    }

    /// Gathers rows (first-axis slices) in the given order; rows may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(shape_err("select_rows", &shape, rows));
        }
        let width = numel(&shape[1..]);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&d[r * width..(r + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    // ---- convolution -------------------------------------------------------

    /// Cross-correlation of `x: [B, C, H, W]` with `kernel: [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        let geom = ConvGeom::new(&sx, &sk, stride, padding)?;
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let mut out = vec![0.0; geom.out_len()];
        let s = geom.stride;
        geom.for_each_run(|o0, x0, ki, n| {
            let kv = kd[ki];
            let xs = &xd[x0..x0 + (n - 1) * s + 1];
            for (o, &x) in out[o0..o0 + n].iter_mut().zip(xs.iter().step_by(s)) {
                *o += x * kv;
            }
        });
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            Tensor::new(geom.out_shape(), out)?,
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
            },
            rg,
        ))
    }
}

/// True when `from` equals the trailing dimensions of `to`, the one
/// broadcast that needs no index map.
pub(crate) fn is_suffix(from: &[usize], to: &[usize]) -> bool {
    from.len() <= to.len() && from == &to[to.len() - from.len()..]
}

pub(crate) fn unary_forward(kind: Unary, v: f64) -> f64 {
    match kind {
        Unary::Neg => -v,
        Unary::Scale(c) => v * c,
        Unary::AddScalar(c) => v + c,
        Unary::Pow(p) => v.powf(p),
        Unary::Exp => v.exp(),
        Unary::Log => v.ln(),
        Unary::Abs => v.abs(),
        Unary::Relu => v.max(0.0),
        Unary::Gelu => 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()),
        Unary::Sigmoid => sigmoid(v),
        Unary::LogSigmoid => v.min(0.0) - (-v.abs()).exp().ln_1p(),
        Unary::Tanh => v.tanh(),
        Unary::Sin => v.sin(),
        Unary::Cos => v.cos(),
    }
}

/// d(output)/d(input) given input `x` and output `y`.
pub(crate) fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Neg => -1.0,
        Unary::Scale(c) => c,
        Unary::AddScalar(_) => 1.0,
        Unary::Pow(p) => {
            if p == 0.0 {
                0.0
            } else {
                p * x.powf(p - 1.0)
            }
        }
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Gelu => {
            let inner = GELU_C * (x + GELU_A * x * x * x);
            let t = inner.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        }
        Unary::Sigmoid => y * (1.0 - y),
        Unary::LogSigmoid => sigmoid(-x),
        Unary::Tanh => 1.0 - y * y,
        Unary::Sin => x.cos(),
        Unary::Cos => -x.sin(),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(TensorError::Axis { axis, rank })
    } else {
        Ok(())
    }
}

pub(crate) fn softmax_along(d: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, dim, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * dim + a) * inner + i;
            let mx = (0..dim).map(|a| d[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..dim).map(|a| (d[at(a)] - mx).exp()).sum();
            let lz = z.ln();
            for a in 0..dim {
                out[at(a)] = if log {
                    d[at(a)] - mx - lz
                } else {
                    (d[at(a)] - mx).exp() / z
                };
            }
        }
    }
    out
}

pub(crate) struct MatMulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub batch_count: usize,
    pub a_batch: Vec<usize>,
    pub b_batch: Vec<usize>,
    pub out_shape: Vec<usize>,
}

impl MatMulPlan {
    pub(crate) fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (ba, ma) = sa.split_at(sa.len() - 2);
        let (bb, mb) = sb.split_at(sb.len() - 2);
        if ma[1] != mb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let batch = broadcast_shape(ba, bb).ok_or_else(|| shape_err("matmul", sa, sb))?;
        let a_batch = broadcast_map(ba, &batch);
        let b_batch = broadcast_map(bb, &batch);
        let mut out_shape = batch.clone();
        out_shape.extend([ma[0], mb[1]]);
        Ok(Self {
            m: ma[0],
            k: ma[1],
            n: mb[1],
            batch_count: numel(&batch),
            a_batch,
            b_batch,
            out_shape,
        })
    }
}

pub(crate) struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    pub(crate) stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    pub(crate) fn new(sx: &[usize], sk: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(shape_err("conv2d", sx, sk));
        }
        if stride == 0 {
            return Err(TensorError::Config("conv2d stride must be >= 1".into()));
        }
        let (kh, kw) = (sk[2], sk[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Config(format!(
                "conv2d kernel {kh}x{kw} must be odd"
            )));
        }
        let (h, w) = (sx[2], sx[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err("conv2d", sx, sk));
        }
        Ok(Self {
            b: sx[0],
            c: sx[1],
            h,
            w,
            o: sk[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub(crate) fn out_shape(&self) -> Vec<usize> {
        vec![self.b, self.o, self.ho, self.wo]
    }

    pub(crate) fn out_len(&self) -> usize {
        self.b * self.o * self.ho * self.wo
    }

    /// Visits contributing index runs: for fixed `(b, o, c, ky, kx, oy)` the
    /// output indices `out0 + t` pair with input indices `x0 + t * stride`
    /// for `t in 0..count`, all with kernel index `ki`.
    pub(crate) fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (s, p) = (self.stride, self.pad);
        for kx in 0..self.kw {
            let ox0 = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
            let ox1 = if self.w + p < kx + 1 {
                0
            } else {
                ((self.w - 1 + p - kx) / s + 1).min(self.wo)
            };
            if ox0 >= ox1 {
                continue;
            }
            let count = ox1 - ox0;
            for b in 0..self.b {
                for o in 0..self.o {
                    for c in 0..self.c {
                        for ky in 0..self.kh {
                            let ki = ((o * self.c + c) * self.kh + ky) * self.kw + kx;
                            for oy in 0..self.ho {
                                let iy = (oy * s + ky) as isize - p as isize;
                                if iy < 0 || iy >= self.h as isize {
                                    continue;
                                }
                                let out0 = ((b * self.o + o) * self.ho + oy) * self.wo + ox0;
                                let x0 = ((b * self.c + c) * self.h + iy as usize) * self.w
                                    + ox0 * s
                                    + kx
                                    - p;
                                f(out0, x0, ki, count);
                            }
                        }
                    }
                }
            }
        }
    }
}
