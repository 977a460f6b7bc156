use crate::error::{Result, TensorError};
use crate::graph::{is_suffix, unary_derivative, Binary, ConvGeom, Graph, MatMulPlan, Op, Var};
use crate::param::ParamStore;
use crate::tensor::{axis_split, broadcast_map, Tensor};

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

/// Dot product with four interleaved partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline(always)]
fn binary_grad_a(
    kind: Binary,
    g: &[f64],
    _da: &[f64],
    db: &[f64],
    ga: &mut [f64],
    ia: impl Fn(usize) -> usize,
    ib: impl Fn(usize) -> usize,
) {
    match kind {
        Binary::Add | Binary::Sub => g.iter().enumerate().for_each(|(k, &gk)| ga[ia(k)] += gk),
        Binary::Mul => g
            .iter()
            .enumerate()
            .for_each(|(k, &gk)| ga[ia(k)] += gk * db[ib(k)]),
        Binary::Div => g
            .iter()
            .enumerate()
            .for_each(|(k, &gk)| ga[ia(k)] += gk / db[ib(k)]),
    }
}

#[inline(always)]
fn binary_grad_b(
    kind: Binary,
    g: &[f64],
    da: &[f64],
    db: &[f64],
    gb: &mut [f64],
    ia: impl Fn(usize) -> usize,
    ib: impl Fn(usize) -> usize,
) {
    match kind {
        Binary::Add => g.iter().enumerate().for_each(|(k, &gk)| gb[ib(k)] += gk),
        Binary::Sub => g.iter().enumerate().for_each(|(k, &gk)| gb[ib(k)] -= gk),
        Binary::Mul => g
            .iter()
            .enumerate()
            .for_each(|(k, &gk)| gb[ib(k)] += gk * da[ia(k)]),
        Binary::Div => g.iter().enumerate().for_each(|(k, &gk)| {
            let y = db[ib(k)];
            gb[ib(k)] -= gk * da[ia(k)] / (y * y)
        }),
    }
}

impl Graph {
    /// Reverse pass from a scalar `loss`. Runs at most once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the last backward loss with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.as_ref()?;
        let g = grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient shape"))
    }

    /// Adds every parameter gradient of this tape into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| TensorError::Usage("accumulate_into before backward".into()))?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                let dst = store.grad_mut(*id);
                if dst.numel() != g.len() {
                    return Err(TensorError::Usage(
                        "parameter changed shape during pass".into(),
                    ));
                }
                for (d, s) in dst.data_mut().iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        Ok(())
    }

    /// Convenience: `backward` followed by `accumulate_into`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?;
        self.accumulate_into(store)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.numel();
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                let out_shape = node.value.shape();
                let (da, db) = (val(a), val(b));
                if shp(a) == out_shape && shp(b) == out_shape {
                    if rg(a) {
                        accumulate(grads, a, len(a), |ga| {
                            binary_grad_a(*kind, g, da, db, ga, |k| k, |k| k)
                        });
                    }
                    if rg(b) {
                        accumulate(grads, b, len(b), |gb| {
                            binary_grad_b(*kind, g, da, db, gb, |k| k, |k| k)
                        });
                    }
                } else if shp(a) == out_shape && is_suffix(shp(b), out_shape) && !db.is_empty() {
                    let m = db.len();
                    if rg(a) {
                        accumulate(grads, a, len(a), |ga| {
                            binary_grad_a(*kind, g, da, db, ga, |k| k, |k| k % m)
                        });
                    }
                    if rg(b) {
                        accumulate(grads, b, len(b), |gb| {
                            for (r, row) in g.chunks_exact(m).enumerate() {
                                binary_grad_b(
                                    *kind,
                                    row,
                                    &da[r * m..(r + 1) * m],
                                    db,
                                    gb,
                                    |k| k,
                                    |k| k,
                                );
                            }
                        });
                    }
                } else {
                    let ma = broadcast_map(shp(a), out_shape);
                    let mb = broadcast_map(shp(b), out_shape);
                    let (ia, ib) = (|k: usize| ma[k], |k: usize| mb[k]);
                    if rg(a) {
                        accumulate(grads, a, len(a), |ga| {
                            binary_grad_a(*kind, g, da, db, ga, ia, ib)
                        });
                    }
                    if rg(b) {
                        accumulate(grads, b, len(b), |gb| {
                            binary_grad_b(*kind, g, da, db, gb, ia, ib)
                        });
                    }
                }
            }
            Op::Unary(kind, x) => {
                let x = *x;
                let xd = val(x);
                let yd = node.value.data();
                accumulate(grads, x, len(x), |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * unary_derivative(*kind, xd[k], yd[k]);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let plan = MatMulPlan::new(shp(a), shp(b)).expect("matmul plan");
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (da, db) = (val(a), val(b));
                if rg(a) {
                    accumulate(grads, a, len(a), |ga| {
                        for bi in 0..plan.batch_count {
                            let ao = plan.a_batch[bi] * m * k;
                            let bo = plan.b_batch[bi] * k * n;
                            let go = bi * m * n;
                            for r in 0..m {
                                for p in 0..k {
                                    let brow = &db[bo + p * n..bo + (p + 1) * n];
                                    let grow = &g[go + r * n..go + (r + 1) * n];
                                    ga[ao + r * k + p] += dot(grow, brow);
                                }
                            }
                        }
                    });
                }
                if rg(b) {
                    accumulate(grads, b, len(b), |gb| {
                        for bi in 0..plan.batch_count {
                            let ao = plan.a_batch[bi] * m * k;
                            let bo = plan.b_batch[bi] * k * n;
                            let go = bi * m * n;
                            for r in 0..m {
                                let grow = &g[go + r * n..go + (r + 1) * n];
                                for p in 0..k {
                                    let av = da[ao + r * k + p];
                                    let dst = &mut gb[bo + p * n..bo + (p + 1) * n];
                                    for (d, gv) in dst.iter_mut().zip(grow) {
                                        *d += av * gv;
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                accumulate(grads, *x, len(*x), |gx| {
                    gx.iter_mut().for_each(|v| *v += g0)
                });
            }
            Op::SumAxis { x, axis } => {
                let (outer, dim, inner) = axis_split(shp(*x), *axis);
                accumulate(grads, *x, len(*x), |gx| {
                    for o in 0..outer {
                        for a in 0..dim {
                            for i in 0..inner {
                                gx[(o * dim + a) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let y = node.value.data();
                let (outer, dim, inner) = axis_split(shp(*x), *axis);
                accumulate(grads, *x, len(*x), |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * dim + a) * inner + i;
                            if log {
                                let s: f64 = (0..dim).map(|a| g[at(a)]).sum();
                                for a in 0..dim {
                                    gx[at(a)] += g[at(a)] - y[at(a)].exp() * s;
                                }
                            } else {
                                let s: f64 = (0..dim).map(|a| g[at(a)] * y[at(a)]).sum();
                                for a in 0..dim {
                                    gx[at(a)] += y[at(a)] * (g[at(a)] - s);
                                }
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, len(*x), |gx| {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                });
            }
            Op::Permute { x, map } => {
                accumulate(grads, *x, len(*x), |gx| {
                    for (k, &src) in map.iter().enumerate() {
                        gx[src] += g[k];
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let dim = shp(v)[*axis];
                    if rg(v) {
                        accumulate(grads, v, len(v), |gv| {
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                let dst = o * dim * inner;
                                for t in 0..dim * inner {
                                    gv[dst + t] += g[src + t];
                                }
                            }
                        });
                    }
                    offset += dim;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, dim, inner) = axis_split(shp(*x), *axis);
                let width = node.value.shape()[*axis];
                accumulate(grads, *x, len(*x), |gx| {
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        let src = o * width * inner;
                        for t in 0..width * inner {
                            gx[dst + t] += g[src + t];
                        }
                    }
                });
            }
            Op::SelectRows { x, rows } => {
                let width = if rows.is_empty() {
                    0
                } else {
                    g.len() / rows.len()
                };
                accumulate(grads, *x, len(*x), |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        for t in 0..width {
                            gx[r * width + t] += g[k * width + t];
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
            } => {
                let (x, kernel) = (*x, *kernel);
                let geom =
                    ConvGeom::new(shp(x), shp(kernel), *stride, *padding).expect("conv geom");
                let (xd, kd) = (val(x), val(kernel));
                if rg(x) {
                    accumulate(grads, x, len(x), |gx| {
                        geom.for_each_run(|o0, x0, ki, n| {
                            let kv = kd[ki];
                            let xs = &mut gx[x0..x0 + (n - 1) * geom.stride + 1];
                            for (d, &gv) in xs.iter_mut().step_by(geom.stride).zip(&g[o0..o0 + n]) {
                                *d += gv * kv;
                            }
                        });
                    });
                }
                if rg(kernel) {
                    accumulate(grads, kernel, len(kernel), |gk| {
                        geom.for_each_run(|o0, x0, ki, n| {
                            let xs = &xd[x0..x0 + (n - 1) * geom.stride + 1];
                            let acc: f64 = xs
                                .iter()
                                .step_by(geom.stride)
                                .zip(&g[o0..o0 + n])
                                .map(|(x, gv)| gv * x)
                                .sum();
                            gk[ki] += acc;
                        });
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = shp(*gain)[0];
                let rows = rstd.len();
                let gd = val(*gain);
                if rg(*gain) {
                    accumulate(grads, *gain, c, |gg| {
                        for r in 0..rows {
                            for j in 0..c {
                                gg[j] += g[r * c + j] * xhat[r * c + j];
                            }
                        }
                    });
                }
                if rg(*bias) {
                    accumulate(grads, *bias, c, |gb| {
                        for r in 0..rows {
                            for j in 0..c {
                                gb[j] += g[r * c + j];
                            }
                        }
                    });
                }
                if rg(*x) {
                    accumulate(grads, *x, len(*x), |gx| {
                        for r in 0..rows {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for j in 0..c {
                                let d = g[r * c + j] * gd[j];
                                mean_d += d;
                                mean_dx += d * xhat[r * c + j];
                            }
                            mean_d /= c as f64;
                            mean_dx /= c as f64;
                            for j in 0..c {
                                let d = g[r * c + j] * gd[j];
                                gx[r * c + j] += rstd[r] * (d - mean_d - xhat[r * c + j] * mean_dx);
                            }
                        }
                    });
                }
            }
        }
    }
}
