use std::collections::HashMap;

use super::conv::{conv3d_backward, conv3d_forward, ConvGeometry};
use super::param::{ParamId, ParamStore};
use super::{axis_split, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Gradient closure: `(upstream, inputs, output, needs) -> per-input grads`.
type BackwardFn = Box<dyn Fn(&[f64], &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
    tracked: bool,
}

/// A single forward pass. Parameters are bound lazily from the store and a
/// parameter bound twice resolves to the same node, so weight sharing
/// (e.g. the Siamese backbone) accumulates gradients from every use.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

/// Gradients of a scalar node with respect to every tracked node.
pub struct ParamGrads {
    per_node: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl ParamGrads {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.per_node.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, node)| self.per_node[node].as_deref())
    }

    /// Iterates `(param, grad)` pairs in binding order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(p, node)| self.per_node[node].as_deref().map(|g| (p, g)))
    }

    /// Adds every parameter gradient into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in self.iter() {
            store.get_mut(id).tensor.accumulate_grad(g);
        }
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            parents: Vec::new(),
            backward: None,
            param: None,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf that is not a parameter (gradient w.r.t. an input).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let v = self.constant(t);
        self.nodes[v.0].tracked = true;
        v
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = self.params.get(id);
        let mut value = p.tensor.clone();
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            param: Some(id),
            tracked: p.tensor.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: tracked.then_some(backward),
            param: None,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let out = &self.nodes[loss.0].value;
        if out.len() != 1 {
            return Err(Error::dim("backward", out.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].tracked).collect();
            let parent_grads = back(&upstream, &inputs, &node.value, &needs);
            grads[idx] = Some(upstream);
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].tracked {
                    continue;
                }
                match grads[p].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => grads[p] = Some(g),
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| n.param.filter(|_| n.tracked).map(|p| (p, i)))
            .collect();
        Ok(ParamGrads {
            per_node: grads,
            params,
        })
    }

    // ---------------------------------------------------------------------
    // elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|g, _, _, needs| {
                vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|g, _, _, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.iter().map(|v| -v).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|g, inp, _, needs| {
                let (x, y) = (inp[0].data(), inp[1].data());
                vec![
                    needs[0].then(|| g.iter().zip(y).map(|(g, y)| g * y).collect()),
                    needs[1].then(|| g.iter().zip(x).map(|(g, x)| g * x).collect()),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let value = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * s).collect());
        self.push(
            value,
            &[a],
            Box::new(move |g, _, _, _| vec![Some(g.iter().map(|v| v * s).collect())]),
        )
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let value = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v + s).collect());
        self.push(value, &[a], Box::new(|g, _, _, _| vec![Some(g.to_vec())]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| v.max(0.0)).collect());
        self.push(
            value,
            &[a],
            Box::new(|g, inp, _, _| {
                let x = inp[0].data();
                vec![Some(
                    g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                )]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| sigmoid(v)).collect());
        self.push(
            value,
            &[a],
            Box::new(|g, _, out, _| {
                vec![Some(
                    g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
                )]
            }),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v.abs()).collect());
        self.push(
            value,
            &[a],
            Box::new(|g, inp, _, _| {
                let x = inp[0].data();
                vec![Some(g.iter().zip(x).map(|(g, x)| g * sign(*x)).collect())]
            }),
        )
    }

    // ---------------------------------------------------------------------
    // broadcasting

    /// `x + b` with `b` broadcast along every axis but the last.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        let k = *xs.last().unwrap();
        if bs.iter().product::<usize>() != k {
            return Err(Error::dim("add_bias", &xs, &bs));
        }
        let bias = self.data(b).to_vec();
        let mut data = self.data(x).to_vec();
        data.chunks_mut(k).for_each(|row| row.iter_mut().zip(&bias).for_each(|(r, b)| *r += b));
        let value = Tensor::from_parts(xs, data);
        Ok(self.push(
            value,
            &[x, b],
            Box::new(move |g, _, _, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![0.0; k];
                    g.chunks(k).for_each(|row| acc.iter_mut().zip(row).for_each(|(a, r)| *a += r));
                    acc
                });
                vec![needs[0].then(|| g.to_vec()), gb]
            }),
        ))
    }

    /// `x * v` with `v` (one value per channel) broadcast along every axis but the last.
    pub fn mul_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xs, vs) = (self.shape(x).to_vec(), self.shape(v).to_vec());
        let k = *xs.last().unwrap();
        if vs.iter().product::<usize>() != k {
            return Err(Error::dim("mul_channels", &xs, &vs));
        }
        let w = self.data(v).to_vec();
        let mut data = self.data(x).to_vec();
        data.chunks_mut(k).for_each(|row| row.iter_mut().zip(&w).for_each(|(r, w)| *r *= w));
        let value = Tensor::from_parts(xs, data);
        Ok(self.push(
            value,
            &[x, v],
            Box::new(move |g, inp, _, needs| {
                let (x, w) = (inp[0].data(), inp[1].data());
                let gx = needs[0].then(|| {
                    let mut out = g.to_vec();
                    out.chunks_mut(k).for_each(|row| row.iter_mut().zip(w).for_each(|(r, w)| *r *= w));
                    out
                });
                let gv = needs[1].then(|| {
                    let mut acc = vec![0.0; k];
                    for (gr, xr) in g.chunks(k).zip(x.chunks(k)) {
                        for c in 0..k {
                            acc[c] += gr[c] * xr[c];
                        }
                    }
                    acc
                });
                vec![gx, gv]
            }),
        ))
    }

    /// Scales row `i` of `x` (shape `[n, k]`) by `w[i]` (shape `[n, 1]`).
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.iter().product::<usize>() != xs[0] {
            return Err(Error::dim("mul_rows", &xs, &ws));
        }
        let k = xs[1];
        let scale = self.data(w).to_vec();
        let mut data = self.data(x).to_vec();
        data.chunks_mut(k).zip(&scale).for_each(|(row, s)| row.iter_mut().for_each(|r| *r *= s));
        let value = Tensor::from_parts(xs, data);
        Ok(self.push(
            value,
            &[x, w],
            Box::new(move |g, inp, _, needs| {
                let (x, w) = (inp[0].data(), inp[1].data());
                let gx = needs[0].then(|| {
                    let mut out = g.to_vec();
                    out.chunks_mut(k).zip(w).for_each(|(row, s)| row.iter_mut().for_each(|r| *r *= s));
                    out
                });
                let gw = needs[1].then(|| {
                    g.chunks(k)
                        .zip(x.chunks(k))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect()
                });
                vec![gx, gw]
            }),
        ))
    }

    // ---------------------------------------------------------------------
    // linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_kernel(self.data(a), self.data(b), m, k, n);
        let value = Tensor::from_parts(vec![m, n], data);
        Ok(self.push(
            value,
            &[a, b],
            Box::new(move |g, inp, _, needs| {
                let (x, y) = (inp[0].data(), inp[1].data());
                // dA = G · Bᵀ, dB = Aᵀ · G
                let ga = needs[0].then(|| {
                    let mut out = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let yrow = &y[p * n..(p + 1) * n];
                            out[i * k + p] = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        }
                    }
                    out
                });
                let gb = needs[1].then(|| {
                    let mut out = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a = x[i * k + p];
                            if a == 0.0 {
                                continue;
                            }
                            out[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(o, g)| *o += a * g);
                        }
                    }
                    out
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("transpose", &s, &[2]));
        }
        let (m, n) = (s[0], s[1]);
        let value = Tensor::from_parts(vec![n, m], transpose_kernel(self.data(a), m, n));
        Ok(self.push(
            value,
            &[a],
            Box::new(move |g, _, _, _| vec![Some(transpose_kernel(g, n, m))]),
        ))
    }

    // ---------------------------------------------------------------------
    // normalisation

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(
            value,
            &[x],
            Box::new(move |g, _, y, _| {
                let y = y.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Layer normalisation over the last axis followed by a per-channel affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().unwrap();
        for p in [gain, bias] {
            if self.value(p).len() != k {
                return Err(Error::dim("layer_norm", &shape, self.shape(p)));
            }
        }
        let (gv, bv) = (self.data(gain).to_vec(), self.data(bias).to_vec());
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(k) {
            let (mean, rstd) = row_stats(row);
            for c in 0..k {
                row[c] = (row[c] - mean) * rstd * gv[c] + bv[c];
            }
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(
            value,
            &[x, gain, bias],
            Box::new(move |g, inp, _, needs| {
                let (x, gain) = (inp[0].data(), inp[1].data());
                let mut gx = needs[0].then(|| vec![0.0; x.len()]);
                let mut gg = needs[1].then(|| vec![0.0; k]);
                let mut gb = needs[2].then(|| vec![0.0; k]);
                let kf = k as f64;
                let mut xhat = vec![0.0; k];
                let mut dxhat = vec![0.0; k];
                for (r, (xr, gr)) in x.chunks(k).zip(g.chunks(k)).enumerate() {
                    let (mean, rstd) = row_stats(xr);
                    for c in 0..k {
                        xhat[c] = (xr[c] - mean) * rstd;
                        dxhat[c] = gr[c] * gain[c];
                    }
                    if let Some(gg) = gg.as_mut() {
                        (0..k).for_each(|c| gg[c] += gr[c] * xhat[c]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        (0..k).for_each(|c| gb[c] += gr[c]);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let m1 = dxhat.iter().sum::<f64>() / kf;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / kf;
                        let dst = &mut gx[r * k..(r + 1) * k];
                        for c in 0..k {
                            dst[c] = rstd * (dxhat[c] - m1 - xhat[c] * m2);
                        }
                    }
                }
                vec![gx, gg, gb]
            }),
        ))
    }

    // ---------------------------------------------------------------------
    // reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        let n = self.value(x).len();
        self.push(
            Tensor::scalar(total),
            &[x],
            Box::new(move |g, _, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", &shape, &[axis]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            &[x],
            Box::new(move |g, _, _, _| {
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        gx[(o * n + j) * inner..(o * n + j + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    // ---------------------------------------------------------------------
    // layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, &[x], Box::new(|g, _, _, _| vec![Some(g.to_vec())])))
    }

    /// `out[i] = x[indices[i]]`; gradients scatter-add back.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != indices.len() {
            return Err(Error::dim("gather", shape, &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::dim("gather", &[bad], &[n]));
        }
        let src = self.data(x);
        let data = indices.iter().map(|&i| src[i]).collect();
        let value = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.push(
            value,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut gx = vec![0.0; n];
                for (gi, &i) in g.iter().zip(&indices) {
                    gx[i] += gi;
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::dim("slice", &shape, &[axis, start, end]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let width = end - start;
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            &[x],
            Box::new(move |g, _, _, _| {
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    gx[(o * n + start) * inner..(o * n + end) * inner]
                        .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &first, s));
            }
            widths.push(s[axis]);
        }
        let total: usize = widths.iter().sum();
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(v)[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            xs,
            Box::new(move |g, _, _, needs| {
                let mut grads: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(outer * w * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gv, &w) in grads.iter_mut().zip(&widths) {
                        gv.extend_from_slice(&g[off..off + w * inner]);
                        off += w * inner;
                    }
                }
                grads.into_iter().zip(needs).map(|(g, &n)| n.then_some(g)).collect()
            }),
        ))
    }

    /// Splits an `[X, Y, C]` map into non-overlapping `bx × by` blocks, giving
    /// `[nblocks, bx·by·C]` with blocks in row-major block order and each
    /// block flattened as `(dx, dy, c)`.
    pub fn unfold_blocks(&mut self, x: Var, bx: usize, by: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let indices = unfold_indices(&shape, bx, by)?;
        let (nb, width) = (indices.len() / (bx * by * shape[2]), bx * by * shape[2]);
        self.gather(x, indices, &[nb, width])
    }

    /// Inverse of [`Graph::unfold_blocks`] back to `[X, Y, C]`.
    pub fn fold_blocks(&mut self, x: Var, map_shape: &[usize], bx: usize, by: usize) -> Result<Var> {
        let fwd = unfold_indices(map_shape, bx, by)?;
        if self.value(x).len() != fwd.len() {
            return Err(Error::dim("fold_blocks", self.shape(x), map_shape));
        }
        let mut inverse = vec![0; fwd.len()];
        for (pos, &src) in fwd.iter().enumerate() {
            inverse[src] = pos;
        }
        self.gather(x, inverse, map_shape)
    }

    // ---------------------------------------------------------------------
    // convolution

    /// 3-D convolution over a channels-last `[X, Y, Z, Cin]` volume with
    /// weight `[kx, ky, kz, Cin, Cout]` and bias `[Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), stride, pad)?;
        if self.value(b).len() != geom.cout {
            return Err(Error::dim("conv3d bias", self.shape(b), &[geom.cout]));
        }
        let out = conv3d_forward(&geom, self.data(x), self.data(w), self.data(b));
        let value = Tensor::from_parts(geom.out_shape().to_vec(), out);
        Ok(self.push(
            value,
            &[x, w, b],
            Box::new(move |g, inp, _, needs| {
                let (gx, gw, gb) = conv3d_backward(&geom, inp[0].data(), inp[1].data(), g, needs);
                vec![gx, gw, gb]
            }),
        ))
    }

    /// 2-D convolution over `[X, Y, Cin]` with weight `[kx, ky, Cin, Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::dim("conv2d", &xs, &ws));
        }
        let x3 = self.reshape(x, &[xs[0], xs[1], 1, xs[2]])?;
        let w3 = self.reshape(w, &[ws[0], ws[1], 1, ws[2], ws[3]])?;
        let y = self.conv3d(x3, w3, b, [stride, stride, 1], [pad, pad, 0])?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1], ys[3]])
    }

    // ---------------------------------------------------------------------
    // losses

    /// Penalty-reduced focal loss on probabilities `pred` against a soft
    /// target map; cells with target exactly 1 are positives.
    pub fn focal_loss(&mut self, pred: Var, target: &Tensor, alpha: f64, beta: f64, clamp: f64) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::dim("focal_loss", self.shape(pred), target.shape()));
        }
        let h = target.data().to_vec();
        let n_pos = h.iter().filter(|&&v| v == 1.0).count().max(1) as f64;
        let p = self.data(pred);
        let total: f64 = p
            .iter()
            .zip(&h)
            .map(|(&p, &h)| {
                let pc = p.clamp(clamp, 1.0 - clamp);
                if h == 1.0 {
                    (1.0 - pc).powf(alpha) * pc.ln()
                } else {
                    (1.0 - h).powf(beta) * pc.powf(alpha) * (1.0 - pc).ln()
                }
            })
            .sum();
        let value = Tensor::scalar(-total / n_pos);
        Ok(self.push(
            value,
            &[pred],
            Box::new(move |g, inp, _, _| {
                let up = -g[0] / n_pos;
                let gx = inp[0]
                    .data()
                    .iter()
                    .zip(&h)
                    .map(|(&p, &h)| {
                        if p < clamp || p > 1.0 - clamp {
                            return 0.0;
                        }
                        let d = if h == 1.0 {
                            -alpha * (1.0 - p).powf(alpha - 1.0) * p.ln() + (1.0 - p).powf(alpha) / p
                        } else {
                            (1.0 - h).powf(beta)
                                * (alpha * p.powf(alpha - 1.0) * (1.0 - p).ln() - p.powf(alpha) / (1.0 - p))
                        };
                        up * d
                    })
                    .collect();
                vec![Some(gx)]
            }),
        ))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let k = row.len() as f64;
    let mean = row.iter().sum::<f64>() / k;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            crow.iter_mut().zip(&b[p * n..(p + 1) * n]).for_each(|(c, b)| *c += av * b);
        }
    }
    c
}

fn transpose_kernel(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Flat source index for each element of the unfolded `[nblocks, bx·by·C]` layout.
pub(crate) fn unfold_indices(shape: &[usize], bx: usize, by: usize) -> Result<Vec<usize>> {
    if shape.len() != 3 || bx == 0 || by == 0 || shape[0] % bx != 0 || shape[1] % by != 0 {
        return Err(Error::Config(format!(
            "cannot split map {shape:?} into {bx}x{by} blocks"
        )));
    }
    let (xn, yn, c) = (shape[0], shape[1], shape[2]);
    let mut idx = Vec::with_capacity(xn * yn * c);
    for bxi in 0..xn / bx {
        for byi in 0..yn / by {
            for dx in 0..bx {
                for dy in 0..by {
                    let base = ((bxi * bx + dx) * yn + byi * by + dy) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    Ok(idx)
}
