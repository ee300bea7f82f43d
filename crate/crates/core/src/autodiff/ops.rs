//! Elementwise, shape and reduction operations.

use super::{BackwardCtx, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which operand (if any) is broadcast along leading dimensions.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    Lhs,
    Rhs,
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    if a == b {
        return Ok((a.to_vec(), Broadcast::Same));
    }
    if a.len() >= b.len() && a.ends_with(b) {
        return Ok((a.to_vec(), Broadcast::Rhs));
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok((b.to_vec(), Broadcast::Lhs));
    }
    Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}")))
}

fn binary<'t>(
    op: &'static str,
    a: Var<'t>,
    b: Var<'t>,
    f: fn(f64, f64) -> f64,
    // partial derivatives (d/da, d/db) at (a, b)
    df: fn(f64, f64) -> (f64, f64),
) -> Result<Var<'t>> {
    let av = a.value();
    let bv = b.value();
    let (shape, _) = broadcast(op, av.shape(), bv.shape())?;
    let n: usize = shape.iter().product();
    let (na, nb) = (av.numel(), bv.numel());
    let (ad, bd) = (av.data(), bv.data());
    let data: Vec<f64> = (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect();
    let value = Tensor::new(shape, data)?;
    Ok(a.tape.custom(
        value,
        &[a, b],
        Box::new(move |ctx: &BackwardCtx| {
            let (x, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let (na, nb) = (x.len(), y.len());
            let mut ga = ctx.needs[0].then(|| vec![0.0; na]);
            let mut gb = ctx.needs[1].then(|| vec![0.0; nb]);
            for (i, &g) in ctx.grad.iter().enumerate() {
                let (da, db) = df(x[i % na], y[i % nb]);
                if let Some(ga) = ga.as_mut() {
                    ga[i % na] += g * da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[i % nb] += g * db;
                }
            }
            vec![ga, gb]
        }),
    ))
}

fn elementwise<'t>(
    x: Var<'t>,
    f: impl Fn(f64) -> f64,
    // derivative given (input, output)
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'t> {
    let value = x.value().map(f);
    x.unary(
        value,
        Box::new(move |ctx: &BackwardCtx| {
            let g = ctx
                .grad
                .iter()
                .zip(ctx.inputs[0].data())
                .zip(ctx.output.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(g)]
        }),
    )
}

/// Strides for iterating a tensor of `shape` where `axis` is split out.
fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        binary("add", self, other, |a, b| a + b, |_, _| (1.0, 1.0))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        binary("sub", self, other, |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        binary("mul", self, other, |a, b| a * b, |a, b| (b, a))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        binary("div", self, other, |a, b| a / b, |a, b| (1.0 / b, -a / (b * b)))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        elementwise(self, move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        elementwise(self, move |x| x + c, |_, _| 1.0)
    }

    pub fn square(self) -> Var<'t> {
        elementwise(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(self) -> Var<'t> {
        elementwise(self, f64::exp, |_, y| y)
    }

    /// Natural logarithm; every input must be strictly positive.
    pub fn log(self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::invalid("log", format!("non-positive input {bad}")));
        }
        Ok(elementwise(self, f64::ln, |x, _| 1.0 / x))
    }

    pub fn sin(self) -> Var<'t> {
        elementwise(self, f64::sin, |x, _| x.cos())
    }

    pub fn cos(self) -> Var<'t> {
        elementwise(self, f64::cos, |x, _| -x.sin())
    }

    pub fn relu(self) -> Var<'t> {
        elementwise(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        elementwise(
            self,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        elementwise(
            self,
            move |x| x.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().data().iter().sum());
        let n = self.numel();
        self.unary(
            value,
            Box::new(move |ctx: &BackwardCtx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over the listed axes, removing them from the shape.
    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::invalid("sum_axes", format!("axes {axes:?} for shape {shape:?}")));
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let map = reduction_map(&shape, axes);
        let out_n: usize = out_shape.iter().product();
        let mut out = vec![0.0; out_n];
        for (&o, &v) in map.iter().zip(x.data()) {
            out[o] += v;
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.unary(
            value,
            Box::new(move |ctx: &BackwardCtx| {
                vec![Some(map.iter().map(|&o| ctx.grad[o]).collect())]
            }),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = (*self.value()).clone().reshaped(shape.to_vec())?;
        Ok(self.unary(
            value,
            Box::new(|ctx: &BackwardCtx| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let full = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        let n = x.numel();
        Ok(self.unary(
            value,
            Box::new(move |ctx: &BackwardCtx| {
                let mut g = vec![0.0; n];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    let src = o * len * inner;
                    g[base..base + len * inner].copy_from_slice(&ctx.grad[src..src + len * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for {base:?}")));
        }
        for v in &values {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
        }
        let (outer, inner) = outer_inner(&base, axis);
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total / inner;
        let value = Tensor::new(shape, data)?;
        Ok(first.tape.custom(
            value,
            parts,
            Box::new(move |ctx: &BackwardCtx| {
                let mut grads: Vec<Option<Vec<f64>>> = ctx
                    .needs
                    .iter()
                    .zip(&widths)
                    .map(|(&need, &w)| need.then(|| Vec::with_capacity(outer * w)))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (g, &w) in grads.iter_mut().zip(&widths) {
                        if let Some(g) = g {
                            g.extend_from_slice(&ctx.grad[offset..offset + w]);
                        }
                        offset += w;
                    }
                }
                grads
            }),
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        let &[r, c] = x.shape() else {
            return Err(Error::shape("transpose", format!("expected 2-D, got {:?}", x.shape())));
        };
        let value = Tensor::new([c, r], transpose_data(x.data(), r, c))?;
        Ok(self.unary(
            value,
            Box::new(move |ctx: &BackwardCtx| vec![Some(transpose_data(ctx.grad, c, r))]),
        ))
    }

    /// Tile a vector of length `m` into `n` identical rows, `[n×m]`.
    pub fn repeat_rows(self, n: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.ndim() != 1 || n == 0 {
            return Err(Error::shape("repeat_rows", format!("{:?} x{n}", x.shape())));
        }
        let m = x.numel();
        let data = x.data().repeat(n);
        let value = Tensor::new([n, m], data)?;
        Ok(self.unary(
            value,
            Box::new(move |ctx: &BackwardCtx| {
                let mut g = vec![0.0; m];
                for row in ctx.grad.chunks_exact(m) {
                    g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Rows of a 2-D tensor picked by index, `[M×C]`. Indices may repeat.
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let &[n, c] = x.shape() else {
            return Err(Error::shape("gather_rows", format!("expected 2-D, got {:?}", x.shape())));
        };
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of {n}")));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new([index.len(), c], data)?;
        let index = index.to_vec();
        Ok(self.unary(
            value,
            Box::new(move |ctx: &BackwardCtx| {
                let mut g = vec![0.0; n * c];
                for (row, &i) in ctx.grad.chunks_exact(c).zip(&index) {
                    g[i * c..(i + 1) * c].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Max over the point axis of a `[C×N]` tensor. Ties go to the first index.
    pub fn maxpool_over_points(self) -> Result<Var<'t>> {
        let x = self.value();
        let &[c, n] = x.shape() else {
            return Err(Error::shape("maxpool_over_points", format!("{:?}", x.shape())));
        };
        let mut arg = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c);
        for row in x.data().chunks_exact(n) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            out.push(row[best]);
        }
        let value = Tensor::new([c], out)?;
        Ok(self.unary(
            value,
            Box::new(move |ctx: &BackwardCtx| {
                let mut g = vec![0.0; c * n];
                for (ch, &j) in arg.iter().enumerate() {
                    g[ch * n + j] = ctx.grad[ch];
                }
                vec![Some(g)]
            }),
        ))
    }
}

pub(crate) fn transpose_data(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// For every input element, its flat index in the reduced output.
fn reduction_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut out_strides = vec![0usize; shape.len()];
    let mut stride = 1;
    for i in (0..shape.len()).rev() {
        if !axes.contains(&i) {
            out_strides[i] = stride;
            stride *= shape[i];
        }
    }
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}
