//! Dense and convolutional layers.
//!
//! Both convolutions use kernel 4, stride 2, padding 1, so a 2-D layer
//! halves the spatial size and a transposed 3-D layer doubles it.

use super::{BackwardCtx, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

const K: usize = 4;

impl<'t> Var<'t> {
    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), k, 1, b.data(), n, 1, 0.0, &mut c);
        let value = Tensor::new([m, n], c)?;
        Ok(self.tape.custom(
            value,
            &[self, other],
            Box::new(move |ctx: &BackwardCtx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let da = ctx.needs[0].then(|| {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, ctx.grad, n, 1, b, 1, n, 0.0, &mut da);
                    da
                });
                let db = ctx.needs[1].then(|| {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, a, 1, k, ctx.grad, n, 1, 0.0, &mut db);
                    db
                });
                vec![da, db]
            }),
        ))
    }

    /// Fully-connected layer `x·Wᵀ + b` with `W: [out×in]`, `b: [out]`.
    ///
    /// `x` is either `[N×in]` or a single vector `[in]`.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (rows, vector) = match x.shape() {
            [_] => (1, true),
            [r, _] => (*r, false),
            s => return Err(Error::shape("linear", format!("input {s:?}"))),
        };
        let fan_in = *x.shape().last().unwrap();
        let &[fan_out, w_in] = w.shape() else {
            return Err(Error::shape("linear", format!("weight {:?}", w.shape())));
        };
        if w_in != fan_in || b.shape() != [fan_out] {
            return Err(Error::shape(
                "linear",
                format!("x {:?}, W {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
            ));
        }
        let mut y = vec![0.0; rows * fan_out];
        for row in y.chunks_exact_mut(fan_out) {
            row.copy_from_slice(b.data());
        }
        gemm(rows, fan_in, fan_out, x.data(), fan_in, 1, w.data(), 1, fan_in, 1.0, &mut y);
        let shape = if vector { vec![fan_out] } else { vec![rows, fan_out] };
        let value = Tensor::new(shape, y)?;
        Ok(self.tape.custom(
            value,
            &[self, weight, bias],
            Box::new(move |ctx: &BackwardCtx| {
                let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.grad;
                let dx = ctx.needs[0].then(|| {
                    let mut dx = vec![0.0; rows * fan_in];
                    gemm(rows, fan_out, fan_in, g, fan_out, 1, w, fan_in, 1, 0.0, &mut dx);
                    dx
                });
                let dw = ctx.needs[1].then(|| {
                    let mut dw = vec![0.0; fan_out * fan_in];
                    gemm(fan_out, rows, fan_in, g, 1, fan_out, x, fan_in, 1, 0.0, &mut dw);
                    dw
                });
                let db = ctx.needs[2].then(|| {
                    let mut db = vec![0.0; fan_out];
                    for row in g.chunks_exact(fan_out) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    db
                });
                vec![dx, dw, db]
            }),
        ))
    }

    /// Strided 2-D cross-correlation: `[C×H×W]` with kernels `[Co×C×4×4]`
    /// and bias `[Co]` gives `[Co×H/2×W/2]`.
    pub fn conv2d_s2(self, kernels: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, k, b) = (self.value(), kernels.value(), bias.value());
        let &[c_in, h, w] = x.shape() else {
            return Err(Error::shape("conv2d_s2", format!("input {:?}", x.shape())));
        };
        if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid("conv2d_s2", format!("spatial dims {h}x{w} must be even")));
        }
        let c_out = k.shape()[0];
        if k.shape() != [c_out, c_in, K, K] || b.shape() != [c_out] {
            return Err(Error::shape(
                "conv2d_s2",
                format!("input {:?}, kernels {:?}, bias {:?}", x.shape(), k.shape(), b.shape()),
            ));
        }
        let geom = Conv2dGeom { c_in, h, w };
        let (ho, wo) = (h / 2, w / 2);
        let p = ho * wo;
        let r = c_in * K * K;
        let cols = geom.im2col(x.data());
        let mut out = vec![0.0; c_out * p];
        for (o, row) in out.chunks_exact_mut(p).enumerate() {
            row.fill(b.data()[o]);
        }
        gemm(c_out, r, p, k.data(), r, 1, &cols, p, 1, 1.0, &mut out);
        let value = Tensor::new([c_out, ho, wo], out)?;
        Ok(self.tape.custom(
            value,
            &[self, kernels, bias],
            Box::new(move |ctx: &BackwardCtx| {
                let (x, k) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.grad;
                let dx = ctx.needs[0].then(|| {
                    let mut dcols = vec![0.0; r * p];
                    gemm(r, c_out, p, k, 1, r, g, p, 1, 0.0, &mut dcols);
                    geom.col2im(&dcols)
                });
                let dk = ctx.needs[1].then(|| {
                    let cols = geom.im2col(x);
                    let mut dk = vec![0.0; c_out * r];
                    gemm(c_out, p, r, g, p, 1, &cols, 1, p, 0.0, &mut dk);
                    dk
                });
                let db = ctx.needs[2].then(|| g.chunks_exact(p).map(|row| row.iter().sum()).collect());
                vec![dx, dk, db]
            }),
        ))
    }

    /// Strided 3-D transposed convolution: `[Ci×D×D×D]` with kernels
    /// `[Ci×Co×4×4×4]` and bias `[Co]` gives `[Co×2D×2D×2D]`.
    pub fn conv_transpose3d_s2(self, kernels: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, k, b) = (self.value(), kernels.value(), bias.value());
        let &[c_in, d0, d1, d2] = x.shape() else {
            return Err(Error::shape("conv_transpose3d_s2", format!("input {:?}", x.shape())));
        };
        if d0 != d1 || d1 != d2 {
            return Err(Error::shape("conv_transpose3d_s2", format!("non-cubic input {:?}", x.shape())));
        }
        let c_out = k.shape().get(1).copied().unwrap_or(0);
        if k.shape() != [c_in, c_out, K, K, K] || b.shape() != [c_out] {
            return Err(Error::shape(
                "conv_transpose3d_s2",
                format!("input {:?}, kernels {:?}, bias {:?}", x.shape(), k.shape(), b.shape()),
            ));
        }
        let geom = ConvT3dGeom { c_out, d: d0 };
        let q = d0 * d0 * d0;
        let r = c_out * K * K * K;
        // columns[(o,t), q] = sum_c K[c,(o,t)] * X[c,q]
        let mut columns = vec![0.0; r * q];
        gemm(r, c_in, q, k.data(), 1, r, x.data(), q, 1, 0.0, &mut columns);
        let mut out = geom.scatter(&columns);
        let od = 2 * d0;
        let vol = od * od * od;
        for (o, chunk) in out.chunks_exact_mut(vol).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b.data()[o]);
        }
        let value = Tensor::new([c_out, od, od, od], out)?;
        Ok(self.tape.custom(
            value,
            &[self, kernels, bias],
            Box::new(move |ctx: &BackwardCtx| {
                let (x, k) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let dcols = geom.gather(ctx.grad);
                let dx = ctx.needs[0].then(|| {
                    let mut dx = vec![0.0; c_in * q];
                    gemm(c_in, r, q, k, r, 1, &dcols, q, 1, 0.0, &mut dx);
                    dx
                });
                let dk = ctx.needs[1].then(|| {
                    let mut dk = vec![0.0; c_in * r];
                    gemm(c_in, q, r, x, q, 1, &dcols, 1, q, 0.0, &mut dk);
                    dk
                });
                let db = ctx.needs[2].then(|| {
                    ctx.grad.chunks_exact(vol).map(|c| c.iter().sum()).collect()
                });
                vec![dx, dk, db]
            }),
        ))
    }
}

#[derive(Clone, Copy)]
struct Conv2dGeom {
    c_in: usize,
    h: usize,
    w: usize,
}

impl Conv2dGeom {
    /// Source pixel for output (i, j) and kernel tap (ki, kj), if inside the image.
    #[inline]
    fn source(&self, i: usize, j: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (2 * i + ki).checked_sub(1)?;
        let x = (2 * j + kj).checked_sub(1)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (ho, wo) = (self.h / 2, self.w / 2);
        let p = ho * wo;
        let mut cols = vec![0.0; self.c_in * K * K * p];
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..K {
                for kj in 0..K {
                    let row = ((c * K + ki) * K + kj) * p;
                    for i in 0..ho {
                        for j in 0..wo {
                            if let Some((y, xx)) = self.source(i, j, ki, kj) {
                                cols[row + i * wo + j] = plane[y * self.w + xx];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (ho, wo) = (self.h / 2, self.w / 2);
        let p = ho * wo;
        let mut x = vec![0.0; self.c_in * self.h * self.w];
        for c in 0..self.c_in {
            let base = c * self.h * self.w;
            for ki in 0..K {
                for kj in 0..K {
                    let row = ((c * K + ki) * K + kj) * p;
                    for i in 0..ho {
                        for j in 0..wo {
                            if let Some((y, xx)) = self.source(i, j, ki, kj) {
                                x[base + y * self.w + xx] += cols[row + i * wo + j];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

#[derive(Clone, Copy)]
struct ConvT3dGeom {
    c_out: usize,
    d: usize,
}

impl ConvT3dGeom {
    /// Visit every (column row, input voxel, output voxel) triple that lands inside the output.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let d = self.d;
        let od = 2 * d;
        let q = d * d * d;
        let valid = |qi: usize, t: usize| (2 * qi + t).checked_sub(1).filter(|&o| o < od);
        for o in 0..self.c_out {
            for t0 in 0..K {
                for t1 in 0..K {
                    for t2 in 0..K {
                        let row = ((o * K + t0) * K + t1) * K + t2;
                        for q0 in 0..d {
                            let Some(z0) = valid(q0, t0) else { continue };
                            for q1 in 0..d {
                                let Some(z1) = valid(q1, t1) else { continue };
                                for q2 in 0..d {
                                    let Some(z2) = valid(q2, t2) else { continue };
                                    let qi = (q0 * d + q1) * d + q2;
                                    let oi = ((o * od + z0) * od + z1) * od + z2;
                                    f(row * q + qi, oi, row);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn scatter(&self, columns: &[f64]) -> Vec<f64> {
        let od = 2 * self.d;
        let mut out = vec![0.0; self.c_out * od * od * od];
        self.for_each(|ci, oi, _| out[oi] += columns[ci]);
        out
    }

    fn gather(&self, grad_out: &[f64]) -> Vec<f64> {
        let q = self.d * self.d * self.d;
        let mut cols = vec![0.0; self.c_out * K * K * K * q];
        self.for_each(|ci, oi, _| cols[ci] = grad_out[oi]);
        cols
    }
}
