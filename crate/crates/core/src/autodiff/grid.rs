//! Differentiable trilinear sampling of a dense `[F×D×D×D]` grid.
//!
//! Point coordinate `k` (in `[-1, 1]`) indexes grid axis `k + 1`, with
//! `-1` on the first voxel centre and `+1` on the last. Points outside the
//! cube are clamped onto its surface.

use super::{BackwardCtx, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interpolation stencil of one point along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisStencil {
    pub lo: usize,
    pub t: f64,
    /// d t / d coordinate, zero when clamped.
    pub dt: f64,
}

#[inline]
pub(crate) fn axis_stencil(coord: f64, dim: usize) -> AxisStencil {
    let scale = 0.5 * (dim - 1) as f64;
    let u = (coord + 1.0) * scale;
    let max = (dim - 1) as f64;
    let (u, dt) = if u <= 0.0 {
        (0.0, 0.0)
    } else if u >= max {
        (max, 0.0)
    } else {
        (u, scale)
    };
    let lo = (u.floor() as usize).min(dim - 2);
    AxisStencil { lo, t: u - lo as f64, dt }
}

/// The 8 corner offsets (flat, within one channel) and weights of a point.
#[inline]
pub(crate) fn corners(s: [AxisStencil; 3], dim: usize) -> [(usize, f64); 8] {
    let mut out = [(0, 0.0); 8];
    for (c, slot) in out.iter_mut().enumerate() {
        let (b0, b1, b2) = (c >> 2 & 1, c >> 1 & 1, c & 1);
        let w0 = if b0 == 1 { s[0].t } else { 1.0 - s[0].t };
        let w1 = if b1 == 1 { s[1].t } else { 1.0 - s[1].t };
        let w2 = if b2 == 1 { s[2].t } else { 1.0 - s[2].t };
        let idx = ((s[0].lo + b0) * dim + s[1].lo + b1) * dim + s[2].lo + b2;
        *slot = (idx, w0 * w1 * w2);
    }
    out
}

impl<'t> Var<'t> {
    /// Sample a `[F×D×D×D]` grid at `[N×3]` normalized points, giving `[N×F]`.
    ///
    /// Differentiable with respect to both the grid values and the points.
    pub fn grid_sample_trilinear(self, points: Var<'t>) -> Result<Var<'t>> {
        let (g, p) = (self.value(), points.value());
        let &[f, d0, d1, d2] = g.shape() else {
            return Err(Error::shape("grid_sample_trilinear", format!("grid {:?}", g.shape())));
        };
        if d0 != d1 || d1 != d2 || d0 < 2 {
            return Err(Error::shape("grid_sample_trilinear", format!("grid {:?}", g.shape())));
        }
        let &[n, 3] = p.shape() else {
            return Err(Error::shape("grid_sample_trilinear", format!("points {:?}", p.shape())));
        };
        let d = d0;
        let vol = d * d * d;
        let gd = g.data();
        let mut out = vec![0.0; n * f];
        for (pt, row) in p.data().chunks_exact(3).zip(out.chunks_exact_mut(f)) {
            let st = [0, 1, 2].map(|k| axis_stencil(pt[k], d));
            let cs = corners(st, d);
            for (ch, o) in row.iter_mut().enumerate() {
                let base = ch * vol;
                *o = cs.iter().map(|&(i, w)| w * gd[base + i]).sum();
            }
        }
        let value = Tensor::new([n, f], out)?;
        Ok(self.tape.custom(
            value,
            &[self, points],
            Box::new(move |ctx: &BackwardCtx| {
                let (gd, pd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut dgrid = ctx.needs[0].then(|| vec![0.0; f * vol]);
                let mut dpts = ctx.needs[1].then(|| vec![0.0; n * 3]);
                for (i, (pt, go)) in pd.chunks_exact(3).zip(ctx.grad.chunks_exact(f)).enumerate() {
                    let st = [0, 1, 2].map(|k| axis_stencil(pt[k], d));
                    let cs = corners(st, d);
                    if let Some(dg) = dgrid.as_mut() {
                        for (ch, &g) in go.iter().enumerate() {
                            let base = ch * vol;
                            for &(idx, w) in &cs {
                                dg[base + idx] += w * g;
                            }
                        }
                    }
                    if let Some(dp) = dpts.as_mut() {
                        // d value / d t_k for each corner, then chain through dt.
                        for k in 0..3 {
                            if st[k].dt == 0.0 {
                                continue;
                            }
                            let mut acc = 0.0;
                            for (c, &(idx, _)) in cs.iter().enumerate() {
                                let bits = [c >> 2 & 1, c >> 1 & 1, c & 1];
                                let mut wd = 1.0;
                                for a in 0..3 {
                                    wd *= if a == k {
                                        if bits[a] == 1 { 1.0 } else { -1.0 }
                                    } else if bits[a] == 1 {
                                        st[a].t
                                    } else {
                                        1.0 - st[a].t
                                    };
                                }
                                let dot: f64 = go
                                    .iter()
                                    .enumerate()
                                    .map(|(ch, &g)| g * gd[ch * vol + idx])
                                    .sum();
                                acc += wd * dot;
                            }
                            dp[i * 3 + k] = acc * st[k].dt;
                        }
                    }
                }
                vec![dgrid, dpts]
            }),
        ))
    }
}
