//! Forward and adjoint kernels for the dense primitives.
//!
//! All kernels act on flat row-major buffers and are applied independently
//! to every `(t, b)` slice unless noted otherwise.

use crate::tensor::Shape5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn out_extent(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    pub fn out_shape(&self, x: Shape5) -> Option<Shape5> {
        let h = self.out_extent(x.h)?;
        let w = self.out_extent(x.w)?;
        Some(Shape5::new(x.t, x.b, self.c_out, h, w))
    }

    fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }
}

/// Zero-padded cross-correlation. `weight` is `(c_out, c_in/groups, k, k)`.
pub fn conv2d_forward(g: &ConvGeometry, xs: Shape5, x: &[f64], weight: &[f64], ys: Shape5, y: &mut [f64]) {
    let k = g.kernel;
    let cig = g.cin_per_group();
    let cog = g.cout_per_group();
    let (ih, iw, oh, ow) = (xs.h as isize, xs.w as isize, ys.h, ys.w);
    let pad = g.padding as isize;
    let s = g.stride as isize;
    for n in 0..xs.t * xs.b {
        let xin = &x[n * xs.chw()..(n + 1) * xs.chw()];
        let yout = &mut y[n * ys.chw()..(n + 1) * ys.chw()];
        for co in 0..g.c_out {
            let grp = co / cog;
            let yplane = &mut yout[co * ys.plane()..(co + 1) * ys.plane()];
            for cil in 0..cig {
                let ci = grp * cig + cil;
                let xplane = &xin[ci * xs.plane()..(ci + 1) * xs.plane()];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[((co * cig + cil) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky as isize - pad;
                            if iy < 0 || iy >= ih {
                                continue;
                            }
                            let xrow = &xplane[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                            let yrow = &mut yplane[oy * ow..(oy + 1) * ow];
                            for (ox, yv) in yrow.iter_mut().enumerate() {
                                let ix = ox as isize * s + kx as isize - pad;
                                if ix >= 0 && ix < iw {
                                    *yv += wv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv2d_forward`]: accumulates into `dx` and, when given, `dw`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    g: &ConvGeometry,
    xs: Shape5,
    x: &[f64],
    weight: &[f64],
    ys: Shape5,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let k = g.kernel;
    let cig = g.cin_per_group();
    let cog = g.cout_per_group();
    let (ih, iw, oh, ow) = (xs.h as isize, xs.w as isize, ys.h, ys.w);
    let pad = g.padding as isize;
    let s = g.stride as isize;
    let mut dx = dx;
    let mut dw = dw;
    let want_w = dw.is_some();
    for n in 0..xs.t * xs.b {
        let xin = &x[n * xs.chw()..(n + 1) * xs.chw()];
        let dyn_ = &dy[n * ys.chw()..(n + 1) * ys.chw()];
        for co in 0..g.c_out {
            let grp = co / cog;
            let dyplane = &dyn_[co * ys.plane()..(co + 1) * ys.plane()];
            if dyplane.iter().all(|v| *v == 0.0) {
                continue;
            }
            for cil in 0..cig {
                let ci = grp * cig + cil;
                let xoff = n * xs.chw() + ci * xs.plane();
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((co * cig + cil) * k + ky) * k + kx;
                        let wv = weight[widx];
                        let mut wacc = 0.0;
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky as isize - pad;
                            if iy < 0 || iy >= ih {
                                continue;
                            }
                            let rowoff = xoff + iy as usize * xs.w;
                            for ox in 0..ow {
                                let ix = ox as isize * s + kx as isize - pad;
                                if ix < 0 || ix >= iw {
                                    continue;
                                }
                                let d = dyplane[oy * ow + ox];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[rowoff + ix as usize] += wv * d;
                                }
                                if want_w {
                                    wacc += xin[rowoff - n * xs.chw() + ix as usize] * d;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
}

/// Per-pixel affine channel map: `y[:, p] = W x[:, p] + bias`, `W` is `(c_out, c_in)`.
pub fn linear_forward(xs: Shape5, x: &[f64], weight: &[f64], bias: Option<&[f64]>, c_out: usize, y: &mut [f64]) {
    let p = xs.plane();
    let ystep = c_out * p;
    for n in 0..xs.t * xs.b {
        let xin = &x[n * xs.chw()..(n + 1) * xs.chw()];
        let yout = &mut y[n * ystep..(n + 1) * ystep];
        for co in 0..c_out {
            let yrow = &mut yout[co * p..(co + 1) * p];
            if let Some(b) = bias {
                yrow.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..xs.c {
                let wv = weight[co * xs.c + ci];
                if wv == 0.0 {
                    continue;
                }
                let xrow = &xin[ci * p..(ci + 1) * p];
                for (yv, xv) in yrow.iter_mut().zip(xrow) {
                    *yv += wv * xv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    xs: Shape5,
    x: &[f64],
    weight: &[f64],
    c_out: usize,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let p = xs.plane();
    let ystep = c_out * p;
    let mut dx = dx;
    let mut dw = dw;
    let mut db = db;
    for n in 0..xs.t * xs.b {
        let xin = &x[n * xs.chw()..(n + 1) * xs.chw()];
        let dyn_ = &dy[n * ystep..(n + 1) * ystep];
        for co in 0..c_out {
            let dyrow = &dyn_[co * p..(co + 1) * p];
            if let Some(db) = db.as_deref_mut() {
                db[co] += dyrow.iter().sum::<f64>();
            }
            for ci in 0..xs.c {
                let wv = weight[co * xs.c + ci];
                if let Some(dx) = dx.as_deref_mut() {
                    let dxrow = &mut dx[n * xs.chw() + ci * p..n * xs.chw() + (ci + 1) * p];
                    for (d, g) in dxrow.iter_mut().zip(dyrow) {
                        *d += wv * g;
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    let xrow = &xin[ci * p..(ci + 1) * p];
                    dw[co * xs.c + ci] += xrow.iter().zip(dyrow).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }
}

/// How batch-normalization statistics are grouped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnAxes {
    /// One statistic per channel over `(T·B, H, W)`.
    #[default]
    Folded,
    /// One statistic per `(t, c)` over `(B, H, W)`.
    PerTimestep,
}

impl BnAxes {
    pub fn groups(&self, s: Shape5) -> usize {
        match self {
            BnAxes::Folded => s.c,
            BnAxes::PerTimestep => s.t * s.c,
        }
    }

    /// Statistic group of flat index `i`.
    #[inline]
    pub fn group_of(&self, s: Shape5, i: usize) -> usize {
        let c = (i / s.plane()) % s.c;
        match self {
            BnAxes::Folded => c,
            BnAxes::PerTimestep => (i / s.step()) * s.c + c,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub count: usize,
}

pub fn batchnorm_stats(xs: Shape5, x: &[f64], axes: BnAxes, eps: f64) -> BnStats {
    let groups = axes.groups(xs);
    let count = xs.numel() / groups;
    let mut mean = vec![0.0; groups];
    for (i, v) in x.iter().enumerate() {
        mean[axes.group_of(xs, i)] += v;
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; groups];
    for (i, v) in x.iter().enumerate() {
        let g = axes.group_of(xs, i);
        var[g] += (v - mean[g]).powi(2);
    }
    let inv_std = var.iter().map(|v| 1.0 / (v / count as f64 + eps).sqrt()).collect();
    BnStats { mean, inv_std, count }
}

pub fn batchnorm_forward(
    xs: Shape5,
    x: &[f64],
    st: &BnStats,
    axes: BnAxes,
    gamma: &[f64],
    beta: &[f64],
    y: &mut [f64],
) {
    for (i, (yv, xv)) in y.iter_mut().zip(x).enumerate() {
        let g = axes.group_of(xs, i);
        let c = (i / xs.plane()) % xs.c;
        *yv = gamma[c] * (xv - st.mean[g]) * st.inv_std[g] + beta[c];
    }
}

/// Adjoint of batch normalization. With `through_stats` the gradient flows
/// through the batch mean and variance (training mode); otherwise they are
/// treated as constants.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward(
    xs: Shape5,
    x: &[f64],
    st: &BnStats,
    axes: BnAxes,
    gamma: &[f64],
    through_stats: bool,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
) {
    let groups = axes.groups(xs);
    let xhat = |i: usize| {
        let g = axes.group_of(xs, i);
        (x[i] - st.mean[g]) * st.inv_std[g]
    };
    if let Some(dgamma) = dgamma {
        for (i, d) in dy.iter().enumerate() {
            dgamma[(i / xs.plane()) % xs.c] += d * xhat(i);
        }
    }
    if let Some(dbeta) = dbeta {
        for (i, d) in dy.iter().enumerate() {
            dbeta[(i / xs.plane()) % xs.c] += d;
        }
    }
    let Some(dx) = dx else { return };
    if !through_stats {
        for (i, d) in dy.iter().enumerate() {
            let g = axes.group_of(xs, i);
            let c = (i / xs.plane()) % xs.c;
            dx[i] += d * gamma[c] * st.inv_std[g];
        }
        return;
    }
    // dxhat = dy * gamma; dx = inv_std/N * (N dxhat - sum(dxhat) - xhat sum(dxhat xhat))
    let mut sum_d = vec![0.0; groups];
    let mut sum_dx = vec![0.0; groups];
    for (i, d) in dy.iter().enumerate() {
        let g = axes.group_of(xs, i);
        let c = (i / xs.plane()) % xs.c;
        let dxh = d * gamma[c];
        sum_d[g] += dxh;
        sum_dx[g] += dxh * xhat(i);
    }
    let n = st.count as f64;
    for (i, d) in dy.iter().enumerate() {
        let g = axes.group_of(xs, i);
        let c = (i / xs.plane()) % xs.c;
        let dxh = d * gamma[c];
        dx[i] += st.inv_std[g] / n * (n * dxh - sum_d[g] - xhat(i) * sum_dx[g]);
    }
}

/// `y[t,b,c,h,w] = sum over (h', w') of x[t,b,c,h',w']`.
pub fn spatial_sum_broadcast(xs: Shape5, x: &[f64], y: &mut [f64]) {
    let p = xs.plane();
    for (xp, yp) in x.chunks(p).zip(y.chunks_mut(p)) {
        let s: f64 = xp.iter().sum();
        yp.iter_mut().for_each(|v| *v = s);
    }
}
