//! Raw forward/backward loops for the layer types used by the networks.
//!
//! Everything here works on flat row-major slices; shape validation happens
//! in the graph layer before these are called.

use crate::scalar::Scalar;

/// Padding mode for strided 2-D convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(n / stride)`, zero padding split top/left-first like TF.
    Same,
    /// No padding; output extent `(n - k) / stride + 1`.
    Valid,
}

/// Geometry of a 2-D convolution `[C,H,W] * [F,C,k,k] -> [F,OH,OW]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_t: usize,
    pub pad_l: usize,
    pub oh: usize,
    pub ow: usize,
}

fn same_extent(n: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = n.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(n);
    (out, total / 2)
}

impl Conv2dGeom {
    pub fn new(c: usize, h: usize, w: usize, f: usize, k: usize, stride: usize, pad: Padding) -> Option<Self> {
        if h == 0 || w == 0 || stride == 0 {
            return None;
        }
        let ((oh, pad_t), (ow, pad_l)) = match pad {
            Padding::Same => (same_extent(h, k, stride), same_extent(w, k, stride)),
            Padding::Valid => {
                if h < k || w < k {
                    return None;
                }
                (((h - k) / stride + 1, 0), ((w - k) / stride + 1, 0))
            }
        };
        Some(Self {
            c,
            h,
            w,
            f,
            k,
            stride,
            pad_t,
            pad_l,
            oh,
            ow,
        })
    }

    /// Output column range `[lo, hi)` whose input column `ox*s + kx - pad_l` is in bounds.
    #[inline]
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        range_for(self.ow, self.w, self.stride, kx as isize - self.pad_l as isize)
    }

    #[inline]
    fn oy_range(&self, ky: usize) -> (usize, usize) {
        range_for(self.oh, self.h, self.stride, ky as isize - self.pad_t as isize)
    }
}

/// Range of `o` in `[0, out)` with `o*s + off` in `[0, n)`.
#[inline]
fn range_for(out: usize, n: usize, s: usize, off: isize) -> (usize, usize) {
    let s_i = s as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s_i - 1) / s_i };
    let hi_num = n as isize - 1 - off;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = ((hi_num / s_i) + 1).min(out as isize);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

pub fn conv2d_forward<F: Scalar>(g: &Conv2dGeom, x: &[F], k: &[F], bias: Option<&[F]>) -> Vec<F> {
    let plane = g.oh * g.ow;
    let mut out = vec![F::zero(); g.f * plane];
    for fo in 0..g.f {
        let o = &mut out[fo * plane..(fo + 1) * plane];
        if let Some(b) = bias {
            o.iter_mut().for_each(|v| *v = b[fo]);
        }
        for ci in 0..g.c {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (oy0, oy1) = g.oy_range(ky);
                for kx in 0..g.k {
                    let wv = k[((fo * g.c + ci) * g.k + ky) * g.k + kx];
                    let (ox0, ox1) = g.ox_range(kx);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad_t;
                        let row = &xin[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut o[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let base = kx as isize - g.pad_l as isize;
                            for ox in ox0..ox1 {
                                orow[ox] += wv * row[(ox as isize + base) as usize];
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * row[ox * g.stride + kx - g.pad_l];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, kernel and bias gradients of a 2-D convolution.
pub fn conv2d_backward<F: Scalar>(
    g: &Conv2dGeom,
    x: &[F],
    k: &[F],
    gout: &[F],
    mut gx: Option<&mut [F]>,
    mut gk: Option<&mut [F]>,
    gb: Option<&mut [F]>,
) {
    let plane = g.oh * g.ow;
    if let Some(gb) = gb {
        for fo in 0..g.f {
            gb[fo] += gout[fo * plane..(fo + 1) * plane].iter().copied().sum::<F>();
        }
    }
    for fo in 0..g.f {
        let go = &gout[fo * plane..(fo + 1) * plane];
        for ci in 0..g.c {
            let xoff = ci * g.h * g.w;
            for ky in 0..g.k {
                let (oy0, oy1) = g.oy_range(ky);
                for kx in 0..g.k {
                    let kidx = ((fo * g.c + ci) * g.k + ky) * g.k + kx;
                    let wv = k[kidx];
                    let (ox0, ox1) = g.ox_range(kx);
                    let mut acc = F::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad_t;
                        let rbase = xoff + iy * g.w;
                        let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                        if let Some(gx) = gx.as_deref_mut() {
                            for ox in ox0..ox1 {
                                gx[rbase + ox * g.stride + kx - g.pad_l] += wv * grow[ox];
                            }
                        }
                        if gk.is_some() {
                            for ox in ox0..ox1 {
                                acc += grow[ox] * x[rbase + ox * g.stride + kx - g.pad_l];
                            }
                        }
                    }
                    if let Some(gk) = gk.as_deref_mut() {
                        gk[kidx] += acc;
                    }
                }
            }
        }
    }
}

/// Geometry of a transposed convolution `[C,H,W] -> [F,OH,OW]`, `OH = (H-1)s - 2p + k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvT2dGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvT2dGeom {
    pub fn new(c: usize, h: usize, w: usize, f: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        let oh = ((h.checked_sub(1)?) * stride + k).checked_sub(2 * pad)?;
        let ow = ((w.checked_sub(1)?) * stride + k).checked_sub(2 * pad)?;
        Some(Self {
            c,
            h,
            w,
            f,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    /// Input index range `[lo, hi)` whose output `i*s + k - pad` lands in `[0, out)`.
    #[inline]
    fn in_range(&self, n_in: usize, n_out: usize, kk: usize) -> (usize, usize) {
        let off = kk as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = n_out as isize - 1 - off;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(n_in as isize);
        if hi <= lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }
}

/// Kernel layout `[F, C, k, k]`.
pub fn conv_t2d_forward<F: Scalar>(g: &ConvT2dGeom, x: &[F], k: &[F], bias: Option<&[F]>) -> Vec<F> {
    let plane = g.oh * g.ow;
    let mut out = vec![F::zero(); g.f * plane];
    for fo in 0..g.f {
        let o = &mut out[fo * plane..(fo + 1) * plane];
        if let Some(b) = bias {
            o.iter_mut().for_each(|v| *v = b[fo]);
        }
        for ci in 0..g.c {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (iy0, iy1) = g.in_range(g.h, g.oh, ky);
                for kx in 0..g.k {
                    let wv = k[((fo * g.c + ci) * g.k + ky) * g.k + kx];
                    let (ix0, ix1) = g.in_range(g.w, g.ow, kx);
                    for iy in iy0..iy1 {
                        let oy = iy * g.stride + ky - g.pad;
                        let row = &xin[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut o[oy * g.ow..(oy + 1) * g.ow];
                        for ix in ix0..ix1 {
                            orow[ix * g.stride + kx - g.pad] += wv * row[ix];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_t2d_backward<F: Scalar>(
    g: &ConvT2dGeom,
    x: &[F],
    k: &[F],
    gout: &[F],
    mut gx: Option<&mut [F]>,
    mut gk: Option<&mut [F]>,
    gb: Option<&mut [F]>,
) {
    let plane = g.oh * g.ow;
    if let Some(gb) = gb {
        for fo in 0..g.f {
            gb[fo] += gout[fo * plane..(fo + 1) * plane].iter().copied().sum::<F>();
        }
    }
    for fo in 0..g.f {
        let go = &gout[fo * plane..(fo + 1) * plane];
        for ci in 0..g.c {
            let xoff = ci * g.h * g.w;
            for ky in 0..g.k {
                let (iy0, iy1) = g.in_range(g.h, g.oh, ky);
                for kx in 0..g.k {
                    let kidx = ((fo * g.c + ci) * g.k + ky) * g.k + kx;
                    let wv = k[kidx];
                    let (ix0, ix1) = g.in_range(g.w, g.ow, kx);
                    let mut acc = F::zero();
                    for iy in iy0..iy1 {
                        let oy = iy * g.stride + ky - g.pad;
                        let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                        let rbase = xoff + iy * g.w;
                        if let Some(gx) = gx.as_deref_mut() {
                            for ix in ix0..ix1 {
                                gx[rbase + ix] += wv * grow[ix * g.stride + kx - g.pad];
                            }
                        }
                        if gk.is_some() {
                            for ix in ix0..ix1 {
                                acc += x[rbase + ix] * grow[ix * g.stride + kx - g.pad];
                            }
                        }
                    }
                    if let Some(gk) = gk.as_deref_mut() {
                        gk[kidx] += acc;
                    }
                }
            }
        }
    }
}

/// Geometry of a centred dilated 1-D convolution `[C,T] * [F,C,k] -> [F,T]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub c: usize,
    pub t: usize,
    pub f: usize,
    pub k: usize,
    pub dilation: usize,
}

impl Conv1dGeom {
    /// Time offset of kernel tap `j`.
    #[inline]
    pub fn offset(&self, j: usize) -> isize {
        (j as isize - (self.k / 2) as isize) * self.dilation as isize
    }

    #[inline]
    fn t_range(&self, j: usize) -> (usize, usize) {
        let off = self.offset(j);
        let lo = (-off).max(0) as usize;
        let hi = (self.t as isize - off.max(0)).max(0) as usize;
        (lo.min(self.t), hi.max(lo.min(self.t)))
    }
}

pub fn conv1d_forward<F: Scalar>(g: &Conv1dGeom, x: &[F], k: &[F], bias: Option<&[F]>) -> Vec<F> {
    let mut out = vec![F::zero(); g.f * g.t];
    for fo in 0..g.f {
        let o = &mut out[fo * g.t..(fo + 1) * g.t];
        if let Some(b) = bias {
            o.iter_mut().for_each(|v| *v = b[fo]);
        }
        for ci in 0..g.c {
            let xin = &x[ci * g.t..(ci + 1) * g.t];
            for j in 0..g.k {
                let wv = k[(fo * g.c + ci) * g.k + j];
                let off = g.offset(j);
                let (t0, t1) = g.t_range(j);
                for t in t0..t1 {
                    o[t] += wv * xin[(t as isize + off) as usize];
                }
            }
        }
    }
    out
}

pub fn conv1d_backward<F: Scalar>(
    g: &Conv1dGeom,
    x: &[F],
    k: &[F],
    gout: &[F],
    mut gx: Option<&mut [F]>,
    mut gk: Option<&mut [F]>,
    gb: Option<&mut [F]>,
) {
    if let Some(gb) = gb {
        for fo in 0..g.f {
            gb[fo] += gout[fo * g.t..(fo + 1) * g.t].iter().copied().sum::<F>();
        }
    }
    for fo in 0..g.f {
        let go = &gout[fo * g.t..(fo + 1) * g.t];
        for ci in 0..g.c {
            for j in 0..g.k {
                let kidx = (fo * g.c + ci) * g.k + j;
                let off = g.offset(j);
                let (t0, t1) = g.t_range(j);
                let mut acc = F::zero();
                for t in t0..t1 {
                    let src = ci * g.t + (t as isize + off) as usize;
                    if let Some(gx) = gx.as_deref_mut() {
                        gx[src] += k[kidx] * go[t];
                    }
                    acc += go[t] * x[src];
                }
                if let Some(gk) = gk.as_deref_mut() {
                    gk[kidx] += acc;
                }
            }
        }
    }
}

/// `y = W x + b` with `W` of shape `[m, n]`.
pub fn dense_forward<F: Scalar>(x: &[F], w: &[F], b: Option<&[F]>, m: usize, n: usize) -> Vec<F> {
    (0..m)
        .map(|i| {
            let row = &w[i * n..(i + 1) * n];
            let dot: F = row.iter().zip(x).map(|(&a, &b)| a * b).sum();
            dot + b.map_or(F::zero(), |b| b[i])
        })
        .collect()
}

pub fn dense_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    gout: &[F],
    m: usize,
    n: usize,
    gx: Option<&mut [F]>,
    gw: Option<&mut [F]>,
    gb: Option<&mut [F]>,
) {
    if let Some(gx) = gx {
        for i in 0..m {
            let gi = gout[i];
            for (gxj, &wij) in gx.iter_mut().zip(&w[i * n..(i + 1) * n]) {
                *gxj += gi * wij;
            }
        }
    }
    if let Some(gw) = gw {
        for i in 0..m {
            let gi = gout[i];
            for (gwij, &xj) in gw[i * n..(i + 1) * n].iter_mut().zip(x) {
                *gwij += gi * xj;
            }
        }
    }
    if let Some(gb) = gb {
        for (gbi, &gi) in gb.iter_mut().zip(gout) {
            *gbi += gi;
        }
    }
}
