//! Border-clamped bilinear sampling and its adjoints.
//!
//! Displacement tensors are `[2, H, W]` planar: plane 0 holds the column (x)
//! component, plane 1 the row (y) component, both in pixels.

use crate::scalar::Scalar;

/// Bilinear stencil at a clamped continuous location.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil<F> {
    pub i00: usize,
    pub i01: usize,
    pub i10: usize,
    pub i11: usize,
    pub fx: F,
    pub fy: F,
    /// Location moves freely along x (not clamped), so d/dx is live.
    pub live_x: bool,
    pub live_y: bool,
}

#[inline]
fn axis<F: Scalar>(p: F, n: usize) -> (usize, usize, F, bool) {
    if n == 1 {
        return (0, 0, F::zero(), false);
    }
    let max = F::of_usize(n - 1);
    let (p, live) = if p < F::zero() {
        (F::zero(), false)
    } else if p > max {
        (max, false)
    } else {
        (p, true)
    };
    let lo = p.floor().to_usize().unwrap_or(0).min(n - 2);
    (lo, lo + 1, p - F::of_usize(lo), live)
}

impl<F: Scalar> Stencil<F> {
    #[inline]
    pub fn at(px: F, py: F, h: usize, w: usize) -> Self {
        let (x0, x1, fx, live_x) = axis(px, w);
        let (y0, y1, fy, live_y) = axis(py, h);
        Self {
            i00: y0 * w + x0,
            i01: y0 * w + x1,
            i10: y1 * w + x0,
            i11: y1 * w + x1,
            fx,
            fy,
            live_x,
            live_y,
        }
    }

    #[inline]
    pub fn sample(&self, plane: &[F]) -> F {
        let one = F::one();
        let top = plane[self.i00] * (one - self.fx) + plane[self.i01] * self.fx;
        let bot = plane[self.i10] * (one - self.fx) + plane[self.i11] * self.fx;
        top * (one - self.fy) + bot * self.fy
    }

    /// Partial derivatives of the sampled value w.r.t. the location.
    #[inline]
    pub fn gradient(&self, plane: &[F]) -> (F, F) {
        let one = F::one();
        let (a, b, c, d) = (plane[self.i00], plane[self.i01], plane[self.i10], plane[self.i11]);
        let dx = if self.live_x {
            (one - self.fy) * (b - a) + self.fy * (d - c)
        } else {
            F::zero()
        };
        let dy = if self.live_y {
            (one - self.fx) * (c - a) + self.fx * (d - b)
        } else {
            F::zero()
        };
        (dx, dy)
    }

    /// Scatters `g` into `plane` with the bilinear weights (adjoint of `sample`).
    #[inline]
    pub fn scatter(&self, plane: &mut [F], g: F) {
        let one = F::one();
        plane[self.i00] += g * (one - self.fx) * (one - self.fy);
        plane[self.i01] += g * self.fx * (one - self.fy);
        plane[self.i10] += g * (one - self.fx) * self.fy;
        plane[self.i11] += g * self.fx * self.fy;
    }
}

#[inline]
fn stencil_for<F: Scalar>(disp: &[F], idx: usize, h: usize, w: usize) -> Stencil<F> {
    let n = h * w;
    let (y, x) = (idx / w, idx % w);
    Stencil::at(F::of_usize(x) + disp[idx], F::of_usize(y) + disp[n + idx], h, w)
}

/// `out_c(x) = img_c(x + disp(x))` for every channel of `img: [C,H,W]`.
pub fn warp_forward<F: Scalar>(img: &[F], channels: usize, disp: &[F], h: usize, w: usize) -> Vec<F> {
    let n = h * w;
    let mut out = vec![F::zero(); channels * n];
    for idx in 0..n {
        let st = stencil_for(disp, idx, h, w);
        for c in 0..channels {
            out[c * n + idx] = st.sample(&img[c * n..(c + 1) * n]);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn warp_backward<F: Scalar>(
    img: &[F],
    channels: usize,
    disp: &[F],
    h: usize,
    w: usize,
    gout: &[F],
    mut gimg: Option<&mut [F]>,
    mut gdisp: Option<&mut [F]>,
) {
    let n = h * w;
    for idx in 0..n {
        let st = stencil_for(disp, idx, h, w);
        let (mut sx, mut sy) = (F::zero(), F::zero());
        for c in 0..channels {
            let g = gout[c * n + idx];
            if let Some(gi) = gimg.as_deref_mut() {
                st.scatter(&mut gi[c * n..(c + 1) * n], g);
            }
            if gdisp.is_some() {
                let (dx, dy) = st.gradient(&img[c * n..(c + 1) * n]);
                sx += g * dx;
                sy += g * dy;
            }
        }
        if let Some(gd) = gdisp.as_deref_mut() {
            gd[idx] += sx;
            gd[n + idx] += sy;
        }
    }
}

/// Displacement of `a ∘ b`: `u(x) = b(x) + a(x + b(x))`.
pub fn compose_forward<F: Scalar>(a: &[F], b: &[F], h: usize, w: usize) -> Vec<F> {
    let mut out = warp_forward(a, 2, b, h, w);
    for (o, &bv) in out.iter_mut().zip(b) {
        *o += bv;
    }
    out
}

pub fn compose_backward<F: Scalar>(
    a: &[F],
    b: &[F],
    h: usize,
    w: usize,
    gout: &[F],
    ga: Option<&mut [F]>,
    gb: Option<&mut [F]>,
) {
    match gb {
        Some(gb) => {
            for (g, &go) in gb.iter_mut().zip(gout) {
                *g += go;
            }
            warp_backward(a, 2, b, h, w, gout, ga, Some(gb));
        }
        None => warp_backward(a, 2, b, h, w, gout, ga, None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamped_locations_have_dead_gradient() {
        let st = Stencil::<f64>::at(-0.5, 1.5, 4, 4);
        assert!(!st.live_x);
        assert!(st.live_y);
        let plane: Vec<f64> = (0..16).map(|i| i as f64).collect();
        // column 0 at row 1.5
        assert!((st.sample(&plane) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn upper_edge_is_reachable() {
        let plane: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let st = Stencil::at(2.0, 2.0, 3, 3);
        assert_eq!(st.sample(&plane), 8.0);
    }
}
