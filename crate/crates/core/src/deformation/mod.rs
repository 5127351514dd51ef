//! Diffeomorphic deformation algebra on 2-D grids.
//!
//! Velocity fields are stationary (SVF) and measured in pixels. Their
//! exponential is computed by scaling and squaring. Deformation fields store
//! absolute sampling coordinates: warping an image by `φ` reads the image at
//! `φ(x)` for every output pixel `x`.

pub(crate) mod sampling;
pub(crate) mod smoothing;

use std::rc::Rc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::{Image, DEFAULT_SPACING_MM};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use smoothing::gaussian_kernel;

/// Default number of squarings in the exponentiation.
pub const DEFAULT_EXP_STEPS: u32 = 6;

/// Largest scaled velocity (pixels) accepted before squaring begins.
pub const MAX_SCALED_VELOCITY: f64 = 0.5;

/// Stationary velocity field on an `h×w` grid, planar `[2,h,w]` (x then y), pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField<F> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
    pub spacing_mm: f64,
}

/// Absolute sampling coordinates on an `h×w` grid, planar `[2,h,w]` (x then y).
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField<F> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

/// Interpolation used by [`warp`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

impl<F: Scalar> VelocityField<F> {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![F::zero(); 2 * h * w],
            spacing_mm: DEFAULT_SPACING_MM,
        }
    }

    pub fn new(h: usize, w: usize, data: Vec<F>, spacing_mm: f64) -> Result<Self> {
        if data.len() != 2 * h * w {
            return Err(Error::shape("velocity", format!("{h}x{w} needs {} values, got {}", 2 * h * w, data.len())));
        }
        Ok(Self { h, w, data, spacing_mm })
    }

    /// Builds from `f(row, col) -> (vx, vy)`.
    pub fn from_fn(h: usize, w: usize, spacing_mm: f64, mut f: impl FnMut(usize, usize) -> (F, F)) -> Self {
        let n = h * w;
        let mut data = vec![F::zero(); 2 * n];
        for y in 0..h {
            for x in 0..w {
                let (vx, vy) = f(y, x);
                data[y * w + x] = vx;
                data[n + y * w + x] = vy;
            }
        }
        Self { h, w, data, spacing_mm }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (F, F) {
        let i = y * self.w + x;
        (self.data[i], self.data[self.h * self.w + i])
    }

    pub fn scaled(&self, s: F) -> Self {
        Self {
            data: self.data.iter().map(|&v| v * s).collect(),
            ..self.clone()
        }
    }

    pub fn negated(&self) -> Self {
        self.scaled(-F::one())
    }

    /// Largest vector magnitude in pixels.
    pub fn max_norm(&self) -> F {
        let n = self.h * self.w;
        (0..n)
            .map(|i| (self.data[i] * self.data[i] + self.data[n + i] * self.data[n + i]).sqrt())
            .fold(F::zero(), |m, v| if v > m { v } else { m })
    }

    pub fn to_tensor(&self) -> Tensor<F> {
        Tensor::new(&[2, self.h, self.w], self.data.clone()).expect("velocity tensor")
    }

    pub fn from_tensor(t: &Tensor<F>, spacing_mm: f64) -> Result<Self> {
        match *t.shape() {
            [2, h, w] => Self::new(h, w, t.data().to_vec(), spacing_mm),
            ref s => Err(Error::shape("velocity", format!("expected [2,H,W], got {s:?}"))),
        }
    }
}

impl<F: Scalar> DeformationField<F> {
    pub fn identity(h: usize, w: usize) -> Self {
        Self::from_displacement(h, w, &vec![F::zero(); 2 * h * w])
    }

    /// `φ(x) = x + u(x)` for a planar displacement `u`.
    pub fn from_displacement(h: usize, w: usize, u: &[F]) -> Self {
        let n = h * w;
        let mut data = vec![F::zero(); 2 * n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                data[i] = F::of_usize(x) + u[i];
                data[n + i] = F::of_usize(y) + u[n + i];
            }
        }
        Self { h, w, data }
    }

    /// Builds from `f(row, col) -> (x', y')` absolute coordinates.
    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> (F, F)) -> Self {
        let n = h * w;
        let mut data = vec![F::zero(); 2 * n];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = f(y, x);
                data[y * w + x] = px;
                data[n + y * w + x] = py;
            }
        }
        Self { h, w, data }
    }

    /// Displacement `u = φ - id`, planar.
    pub fn displacement(&self) -> Vec<F> {
        let n = self.h * self.w;
        let mut u = self.data.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                let i = y * self.w + x;
                u[i] -= F::of_usize(x);
                u[n + i] -= F::of_usize(y);
            }
        }
        u
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (F, F) {
        let i = y * self.w + x;
        (self.data[i], self.data[self.h * self.w + i])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_steps<F: Scalar>(max_norm: F, steps: u32) -> Result<()> {
    if steps == 0 {
        return Err(Error::InvalidArgument("exponentiation needs at least one squaring".into()));
    }
    if !max_norm.is_finite() {
        return Err(Error::NonFinite("velocity field"));
    }
    let scaled = max_norm.f64() / 2f64.powi(steps as i32);
    if scaled >= MAX_SCALED_VELOCITY {
        return Err(Error::Numerical(format!(
            "velocity too large for {steps} squarings: max|v|/2^{steps} = {scaled:.3} px"
        )));
    }
    Ok(())
}

/// `exp(v)` by scaling and squaring.
pub fn exponentiate<F: Scalar>(v: &VelocityField<F>, steps: u32) -> Result<DeformationField<F>> {
    if v.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("velocity field"));
    }
    check_steps(v.max_norm(), steps)?;
    let s = F::of(2f64.powi(-(steps as i32)));
    let mut u: Vec<F> = v.data.iter().map(|&x| x * s).collect();
    for _ in 0..steps {
        u = sampling::compose_forward(&u, &u, v.h, v.w);
    }
    Ok(DeformationField::from_displacement(v.h, v.w, &u))
}

/// `exp(-v)`, the inverse diffeomorphism of `exp(v)` up to discretisation.
pub fn invert<F: Scalar>(v: &VelocityField<F>, steps: u32) -> Result<DeformationField<F>> {
    exponentiate(&v.negated(), steps)
}

/// `(a ∘ b)(x) = a(b(x))`, `a` sampled bilinearly with border clamping.
pub fn compose<F: Scalar>(a: &DeformationField<F>, b: &DeformationField<F>) -> Result<DeformationField<F>> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::shape("compose", format!("{}x{} vs {}x{}", a.h, a.w, b.h, b.w)));
    }
    let (ua, ub) = (a.displacement(), b.displacement());
    let u = sampling::compose_forward(&ua, &ub, a.h, a.w);
    Ok(DeformationField::from_displacement(a.h, a.w, &u))
}

/// `out(x) = image(φ(x))`, border-clamped.
pub fn warp<F: Scalar>(image: &Image<F>, phi: &DeformationField<F>, mode: Interp) -> Result<Image<F>> {
    if (image.h, image.w) != (phi.h, phi.w) {
        return Err(Error::shape("warp", format!("image {}x{} vs field {}x{}", image.h, image.w, phi.h, phi.w)));
    }
    let (h, w) = (image.h, image.w);
    match mode {
        Interp::Bilinear => {
            let u = phi.displacement();
            let data = sampling::warp_forward(&image.data, 1, &u, h, w);
            Image::new(h, w, data)
        }
        Interp::Nearest => {
            let n = h * w;
            let data = (0..n)
                .map(|i| {
                    let px = phi.data[i].max(F::zero()).min(F::of_usize(w - 1)).round();
                    let py = phi.data[n + i].max(F::zero()).min(F::of_usize(h - 1)).round();
                    let (xi, yi) = (px.to_usize().unwrap_or(0), py.to_usize().unwrap_or(0));
                    image.data[yi * w + xi]
                })
                .collect();
            Image::new(h, w, data)
        }
    }
}

/// Per-pixel determinant of the central-difference Jacobian (one-sided at borders).
pub fn jacobian_determinant<F: Scalar>(phi: &DeformationField<F>) -> Image<F> {
    let (h, w) = (phi.h, phi.w);
    let n = h * w;
    let d = |plane: usize, y: usize, x: usize, along_x: bool| -> F {
        let at = |yy: usize, xx: usize| phi.data[plane * n + yy * w + xx];
        if along_x {
            if w < 2 {
                return F::zero();
            }
            match x {
                0 => at(y, 1) - at(y, 0),
                _ if x == w - 1 => at(y, x) - at(y, x - 1),
                _ => (at(y, x + 1) - at(y, x - 1)) * F::of(0.5),
            }
        } else {
            if h < 2 {
                return F::zero();
            }
            match y {
                0 => at(1, x) - at(0, x),
                _ if y == h - 1 => at(y, x) - at(y - 1, x),
                _ => (at(y + 1, x) - at(y - 1, x)) * F::of(0.5),
            }
        }
    };
    Image::from_fn(h, w, |y, x| {
        let (a, b) = (d(0, y, x, true), d(0, y, x, false));
        let (c, e) = (d(1, y, x, true), d(1, y, x, false));
        a * e - b * c
    })
}

/// Smallest determinant over pixels at least one pixel away from the border.
pub fn min_interior_det<F: Scalar>(phi: &DeformationField<F>) -> F {
    let jac = jacobian_determinant(phi);
    let mut m = F::infinity();
    for y in 1..phi.h.saturating_sub(1) {
        for x in 1..phi.w.saturating_sub(1) {
            m = m.min(jac.at(y, x));
        }
    }
    m
}

/// Separable spatial Gaussian with `σ` given in millimetres (converted by the field's spacing).
pub fn smooth_spatial<F: Scalar>(v: &VelocityField<F>, sigma_mm: f64) -> Result<VelocityField<F>> {
    if !(sigma_mm > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma_mm}")));
    }
    let k = gaussian_kernel::<F>(sigma_mm / v.spacing_mm);
    Ok(VelocityField {
        data: smoothing::smooth_planes(&v.data, v.h, v.w, &k),
        ..v.clone()
    })
}

/// Gaussian along the time axis with `σ` in frames; replicated ends.
pub fn smooth_temporal<F: Scalar>(stack: &[VelocityField<F>], sigma_frames: f64) -> Result<Vec<VelocityField<F>>> {
    if !(sigma_frames > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma_frames}")));
    }
    if stack.len() <= 1 {
        return Ok(stack.to_vec());
    }
    let first = &stack[0];
    if stack.iter().any(|v| (v.h, v.w) != (first.h, first.w)) {
        return Err(Error::shape("smooth_temporal", "fields differ in extent".to_string()));
    }
    let k = gaussian_kernel::<F>(sigma_frames);
    let flat: Vec<F> = stack.iter().flat_map(|v| v.data.iter().copied()).collect();
    let out = smoothing::smooth_leading(&flat, stack.len(), &k);
    let per = first.data.len();
    Ok(out
        .chunks_exact(per)
        .map(|c| VelocityField {
            data: c.to_vec(),
            ..first.clone()
        })
        .collect())
}

/// Graph version of [`exponentiate`] returning the displacement `exp(v) - id`.
pub fn exp_disp<F: Scalar>(g: &mut Graph<F>, v: Var, steps: u32) -> Result<Var> {
    let max = {
        let t = g.value(v);
        let d = t.data();
        let n = d.len() / 2;
        (0..n)
            .map(|i| (d[i] * d[i] + d[n + i] * d[n + i]).sqrt())
            .fold(F::zero(), |m, x| if x > m || x.is_nan() { x } else { m })
    };
    check_steps(max, steps)?;
    let mut u = g.scale(v, F::of(2f64.powi(-(steps as i32))));
    for _ in 0..steps {
        u = g.compose(u, u)?;
    }
    Ok(u)
}

/// Graph version of [`smooth_spatial`] with `σ` in pixels.
pub fn smooth_spatial_graph<F: Scalar>(g: &mut Graph<F>, v: Var, sigma_px: f64) -> Result<Var> {
    g.smooth_planes(v, Rc::new(gaussian_kernel(sigma_px)))
}

/// Graph version of [`smooth_temporal`] on a `[T,2,H,W]` stack.
pub fn smooth_temporal_graph<F: Scalar>(g: &mut Graph<F>, stack: Var, sigma_frames: f64) -> Result<Var> {
    if g.shape(stack)[0] <= 1 {
        return Ok(stack);
    }
    g.smooth_leading(stack, Rc::new(gaussian_kernel(sigma_frames)))
}
