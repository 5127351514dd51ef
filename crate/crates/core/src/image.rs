//! Images, label masks and image sequences.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default in-plane pixel spacing in millimetres.
pub const DEFAULT_SPACING_MM: f64 = 1.5;

/// Single-channel 2-D image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<F> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Image<F> {
    pub fn new(h: usize, w: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape("image", format!("{h}x{w} needs {} values, got {}", h * w, data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![F::zero(); h * w],
        }
    }

    /// Builds from `f(row, col)`.
    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Self { h, w, data }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> F {
        self.data[y * self.w + x]
    }

    pub fn to_tensor(&self) -> Tensor<F> {
        Tensor::new(&[1, self.h, self.w], self.data.clone()).expect("image tensor")
    }

    pub fn from_tensor(t: &Tensor<F>) -> Result<Self> {
        match *t.shape() {
            [1, h, w] | [h, w] => Self::new(h, w, t.data().to_vec()),
            ref s => Err(Error::shape("image", format!("expected [1,H,W], got {s:?}"))),
        }
    }

    pub fn cast<G: Scalar>(&self) -> Image<G> {
        Image {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&x| G::of(x.f64())).collect(),
        }
    }

    pub fn min_max(&self) -> (F, F) {
        self.data.iter().fold((F::infinity(), F::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    /// Average pooling by an integer factor (extents must divide).
    pub fn avg_pool(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.h.is_multiple_of(factor) || !self.w.is_multiple_of(factor) {
            return Err(Error::shape("avg_pool", format!("{}x{} not divisible by {factor}", self.h, self.w)));
        }
        let (h, w) = (self.h / factor, self.w / factor);
        let norm = F::of_usize(factor * factor);
        Ok(Self::from_fn(h, w, |y, x| {
            let mut acc = F::zero();
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += self.at(y * factor + dy, x * factor + dx);
                }
            }
            acc / norm
        }))
    }
}

/// Root-mean-square difference of two same-sized images.
pub fn rmse<F: Scalar>(a: &Image<F>, b: &Image<F>) -> f64 {
    assert_eq!((a.h, a.w), (b.h, b.w), "rmse needs matching extents");
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x.f64() - y.f64()).powi(2))
        .sum();
    (s / a.data.len() as f64).sqrt()
}

/// Binary label mask (non-zero = inside).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape("mask", format!("{h}x{w} needs {} values, got {}", h * w, data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(u8::from(f(y, x)));
            }
        }
        Self { h, w, data }
    }

    #[inline]
    pub fn inside(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn indicator<F: Scalar>(&self) -> Image<F> {
        Image {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| if v != 0 { F::one() } else { F::zero() }).collect(),
        }
    }
}

/// Frames `I_0..I_T` of one slice; `I_0` is the moving (reference) frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSequence<F> {
    pub frames: Vec<Image<F>>,
    pub spacing_mm: f64,
}

impl<F: Scalar> ImageSequence<F> {
    pub fn new(frames: Vec<Image<F>>, spacing_mm: f64) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidArgument("sequence needs at least one frame".into()))?;
        if frames.iter().any(|f| f.h != first.h || f.w != first.w) {
            return Err(Error::shape("sequence", "frames differ in extent".to_string()));
        }
        if !(spacing_mm > 0.0) || !spacing_mm.is_finite() {
            return Err(Error::InvalidArgument(format!("pixel spacing must be positive, got {spacing_mm}")));
        }
        Ok(Self { frames, spacing_mm })
    }

    /// Number of fixed frames `T` (frames after the moving one).
    pub fn len_t(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.frames[0].h, self.frames[0].w)
    }

    pub fn moving(&self) -> &Image<F> {
        &self.frames[0]
    }

    pub fn cast<G: Scalar>(&self) -> ImageSequence<G> {
        ImageSequence {
            frames: self.frames.iter().map(Image::cast).collect(),
            spacing_mm: self.spacing_mm,
        }
    }
}
