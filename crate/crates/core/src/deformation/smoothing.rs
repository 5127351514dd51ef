//! Gaussian smoothing with replicated borders, plus exact adjoints.

use crate::scalar::Scalar;

/// Sampled Gaussian truncated at `4σ`, renormalised to unit sum.
pub fn gaussian_kernel<F: Scalar>(sigma: f64) -> Vec<F> {
    assert!(sigma > 0.0, "sigma must be positive");
    let radius = (4.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| F::of(v / total)).collect()
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Convolves `count` interleaved lines of length `n` (element `i` of line `l`
/// at `l_base(l) + i*stride`) with `kernel`, replicate-padded.
fn lines_forward<F: Scalar>(
    src: &[F],
    dst: &mut [F],
    kernel: &[F],
    n: usize,
    stride: usize,
    bases: impl Iterator<Item = usize>,
) {
    let r = (kernel.len() / 2) as isize;
    for base in bases {
        for i in 0..n {
            let mut acc = F::zero();
            for (j, &kv) in kernel.iter().enumerate() {
                let s = clamp_index(i as isize + j as isize - r, n);
                acc += kv * src[base + s * stride];
            }
            dst[base + i * stride] = acc;
        }
    }
}

fn lines_adjoint<F: Scalar>(
    gout: &[F],
    gin: &mut [F],
    kernel: &[F],
    n: usize,
    stride: usize,
    bases: impl Iterator<Item = usize>,
) {
    let r = (kernel.len() / 2) as isize;
    for base in bases {
        for i in 0..n {
            let g = gout[base + i * stride];
            for (j, &kv) in kernel.iter().enumerate() {
                let s = clamp_index(i as isize + j as isize - r, n);
                gin[base + s * stride] += kv * g;
            }
        }
    }
}

/// Separable smoothing of every `h×w` plane in `x` (x-pass then y-pass).
pub fn smooth_planes<F: Scalar>(x: &[F], h: usize, w: usize, kernel: &[F]) -> Vec<F> {
    let planes = x.len() / (h * w);
    let mut tmp = vec![F::zero(); x.len()];
    let rows = (0..planes * h).map(|r| r * w);
    lines_forward(x, &mut tmp, kernel, w, 1, rows);
    let mut out = vec![F::zero(); x.len()];
    let cols = (0..planes).flat_map(|p| (0..w).map(move |c| p * h * w + c));
    lines_forward(&tmp, &mut out, kernel, h, w, cols);
    out
}

/// Adjoint of [`smooth_planes`], accumulated into `gin`.
pub fn smooth_planes_adjoint<F: Scalar>(gout: &[F], gin: &mut [F], h: usize, w: usize, kernel: &[F]) {
    let planes = gout.len() / (h * w);
    let mut tmp = vec![F::zero(); gout.len()];
    let cols = (0..planes).flat_map(|p| (0..w).map(move |c| p * h * w + c));
    lines_adjoint(gout, &mut tmp, kernel, h, w, cols);
    let rows = (0..planes * h).map(|r| r * w);
    lines_adjoint(&tmp, gin, kernel, w, 1, rows);
}

/// Smoothing along the leading axis of a `[T, N]` array.
pub fn smooth_leading<F: Scalar>(x: &[F], t: usize, kernel: &[F]) -> Vec<F> {
    let n = x.len() / t;
    let mut out = vec![F::zero(); x.len()];
    lines_forward(x, &mut out, kernel, t, n, 0..n);
    out
}

pub fn smooth_leading_adjoint<F: Scalar>(gout: &[F], gin: &mut [F], t: usize, kernel: &[F]) {
    let n = gout.len() / t;
    lines_adjoint(gout, gin, kernel, t, n, 0..n);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalised_and_truncated() {
        let k = gaussian_kernel::<f64>(2.0);
        assert_eq!(k.len(), 17);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let k = gaussian_kernel::<f64>(1.5);
        assert_eq!(k.len(), 13);
    }

    #[test]
    fn adjoint_identity() {
        // <A x, y> == <x, A^T y>
        let (h, w) = (5, 7);
        let k = gaussian_kernel::<f64>(1.0);
        let x: Vec<f64> = (0..2 * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let y: Vec<f64> = (0..2 * h * w).map(|i| ((i * 13 % 7) as f64) * 0.3).collect();
        let ax = smooth_planes(&x, h, w, &k);
        let mut aty = vec![0.0; x.len()];
        smooth_planes_adjoint(&y, &mut aty, h, w, &k);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
