//! Squared local normalised cross-correlation between two images.
//!
//! Windows are square, centred and clipped at the image border; each pixel
//! contributes `cross² / (var_a·var_b + ε)` and the metric is the pixel mean.

use crate::scalar::Scalar;

pub const LCC_EPS: f64 = 1e-5;

/// Clipped box sums over a `(2r+1)²` window.
fn box_sum<F: Scalar>(x: &[F], h: usize, w: usize, r: usize) -> Vec<F> {
    let mut tmp = vec![F::zero(); h * w];
    for y in 0..h {
        let row = &x[y * w..(y + 1) * w];
        // prefix sums per row
        let mut pre = Vec::with_capacity(w + 1);
        pre.push(F::zero());
        let mut acc = F::zero();
        for &v in row {
            acc += v;
            pre.push(acc);
        }
        for xx in 0..w {
            let lo = xx.saturating_sub(r);
            let hi = (xx + r + 1).min(w);
            tmp[y * w + xx] = pre[hi] - pre[lo];
        }
    }
    let mut out = vec![F::zero(); h * w];
    let mut pre = vec![F::zero(); h + 1];
    for xx in 0..w {
        let mut acc = F::zero();
        for y in 0..h {
            acc += tmp[y * w + xx];
            pre[y + 1] = acc;
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r + 1).min(h);
            out[y * w + xx] = pre[hi] - pre[lo];
        }
    }
    out
}

fn window_counts(h: usize, w: usize, r: usize) -> Vec<usize> {
    let span = |i: usize, n: usize| (i + r + 1).min(n) - i.saturating_sub(r);
    (0..h * w).map(|i| span(i / w, h) * span(i % w, w)).collect()
}

struct Moments<F> {
    sa: Vec<F>,
    sb: Vec<F>,
    saa: Vec<F>,
    sbb: Vec<F>,
    sab: Vec<F>,
    n: Vec<usize>,
}

fn moments<F: Scalar>(a: &[F], b: &[F], h: usize, w: usize, r: usize) -> Moments<F> {
    let aa: Vec<F> = a.iter().map(|&v| v * v).collect();
    let bb: Vec<F> = b.iter().map(|&v| v * v).collect();
    let ab: Vec<F> = a.iter().zip(b).map(|(&u, &v)| u * v).collect();
    Moments {
        sa: box_sum(a, h, w, r),
        sb: box_sum(b, h, w, r),
        saa: box_sum(&aa, h, w, r),
        sbb: box_sum(&bb, h, w, r),
        sab: box_sum(&ab, h, w, r),
        n: window_counts(h, w, r),
    }
}

/// Per-pixel (cross, var_a, var_b) from window moments.
#[inline]
fn stats<F: Scalar>(m: &Moments<F>, i: usize) -> (F, F, F, F) {
    let n = F::of_usize(m.n[i]);
    let cross = m.sab[i] - m.sa[i] * m.sb[i] / n;
    let va = (m.saa[i] - m.sa[i] * m.sa[i] / n).max(F::zero());
    let vb = (m.sbb[i] - m.sb[i] * m.sb[i] / n).max(F::zero());
    (n, cross, va, vb)
}

/// Per-pixel squared correlation map.
pub fn lcc_map<F: Scalar>(a: &[F], b: &[F], h: usize, w: usize, window: usize) -> Vec<F> {
    let m = moments(a, b, h, w, window / 2);
    let eps = F::of(LCC_EPS);
    (0..h * w)
        .map(|i| {
            let (_, cross, va, vb) = stats(&m, i);
            cross * cross / (va * vb + eps)
        })
        .collect()
}

/// Mean squared local correlation.
pub fn lcc_forward<F: Scalar>(a: &[F], b: &[F], h: usize, w: usize, window: usize) -> F {
    let map = lcc_map(a, b, h, w, window);
    map.iter().copied().sum::<F>() / F::of_usize(h * w)
}

/// Accumulates `g · ∂lcc/∂a` and `g · ∂lcc/∂b`.
#[allow(clippy::too_many_arguments)]
pub fn lcc_backward<F: Scalar>(
    a: &[F],
    b: &[F],
    h: usize,
    w: usize,
    window: usize,
    g: F,
    ga: Option<&mut [F]>,
    gb: Option<&mut [F]>,
) {
    let r = window / 2;
    let m = moments(a, b, h, w, r);
    let eps = F::of(LCC_EPS);
    let scale = g / F::of_usize(h * w);
    let npx = h * w;
    let (mut ca, mut cb, mut caa, mut cbb, mut cab) = (
        vec![F::zero(); npx],
        vec![F::zero(); npx],
        vec![F::zero(); npx],
        vec![F::zero(); npx],
        vec![F::zero(); npx],
    );
    let two = F::of(2.0);
    for i in 0..npx {
        let (n, cross, va, vb) = stats(&m, i);
        let den = va * vb + eps;
        let d_cross = scale * two * cross / den;
        let q = scale * cross * cross / (den * den);
        // clamped variances carry no gradient
        let d_va = if va > F::zero() { -q * vb } else { F::zero() };
        let d_vb = if vb > F::zero() { -q * va } else { F::zero() };
        cab[i] = d_cross;
        ca[i] = -d_cross * m.sb[i] / n - d_va * two * m.sa[i] / n;
        cb[i] = -d_cross * m.sa[i] / n - d_vb * two * m.sb[i] / n;
        caa[i] = d_va;
        cbb[i] = d_vb;
    }
    let bab = box_sum(&cab, h, w, r);
    if let Some(ga) = ga {
        let ba = box_sum(&ca, h, w, r);
        let baa = box_sum(&caa, h, w, r);
        for q in 0..npx {
            ga[q] += ba[q] + two * a[q] * baa[q] + b[q] * bab[q];
        }
    }
    if let Some(gb) = gb {
        let bb = box_sum(&cb, h, w, r);
        let bbb = box_sum(&cbb, h, w, r);
        for q in 0..npx {
            gb[q] += bb[q] + two * b[q] * bbb[q] + a[q] * bab[q];
        }
    }
}
