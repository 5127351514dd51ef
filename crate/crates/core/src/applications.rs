//! Tracking, motion compensation, reconstruction from sparse frames,
//! simulation, motion transport, volume curves, interpolation baselines and
//! evaluation metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::deformation::{
    exponentiate, invert, jacobian_determinant, min_interior_det, warp, DeformationField, Interp, VelocityField,
};
use crate::error::{Error, Result};
use crate::image::{rmse, Image, ImageSequence, LabelMask};
use crate::networks::{ForwardResult, MotionMatrix, MotionModel, SamplingPolicy};
use crate::seqio::MetricsTable;

/// Deformations and codes for frames `1..=T` of one sequence.
#[derive(Clone, Debug)]
pub struct TrackingResult {
    pub deformations: Vec<DeformationField<f32>>,
    pub velocities: Vec<VelocityField<f32>>,
    pub motion: MotionMatrix<f32>,
    pub spacing_mm: f64,
    /// Minimum interior Jacobian determinant per deformation.
    pub min_det: Vec<f64>,
    /// Human-readable notes, e.g. folded deformations.
    pub warnings: Vec<String>,
}

impl TrackingResult {
    pub fn len_t(&self) -> usize {
        self.deformations.len()
    }

    pub fn is_diffeomorphic(&self) -> bool {
        self.min_det.iter().all(|&d| d > 0.0)
    }

    fn from_forward(fr: ForwardResult<f32>, spacing_mm: f64) -> Self {
        let mut warnings = Vec::new();
        let min_det: Vec<f64> = fr
            .deformations
            .iter()
            .enumerate()
            .map(|(i, phi)| {
                let m = min_interior_det(phi) as f64;
                if !(m > 0.0) {
                    warnings.push(format!("frame {}: min det J = {m:.4} (folding)", i + 1));
                }
                m
            })
            .collect();
        for w in &warnings {
            log::warn!("{w}");
        }
        Self {
            deformations: fr.deformations,
            velocities: fr.velocities,
            motion: fr.motion,
            spacing_mm,
            min_det,
            warnings,
        }
    }
}

fn check_extent(seq_extent: (usize, usize), model: &MotionModel<f32>) -> Result<()> {
    let c = &model.config;
    if seq_extent != (c.height, c.width) {
        return Err(Error::shape(
            "application",
            format!("sequence is {}x{}, model expects {}x{}", seq_extent.0, seq_extent.1, c.height, c.width),
        ));
    }
    Ok(())
}

/// Posterior-mean tracking of every frame against `I_0`.
pub fn track(seq: &ImageSequence<f32>, model: &MotionModel<f32>) -> Result<TrackingResult> {
    model.ensure_usable()?;
    check_extent(seq.extent(), model)?;
    if seq.len_t() == 0 {
        return Err(Error::InvalidArgument("tracking needs at least one fixed frame".into()));
    }
    // the generator is never consulted for posterior means
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fr = model.forward(seq, &SamplingPolicy::mean(seq.len_t()), &mut rng)?;
    Ok(TrackingResult::from_forward(fr, seq.spacing_mm))
}

/// Warps frame `t` by `exp(−v_t)`; frame 0 is kept.
pub fn compensate(seq: &ImageSequence<f32>, tr: &TrackingResult, exp_steps: u32) -> Result<ImageSequence<f32>> {
    if tr.len_t() != seq.len_t() {
        return Err(Error::shape("compensate", format!("T={} vs tracking of {}", seq.len_t(), tr.len_t())));
    }
    let mut frames = vec![seq.moving().clone()];
    for (frame, v) in seq.frames[1..].iter().zip(&tr.velocities) {
        frames.push(warp(frame, &invert(v, exp_steps)?, Interp::Bilinear)?);
    }
    ImageSequence::new(frames, seq.spacing_mm)
}

/// How unobserved time steps are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconMode {
    /// Zero latent (prior mean).
    Mean,
    /// Prior draws.
    Stochastic,
}

impl std::str::FromStr for ReconMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "stochastic" => Ok(Self::Stochastic),
            _ => Err(Error::InvalidArgument(format!("mode must be mean or stochastic, got {s:?}"))),
        }
    }
}

/// Reconstructs all `T` deformations from the frames listed in `observed`
/// (indices into `0..=T`, must contain 0). Frames outside the set are never read.
pub fn reconstruct_frames(
    moving: &Image<f32>,
    frames: &[Option<&Image<f32>>],
    model: &MotionModel<f32>,
    mode: ReconMode,
    seed: u64,
    spacing_mm: f64,
) -> Result<TrackingResult> {
    model.ensure_usable()?;
    check_extent((moving.h, moving.w), model)?;
    let observed: Vec<bool> = frames.iter().map(Option::is_some).collect();
    let policy = SamplingPolicy::observed(&observed, mode == ReconMode::Stochastic);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fr = model.forward_frames(moving, frames, &policy, &mut rng)?;
    Ok(TrackingResult::from_forward(fr, spacing_mm))
}

/// [`reconstruct_frames`] on a full sequence restricted to `observed`.
pub fn reconstruct(
    seq: &ImageSequence<f32>,
    observed: &[usize],
    model: &MotionModel<f32>,
    mode: ReconMode,
    seed: u64,
) -> Result<TrackingResult> {
    let t = seq.len_t();
    if !observed.contains(&0) {
        return Err(Error::InvalidArgument("observed set must contain the moving frame 0".into()));
    }
    if let Some(&bad) = observed.iter().find(|&&i| i > t) {
        return Err(Error::InvalidArgument(format!("observed index {bad} beyond T={t}")));
    }
    let frames: Vec<Option<&Image<f32>>> = (1..=t)
        .map(|i| observed.contains(&i).then(|| &seq.frames[i]))
        .collect();
    reconstruct_frames(seq.moving(), &frames, model, mode, seed, seq.spacing_mm)
}

/// Motion simulation from the moving frame alone.
pub fn simulate(
    moving: &Image<f32>,
    t: usize,
    model: &MotionModel<f32>,
    mode: ReconMode,
    seed: u64,
    spacing_mm: f64,
) -> Result<TrackingResult> {
    if t == 0 {
        return Err(Error::InvalidArgument("simulation needs T >= 1".into()));
    }
    reconstruct_frames(moving, &vec![None; t], model, mode, seed, spacing_mm)
}

/// Decodes a motion matrix from another sequence against `target`.
pub fn transport(
    motion: &MotionMatrix<f32>,
    target: &Image<f32>,
    model: &MotionModel<f32>,
    spacing_mm: f64,
) -> Result<TrackingResult> {
    model.ensure_usable()?;
    check_extent((target.h, target.w), model)?;
    let fr = model.decode_motion(motion, target)?;
    Ok(TrackingResult::from_forward(fr, spacing_mm))
}

/// Per-frame areas (mm²) of the warped ED mask; `T+1` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeCurve {
    pub areas_mm2: Vec<f64>,
}

/// Warps a mask's indicator bilinearly and thresholds at 0.5.
pub fn warp_mask(mask: &LabelMask, phi: &DeformationField<f32>) -> Result<LabelMask> {
    let w = warp(&mask.indicator::<f32>(), phi, Interp::Bilinear)?;
    Ok(LabelMask::from_fn(mask.h, mask.w, |y, x| w.at(y, x) >= 0.5))
}

pub fn volume_curve(mask0: &LabelMask, deformations: &[DeformationField<f32>], spacing_mm: f64) -> Result<VolumeCurve> {
    if mask0.count() == 0 {
        log::warn!("empty mask: volume curve is identically zero");
    }
    let px = spacing_mm * spacing_mm;
    let mut areas_mm2 = vec![mask0.count() as f64 * px];
    for phi in deformations {
        if (phi.h, phi.w) != (mask0.h, mask0.w) {
            return Err(Error::shape("volume_curve", "mask and deformation grids differ".to_string()));
        }
        areas_mm2.push(warp_mask(mask0, phi)?.count() as f64 * px);
    }
    Ok(VolumeCurve { areas_mm2 })
}

/// Interpolation used by [`interp_baseline`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Linear,
    /// Not-a-knot cubic spline (reproduces cubic polynomials).
    Cubic,
    /// Natural cubic spline (zero curvature at the end knots).
    NaturalCubic,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cubic" => Ok(Self::Cubic),
            "natural" => Ok(Self::NaturalCubic),
            _ => Err(Error::InvalidArgument(format!("baseline must be linear, cubic or natural, got {s:?}"))),
        }
    }
}

/// Weights `W[q][k]` such that the interpolant at `queries[q]` is `Σ_k W[q][k]·y_k`.
/// Queries outside the knot span hold the nearest end value.
pub fn interpolation_weights(knots: &[f64], queries: &[f64], method: Interpolation) -> Result<Vec<Vec<f64>>> {
    let n = knots.len();
    if n == 0 || knots.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("knots must be non-empty and strictly increasing".into()));
    }
    let method = match method {
        Interpolation::Linear => Interpolation::Linear,
        _ if n < 4 => {
            log::warn!("cubic baseline needs >= 4 knots, got {n}: using linear");
            Interpolation::Linear
        }
        m => m,
    };
    let unit = |k: usize| -> Vec<f64> { (0..n).map(|i| f64::from(i == k)).collect() };
    let mut out = vec![vec![0.0; n]; queries.len()];
    if n == 1 {
        out.iter_mut().for_each(|r| r[0] = 1.0);
        return Ok(out);
    }
    for k in 0..n {
        let y = unit(k);
        let m = match method {
            Interpolation::Linear => None,
            Interpolation::Cubic => Some(spline_second_derivatives(knots, &y, false)?),
            Interpolation::NaturalCubic => Some(spline_second_derivatives(knots, &y, true)?),
        };
        for (q, &x) in queries.iter().enumerate() {
            out[q][k] = eval_piecewise(knots, &y, m.as_deref(), x);
        }
    }
    Ok(out)
}

fn eval_piecewise(knots: &[f64], y: &[f64], m: Option<&[f64]>, x: f64) -> f64 {
    let n = knots.len();
    if x <= knots[0] {
        return y[0];
    }
    if x >= knots[n - 1] {
        return y[n - 1];
    }
    let i = knots.partition_point(|&k| k <= x) - 1;
    let h = knots[i + 1] - knots[i];
    let (a, b) = ((knots[i + 1] - x) / h, (x - knots[i]) / h);
    let lin = a * y[i] + b * y[i + 1];
    match m {
        None => lin,
        Some(m) => lin + ((a * a * a - a) * m[i] + (b * b * b - b) * m[i + 1]) * h * h / 6.0,
    }
}

/// Second derivatives at the knots: natural or not-a-knot end conditions.
fn spline_second_derivatives(x: &[f64], y: &[f64], natural: bool) -> Result<Vec<f64>> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let mut a = vec![vec![0.0; n]; n];
    let mut rhs = vec![0.0; n];
    for i in 1..n - 1 {
        a[i][i - 1] = h[i - 1];
        a[i][i] = 2.0 * (h[i - 1] + h[i]);
        a[i][i + 1] = h[i];
        rhs[i] = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
    }
    if natural {
        a[0][0] = 1.0;
        a[n - 1][n - 1] = 1.0;
    } else {
        // third derivative continuous across the second and second-to-last knots
        a[0][0] = h[1];
        a[0][1] = -(h[0] + h[1]);
        a[0][2] = h[0];
        a[n - 1][n - 3] = h[n - 2];
        a[n - 1][n - 2] = -(h[n - 3] + h[n - 2]);
        a[n - 1][n - 1] = h[n - 3];
    }
    solve_dense(a, rhs)
}

fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        if a[piv][col].abs() < 1e-14 {
            return Err(Error::Numerical("singular spline system".into()));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Ok(x)
}

/// Velocities at frames `1..=t` interpolated per pixel and component from
/// `known` (frame index, velocity). Frame 0 is an implicit zero knot unless given.
pub fn interp_baseline(
    known: &[(usize, VelocityField<f32>)],
    t: usize,
    method: Interpolation,
) -> Result<Vec<VelocityField<f32>>> {
    let first = &known
        .first()
        .ok_or_else(|| Error::InvalidArgument("interpolation needs at least one known velocity".into()))?
        .1;
    let (h, w, spacing) = (first.h, first.w, first.spacing_mm);
    let mut knots: Vec<(usize, &VelocityField<f32>)> = known.iter().map(|(i, v)| (*i, v)).collect();
    let zero = VelocityField::zeros(h, w);
    if !knots.iter().any(|&(i, _)| i == 0) {
        knots.push((0, &zero));
    }
    knots.sort_by_key(|&(i, _)| i);
    if knots.windows(2).any(|k| k[0].0 == k[1].0) {
        return Err(Error::InvalidArgument("duplicate knot times".into()));
    }
    if knots.iter().any(|(_, v)| (v.h, v.w) != (h, w)) {
        return Err(Error::shape("interp_baseline", "velocity grids differ".to_string()));
    }
    let xs: Vec<f64> = knots.iter().map(|&(i, _)| i as f64).collect();
    let qs: Vec<f64> = (1..=t).map(|i| i as f64).collect();
    let wts = interpolation_weights(&xs, &qs, method)?;
    Ok(wts
        .iter()
        .map(|row| {
            let mut data = vec![0.0f64; 2 * h * w];
            for (wk, (_, v)) in row.iter().zip(&knots) {
                if *wk != 0.0 {
                    for (d, &s) in data.iter_mut().zip(&v.data) {
                        *d += wk * s as f64;
                    }
                }
            }
            VelocityField {
                h,
                w,
                data: data.into_iter().map(|x| x as f32).collect(),
                spacing_mm: spacing,
            }
        })
        .collect())
}

/// Interpolated velocities exponentiated into deformations.
pub fn baseline_deformations(
    known: &[(usize, VelocityField<f32>)],
    t: usize,
    method: Interpolation,
    exp_steps: u32,
) -> Result<Vec<DeformationField<f32>>> {
    interp_baseline(known, t, method)?
        .iter()
        .map(|v| exponentiate(v, exp_steps))
        .collect()
}

/// Dice overlap; two empty masks score 1.
pub fn dice(a: &LabelMask, b: &LabelMask) -> f64 {
    assert_eq!((a.h, a.w), (b.h, b.w), "dice needs matching grids");
    let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x != 0 && **y != 0).count();
    let total = a.count() + b.count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Foreground pixels with at least one 8-neighbour outside the mask (or the grid).
pub fn boundary_pixels(m: &LabelMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..m.h {
        for x in 0..m.w {
            if !m.inside(y, x) {
                continue;
            }
            let edge = (-1i64..=1).any(|dy| {
                (-1i64..=1).any(|dx| {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    yy < 0 || xx < 0 || yy >= m.h as i64 || xx >= m.w as i64 || !m.inside(yy as usize, xx as usize)
                })
            });
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// 95th-percentile symmetric boundary distance in mm (nearest-rank percentile).
/// Zero for two empty masks, infinite when exactly one is empty.
pub fn hd95(a: &LabelMask, b: &LabelMask, spacing_mm: f64) -> f64 {
    let (pa, pb) = (boundary_pixels(a), boundary_pixels(b));
    match (pa.is_empty(), pb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return f64::INFINITY,
        _ => {}
    }
    let nearest = |p: (usize, usize), set: &[(usize, usize)]| -> f64 {
        set.iter()
            .map(|q| {
                let (dy, dx) = (p.0 as f64 - q.0 as f64, p.1 as f64 - q.1 as f64);
                dy * dy + dx * dx
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    };
    let mut d: Vec<f64> = pa.iter().map(|&p| nearest(p, &pb)).chain(pb.iter().map(|&p| nearest(p, &pa))).collect();
    d.sort_by(f64::total_cmp);
    percentile_nearest_rank(&d, 0.95) * spacing_mm
}

/// Nearest-rank percentile of sorted data.
pub fn percentile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Mean Frobenius norm of the forward-difference Jacobian of `u = φ − id`.
pub fn spatial_gradient(phi: &DeformationField<f32>) -> f64 {
    let (h, w) = (phi.h, phi.w);
    let n = h * w;
    let u = phi.displacement();
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let i = y * w + x;
            let mut s = 0.0;
            for p in 0..2 {
                let dx = (u[p * n + i + 1] - u[p * n + i]) as f64;
                let dy = (u[p * n + i + w] - u[p * n + i]) as f64;
                s += dx * dx + dy * dy;
            }
            acc += s.sqrt();
            count += 1;
        }
    }
    acc / count.max(1) as f64
}

/// Mean `‖u_{t+1} − u_t‖` over consecutive deformations and pixels.
pub fn temporal_gradient(deformations: &[DeformationField<f32>]) -> f64 {
    if deformations.len() < 2 {
        return 0.0;
    }
    let us: Vec<Vec<f32>> = deformations.iter().map(DeformationField::displacement).collect();
    let n = deformations[0].h * deformations[0].w;
    let mut acc = 0.0;
    for pair in us.windows(2) {
        for i in 0..n {
            let dx = (pair[1][i] - pair[0][i]) as f64;
            let dy = (pair[1][n + i] - pair[0][n + i]) as f64;
            acc += dx.hypot(dy);
        }
    }
    acc / ((us.len() - 1) * n) as f64
}

/// Endpoint errors `‖u − u_ref‖` (pixels) at the pixels selected by `region`.
pub fn endpoint_errors(
    phi: &DeformationField<f32>,
    reference: &DeformationField<f32>,
    region: Option<&LabelMask>,
) -> Vec<f64> {
    let n = phi.h * phi.w;
    (0..n)
        .filter(|&i| region.is_none_or(|m| m.data[i] != 0))
        .map(|i| {
            let (dx, dy) = (phi.data[i] - reference.data[i], phi.data[n + i] - reference.data[n + i]);
            (dx as f64).hypot(dy as f64)
        })
        .collect()
}

/// Per-frame and aggregate quality of a tracking result.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// RMSE(warped I_0, I_t) per fixed frame.
    pub rmse: Vec<f64>,
    pub spatial_gradient: f64,
    pub temporal_gradient: f64,
    /// Dice(warped ED mask, mask_t) per fixed frame, when masks were given.
    pub dice: Option<Vec<f64>>,
    /// HD95 in mm per fixed frame, when masks were given.
    pub hd95_mm: Option<Vec<f64>>,
    pub min_det: Vec<f64>,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn to_table(&self) -> MetricsTable {
        let mut columns = vec!["t".to_string(), "rmse".into(), "min_det_j".into()];
        if self.dice.is_some() {
            columns.push("dice".into());
            columns.push("hd95_mm".into());
        }
        let rows = (0..self.rmse.len())
            .map(|i| {
                let mut r = vec![(i + 1) as f64, self.rmse[i], self.min_det[i]];
                if let (Some(d), Some(h)) = (&self.dice, &self.hd95_mm) {
                    r.push(d[i]);
                    r.push(h[i]);
                }
                r
            })
            .collect();
        MetricsTable { columns, rows }
    }
}

/// `masks` holds one mask per frame `0..=T` (entry 0 is warped).
pub fn evaluate(tr: &TrackingResult, seq: &ImageSequence<f32>, masks: Option<&[LabelMask]>) -> Result<MetricsReport> {
    let t = seq.len_t();
    if tr.len_t() != t {
        return Err(Error::shape("evaluate", format!("T={t} vs tracking of {}", tr.len_t())));
    }
    let mut rmse_v = Vec::with_capacity(t);
    for (phi, frame) in tr.deformations.iter().zip(&seq.frames[1..]) {
        rmse_v.push(rmse(&warp(seq.moving(), phi, Interp::Bilinear)?, frame));
    }
    let spatial = tr.deformations.iter().map(spatial_gradient).sum::<f64>() / t.max(1) as f64;
    let (dice_v, hd_v) = match masks {
        None => (None, None),
        Some(m) => {
            if m.len() != t + 1 {
                return Err(Error::shape("evaluate", format!("{} masks for {} frames", m.len(), t + 1)));
            }
            let mut dv = Vec::with_capacity(t);
            let mut hv = Vec::with_capacity(t);
            for (phi, target) in tr.deformations.iter().zip(&m[1..]) {
                let warped = warp_mask(&m[0], phi)?;
                dv.push(dice(&warped, target));
                hv.push(hd95(&warped, target, seq.spacing_mm));
            }
            (Some(dv), Some(hv))
        }
    };
    let mut warnings = tr.warnings.clone();
    for (i, phi) in tr.deformations.iter().enumerate() {
        let folded = jacobian_determinant(phi).data.iter().filter(|&&d| d <= 0.0).count();
        if folded > 0 {
            warnings.push(format!("frame {}: {folded} pixels with det J <= 0", i + 1));
        }
    }
    Ok(MetricsReport {
        rmse: rmse_v,
        spatial_gradient: spatial,
        temporal_gradient: temporal_gradient(&tr.deformations),
        dice: dice_v,
        hd95_mm: hd_v,
        min_det: tr.min_det.clone(),
        warnings,
    })
}

/// Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson needs equal lengths");
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Mean absolute difference of two curves.
pub fn curve_mae(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "curve_mae needs equal lengths");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_extremes() {
        let a = LabelMask::from_fn(8, 8, |y, _| y < 4);
        let b = LabelMask::from_fn(8, 8, |y, _| y >= 4);
        assert_eq!(dice(&a, &a), 1.0);
        assert_eq!(dice(&a, &b), 0.0);
        assert_eq!(hd95(&a, &a, 1.5), 0.0);
    }

    #[test]
    fn linear_midpoint_is_exact() {
        let w = interpolation_weights(&[0.0, 10.0], &[5.0], Interpolation::Linear).unwrap();
        assert_eq!(w[0], vec![0.5, 0.5]);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("mean".parse::<ReconMode>().unwrap(), ReconMode::Mean);
        assert!("median".parse::<ReconMode>().is_err());
    }
}
