//! File formats: MSEQ sequences, mask stacks, CSV curves and PGM figures.
//!
//! MSEQ layout (little-endian):
//!
//! ```text
//! "MSEQ1\0" | H u32 | W u32 | T+1 u32 | spacing_mm f32 | flags u32 | (T+1)·H·W f32
//! ```
//!
//! `flags` bit 0 records that a parallel `.mask` file exists. Mask files hold
//! `"MMSK1\0" | H u32 | W u32 | N u32 | N·H·W u8`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::deformation::{jacobian_determinant, DeformationField};
use crate::error::{Error, Result};
use crate::image::{Image, ImageSequence, LabelMask};

const MAGIC: &[u8; 6] = b"MSEQ1\0";
const MASK_MAGIC: &[u8; 6] = b"MMSK1\0";
/// Size of the MSEQ header in bytes.
pub const HEADER_LEN: usize = 6 + 4 * 5;
const MASK_HEADER_LEN: usize = 6 + 4 * 3;
pub const FLAG_HAS_MASK: u32 = 1;

/// `foo.mseq` → `foo.mask`.
pub fn mask_path(seq_path: &Path) -> PathBuf {
    seq_path.with_extension("mask")
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().expect("4 bytes"))
}

pub fn encode_mseq(seq: &ImageSequence<f32>, flags: u32) -> Vec<u8> {
    let (h, w) = seq.extent();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * h * w * seq.frames.len());
    out.extend_from_slice(MAGIC);
    for v in [h as u32, w as u32, seq.frames.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(seq.spacing_mm as f32).to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    for f in &seq.frames {
        for &v in &f.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses MSEQ bytes; `path` is only used in diagnostics.
pub fn decode_mseq(bytes: &[u8], path: &Path) -> Result<(ImageSequence<f32>, u32)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            path,
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[..6] != MAGIC {
        return Err(Error::format(path, format!("bad magic at offset 0: {:?}", &bytes[..6])));
    }
    let (h, w, n) = (u32_at(bytes, 6) as usize, u32_at(bytes, 10) as usize, u32_at(bytes, 14) as usize);
    let spacing = f32::from_le_bytes(bytes[18..22].try_into().expect("4 bytes"));
    let flags = u32_at(bytes, 22);
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::format(path, format!("spacing at offset 18 must be positive, got {spacing}")));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::format(path, format!("empty extent {h}x{w}x{n} at offset 6")));
    }
    let expected = HEADER_LEN + 4 * h * w * n;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes for {h}x{w}x{n}, got {} (payload from offset {HEADER_LEN})", bytes.len()),
        ));
    }
    let frames = bytes[HEADER_LEN..]
        .chunks_exact(4 * h * w)
        .map(|c| {
            let data = c.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            Image::new(h, w, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ImageSequence::new(frames, spacing as f64)?, flags))
}

pub fn write_mseq(seq: &ImageSequence<f32>, path: &Path) -> Result<()> {
    let flags = if mask_path(path).exists() { FLAG_HAS_MASK } else { 0 };
    fs::write(path, encode_mseq(seq, flags)).map_err(|e| Error::io(path, e))
}

pub fn read_mseq(path: &Path) -> Result<ImageSequence<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_mseq(&bytes, path)?.0)
}

pub fn write_masks(masks: &[LabelMask], path: &Path) -> Result<()> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no masks to write".into()))?;
    if masks.iter().any(|m| (m.h, m.w) != (first.h, first.w)) {
        return Err(Error::shape("write_masks", "masks differ in extent".to_string()));
    }
    let mut out = Vec::with_capacity(MASK_HEADER_LEN + masks.len() * first.h * first.w);
    out.extend_from_slice(MASK_MAGIC);
    for v in [first.h as u32, first.w as u32, masks.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for m in masks {
        out.extend_from_slice(&m.data);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_masks(path: &Path) -> Result<Vec<LabelMask>> {
    let b = fs::read(path).map_err(|e| Error::io(path, e))?;
    if b.len() < MASK_HEADER_LEN || &b[..6] != MASK_MAGIC {
        return Err(Error::format(path, "not a mask file (bad magic or short header)".to_string()));
    }
    let (h, w, n) = (u32_at(&b, 6) as usize, u32_at(&b, 10) as usize, u32_at(&b, 14) as usize);
    let expected = MASK_HEADER_LEN + h * w * n;
    if b.len() != expected || h * w == 0 {
        return Err(Error::format(path, format!("expected {expected} bytes for {n} masks of {h}x{w}, got {}", b.len())));
    }
    b[MASK_HEADER_LEN..]
        .chunks_exact(h * w)
        .map(|c| LabelMask::new(h, w, c.to_vec()))
        .collect()
}

/// Binary PGM (P5) with gray values already quantised.
pub fn encode_pgm(w: usize, h: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

fn quantise(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Linear min–max mapping to 0..255.
pub fn image_to_gray(img: &Image<f32>) -> Vec<u8> {
    let (lo, hi) = img.min_max();
    let span = (hi - lo).max(f32::EPSILON) as f64;
    img.data.iter().map(|&v| quantise(255.0 * (v - lo) as f64 / span)).collect()
}

/// Fixed colormap: `gray = 128·det J`, so 1.0 maps to 128 and folds (≤ 0) to 0.
pub fn det_to_gray(det: &Image<f32>) -> Vec<u8> {
    det.data.iter().map(|&v| quantise(128.0 * v as f64)).collect()
}

/// Displacement magnitude scaled so `max_px` maps to 255.
pub fn displacement_to_gray(phi: &DeformationField<f32>, max_px: f64) -> Vec<u8> {
    let u = phi.displacement();
    let n = phi.h * phi.w;
    (0..n)
        .map(|i| quantise(255.0 * (u[i] as f64).hypot(u[n + i] as f64) / max_px.max(1e-12)))
        .collect()
}

pub fn volume_csv(curve: &[f64]) -> String {
    let mut s = String::from("t,volume_mm2\n");
    for (t, v) in curve.iter().enumerate() {
        s.push_str(&format!("{t},{v}\n"));
    }
    s
}

/// Named columns of per-frame metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
            s.push('\n');
        }
        s
    }
}

/// What [`export_figures`] renders.
pub struct FigureSet<'a> {
    pub sequence: &'a ImageSequence<f32>,
    /// Deformations for frames `1..=T`.
    pub deformations: &'a [DeformationField<f32>],
    pub volume_curve: Option<&'a [f64]>,
    pub metrics: Option<&'a MetricsTable>,
}

/// Writes `volume.csv`, `metrics.csv` and per-frame PGMs into `outdir`;
/// returns the written paths.
pub fn export_figures(set: &FigureSet<'_>, outdir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = outdir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    if let Some(c) = set.volume_curve {
        put("volume.csv".into(), volume_csv(c).into_bytes())?;
    }
    if let Some(m) = set.metrics {
        put("metrics.csv".into(), m.to_csv().into_bytes())?;
    }
    let (h, w) = set.sequence.extent();
    let moving = set.sequence.moving();
    let max_disp = set
        .deformations
        .iter()
        .flat_map(|phi| {
            let u = phi.displacement();
            let n = h * w;
            (0..n).map(move |i| (u[i] as f64).hypot(u[n + i] as f64))
        })
        .fold(0.0f64, f64::max);
    for (t, frame) in set.sequence.frames.iter().enumerate() {
        put(format!("frame_{t:03}.pgm"), encode_pgm(w, h, &image_to_gray(frame)))?;
    }
    for (i, phi) in set.deformations.iter().enumerate() {
        let t = i + 1;
        let warped = crate::deformation::warp(moving, phi, crate::deformation::Interp::Bilinear)?;
        put(format!("warped_{t:03}.pgm"), encode_pgm(w, h, &image_to_gray(&warped)))?;
        put(format!("detj_{t:03}.pgm"), encode_pgm(w, h, &det_to_gray(&jacobian_determinant(phi))))?;
        put(format!("disp_{t:03}.pgm"), encode_pgm(w, h, &displacement_to_gray(phi, max_disp)))?;
    }
    Ok(written)
}
