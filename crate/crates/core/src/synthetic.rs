//! Cardiac-like synthetic sequences with analytic motion.
//!
//! A textured annulus (myocardium) surrounds a bright disk (blood pool). The
//! motion is a stationary radial velocity
//!
//! ```text
//! v_t(x) = κ_t · f(ρ) · (x − c)/ρ,   κ_t = −ln(1 − a·s(t/T))
//! f(ρ)   = ρ                                  for ρ ≤ r_in
//!        = r_in · exp(−(ρ − r_in)² / 2w²)     beyond
//! ```
//!
//! so the blood pool scales exactly by `1 − a·s` and the wall and background
//! follow with decaying amplitude. Frame `t` is the template sampled at the
//! analytic flow `φ_t = exp(v_t)`; no resampling error enters the images.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::deformation::{DeformationField, VelocityField};
use crate::error::{Error, Result};
use crate::image::{Image, ImageSequence, LabelMask, DEFAULT_SPACING_MM};
use crate::seqio;

/// Geometry and timing of one synthetic subject.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnulusSpec {
    pub cx: f64,
    pub cy: f64,
    pub r_inner: f64,
    pub r_outer: f64,
    /// Peak radial contraction of the blood pool.
    pub a: f64,
    pub tau_es: f64,
    /// Start and end of the diastasis plateau (normalised time).
    pub plateau: (f64, f64),
    pub texture_seed: u64,
    pub noise: f64,
}

impl Default for AnnulusSpec {
    fn default() -> Self {
        Self {
            cx: 32.0,
            cy: 32.0,
            r_inner: 12.0,
            r_outer: 18.0,
            a: 0.25,
            tau_es: 0.35,
            plateau: (0.70, 0.85),
            texture_seed: 0,
            noise: 0.02,
        }
    }
}

/// Plateau level of the contraction profile, as a fraction of the peak.
const PLATEAU_LEVEL: f64 = 0.3;
/// Fraction of the cycle left out at the end of every sequence.
const OMITTED_TAIL: f64 = 0.07;

const BLOOD: f64 = 0.85;
const WALL: f64 = 0.3;
const BACKGROUND: f64 = 0.55;
const EDGE_WIDTH: f64 = 0.6;

impl AnnulusSpec {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let half = h.min(w) as f64 / 2.0;
        if !(0.0 < self.r_inner && self.r_inner < self.r_outer && self.r_outer < half) {
            return Err(Error::InvalidArgument(format!(
                "radii must satisfy 0 < r_inner < r_outer < {half}: got {} / {}",
                self.r_inner, self.r_outer
            )));
        }
        let reach = [self.cx - self.r_outer, self.cy - self.r_outer];
        if reach.iter().any(|&v| v < 0.0) || self.cx + self.r_outer > (w - 1) as f64 || self.cy + self.r_outer > (h - 1) as f64 {
            return Err(Error::InvalidArgument(format!(
                "annulus at ({}, {}) with outer radius {} leaves the {w}x{h} frame",
                self.cx, self.cy, self.r_outer
            )));
        }
        if !(0.0 < self.a && self.a < 1.0) {
            return Err(Error::InvalidArgument(format!("contraction a must lie in (0,1), got {}", self.a)));
        }
        let (p0, p1) = self.plateau;
        if !(0.0 < self.tau_es && self.tau_es < p0 && p0 <= p1 && p1 < 1.0) {
            return Err(Error::InvalidArgument("need 0 < tau_es < plateau start <= plateau end < 1".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::InvalidArgument("noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Contraction profile `s(t̄) ∈ [0,1]`: cosine rise to 1 at ES, cosine
    /// recovery to the plateau, then the atrial phase heading back to 0 at a
    /// cycle end slightly beyond `t̄ = 1`.
    pub fn profile(&self, tbar: f64) -> f64 {
        let (p0, p1) = self.plateau;
        let end = 1.0 / (1.0 - OMITTED_TAIL);
        let cos_step = |u: f64| 0.5 * (1.0 - (PI * u.clamp(0.0, 1.0)).cos());
        if tbar <= self.tau_es {
            cos_step(tbar / self.tau_es)
        } else if tbar <= p0 {
            1.0 - (1.0 - PLATEAU_LEVEL) * cos_step((tbar - self.tau_es) / (p0 - self.tau_es))
        } else if tbar <= p1 {
            PLATEAU_LEVEL
        } else {
            PLATEAU_LEVEL * (1.0 - cos_step((tbar - p1) / (end - p1)))
        }
    }

    /// Velocity magnitude `κ_t` at normalised time `t̄`.
    pub fn kappa(&self, tbar: f64) -> f64 {
        -(1.0 - self.a * self.profile(tbar)).ln()
    }

    /// Radial speed profile `f(ρ)` (unit κ).
    fn radial(&self, rho: f64) -> f64 {
        if rho <= self.r_inner {
            rho
        } else {
            let w = 1.2 * (self.r_outer - self.r_inner);
            self.r_inner * (-(rho - self.r_inner).powi(2) / (2.0 * w * w)).exp()
        }
    }

    /// Flows radius `rho` along `f` for time `kappa`.
    fn flow_radius(&self, rho: f64, kappa: f64) -> f64 {
        if rho <= self.r_inner * (-kappa).exp() {
            return rho * kappa.exp();
        }
        const STEPS: usize = 32;
        let dt = kappa / STEPS as f64;
        let mut r = rho;
        for _ in 0..STEPS {
            let k1 = self.radial(r);
            let k2 = self.radial(r + 0.5 * dt * k1);
            let k3 = self.radial(r + 0.5 * dt * k2);
            let k4 = self.radial(r + dt * k3);
            r += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        r
    }

    /// Analytic `φ(x) = exp(v)(x)` for velocity magnitude `kappa`.
    pub fn map_point(&self, x: f64, y: f64, kappa: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let rho = dx.hypot(dy);
        if rho == 0.0 || kappa == 0.0 {
            return (x, y);
        }
        let s = self.flow_radius(rho, kappa) / rho;
        (self.cx + dx * s, self.cy + dy * s)
    }

    /// Blood-pool radius at normalised time `t̄`.
    pub fn pool_radius(&self, tbar: f64) -> f64 {
        (1.0 - self.a * self.profile(tbar)) * self.r_inner
    }
}

/// Smooth random texture: a handful of plane waves.
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, amplitude: f64) -> Self {
        let waves = (0..5)
            .map(|_| {
                let k = rng.random_range(0.45..1.1);
                let th = rng.random_range(0.0..PI);
                (k * th.cos(), k * th.sin(), rng.random_range(0.0..2.0 * PI), amplitude * rng.random_range(0.5..1.0))
            })
            .collect();
        Self { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.waves.iter().map(|&(kx, ky, ph, amp)| amp * (kx * x + ky * y + ph).sin()).sum()
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z / EDGE_WIDTH).exp())
}

struct Template<'a> {
    spec: &'a AnnulusSpec,
    pool: Texture,
    wall: Texture,
    background: Texture,
}

impl<'a> Template<'a> {
    fn new(spec: &'a AnnulusSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
        Self {
            spec,
            pool: Texture::new(&mut rng, 0.05),
            wall: Texture::new(&mut rng, 0.06),
            background: Texture::new(&mut rng, 0.08),
        }
    }

    /// Intensity at template coordinates `(x, y)`.
    fn at(&self, x: f64, y: f64) -> f64 {
        let s = self.spec;
        let rho = (x - s.cx).hypot(y - s.cy);
        let inside = logistic(s.r_inner - rho);
        let outside = logistic(rho - s.r_outer);
        let pool = BLOOD + self.pool.at(x, y);
        let wall = WALL + self.wall.at(x, y);
        let bg = BACKGROUND + self.background.at(x, y);
        inside * pool + (1.0 - inside) * ((1.0 - outside) * wall + outside * bg)
    }
}

/// One generated subject with its analytic ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub spec: AnnulusSpec,
    pub seed: u64,
    pub sequence: ImageSequence<f32>,
    /// Blood-pool masks for frames `0..=T`; entry 0 is the ED mask.
    pub masks: Vec<LabelMask>,
    /// Ground-truth velocities for frames `1..=T`.
    pub velocities: Vec<VelocityField<f32>>,
    /// Analytic deformations `φ_t` for frames `1..=T`.
    pub deformations: Vec<DeformationField<f32>>,
}

impl SyntheticSequence {
    pub fn ed_mask(&self) -> &LabelMask {
        &self.masks[0]
    }

    /// Frame index with the smallest analytic blood-pool area.
    pub fn es_index(&self) -> usize {
        let t = self.sequence.len_t();
        (0..=t)
            .min_by(|&i, &j| {
                let r = |k: usize| self.spec.pool_radius(k as f64 / t as f64);
                r(i).total_cmp(&r(j))
            })
            .expect("non-empty")
    }

    /// Analytic blood-pool area curve in mm² (`T+1` entries).
    pub fn analytic_volume_curve(&self) -> Vec<f64> {
        let t = self.sequence.len_t();
        let s2 = self.sequence.spacing_mm.powi(2);
        (0..=t)
            .map(|k| PI * self.spec.pool_radius(k as f64 / t as f64).powi(2) * s2)
            .collect()
    }
}

/// Renders frames, masks and ground truth for `spec`.
pub fn generate_sequence(spec: &AnnulusSpec, h: usize, w: usize, t: usize, seed: u64) -> Result<SyntheticSequence> {
    spec.validate(h, w)?;
    if t < 4 {
        return Err(Error::InvalidArgument(format!("synthetic sequences need T >= 4, got {t}")));
    }
    let template = Template::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut frames = Vec::with_capacity(t + 1);
    let mut masks = Vec::with_capacity(t + 1);
    let mut velocities = Vec::with_capacity(t);
    let mut deformations = Vec::with_capacity(t);
    for k in 0..=t {
        let tbar = k as f64 / t as f64;
        let kappa = spec.kappa(tbar);
        let phi = DeformationField::from_fn(h, w, |y, x| {
            let (px, py) = spec.map_point(x as f64, y as f64, kappa);
            (px as f32, py as f32)
        });
        let frame = Image::from_fn(h, w, |y, x| {
            let (px, py) = phi.at(y, x);
            let clean = template.at(px as f64, py as f64);
            // the moving frame is the clean template
            let n = if k == 0 { 0.0 } else { noise.sample(&mut rng) };
            (clean + n) as f32
        });
        let radius = spec.pool_radius(tbar);
        masks.push(LabelMask::from_fn(h, w, |y, x| {
            (x as f64 - spec.cx).hypot(y as f64 - spec.cy) <= radius
        }));
        frames.push(frame);
        if k > 0 {
            velocities.push(VelocityField::from_fn(h, w, DEFAULT_SPACING_MM, |y, x| {
                let (dx, dy) = (x as f64 - spec.cx, y as f64 - spec.cy);
                let rho = dx.hypot(dy);
                if rho == 0.0 {
                    return (0.0, 0.0);
                }
                let m = kappa * spec.radial(rho) / rho;
                ((m * dx) as f32, (m * dy) as f32)
            }));
            deformations.push(phi);
        }
    }
    Ok(SyntheticSequence {
        spec: spec.clone(),
        seed,
        sequence: ImageSequence::new(frames, DEFAULT_SPACING_MM)?,
        masks,
        velocities,
        deformations,
    })
}

/// The noise-free ED template (equals frame 0 of every rendering of `spec`).
pub fn template_image(spec: &AnnulusSpec, h: usize, w: usize) -> Result<Image<f32>> {
    spec.validate(h, w)?;
    let tpl = Template::new(spec);
    Ok(Image::from_fn(h, w, |y, x| tpl.at(x as f64, y as f64) as f32))
}

/// A dataset entry: everything needed to regenerate one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub spec: AnnulusSpec,
    pub seed: u64,
    pub t: usize,
}

/// Draws a random subject for an `h×w` grid.
pub fn sample_spec(rng: &mut impl Rng, h: usize, w: usize) -> AnnulusSpec {
    let scale = h.min(w) as f64 / 64.0;
    let r_inner = rng.random_range(10.0..14.0) * scale;
    AnnulusSpec {
        cx: w as f64 / 2.0 + rng.random_range(-3.0..3.0) * scale,
        cy: h as f64 / 2.0 + rng.random_range(-3.0..3.0) * scale,
        r_inner,
        r_outer: r_inner + rng.random_range(4.0..7.0) * scale,
        a: rng.random_range(0.15..0.35),
        texture_seed: rng.random(),
        ..AnnulusSpec::default()
    }
}

/// Train and test item lists with pairwise-distinct seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPlan {
    pub height: usize,
    pub width: usize,
    pub train: Vec<DatasetItem>,
    pub test: Vec<DatasetItem>,
}

/// Randomises `n_train + n_test` subjects; `t_range` is inclusive.
pub fn plan_dataset(
    n_train: usize,
    n_test: usize,
    h: usize,
    w: usize,
    t_range: (usize, usize),
    master_seed: u64,
) -> Result<DatasetPlan> {
    let (t_lo, t_hi) = t_range;
    if t_lo < 4 || t_hi < t_lo {
        return Err(Error::InvalidArgument(format!("bad T range {t_lo}..={t_hi}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let mut seen = HashSet::new();
    let mut draw = |rng: &mut ChaCha8Rng| {
        let seed = loop {
            let s: u64 = rng.random();
            if seen.insert(s) {
                break s;
            }
        };
        DatasetItem {
            spec: sample_spec(rng, h, w),
            seed,
            t: rng.random_range(t_lo..=t_hi),
        }
    };
    let train = (0..n_train).map(|_| draw(&mut rng)).collect();
    let test = (0..n_test).map(|_| draw(&mut rng)).collect();
    Ok(DatasetPlan {
        height: h,
        width: w,
        train,
        test,
    })
}

impl DatasetPlan {
    pub fn render(&self, item: &DatasetItem) -> Result<SyntheticSequence> {
        generate_sequence(&item.spec, self.height, self.width, item.t, item.seed)
    }
}

/// Written dataset: file paths per split and the manifest location.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

/// Generates and writes the dataset under `outdir` (`train/`, `test/`,
/// `manifest.csv`).
pub fn generate_dataset(
    n_train: usize,
    n_test: usize,
    h: usize,
    w: usize,
    t_range: (usize, usize),
    master_seed: u64,
    outdir: &Path,
) -> Result<DatasetManifest> {
    let plan = plan_dataset(n_train, n_test, h, w, t_range, master_seed)?;
    let mut csv = String::from("split,file,seed,t,cx,cy,r_inner,r_outer,a,texture_seed\n");
    let mut out = DatasetManifest {
        path: outdir.join("manifest.csv"),
        train: Vec::new(),
        test: Vec::new(),
    };
    for (split, items) in [("train", &plan.train), ("test", &plan.test)] {
        let dir = outdir.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, item) in items.iter().enumerate() {
            let s = plan.render(item)?;
            let file = dir.join(format!("{i:04}.mseq"));
            seqio::write_masks(&s.masks, &seqio::mask_path(&file))?;
            seqio::write_mseq(&s.sequence, &file)?;
            let sp = &item.spec;
            csv.push_str(&format!(
                "{split},{split}/{i:04}.mseq,{},{},{},{},{},{},{},{}\n",
                item.seed, item.t, sp.cx, sp.cy, sp.r_inner, sp.r_outer, sp.a, sp.texture_seed
            ));
            if split == "train" {
                out.train.push(file);
            } else {
                out.test.push(file);
            }
        }
    }
    fs::write(&out.path, csv).map_err(|e| Error::io(&out.path, e))?;
    Ok(out)
}

/// Parses a `manifest.csv` back into a plan (extents come from the caller).
pub fn read_manifest(path: &Path, h: usize, w: usize) -> Result<DatasetPlan> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut plan = DatasetPlan {
        height: h,
        width: w,
        train: Vec::new(),
        test: Vec::new(),
    };
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::format(path, format!("line {}: malformed manifest row", n + 1));
        if f.len() != 10 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        let item = DatasetItem {
            seed: f[2].parse().map_err(|_| bad())?,
            t: f[3].parse().map_err(|_| bad())?,
            spec: AnnulusSpec {
                cx: num(4)?,
                cy: num(5)?,
                r_inner: num(6)?,
                r_outer: num(7)?,
                a: num(8)?,
                texture_seed: f[9].parse().map_err(|_| bad())?,
                ..AnnulusSpec::default()
            },
        };
        match f[0] {
            "train" => plan.train.push(item),
            "test" => plan.test.push(item),
            _ => return Err(bad()),
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_shape() {
        let s = AnnulusSpec::default();
        assert_eq!(s.profile(0.0), 0.0);
        assert!((s.profile(0.35) - 1.0).abs() < 1e-12);
        assert_eq!(s.profile(0.75), PLATEAU_LEVEL);
        let end = s.profile(1.0);
        assert!(end > 0.0 && end < PLATEAU_LEVEL);
    }

    #[test]
    fn flow_is_continuous_across_pool_edge() {
        let s = AnnulusSpec::default();
        let k = s.kappa(0.35);
        let edge = s.r_inner * (-k).exp();
        let a = s.flow_radius(edge - 1e-9, k);
        let b = s.flow_radius(edge + 1e-9, k);
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }

    #[test]
    fn rejects_oversized_radii() {
        let s = AnnulusSpec {
            r_outer: 40.0,
            ..AnnulusSpec::default()
        };
        assert!(generate_sequence(&s, 64, 64, 8, 0).is_err());
    }
}
