//! Training loop: temporal-dropout sampling, augmentation, Adam, logging and
//! resumable checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::checkpoint::{self, Meta};
use crate::autodiff::{AdamConfig, Graph, StepOutcome, Var};
use crate::deformation::{warp, DeformationField, Interp};
use crate::error::{Error, Result};
use crate::image::{Image, ImageSequence};
use crate::losses::{symmetric_lcc_graph, LatentGaussian};
use crate::networks::{forward_graph, BoundParams, ModelConfig, MotionMatrix, MotionModel, SamplingPolicy};
use crate::scalar::Scalar;

/// Ranges of the random similarity transform applied per sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentRanges {
    pub shift_px: f64,
    pub rotation_deg: f64,
    pub scale: (f64, f64),
    pub mirror: bool,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            shift_px: 8.0,
            rotation_deg: 15.0,
            scale: (0.9, 1.1),
            mirror: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Probability of replacing a posterior code by a prior draw.
    pub delta: f64,
    pub lambda: f64,
    pub lr: f64,
    /// Optional cosine decay `(final_lr, steps)`; constant `lr` when `None`.
    pub lr_decay: Option<(f64, u64)>,
    pub epochs: usize,
    /// Steps per epoch; `None` means one step per training sequence.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    /// `None` disables augmentation.
    pub augment: Option<AugmentRanges>,
    pub log_path: Option<PathBuf>,
    /// Receives `best/` and `last/` checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            delta: 0.5,
            lambda: 6e4,
            lr: 1.5e-4,
            lr_decay: None,
            epochs: 300,
            steps_per_epoch: None,
            seed: 0,
            augment: Some(AugmentRanges::default()),
            log_path: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::InvalidArgument(format!("delta must lie in [0,1], got {}", self.delta)));
        }
        if !(self.lr > 0.0) || !(self.lambda > 0.0) || self.lr_decay.is_some_and(|(end, _)| !(end > 0.0)) {
            return Err(Error::InvalidArgument("lr and lambda must be positive".into()));
        }
        if let Some(a) = &self.augment {
            if !(a.scale.0 > 0.0 && a.scale.0 <= a.scale.1) || a.shift_px < 0.0 || a.rotation_deg < 0.0 {
                return Err(Error::InvalidArgument("bad augmentation ranges".into()));
            }
        }
        Ok(())
    }
}

/// One Bernoulli(δ) draw per time step; `true` selects the prior.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropoutMask {
    pub r: Vec<bool>,
}

impl DropoutMask {
    pub fn sample(t: usize, delta: f64, rng: &mut impl Rng) -> Self {
        Self {
            r: (0..t).map(|_| rng.random_bool(delta)).collect(),
        }
    }

    pub fn all(t: usize, value: bool) -> Self {
        Self { r: vec![value; t] }
    }
}

/// Plain (non-graph) temporal-dropout sampling of `z̃ : [d,T]`.
///
/// Draws are consumed in the same order as the training forward pass, so the
/// two agree for the same generator state.
pub fn temporal_dropout_sample<F: Scalar>(
    q: &[LatentGaussian<F>],
    mask: &DropoutMask,
    rng: &mut impl Rng,
) -> Result<MotionMatrix<F>> {
    if q.len() != mask.r.len() || q.is_empty() {
        return Err(Error::shape("temporal_dropout_sample", format!("{} posteriors vs mask of {}", q.len(), mask.r.len())));
    }
    let (d, t) = (q[0].dim(), q.len());
    let mut data = vec![F::zero(); d * t];
    for (step, (qt, &prior)) in q.iter().zip(&mask.r).enumerate() {
        if qt.dim() != d {
            return Err(Error::shape("temporal_dropout_sample", "posteriors differ in d".to_string()));
        }
        for i in 0..d {
            let eps: f64 = StandardNormal.sample(rng);
            let eps = F::of(eps);
            data[i * t + step] = if prior {
                eps
            } else {
                qt.mean[i] + (qt.log_var[i] * F::of(0.5)).exp() * eps
            };
        }
    }
    Ok(MotionMatrix { d, t, data })
}

/// Parameters of one augmentation draw, shared by every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub shift: (f64, f64),
    pub rotation_rad: f64,
    pub scale: f64,
    pub mirror: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            shift: (0.0, 0.0),
            rotation_rad: 0.0,
            scale: 1.0,
            mirror: false,
        }
    }

    pub fn sample(r: &AugmentRanges, rng: &mut impl Rng) -> Self {
        let sym = |rng: &mut dyn rand::RngCore, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let shift = (sym(rng, r.shift_px), sym(rng, r.shift_px));
        let rotation_rad = sym(rng, r.rotation_deg).to_radians();
        let scale = if r.scale.0 < r.scale.1 { rng.random_range(r.scale.0..=r.scale.1) } else { r.scale.0 };
        let mirror = r.mirror && rng.random_bool(0.5);
        Self {
            shift,
            rotation_rad,
            scale,
            mirror,
        }
    }

    /// Sampling map of the transform: output pixel → input coordinates.
    pub fn field<F: Scalar>(&self, h: usize, w: usize) -> DeformationField<F> {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (s, c) = self.rotation_rad.sin_cos();
        DeformationField::from_fn(h, w, |y, x| {
            let (mut dx, dy) = (x as f64 - cx - self.shift.0, y as f64 - cy - self.shift.1);
            if self.mirror {
                dx = -dx;
            }
            let (rx, ry) = ((c * dx + s * dy) / self.scale, (-s * dx + c * dy) / self.scale);
            (F::of(cx + rx), F::of(cy + ry))
        })
    }
}

/// Applies one transform to every frame (bilinear, border clamp).
pub fn apply_augment<F: Scalar>(seq: &ImageSequence<F>, p: &AugmentParams) -> Result<ImageSequence<F>> {
    let (h, w) = seq.extent();
    let phi = p.field(h, w);
    let frames = seq
        .frames
        .iter()
        .map(|f| warp(f, &phi, Interp::Bilinear))
        .collect::<Result<Vec<Image<F>>>>()?;
    ImageSequence::new(frames, seq.spacing_mm)
}

/// Random shared similarity transform; returns the augmented sequence and its parameters.
pub fn augment<F: Scalar>(
    seq: &ImageSequence<F>,
    ranges: &AugmentRanges,
    rng: &mut impl Rng,
) -> Result<(ImageSequence<F>, AugmentParams)> {
    let p = AugmentParams::sample(ranges, rng);
    Ok((apply_augment(seq, &p)?, p))
}

/// Graph handles of the training objective for one sequence.
pub struct LossGraph {
    pub total: Var,
    /// `Σ_t −λ·lcc_t`.
    pub recon: Var,
    /// `Σ_t KL_t`, over every step including dropped ones.
    pub kl: Var,
    pub lcc: Vec<Var>,
}

/// Builds `Σ_t(−λ·lcc_t) + Σ_t KL_t` with the given dropout mask.
pub fn loss_graph<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    cfg: &ModelConfig,
    lambda: f64,
    seq: &ImageSequence<F>,
    mask: &DropoutMask,
    rng: &mut impl Rng,
) -> Result<LossGraph> {
    let t = seq.len_t();
    if mask.r.len() != t {
        return Err(Error::shape("loss", format!("mask of {} for T={t}", mask.r.len())));
    }
    let frames: Vec<Option<&Image<F>>> = seq.frames[1..].iter().map(Some).collect();
    let policy = SamplingPolicy::dropout(&mask.r);
    let fg = forward_graph(g, p, cfg, seq.moving(), &frames, &policy, true, rng)?;
    let i0 = g.constant(seq.moving().to_tensor());
    let mut lcc = Vec::with_capacity(t);
    let mut kls = Vec::with_capacity(t);
    for step in 0..t {
        let it = g.constant(seq.frames[step + 1].to_tensor());
        lcc.push(symmetric_lcc_graph(g, i0, it, fg.velocities[step], cfg.lcc_window, cfg.exp_steps)?);
        let (mu, lv) = fg.posteriors[step].expect("training encodes every step");
        kls.push(g.kl_unit_gaussian(mu, lv)?);
    }
    let lcc_sum = g.add_all(&lcc)?;
    let recon = g.scale(lcc_sum, F::of(-lambda));
    let kl = g.add_all(&kls)?;
    let total = g.add(recon, kl)?;
    Ok(LossGraph { total, recon, kl, lcc })
}

/// Outcome of one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub sequence: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub lcc_mean: f64,
    pub applied: bool,
}

/// One row of the training log (per epoch).
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lcc_mean: f64,
    pub kl_mean: f64,
    pub wall_ms: u128,
    pub recon_mean: f64,
}

pub const LOG_HEADER: &str = "step,epoch,loss,lcc_mean,kl_mean,wall_ms,recon_mean";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.epoch, self.loss, self.lcc_mean, self.kl_mean, self.wall_ms, self.recon_mean
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub skipped_steps: Vec<u64>,
}

const MAX_CONSECUTIVE_SKIPS: usize = 3;

/// Stepwise trainer; owns the model, optimiser state and generator.
pub struct Trainer {
    pub model: MotionModel<f32>,
    pub cfg: TrainConfig,
    rng: ChaCha8Rng,
    step: u64,
    consecutive_skips: usize,
    best_loss: f64,
}

fn rng_meta(rng: &ChaCha8Rng, m: &mut Meta) {
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    m.insert("train.rng_seed".into(), seed);
    m.insert("train.rng_word_pos".into(), rng.get_word_pos().to_string());
}

fn rng_from_meta(m: &Meta) -> Result<ChaCha8Rng> {
    let bad = || Error::InvalidArgument("checkpoint lacks a valid generator state".into());
    let hex = m.get("train.rng_seed").ok_or_else(bad)?;
    if hex.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let pos: u128 = m.get("train.rng_word_pos").ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(pos);
    Ok(rng)
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = MotionModel::new(model_cfg, cfg.seed)?;
        Ok(Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a),
            cfg,
            step: 0,
            consecutive_skips: 0,
            best_loss: f64::INFINITY,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate for the step about to be taken.
    pub fn current_lr(&self) -> f64 {
        match self.cfg.lr_decay {
            None => self.cfg.lr,
            Some((end, steps)) => {
                let u = (self.step as f64 / steps.max(1) as f64).min(1.0);
                end + (self.cfg.lr - end) * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
            }
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.current_lr(),
            ..AdamConfig::default()
        }
    }

    /// Draw a sequence, augment, forward with a fresh dropout mask, backprop, update.
    pub fn step(&mut self, dataset: &[ImageSequence<f32>]) -> Result<StepRecord> {
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let idx = self.rng.random_range(0..dataset.len());
        let seq = match &self.cfg.augment {
            Some(r) => augment(&dataset[idx], r, &mut self.rng)?.0,
            None => dataset[idx].clone(),
        };
        let mask = DropoutMask::sample(seq.len_t(), self.cfg.delta, &mut self.rng);
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &self.model.params, true);
        let built = loss_graph(&mut g, &p, &self.model.config, self.cfg.lambda, &seq, &mask, &mut self.rng);
        self.step += 1;
        let (mut loss, mut recon, mut kl, mut lcc_mean) = (f64::NAN, f64::NAN, f64::NAN, f64::NAN);
        let applied = match built {
            Ok(lg) => {
                loss = g.value(lg.total).item().f64();
                recon = g.value(lg.recon).item().f64();
                kl = g.value(lg.kl).item().f64();
                lcc_mean = lg.lcc.iter().map(|&v| g.value(v).item().f64()).sum::<f64>() / lg.lcc.len() as f64;
                if loss.is_finite() {
                    let grads = g.backward(lg.total).params(&g);
                    self.model.params.adam_step(&grads, &self.adam())? == StepOutcome::Applied
                } else {
                    log::warn!("step {}: non-finite loss {loss}, skipped", self.step);
                    false
                }
            }
            // velocities outside the exponentiation bound or non-finite fields
            Err(e @ (Error::Numerical(_) | Error::NonFinite(_))) => {
                log::warn!("step {}: {e}, skipped", self.step);
                false
            }
            Err(e) => return Err(e),
        };
        if applied {
            self.consecutive_skips = 0;
        } else {
            self.consecutive_skips += 1;
            if self.consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                return Err(Error::Numerical(format!(
                    "{} consecutive non-finite steps (last at step {}, sequence {idx}, loss {loss})",
                    self.consecutive_skips, self.step
                )));
            }
        }
        Ok(StepRecord {
            step: self.step,
            sequence: idx,
            loss,
            recon,
            kl,
            lcc_mean,
            applied,
        })
    }

    fn meta(&self) -> Meta {
        let mut m = self.model.config.to_meta();
        m.insert("train.step".into(), self.step.to_string());
        m.insert("train.best_loss".into(), self.best_loss.to_string());
        m.insert("train.delta".into(), self.cfg.delta.to_string());
        m.insert("train.lambda".into(), self.cfg.lambda.to_string());
        m.insert("train.lr".into(), self.cfg.lr.to_string());
        rng_meta(&self.rng, &mut m);
        m
    }

    /// Saves model, optimiser and generator state.
    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, &self.model.params, &self.meta())
    }

    /// Restores a trainer from [`Trainer::save`] output; `cfg` supplies the
    /// remaining (non-persisted) settings.
    pub fn resume(dir: &Path, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (params, meta) = checkpoint::load::<f32>(dir)?;
        let config = ModelConfig::from_meta(&meta)?;
        let step: u64 = meta
            .get("train.step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::InvalidArgument("checkpoint lacks train.step".into()))?;
        let best_loss = meta.get("train.best_loss").and_then(|s| s.parse().ok()).unwrap_or(f64::INFINITY);
        Ok(Self {
            model: MotionModel {
                config,
                params,
                allow_untrained: false,
            },
            rng: rng_from_meta(&meta)?,
            cfg,
            step,
            consecutive_skips: 0,
            best_loss,
        })
    }

    /// Runs the configured number of epochs, appending to the log and
    /// writing `best/` and `last/` checkpoints after each epoch.
    pub fn run(&mut self, dataset: &[ImageSequence<f32>]) -> Result<TrainLog> {
        validate_dataset(dataset, &self.model.config)?;
        let per_epoch = self.cfg.steps_per_epoch.unwrap_or(dataset.len()).max(1) as u64;
        let mut log = TrainLog::default();
        let mut csv = match &self.cfg.log_path {
            Some(p) => {
                let fresh = !p.exists();
                let mut f = OpenOptions::new().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?;
                if fresh {
                    writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(p, e))?;
                }
                Some((f, p.clone()))
            }
            None => None,
        };
        let start = Instant::now();
        let total = self.cfg.epochs as u64 * per_epoch;
        while self.step < total {
            let epoch = (self.step / per_epoch) as usize;
            let (mut loss, mut recon, mut kl, mut lcc, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
            while self.step < (epoch as u64 + 1) * per_epoch {
                let r = self.step(dataset)?;
                if r.applied {
                    loss += r.loss;
                    recon += r.recon;
                    kl += r.kl;
                    lcc += r.lcc_mean;
                    n += 1;
                } else {
                    log.skipped_steps.push(r.step);
                }
            }
            let k = n.max(1) as f64;
            let rec = EpochRecord {
                step: self.step,
                epoch,
                loss: loss / k,
                lcc_mean: lcc / k,
                kl_mean: kl / k,
                wall_ms: start.elapsed().as_millis(),
                recon_mean: recon / k,
            };
            log::info!("epoch {epoch}: loss {:.4} lcc {:.4} kl {:.3}", rec.loss, rec.lcc_mean, rec.kl_mean);
            if let Some((f, p)) = csv.as_mut() {
                writeln!(f, "{}", rec.csv_row()).map_err(|e| Error::io(p.as_path(), e))?;
            }
            if let Some(dir) = &self.cfg.checkpoint_dir {
                if rec.loss < self.best_loss {
                    self.best_loss = rec.loss;
                    self.save(&dir.join("best"))?;
                }
                self.save(&dir.join("last"))?;
            }
            log.epochs.push(rec);
        }
        Ok(log)
    }
}

fn validate_dataset(dataset: &[ImageSequence<f32>], cfg: &ModelConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    for (i, s) in dataset.iter().enumerate() {
        if s.extent() != (cfg.height, cfg.width) {
            return Err(Error::shape(
                "train",
                format!("sequence {i} is {:?}, model expects {}x{}", s.extent(), cfg.height, cfg.width),
            ));
        }
        if s.len_t() == 0 {
            return Err(Error::InvalidArgument(format!("sequence {i} has no fixed frames")));
        }
    }
    Ok(())
}

/// Trains a fresh model on `dataset`.
pub fn train(
    dataset: &[ImageSequence<f32>],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
) -> Result<(MotionModel<f32>, TrainLog)> {
    let mut t = Trainer::new(model_cfg, cfg)?;
    let log = t.run(dataset)?;
    Ok((t.model, log))
}

/// Loads a trained model from a checkpoint directory.
pub fn load_model(dir: &Path) -> Result<MotionModel<f32>> {
    let (params, meta) = checkpoint::load::<f32>(dir)?;
    Ok(MotionModel {
        config: ModelConfig::from_meta(&meta)?,
        params,
        allow_untrained: false,
    })
}

/// Saves a model (without trainer state).
pub fn save_model(model: &MotionModel<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    checkpoint::save(dir, &model.params, &model.config.to_meta())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(DropoutMask::sample(50, 0.0, &mut rng).r.iter().all(|&r| !r));
        assert!(DropoutMask::sample(50, 1.0, &mut rng).r.iter().all(|&r| r));
    }

    #[test]
    fn identity_augment_is_exact() {
        let f = Image::<f32>::from_fn(8, 6, |y, x| (y * 7 + x) as f32);
        let seq = ImageSequence::new(vec![f.clone(), f], 1.5).unwrap();
        assert_eq!(apply_augment(&seq, &AugmentParams::identity()).unwrap(), seq);
    }

    #[test]
    fn rejects_bad_delta() {
        let cfg = TrainConfig {
            delta: 1.5,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
