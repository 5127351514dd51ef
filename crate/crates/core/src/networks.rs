//! The three model networks and the full forward pass.
//!
//! * encoder: `(I_0, I_t)` → 4 strided convolutions → dense heads `(μ_t, log σ²_t)`
//! * temporal network: `[z̃; t̄]` → four non-causal dilated 1-D convolutions,
//!   every layer (and the input) projected by a 1×1 convolution and summed
//!   into the motion matrix `z`
//! * decoder: `z_t` → dense seed map → three stride-2 transposed
//!   convolutions, each scale concatenated with the average-pooled `I_0` →
//!   3×3 convolution → Gaussian smoothing → velocity `v_t`

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::checkpoint::Meta;
use crate::autodiff::{Graph, Padding, ParamStore, Var};
use crate::deformation::{
    exp_disp, smooth_spatial_graph, smooth_temporal_graph, DeformationField, VelocityField,
    DEFAULT_EXP_STEPS,
};
use crate::error::{Error, Result};
use crate::image::{Image, ImageSequence, DEFAULT_SPACING_MM};
use crate::losses::{LatentGaussian, DEFAULT_LCC_WINDOW};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture and model hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Deformation encoding size per time step.
    pub d: usize,
    pub height: usize,
    pub width: usize,
    pub enc_strides: [usize; 4],
    pub enc_channels: [usize; 4],
    /// Seed-map channels followed by the output channels of the three upsampling layers.
    pub dec_channels: [usize; 4],
    pub tcn_dilations: Vec<usize>,
    pub tcn_kernel: usize,
    pub sigma_g_mm: f64,
    /// Temporal smoothing width in frames.
    pub sigma_t: f64,
    pub spacing_mm: f64,
    pub exp_steps: u32,
    pub lcc_window: usize,
    pub leaky_slope: f64,
    pub velocity_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            height: 64,
            width: 64,
            enc_strides: [2, 2, 2, 1],
            enc_channels: [16, 32, 32, 4],
            dec_channels: [16, 16, 16, 8],
            tcn_dilations: vec![1, 2, 4, 8],
            tcn_kernel: 3,
            sigma_g_mm: 3.0,
            sigma_t: 1.5,
            spacing_mm: DEFAULT_SPACING_MM,
            exp_steps: DEFAULT_EXP_STEPS,
            lcc_window: DEFAULT_LCC_WINDOW,
            leaky_slope: 0.2,
            velocity_gain: 1.0,
        }
    }
}

fn list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<const N: usize>(key: &str, s: &str) -> Result<[usize; N]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidArgument(format!("bad list for {key}: {s}")))?;
    v.try_into()
        .map_err(|_| Error::InvalidArgument(format!("{key} needs {N} entries: {s}")))
}

impl ModelConfig {
    /// Spatial extent of the encoder's last feature map.
    pub fn bottleneck(&self) -> (usize, usize) {
        let total: usize = self.enc_strides.iter().product();
        (self.height.div_ceil(total), self.width.div_ceil(total))
    }

    /// Largest |Δt| at which an input code can influence an output column.
    pub fn receptive_radius(&self) -> usize {
        (self.tcn_kernel / 2) * self.tcn_dilations.iter().sum::<usize>()
    }

    pub fn sigma_g_px(&self) -> f64 {
        self.sigma_g_mm / self.spacing_mm
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        if !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) || self.height == 0 || self.width == 0 {
            return bad(format!(
                "image extent {}x{} must be a positive multiple of 8",
                self.height, self.width
            ));
        }
        if self.enc_strides.iter().product::<usize>() != 8 {
            return bad("encoder strides must downsample by 8 in total".into());
        }
        if self.tcn_dilations.is_empty() || self.tcn_dilations.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("dilations must be strictly increasing: {:?}", self.tcn_dilations));
        }
        if self.tcn_kernel.is_multiple_of(2) {
            return bad("temporal kernel must be odd".into());
        }
        if !(self.sigma_g_mm > 0.0 && self.sigma_t > 0.0 && self.spacing_mm > 0.0) {
            return bad("sigma_g_mm, sigma_t, and spacing_mm must be positive".into());
        }
        if self.lcc_window.is_multiple_of(2) || self.exp_steps == 0 {
            return bad("lcc window must be odd and exp_steps positive".into());
        }
        Ok(())
    }

    pub fn to_meta(&self) -> Meta {
        let mut m = Meta::new();
        m.insert("d".into(), self.d.to_string());
        m.insert("height".into(), self.height.to_string());
        m.insert("width".into(), self.width.to_string());
        m.insert("enc_strides".into(), list(&self.enc_strides));
        m.insert("enc_channels".into(), list(&self.enc_channels));
        m.insert("dec_channels".into(), list(&self.dec_channels));
        m.insert("tcn_dilations".into(), list(&self.tcn_dilations));
        m.insert("tcn_kernel".into(), self.tcn_kernel.to_string());
        m.insert("sigma_g_mm".into(), self.sigma_g_mm.to_string());
        m.insert("sigma_t".into(), self.sigma_t.to_string());
        m.insert("spacing_mm".into(), self.spacing_mm.to_string());
        m.insert("exp_steps".into(), self.exp_steps.to_string());
        m.insert("lcc_window".into(), self.lcc_window.to_string());
        m.insert("leaky_slope".into(), self.leaky_slope.to_string());
        m.insert("velocity_gain".into(), self.velocity_gain.to_string());
        m
    }

    pub fn from_meta(m: &Meta) -> Result<Self> {
        fn get<T: std::str::FromStr>(m: &Meta, k: &str) -> Result<T> {
            m.get(k)
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint metadata lacks {k}")))?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad metadata value for {k}")))
        }
        let dil: String = get(m, "tcn_dilations")?;
        let cfg = Self {
            d: get(m, "d")?,
            height: get(m, "height")?,
            width: get(m, "width")?,
            enc_strides: parse_list("enc_strides", &get::<String>(m, "enc_strides")?)?,
            enc_channels: parse_list("enc_channels", &get::<String>(m, "enc_channels")?)?,
            dec_channels: parse_list("dec_channels", &get::<String>(m, "dec_channels")?)?,
            tcn_dilations: dil
                .split(',')
                .map(|x| x.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::InvalidArgument(format!("bad dilations {dil}")))?,
            tcn_kernel: get(m, "tcn_kernel")?,
            sigma_g_mm: get(m, "sigma_g_mm")?,
            sigma_t: get(m, "sigma_t")?,
            spacing_mm: get(m, "spacing_mm")?,
            exp_steps: get(m, "exp_steps")?,
            lcc_window: get(m, "lcc_window")?,
            leaky_slope: get(m, "leaky_slope")?,
            velocity_gain: get(m, "velocity_gain")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `d × T` motion matrix, row-major; column `t` encodes the deformation of frame `t+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionMatrix<F> {
    pub d: usize,
    pub t: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> MotionMatrix<F> {
    pub fn column(&self, t: usize) -> Vec<F> {
        (0..self.d).map(|i| self.data[i * self.t + t]).collect()
    }

    pub fn to_tensor(&self) -> Tensor<F> {
        Tensor::new(&[self.d, self.t], self.data.clone()).expect("motion matrix")
    }

    pub fn from_tensor(t: &Tensor<F>) -> Result<Self> {
        match *t.shape() {
            [d, tt] => Ok(Self {
                d,
                t: tt,
                data: t.data().to_vec(),
            }),
            ref s => Err(Error::shape("motion matrix", format!("expected [d,T], got {s:?}"))),
        }
    }
}

/// Where the latent code of one time step comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentSource {
    /// Encoder mean `μ_t`.
    PosteriorMean,
    /// Reparameterised draw `μ_t + σ_t·ε`.
    PosteriorSample,
    /// Prior draw `ε ~ N(0, I)`; the fixed frame is never read.
    PriorSample,
    /// Prior mean (zero vector); the fixed frame is never read.
    PriorMean,
}

impl LatentSource {
    pub fn reads_frame(self) -> bool {
        matches!(self, LatentSource::PosteriorMean | LatentSource::PosteriorSample)
    }
}

/// Per-time-step latent sources for one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingPolicy(pub Vec<LatentSource>);

impl SamplingPolicy {
    pub fn uniform(t: usize, s: LatentSource) -> Self {
        Self(vec![s; t])
    }

    /// Deterministic tracking: encoder mean at every step.
    pub fn mean(t: usize) -> Self {
        Self::uniform(t, LatentSource::PosteriorMean)
    }

    /// Temporal dropout: prior draw where `mask[t]`, posterior draw otherwise.
    pub fn dropout(mask: &[bool]) -> Self {
        Self(
            mask.iter()
                .map(|&r| if r { LatentSource::PriorSample } else { LatentSource::PosteriorSample })
                .collect(),
        )
    }

    /// `observed[t]` refers to frame `t+1`. Unobserved steps use the prior
    /// (draws when `stochastic`, the zero mean otherwise); observed steps use
    /// the posterior mean.
    pub fn observed(observed: &[bool], stochastic: bool) -> Self {
        let missing = if stochastic { LatentSource::PriorSample } else { LatentSource::PriorMean };
        Self(
            observed
                .iter()
                .map(|&o| if o { LatentSource::PosteriorMean } else { missing })
                .collect(),
        )
    }
}

/// Graph handles for every parameter.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    /// Loads `params` into `g`, tracked (trainable) or as constants.
    pub fn bind<F: Scalar>(g: &mut Graph<F>, params: &ParamStore<F>, tracked: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, e)| {
                let v = if tracked {
                    g.param(name, e.value.clone())
                } else {
                    g.constant(e.value.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }
}

/// Fresh parameters for `cfg`, seeded. Output heads start small.
pub fn init_params<F: Scalar>(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ParamStore<F>> {
    cfg.validate()?;
    let mut p = ParamStore::new();
    let mut c_in = 2;
    for (i, &c) in cfg.enc_channels.iter().enumerate() {
        p.insert_he(&format!("enc.conv{}.w", i + 1), &[c, c_in, 3, 3], c_in * 9, 1.0, rng)?;
        p.insert_zeros(&format!("enc.conv{}.b", i + 1), &[c])?;
        c_in = c;
    }
    let (bh, bw) = cfg.bottleneck();
    let flat = cfg.enc_channels[3] * bh * bw;
    p.insert_he("enc.mu.w", &[cfg.d, flat], flat, 1.0, rng)?;
    p.insert_zeros("enc.mu.b", &[cfg.d])?;
    p.insert_he("enc.logvar.w", &[cfg.d, flat], flat, 0.1, rng)?;
    p.insert_zeros("enc.logvar.b", &[cfg.d])?;

    let k = cfg.tcn_kernel;
    let mut c_in = cfg.d + 1;
    p.insert_he("tcn.skip0.w", &[cfg.d, c_in, 1], c_in, 1.0, rng)?;
    p.insert_zeros("tcn.out.b", &[cfg.d])?;
    for i in 0..cfg.tcn_dilations.len() {
        p.insert_he(&format!("tcn.conv{}.w", i + 1), &[cfg.d, c_in, k], c_in * k, 1.0, rng)?;
        p.insert_zeros(&format!("tcn.conv{}.b", i + 1), &[cfg.d])?;
        p.insert_he(&format!("tcn.skip{}.w", i + 1), &[cfg.d, cfg.d, 1], cfg.d, 0.5, rng)?;
        c_in = cfg.d;
    }

    let [c0, c1, c2, c3] = cfg.dec_channels;
    let (h8, w8) = (cfg.height / 8, cfg.width / 8);
    p.insert_he("dec.seed.w", &[c0 * h8 * w8, cfg.d], cfg.d, 1.0, rng)?;
    p.insert_zeros("dec.seed.b", &[c0 * h8 * w8])?;
    let mut prev = c0;
    for (i, &c) in [c1, c2, c3].iter().enumerate() {
        // transposed 4×4 stride-2 kernels see ~4 taps per output pixel
        p.insert_he(&format!("dec.up{}.w", i + 1), &[c, prev + 1, 4, 4], (prev + 1) * 4, 1.0, rng)?;
        p.insert_zeros(&format!("dec.up{}.b", i + 1), &[c])?;
        prev = c;
    }
    p.insert_he("dec.out.w", &[2, prev + 1, 3, 3], (prev + 1) * 9, 0.1, rng)?;
    p.insert_zeros("dec.out.b", &[2])?;
    Ok(p)
}

/// `I_0` average-pooled by 8, 4, 2 and 1, as graph constants.
pub fn pooled_moving<F: Scalar>(g: &mut Graph<F>, i0: &Image<F>) -> Result<[Var; 4]> {
    let mut out = Vec::with_capacity(4);
    for f in [8, 4, 2, 1] {
        out.push(g.constant(i0.avg_pool(f)?.to_tensor()));
    }
    Ok(out.try_into().expect("four scales"))
}

/// Encoder: returns `(μ, log σ²)` graph vars, each `[d]`.
pub fn encode_graph<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    cfg: &ModelConfig,
    moving: Var,
    fixed: Var,
) -> Result<(Var, Var)> {
    let slope = F::of(cfg.leaky_slope);
    let mut x = g.concat(&[moving, fixed])?;
    for (i, &s) in cfg.enc_strides.iter().enumerate() {
        let w = p.get(&format!("enc.conv{}.w", i + 1))?;
        let b = p.get(&format!("enc.conv{}.b", i + 1))?;
        let y = g.conv2d(x, w, Some(b), s, Padding::Same)?;
        x = g.leaky_relu(y, slope);
    }
    let n = g.value(x).len();
    let flat = g.reshape(x, &[n])?;
    let mu = g.dense(flat, p.get("enc.mu.w")?, Some(p.get("enc.mu.b")?))?;
    let lv = g.dense(flat, p.get("enc.logvar.w")?, Some(p.get("enc.logvar.b")?))?;
    Ok((mu, lv))
}

/// Normalised times `t/T` for `t = 1..T`.
pub fn normalized_time<F: Scalar>(t: usize) -> Vec<F> {
    (1..=t).map(|i| F::of(i as f64 / t as f64)).collect()
}

/// Temporal network: `z̃: [d,T]` plus `t̄` → motion matrix `[d,T]`.
pub fn temporal_graph<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    cfg: &ModelConfig,
    ztilde: Var,
    tbar: &[F],
) -> Result<Var> {
    let t = tbar.len();
    if g.shape(ztilde) != [cfg.d, t] {
        return Err(Error::shape("temporal", format!("z̃ {:?} vs [d={}, T={t}]", g.shape(ztilde), cfg.d)));
    }
    let slope = F::of(cfg.leaky_slope);
    let trow = g.constant(Tensor::new(&[1, t], tbar.to_vec())?);
    let h0 = g.concat(&[ztilde, trow])?;
    let mut terms = vec![g.conv1d(h0, p.get("tcn.skip0.w")?, Some(p.get("tcn.out.b")?), 1)?];
    let mut h = h0;
    for (i, &dil) in cfg.tcn_dilations.iter().enumerate() {
        let y = g.conv1d(h, p.get(&format!("tcn.conv{}.w", i + 1))?, Some(p.get(&format!("tcn.conv{}.b", i + 1))?), dil)?;
        h = g.leaky_relu(y, slope);
        terms.push(g.conv1d(h, p.get(&format!("tcn.skip{}.w", i + 1))?, None, 1)?);
    }
    g.add_all(&terms)
}

/// Decoder: `z_t: [d]` conditioned on pooled `I_0` → smoothed velocity `[2,H,W]`.
pub fn decode_graph<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    cfg: &ModelConfig,
    z_t: Var,
    pooled: &[Var; 4],
) -> Result<Var> {
    let slope = F::of(cfg.leaky_slope);
    let (h8, w8) = (cfg.height / 8, cfg.width / 8);
    let seed = g.dense(z_t, p.get("dec.seed.w")?, Some(p.get("dec.seed.b")?))?;
    let seed = g.reshape(seed, &[cfg.dec_channels[0], h8, w8])?;
    let seed = g.leaky_relu(seed, slope);
    let mut x = g.concat(&[seed, pooled[0]])?;
    for i in 0..3 {
        let y = g.conv_transpose2d(
            x,
            p.get(&format!("dec.up{}.w", i + 1))?,
            Some(p.get(&format!("dec.up{}.b", i + 1))?),
            2,
            1,
        )?;
        let y = g.leaky_relu(y, slope);
        x = g.concat(&[y, pooled[i + 1]])?;
    }
    let raw = g.conv2d(x, p.get("dec.out.w")?, Some(p.get("dec.out.b")?), 1, Padding::Same)?;
    let scaled = g.scale(raw, F::of(cfg.velocity_gain));
    smooth_spatial_graph(g, scaled, cfg.sigma_g_px())
}

/// Graph handles produced by [`forward_graph`].
pub struct ForwardGraph {
    /// `(μ_t, log σ²_t)` where the encoder ran.
    pub posteriors: Vec<Option<(Var, Var)>>,
    pub ztilde: Var,
    pub motion: Var,
    /// Spatially and temporally smoothed velocities, one `[2,H,W]` per step.
    pub velocities: Vec<Var>,
}

/// Encode → sample → temporal network → decode → temporal smoothing.
///
/// `frames[t]` is fixed frame `t+1`; it is only read when the step's source
/// reads frames or when `encode_all` asks for every posterior (training needs
/// them for the KL term). Random draws consume `rng` in time order.
#[allow(clippy::too_many_arguments)]
pub fn forward_graph<F: Scalar, R: Rng>(
    g: &mut Graph<F>,
    p: &BoundParams,
    cfg: &ModelConfig,
    moving: &Image<F>,
    frames: &[Option<&Image<F>>],
    policy: &SamplingPolicy,
    encode_all: bool,
    rng: &mut R,
) -> Result<ForwardGraph> {
    let t = policy.0.len();
    if t == 0 || frames.len() != t {
        return Err(Error::InvalidArgument(format!(
            "forward needs T >= 1 with one frame slot per step (T={t}, slots={})",
            frames.len()
        )));
    }
    if (moving.h, moving.w) != (cfg.height, cfg.width) {
        return Err(Error::shape(
            "forward",
            format!("image {}x{} vs model {}x{}", moving.h, moving.w, cfg.height, cfg.width),
        ));
    }
    let i0 = g.constant(moving.to_tensor());
    let mut posteriors = Vec::with_capacity(t);
    let mut codes = Vec::with_capacity(t);
    for (step, &src) in policy.0.iter().enumerate() {
        let post = if src.reads_frame() || encode_all {
            let frame = frames[step].ok_or_else(|| {
                Error::InvalidArgument(format!("frame {} required by the sampling policy is missing", step + 1))
            })?;
            let it = g.constant(frame.to_tensor());
            Some(encode_graph(g, p, cfg, i0, it)?)
        } else {
            None
        };
        posteriors.push(post);
        let code = match src {
            LatentSource::PosteriorMean => post.expect("encoded").0,
            LatentSource::PosteriorSample => {
                let (mu, lv) = post.expect("encoded");
                let eps = g.constant(draw(cfg.d, rng));
                let half = g.scale(lv, F::of(0.5));
                let sd = g.exp(half);
                let noise = g.mul(sd, eps)?;
                g.add(mu, noise)?
            }
            LatentSource::PriorSample => g.constant(draw(cfg.d, rng)),
            LatentSource::PriorMean => g.constant(Tensor::zeros(&[cfg.d])),
        };
        codes.push(code);
    }
    let stacked = g.stack(&codes)?;
    let ztilde = g.transpose(stacked)?;
    let tbar = normalized_time::<F>(t);
    let motion = temporal_graph(g, p, cfg, ztilde, &tbar)?;
    let velocities = decode_motion_graph(g, p, cfg, motion, moving)?;
    Ok(ForwardGraph {
        posteriors,
        ztilde,
        motion,
        velocities,
    })
}

/// Decodes every column of a `[d,T]` motion var against `moving` and applies
/// temporal smoothing.
pub fn decode_motion_graph<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    cfg: &ModelConfig,
    motion: Var,
    moving: &Image<F>,
) -> Result<Vec<Var>> {
    let t = g.shape(motion)[1];
    let pooled = pooled_moving(g, moving)?;
    let cols = g.transpose(motion)?;
    let mut raw = Vec::with_capacity(t);
    for step in 0..t {
        let z_t = g.select(cols, step)?;
        raw.push(decode_graph(g, p, cfg, z_t, &pooled)?);
    }
    let stack = g.stack(&raw)?;
    let smoothed = smooth_temporal_graph(g, stack, cfg.sigma_t)?;
    (0..t).map(|s| g.select(smoothed, s)).collect()
}

fn draw<F: Scalar, R: Rng>(d: usize, rng: &mut R) -> Tensor<F> {
    Tensor::from_fn(&[d], |_| {
        let x: f64 = StandardNormal.sample(rng);
        F::of(x)
    })
}

/// Outputs of an inference pass.
#[derive(Clone, Debug)]
pub struct ForwardResult<F> {
    pub motion: MotionMatrix<F>,
    pub ztilde: MotionMatrix<F>,
    pub velocities: Vec<VelocityField<F>>,
    pub deformations: Vec<DeformationField<F>>,
    pub posteriors: Vec<Option<LatentGaussian<F>>>,
}

/// A configuration plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionModel<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    /// Lets application ops run on parameters that were never optimised.
    pub allow_untrained: bool,
}

impl<F: Scalar> MotionModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&config, &mut rng)?;
        Ok(Self {
            config,
            params,
            allow_untrained: false,
        })
    }

    /// True once at least one optimiser step has been applied.
    pub fn is_trained(&self) -> bool {
        self.params.step_count() > 0
    }

    /// Errors on untrained parameters unless `allow_untrained` is set.
    pub fn ensure_usable(&self) -> Result<()> {
        if self.is_trained() || self.allow_untrained {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "model parameters are untrained (no optimiser steps); pass --allow-untrained to proceed".into(),
            ))
        }
    }

    /// Posterior `q(z̃ | I_0, I_t)` for one pair.
    pub fn encode(&self, moving: &Image<F>, fixed: &Image<F>) -> Result<LatentGaussian<F>> {
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &self.params, false);
        let a = g.constant(moving.to_tensor());
        let b = g.constant(fixed.to_tensor());
        let (mu, lv) = encode_graph(&mut g, &p, &self.config, a, b)?;
        Ok(LatentGaussian {
            mean: g.value(mu).data().to_vec(),
            log_var: g.value(lv).data().to_vec(),
        })
    }

    /// Temporal network on explicit codes `z̃: [d,T]`.
    pub fn temporal_regularize(&self, ztilde: &MotionMatrix<F>) -> Result<MotionMatrix<F>> {
        if ztilde.d != self.config.d {
            return Err(Error::shape("temporal", format!("d={} vs model d={}", ztilde.d, self.config.d)));
        }
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &self.params, false);
        let z = g.constant(ztilde.to_tensor());
        let out = temporal_graph(&mut g, &p, &self.config, z, &normalized_time(ztilde.t))?;
        MotionMatrix::from_tensor(g.value(out))
    }

    /// Single-column decode (no temporal smoothing).
    pub fn decode(&self, z_t: &[F], moving: &Image<F>) -> Result<VelocityField<F>> {
        if z_t.len() != self.config.d {
            return Err(Error::shape("decode", format!("code length {} vs d={}", z_t.len(), self.config.d)));
        }
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &self.params, false);
        let pooled = pooled_moving(&mut g, moving)?;
        let z = g.constant(Tensor::new(&[z_t.len()], z_t.to_vec())?);
        let v = decode_graph(&mut g, &p, &self.config, z, &pooled)?;
        VelocityField::from_tensor(g.value(v), self.config.spacing_mm)
    }

    /// Full inference pass over a sequence whose fixed frames may be missing.
    pub fn forward_frames<R: Rng>(
        &self,
        moving: &Image<F>,
        frames: &[Option<&Image<F>>],
        policy: &SamplingPolicy,
        rng: &mut R,
    ) -> Result<ForwardResult<F>> {
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &self.params, false);
        let fg = forward_graph(&mut g, &p, &self.config, moving, frames, policy, false, rng)?;
        self.collect(&mut g, fg)
    }

    pub fn forward<R: Rng>(&self, seq: &ImageSequence<F>, policy: &SamplingPolicy, rng: &mut R) -> Result<ForwardResult<F>> {
        let frames: Vec<Option<&Image<F>>> = seq.frames[1..].iter().map(Some).collect();
        self.forward_frames(seq.moving(), &frames, policy, rng)
    }

    /// Decodes an explicit motion matrix against `moving` (transport).
    pub fn decode_motion(&self, motion: &MotionMatrix<F>, moving: &Image<F>) -> Result<ForwardResult<F>> {
        if motion.d != self.config.d {
            return Err(Error::shape("decode_motion", format!("d={} vs model d={}", motion.d, self.config.d)));
        }
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &self.params, false);
        let z = g.constant(motion.to_tensor());
        let velocities = decode_motion_graph(&mut g, &p, &self.config, z, moving)?;
        let fg = ForwardGraph {
            posteriors: vec![None; motion.t],
            ztilde: z,
            motion: z,
            velocities,
        };
        self.collect(&mut g, fg)
    }

    fn collect(&self, g: &mut Graph<F>, fg: ForwardGraph) -> Result<ForwardResult<F>> {
        let (h, w) = (self.config.height, self.config.width);
        let mut velocities = Vec::new();
        let mut deformations = Vec::new();
        for &v in &fg.velocities {
            velocities.push(VelocityField::from_tensor(g.value(v), self.config.spacing_mm)?);
            let u = exp_disp(g, v, self.config.exp_steps)?;
            deformations.push(DeformationField::from_displacement(h, w, g.value(u).data()));
        }
        let posteriors = fg
            .posteriors
            .iter()
            .map(|p| {
                p.map(|(mu, lv)| LatentGaussian {
                    mean: g.value(mu).data().to_vec(),
                    log_var: g.value(lv).data().to_vec(),
                })
            })
            .collect();
        Ok(ForwardResult {
            motion: MotionMatrix::from_tensor(g.value(fg.motion))?,
            ztilde: MotionMatrix::from_tensor(g.value(fg.ztilde))?,
            velocities,
            deformations,
            posteriors,
        })
    }
}
