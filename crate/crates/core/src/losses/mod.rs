//! Training objective: symmetric local cross-correlation likelihood and the
//! closed-form KL divergence to the unit Gaussian prior.

pub(crate) mod lcc;

use crate::autodiff::{Graph, Var};
use crate::deformation::{exp_disp, VelocityField};
use crate::error::{Error, Result};
use crate::image::{Image, ImageSequence};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use lcc::{lcc_map, LCC_EPS};

/// Default LCC window edge length.
pub const DEFAULT_LCC_WINDOW: usize = 9;

/// Posterior parameters of one time step: mean and log-variance, each of length `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian<F> {
    pub mean: Vec<F>,
    pub log_var: Vec<F>,
}

impl<F: Scalar> LatentGaussian<F> {
    pub fn prior(d: usize) -> Self {
        Self {
            mean: vec![F::zero(); d],
            log_var: vec![F::zero(); d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `KL(q || N(0, I)) = ½ Σ (μ² + σ² − 1 − log σ²)`.
pub fn kl_to_unit_gaussian<F: Scalar>(q: &LatentGaussian<F>) -> F {
    let half = F::of(0.5);
    q.mean
        .iter()
        .zip(&q.log_var)
        .map(|(&m, &lv)| half * (m * m + lv.exp() - F::one() - lv))
        .sum()
}

/// Analytic gradient of [`kl_to_unit_gaussian`]: `(μ, ½(σ² − 1))`.
pub fn kl_gradient<F: Scalar>(q: &LatentGaussian<F>) -> (Vec<F>, Vec<F>) {
    let half = F::of(0.5);
    (
        q.mean.clone(),
        q.log_var.iter().map(|&lv| half * (lv.exp() - F::one())).collect(),
    )
}

/// Mean squared local NCC between two images (no warping).
pub fn local_cross_correlation<F: Scalar>(a: &Image<F>, b: &Image<F>, window: usize) -> Result<F> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::shape("lcc", format!("{}x{} vs {}x{}", a.h, a.w, b.h, b.w)));
    }
    if window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("lcc window must be odd, got {window}")));
    }
    Ok(lcc::lcc_forward(&a.data, &b.data, a.h, a.w, window))
}

/// Graph form of the symmetric metric: `I0` travels `exp(v/2)`, `It` travels
/// `exp(-v/2)`, and the two half-warped images are correlated.
pub fn symmetric_lcc_graph<F: Scalar>(
    g: &mut Graph<F>,
    moving: Var,
    fixed: Var,
    v: Var,
    window: usize,
    steps: u32,
) -> Result<Var> {
    let half = g.scale(v, F::of(0.5));
    let neg_half = g.scale(v, F::of(-0.5));
    let fwd = exp_disp(g, half, steps)?;
    let bwd = exp_disp(g, neg_half, steps)?;
    let a = g.warp(moving, fwd)?;
    let b = g.warp(fixed, bwd)?;
    g.lcc(a, b, window)
}

/// Symmetric local cross-correlation of `(I0, It)` under velocity `v`; in `[0, 1]`.
pub fn symmetric_lcc<F: Scalar>(
    moving: &Image<F>,
    fixed: &Image<F>,
    v: &VelocityField<F>,
    window: usize,
    steps: u32,
) -> Result<F> {
    if (moving.h, moving.w) != (fixed.h, fixed.w) || (v.h, v.w) != (moving.h, moving.w) {
        return Err(Error::shape("symmetric_lcc", "images and velocity must share a grid".to_string()));
    }
    let mut g = Graph::new();
    let m = g.constant(moving.to_tensor());
    let f = g.constant(fixed.to_tensor());
    let vv = g.constant(v.to_tensor());
    let out = symmetric_lcc_graph(&mut g, m, f, vv, window, steps)?;
    Ok(g.value(out).item())
}

/// Negated objective `Σ_t [−λ·lcc_t + KL(q_t || N(0,I))]` (to be minimised).
pub fn elbo_objective<F: Scalar>(
    seq: &ImageSequence<F>,
    recon_lcc: &[F],
    q: &[LatentGaussian<F>],
    lambda: f64,
) -> Result<F> {
    let t = seq.len_t();
    if recon_lcc.len() != t || q.len() != t {
        return Err(Error::shape(
            "elbo_objective",
            format!("T={t}, got {} lcc terms and {} posteriors", recon_lcc.len(), q.len()),
        ));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    let lam = F::of(lambda);
    Ok(recon_lcc
        .iter()
        .zip(q)
        .map(|(&l, qt)| -lam * l + kl_to_unit_gaussian(qt))
        .sum())
}

/// Graph form of the KL term for one time step.
pub fn kl_graph<F: Scalar>(g: &mut Graph<F>, mean: Var, log_var: Var) -> Result<Var> {
    g.kl_unit_gaussian(mean, log_var)
}

/// Convenience: the tensors of a posterior as graph constants.
pub fn latent_tensors<F: Scalar>(q: &LatentGaussian<F>) -> (Tensor<F>, Tensor<F>) {
    let d = q.dim();
    (
        Tensor::new(&[d], q.mean.clone()).expect("mean"),
        Tensor::new(&[d], q.log_var.clone()).expect("log_var"),
    )
}
