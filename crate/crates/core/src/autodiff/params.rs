//! Named parameter storage with Adam moment buffers.

use std::collections::BTreeMap;

use log::warn;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One trainable array plus its first/second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<F> {
    pub value: Tensor<F>,
    pub m: Tensor<F>,
    pub v: Tensor<F>,
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Outcome of [`ParamStore::adam_step`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held NaN/Inf; nothing was changed.
    SkippedNonFinite,
}

/// Named parameters, deterministic (sorted) iteration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    entries: BTreeMap<String, ParamEntry<F>>,
    step: u64,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            step: 0,
        }
    }

    /// Inserts a parameter with zeroed moments. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let shape = value.shape().to_vec();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
            },
        );
        Ok(())
    }

    pub(crate) fn insert_entry(&mut self, name: &str, entry: ParamEntry<F>) -> Result<()> {
        if entry.m.shape() != entry.value.shape() || entry.v.shape() != entry.value.shape() {
            return Err(Error::shape("param moments", name.to_string()));
        }
        if self.entries.insert(name.to_string(), entry).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        Ok(())
    }

    /// He-style uniform init `U(-sqrt(6/fan_in), sqrt(6/fan_in)) * gain`.
    pub fn insert_he(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Result<()> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt() * gain;
        let t = Tensor::from_fn(shape, |_| F::of(rng.random_range(-bound..=bound)));
        self.insert(name, t)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<F>> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<F>> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// Zeroes every value whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.value.data_mut().iter_mut().for_each(|x| *x = F::zero());
            }
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            m: e.m.cast(),
                            v: e.v.cast(),
                        },
                    )
                })
                .collect(),
            step: self.step,
        }
    }

    /// One bias-corrected Adam update. Parameters without a gradient entry are
    /// treated as having zero gradient.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor<F>>, cfg: &AdamConfig) -> Result<StepOutcome> {
        for (name, g) in grads {
            let e = self
                .entries
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
            if g.shape() != e.value.shape() {
                return Err(Error::shape("adam_step", format!("{name}: {:?} vs {:?}", g.shape(), e.value.shape())));
            }
            if !g.all_finite() {
                warn!("non-finite gradient in {name}; skipping optimiser step {}", self.step + 1);
                return Ok(StepOutcome::SkippedNonFinite);
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (b1f, b2f) = (F::of(b1), F::of(b2));
        let (one_b1, one_b2) = (F::of(1.0 - b1), F::of(1.0 - b2));
        let step_size = F::of(cfg.lr / bc1);
        let inv_sqrt_bc2 = F::of(1.0 / bc2.sqrt());
        let eps = F::of(cfg.eps);
        for (name, e) in self.entries.iter_mut() {
            let g = grads.get(name);
            let n = e.value.len();
            for i in 0..n {
                let gi = g.map_or(F::zero(), |g| g.data()[i]);
                let m = b1f * e.m.data()[i] + one_b1 * gi;
                let v = b2f * e.v.data()[i] + one_b2 * gi * gi;
                e.m.data_mut()[i] = m;
                e.v.data_mut()[i] = v;
                let denom = v.sqrt() * inv_sqrt_bc2 + eps;
                e.value.data_mut()[i] -= step_size * m / denom;
            }
        }
        Ok(StepOutcome::Applied)
    }
}
