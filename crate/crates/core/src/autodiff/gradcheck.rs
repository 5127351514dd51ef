//! Central finite-difference gradient checking in 64-bit.
//!
//! The relative error of coordinate `i` is
//! `|analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-3·max_j|numeric_j|)`,
//! so coordinates three orders of magnitude below the largest gradient are
//! judged against that scale instead of their own (noise-dominated) size.

use rand::seq::index::sample;
use rand::Rng;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Summary of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares the reverse-mode gradient of the scalar built by `build` against
/// central differences with step `h`.
///
/// At most `max_coords` coordinates per input are probed (chosen with `rng`);
/// `None` probes all of them.
pub fn check<R: Rng>(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    h: f64,
    max_coords: Option<usize>,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::InvalidArgument("gradient check needs a scalar output".into()));
        }
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out);

    let mut pairs: Vec<(usize, usize, f64, f64)> = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(vars[k])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < t.len() => sample(rng, t.len(), m).into_vec(),
            _ => (0..t.len()).collect(),
        };
        for i in coords {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            pairs.push((k, i, analytic[i], numeric));
        }
    }
    let scale = pairs.iter().fold(0.0f64, |m, p| m.max(p.3.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: pairs.len(),
    };
    for (k, i, a, n) in pairs {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = (k, i);
        }
    }
    Ok(report)
}
