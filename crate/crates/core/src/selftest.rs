//! Built-in oracle suite: gradient checks, exponentiation against explicit
//! Euler integration, inverse consistency, Jacobian determinants, KL against
//! Monte Carlo and the temporal receptive field.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::gradcheck::check;
use crate::autodiff::{Graph, Padding, Var};
use crate::deformation::{
    compose, exp_disp, exponentiate, gaussian_kernel, jacobian_determinant, DeformationField, VelocityField,
    DEFAULT_EXP_STEPS,
};
use crate::error::Result;
use crate::losses::{kl_to_unit_gaussian, LatentGaussian};
use crate::networks::{init_params, temporal_graph, BoundParams, ModelConfig};
use crate::tensor::Tensor;

/// Outcome of one oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn outcome(name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0) * scale)
}

/// Smooth sinusoidal velocity with phases that keep samples off the grid lines.
pub fn smooth_field(h: usize, w: usize, amp: f64, seed: u64) -> VelocityField<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (rng.random_range(0.08..0.2), rng.random_range(0.08..0.2));
    let (p, q) = (rng.random_range(0.0..6.0), rng.random_range(0.0..6.0));
    VelocityField::from_fn(h, w, 1.5, |y, x| {
        let (x, y) = (x as f64, y as f64);
        (
            amp * (a * x + p).sin() * (b * y + 0.3).cos() / 1.42,
            amp * (b * y + q).cos() * (a * x + 0.7).sin() / 1.42,
        )
    })
}

fn weighted<F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>(
    f: F,
    seed: u64,
) -> impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> {
    move |g, v| {
        let y = f(g, v)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = g.shape(y).to_vec();
        let w = g.constant(rand_tensor(&mut rng, &shape, 1.0));
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }
}

/// Finite-difference checks of every differentiable op (one instance each).
pub fn gradient_checks(seed: u64, tol: f64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let disp = smooth_field(10, 10, 1.5, seed).to_tensor();
    let cases: Vec<(&str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>)> = vec![
        (
            "conv2d",
            vec![rand_tensor(&mut rng, &[2, 8, 8], 1.0), rand_tensor(&mut rng, &[3, 2, 3, 3], 0.5)],
            Box::new(weighted(|g, v| g.conv2d(v[0], v[1], None, 2, Padding::Same), 1)),
        ),
        (
            "conv_transpose2d",
            vec![rand_tensor(&mut rng, &[2, 4, 4], 1.0), rand_tensor(&mut rng, &[2, 2, 4, 4], 0.5)],
            Box::new(weighted(|g, v| g.conv_transpose2d(v[0], v[1], None, 2, 1), 2)),
        ),
        (
            "conv1d",
            vec![rand_tensor(&mut rng, &[3, 20], 1.0), rand_tensor(&mut rng, &[2, 3, 3], 0.5)],
            Box::new(weighted(|g, v| g.conv1d(v[0], v[1], None, 4), 3)),
        ),
        (
            "dense",
            vec![rand_tensor(&mut rng, &[6], 1.0), rand_tensor(&mut rng, &[4, 6], 1.0)],
            Box::new(weighted(|g, v| g.dense(v[0], v[1], None), 4)),
        ),
        (
            "warp",
            vec![rand_tensor(&mut rng, &[1, 10, 10], 1.0), disp.clone()],
            Box::new(weighted(|g, v| g.warp(v[0], v[1]), 5)),
        ),
        (
            "exponentiate",
            vec![disp.clone()],
            Box::new(weighted(|g, v| exp_disp(g, v[0], DEFAULT_EXP_STEPS), 6)),
        ),
        (
            "smooth",
            vec![rand_tensor(&mut rng, &[2, 9, 9], 1.0)],
            Box::new(weighted(|g, v| g.smooth_planes(v[0], Rc::new(gaussian_kernel(2.0))), 7)),
        ),
        (
            "lcc",
            vec![rand_tensor(&mut rng, &[1, 10, 10], 1.0), rand_tensor(&mut rng, &[1, 10, 10], 1.0)],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.lcc(v[0], v[1], 5)),
        ),
        (
            "kl",
            vec![rand_tensor(&mut rng, &[8], 1.5), rand_tensor(&mut rng, &[8], 1.5)],
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.kl_unit_gaussian(v[0], v[1])),
        ),
    ];
    let mut out = Vec::new();
    for (name, inputs, build) in cases {
        let r = check(&inputs, build, h, None, &mut rng)?;
        out.push(outcome(
            &format!("gradient {name}"),
            r.passes(tol),
            format!("max rel err {:.2e} over {} coords", r.max_rel_err, r.checked),
        ));
    }
    Ok(out)
}

/// Sample of a velocity field at a real position (bilinear, clamped).
fn sample_velocity(v: &VelocityField<f64>, x: f64, y: f64) -> (f64, f64) {
    let xc = x.clamp(0.0, (v.w - 1) as f64);
    let yc = y.clamp(0.0, (v.h - 1) as f64);
    let (x0, y0) = ((xc.floor() as usize).min(v.w - 2), (yc.floor() as usize).min(v.h - 2));
    let (fx, fy) = (xc - x0 as f64, yc - y0 as f64);
    let n = v.h * v.w;
    let at = |p: usize, yy: usize, xx: usize| v.data[p * n + yy * v.w + xx];
    let lerp = |p: usize| {
        (1.0 - fy) * ((1.0 - fx) * at(p, y0, x0) + fx * at(p, y0, x0 + 1))
            + fy * ((1.0 - fx) * at(p, y0 + 1, x0) + fx * at(p, y0 + 1, x0 + 1))
    };
    (lerp(0), lerp(1))
}

/// Forward-Euler flow of `v` for unit time in `steps` steps, evaluated at grid points.
pub fn euler_flow(v: &VelocityField<f64>, steps: usize) -> DeformationField<f64> {
    let dt = 1.0 / steps as f64;
    DeformationField::from_fn(v.h, v.w, |y, x| {
        let (mut px, mut py) = (x as f64, y as f64);
        for _ in 0..steps {
            let (vx, vy) = sample_velocity(v, px, py);
            px += dt * vx;
            py += dt * vy;
        }
        (px, py)
    })
}

/// Max distance between `exp(v)` and the 1024-step Euler flow over pixels
/// whose flow stays `margin` away from the border.
pub fn exp_vs_euler_error(v: &VelocityField<f64>, margin: f64) -> Result<f64> {
    let e = exponentiate(v, DEFAULT_EXP_STEPS)?;
    let r = euler_flow(v, 1024);
    let n = v.h * v.w;
    let mut worst = 0.0f64;
    for i in 0..n {
        let (ex, ey) = (e.data[i], e.data[n + i]);
        let (rx, ry) = (r.data[i], r.data[n + i]);
        let (x, y) = ((i % v.w) as f64, (i / v.w) as f64);
        let lo = margin;
        let (hx, hy) = ((v.w - 1) as f64 - margin, (v.h - 1) as f64 - margin);
        if [x, rx].iter().all(|&c| c >= lo && c <= hx) && [y, ry].iter().all(|&c| c >= lo && c <= hy) {
            worst = worst.max((ex - rx).hypot(ey - ry));
        }
    }
    Ok(worst)
}

/// Mean `‖exp(v)∘exp(−v) − id‖` over pixels at least `margin` from the border.
pub fn inverse_residual(v: &VelocityField<f64>, margin: usize) -> Result<f64> {
    let fwd = exponentiate(v, DEFAULT_EXP_STEPS)?;
    let bwd = exponentiate(&v.negated(), DEFAULT_EXP_STEPS)?;
    let c = compose(&fwd, &bwd)?;
    let u = c.displacement();
    let n = v.h * v.w;
    let (mut s, mut k) = (0.0, 0usize);
    for y in margin..v.h - margin {
        for x in margin..v.w - margin {
            let i = y * v.w + x;
            s += u[i].hypot(u[n + i]);
            k += 1;
        }
    }
    Ok(s / k.max(1) as f64)
}

/// Monte-Carlo estimate of `KL(q ‖ N(0,I))` from `samples` draws of `q`.
pub fn kl_monte_carlo(q: &LatentGaussian<f64>, samples: usize, rng: &mut impl Rng) -> f64 {
    let mut acc = 0.0;
    for _ in 0..samples {
        let mut log_ratio = 0.0;
        for (&m, &lv) in q.mean.iter().zip(&q.log_var) {
            let e: f64 = StandardNormal.sample(rng);
            let z = m + (0.5 * lv).exp() * e;
            // log q(z) − log p(z); the 2π terms cancel
            log_ratio += -0.5 * lv - 0.5 * e * e + 0.5 * z * z;
        }
        acc += log_ratio;
    }
    acc / samples as f64
}

/// Columns whose temporal-network output moves when column `at` of the input
/// codes is perturbed; returns the largest |Δt| observed.
pub fn temporal_influence_radius(cfg: &ModelConfig, t: usize, at: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params::<f64>(cfg, &mut rng)?;
    let base = Tensor::from_fn(&[cfg.d, t], |_| rng.random_range(-1.0..1.0));
    let mut probe = base.clone();
    for i in 0..cfg.d {
        probe.data_mut()[i * t + at] += 1.0;
    }
    let tbar: Vec<f64> = (1..=t).map(|i| i as f64 / t as f64).collect();
    let run = |z: &Tensor<f64>| -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &params, false);
        let zv = g.constant(z.clone());
        let out = temporal_graph(&mut g, &p, cfg, zv, &tbar)?;
        Ok(g.value(out).clone())
    };
    let (a, b) = (run(&base)?, run(&probe)?);
    let mut radius = 0;
    for col in 0..t {
        if (0..cfg.d).any(|i| a.data()[i * t + col] != b.data()[i * t + col]) {
            radius = radius.max(col.abs_diff(at));
        }
    }
    Ok(radius)
}

/// Runs the whole suite.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = gradient_checks(seed, 1e-4)?;

    let mut worst = 0.0f64;
    for s in 0..3 {
        worst = worst.max(exp_vs_euler_error(&smooth_field(48, 48, 4.0, seed + s), 2.0)?);
    }
    out.push(outcome("exp vs euler", worst <= 0.05, format!("max error {worst:.4} px (limit 0.05)")));

    let res = inverse_residual(&smooth_field(48, 48, 4.0, seed + 10), 4)?;
    out.push(outcome("inverse consistency", res <= 0.1, format!("mean residual {res:.4} px (limit 0.1)")));

    let id = jacobian_determinant(&DeformationField::<f64>::identity(16, 16));
    let id_ok = id.data.iter().all(|&d| d == 1.0);
    out.push(outcome("det J identity", id_ok, "all ones".into()));
    let scaled = DeformationField::<f64>::from_fn(16, 16, |y, x| (1.1 * x as f64, 1.1 * y as f64));
    let worst = jacobian_determinant(&scaled).data.iter().fold(0.0f64, |m, &d| m.max((d - 1.21).abs()));
    out.push(outcome("det J scaling", worst <= 1e-6, format!("max |det − 1.21| = {worst:.2e}")));

    let mut rng = ChaCha8Rng::seed_from_u64(seed + 20);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let q = LatentGaussian {
            mean: (0..32).map(|_| rng.random_range(-1.0..1.0)).collect(),
            log_var: (0..32).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let exact = kl_to_unit_gaussian(&q);
        let mc = kl_monte_carlo(&q, 100_000, &mut rng);
        worst = worst.max((mc - exact).abs() / exact);
    }
    let prior_zero = kl_to_unit_gaussian(&LatentGaussian::<f64>::prior(32)) == 0.0;
    out.push(outcome(
        "kl vs monte carlo",
        worst <= 0.02 && prior_zero,
        format!("max relative deviation {:.3}% (limit 2%), KL(prior) = 0: {prior_zero}", 100.0 * worst),
    ));

    let cfg = ModelConfig {
        d: 8,
        height: 8,
        width: 8,
        ..ModelConfig::default()
    };
    let r = temporal_influence_radius(&cfg, 48, 24, seed)?;
    out.push(outcome(
        "temporal receptive field",
        r == cfg.receptive_radius() && r == 15,
        format!("influence radius {r} frames (expected 15)"),
    ));
    Ok(out)
}
