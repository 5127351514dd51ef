//! Finite-difference checks for every differentiable op (64-bit, h = 1e-5).

use std::rc::Rc;

use cinemotion::autodiff::gradcheck::{check, GradCheckReport};
use cinemotion::autodiff::{Graph, Padding, Var};
use cinemotion::deformation::{exp_disp, gaussian_kernel};
use cinemotion::image::Image;
use cinemotion::losses::{kl_gradient, symmetric_lcc_graph, LatentGaussian};
use cinemotion::networks::{decode_graph, init_params, pooled_moving, BoundParams, ModelConfig};
use cinemotion::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0) * scale)
}

/// Smooth random displacement with bounded magnitude.
fn smooth_disp(rng: &mut ChaCha8Rng, h: usize, w: usize, amp: f64) -> Tensor<f64> {
    let (a, b, c, d) = (
        rng.random_range(0.2..0.6),
        rng.random_range(0.2..0.6),
        rng.random_range(0.0..6.0),
        rng.random_range(0.0..6.0),
    );
    let n = h * w;
    Tensor::from_fn(&[2, h, w], |i| {
        let (p, r) = (i / n, i % n);
        let (y, x) = ((r / w) as f64, (r % w) as f64);
        if p == 0 {
            amp * (a * x + c).sin() * (b * y).cos()
        } else {
            amp * (b * y + d).cos() * (a * x + 0.7).sin()
        }
    })
}

/// Weighted sum so that every output coordinate matters with a distinct weight.
fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(v).to_vec();
    let w = g.constant(randn(&mut rng, &shape, 1.0));
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn assert_pass(name: &str, r: &GradCheckReport) {
    assert!(
        r.passes(TOL),
        "{name}: max rel err {:.3e} at {:?} ({} coords)",
        r.max_rel_err,
        r.worst,
        r.checked
    );
}

#[test]
fn conv2d_gradients() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for stride in [1, 2] {
            let x = randn(&mut rng, &[2, 8, 8], 1.0);
            let k = randn(&mut rng, &[3, 2, 3, 3], 0.5);
            let b = randn(&mut rng, &[3], 0.5);
            let r = check(
                &[x, k, b],
                |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), stride, Padding::Same)?;
                    weighted_sum(g, y, 11)
                },
                H,
                None,
                &mut rng,
            )
            .unwrap();
            assert_pass("conv2d", &r);
        }
    }
}

#[test]
fn conv2d_kernel_gradient_of_plain_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, &[2, 8, 8], 1.0);
    let k = randn(&mut rng, &[1, 2, 3, 3], 1.0);
    let r = check(
        &[x, k],
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, Padding::Same)?;
            Ok(g.sum(y))
        },
        H,
        None,
        &mut rng,
    )
    .unwrap();
    assert_pass("conv2d sum", &r);
}

#[test]
fn conv_transpose2d_gradients() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = randn(&mut rng, &[3, 4, 4], 1.0);
        let k = randn(&mut rng, &[2, 3, 4, 4], 0.5);
        let b = randn(&mut rng, &[2], 0.5);
        let r = check(
            &[x, k, b],
            |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?;
                weighted_sum(g, y, 12)
            },
            H,
            None,
            &mut rng,
        )
        .unwrap();
        assert_pass("conv_transpose2d", &r);
    }
}

#[test]
fn conv1d_dilated_gradients() {
    for (seed, dil) in [(0u64, 1usize), (1, 2), (2, 4), (3, 8)] {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = randn(&mut rng, &[4, 16], 1.0);
        let k = randn(&mut rng, &[3, 4, 3], 0.5);
        let b = randn(&mut rng, &[3], 0.5);
        let r = check(
            &[x, k, b],
            |g, v| {
                let y = g.conv1d(v[0], v[1], Some(v[2]), dil)?;
                weighted_sum(g, y, 13)
            },
            H,
            None,
            &mut rng,
        )
        .unwrap();
        assert_pass("conv1d", &r);
    }
}

#[test]
fn dense_gradients() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = randn(&mut rng, &[7], 1.0);
        let w = randn(&mut rng, &[5, 7], 1.0);
        let b = randn(&mut rng, &[5], 1.0);
        let r = check(
            &[x, w, b],
            |g, v| {
                let y = g.dense(v[0], v[1], Some(v[2]))?;
                Ok(g.sum(y))
            },
            H,
            None,
            &mut rng,
        )
        .unwrap();
        assert_pass("dense", &r);
    }
}

#[test]
fn elementwise_and_structural_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let a = randn(&mut rng, &[3, 4], 1.0);
    let b = randn(&mut rng, &[3, 4], 1.0);
    let r = check(
        &[a, b],
        |g, v| {
            let p = g.mul(v[0], v[1])?;
            let e = g.exp(v[0]);
            let l = g.leaky_relu(v[1], 0.2);
            let s = g.sub(e, l)?;
            let q = g.add(p, s)?;
            let t = g.transpose(q)?;
            let c = g.concat(&[t, t])?;
            let st = g.stack(&[c, c])?;
            let sel = g.select(st, 1)?;
            let r = g.reshape(sel, &[24])?;
            let sc = g.scale(r, 0.7);
            weighted_sum(g, sc, 14)
        },
        H,
        None,
        &mut rng,
    )
    .unwrap();
    assert_pass("elementwise", &r);
}

#[test]
fn warp_gradients_wrt_image_and_field() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let img = randn(&mut rng, &[1, 10, 10], 1.0);
        let disp = smooth_disp(&mut rng, 10, 10, 1.3);
        let r = check(
            &[img, disp],
            |g, v| {
                let y = g.warp(v[0], v[1])?;
                Ok(g.sum(y))
            },
            H,
            None,
            &mut rng,
        )
        .unwrap();
        assert_pass("warp", &r);
    }
}

#[test]
fn exponentiate_gradients() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let v = smooth_disp(&mut rng, 10, 10, 2.0);
        let r = check(
            &[v],
            |g, v| {
                let u = exp_disp(g, v[0], 6)?;
                weighted_sum(g, u, 15)
            },
            H,
            None,
            &mut rng,
        )
        .unwrap();
        assert_pass("exponentiate", &r);
    }
}

#[test]
fn smoothing_gradients() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let x = randn(&mut rng, &[2, 9, 11], 1.0);
        let r = check(
            &[x],
            |g, v| {
                let y = g.smooth_planes(v[0], Rc::new(gaussian_kernel(2.0)))?;
                weighted_sum(g, y, 16)
            },
            H,
            None,
            &mut rng,
        )
        .unwrap();
        assert_pass("smooth spatial", &r);
        let x = randn(&mut rng, &[6, 2, 3, 3], 1.0);
        let r = check(
            &[x],
            |g, v| {
                let y = g.smooth_leading(v[0], Rc::new(gaussian_kernel(1.5)))?;
                weighted_sum(g, y, 17)
            },
            H,
            None,
            &mut rng,
        )
        .unwrap();
        assert_pass("smooth temporal", &r);
    }
}

#[test]
fn lcc_gradients() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let a = randn(&mut rng, &[1, 12, 12], 1.0);
        let b = randn(&mut rng, &[1, 12, 12], 1.0);
        let r = check(&[a, b], |g, v| g.lcc(v[0], v[1], 5), H, None, &mut rng).unwrap();
        assert_pass("lcc", &r);
    }
}

#[test]
fn symmetric_lcc_gradients_through_velocity() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let a = randn(&mut rng, &[1, 10, 10], 1.0);
        let b = randn(&mut rng, &[1, 10, 10], 1.0);
        let v = smooth_disp(&mut rng, 10, 10, 1.5);
        let r = check(
            &[a, b, v],
            |g, v| symmetric_lcc_graph(g, v[0], v[1], v[2], 5, 6),
            H,
            None,
            &mut rng,
        )
        .unwrap();
        assert_pass("symmetric lcc", &r);
    }
}

#[test]
fn kl_gradients() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mu = randn(&mut rng, &[8], 2.0);
        let lv = randn(&mut rng, &[8], 2.0);
        let r = check(&[mu, lv], |g, v| g.kl_unit_gaussian(v[0], v[1]), H, None, &mut rng).unwrap();
        assert_pass("kl", &r);
    }
}

#[test]
fn shape_errors_name_dimension() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 8, 8]));
    let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let err = g.conv2d(x, k, None, 1, Padding::Same).unwrap_err().to_string();
    assert!(err.contains("channel"), "{err}");
    let x1 = g.constant(Tensor::zeros(&[4, 0]));
    let k1 = g.constant(Tensor::zeros(&[1, 4, 3]));
    assert!(g.conv1d(x1, k1, None, 1).is_err());
    let xv = g.constant(Tensor::zeros(&[3]));
    let w = g.constant(Tensor::zeros(&[2, 4]));
    assert!(g.dense(xv, w, None).is_err());
}

#[test]
fn kl_gradient_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mu = randn(&mut rng, &[8], 2.0);
    let lv = randn(&mut rng, &[8], 2.0);
    let mut g = Graph::<f64>::new();
    let (m, l) = (g.input(mu.clone()), g.input(lv.clone()));
    let kl = g.kl_unit_gaussian(m, l).unwrap();
    let grads = g.backward(kl);
    let (gm, gl) = (grads.get(m).unwrap(), grads.get(l).unwrap());
    let q = LatentGaussian { mean: mu.data().to_vec(), log_var: lv.data().to_vec() };
    let (am, al) = kl_gradient(&q);
    for i in 0..8 {
        let want_l = 0.5 * (lv.data()[i].exp() - 1.0);
        assert!((gm[i] - mu.data()[i]).abs() <= 1e-6);
        assert!((gl[i] - want_l).abs() <= 1e-6);
        assert!((am[i] - mu.data()[i]).abs() <= 1e-6 && (al[i] - want_l).abs() <= 1e-6);
    }
}

#[test]
fn lcc_gradient_through_decoder_wrt_code() {
    let cfg = ModelConfig {
        d: 4,
        height: 16,
        width: 16,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = init_params::<f64>(&cfg, &mut rng).unwrap();
    let i0 = Image::from_fn(16, 16, |y, x| ((x as f64) * 0.5).sin() + ((y as f64) * 0.4).cos());
    let it = Image::from_fn(16, 16, |y, x| ((x as f64) * 0.5 + 0.3).sin() + ((y as f64) * 0.4 - 0.2).cos());
    let z = randn(&mut rng, &[4], 1.5);
    let r = check(
        &[z],
        |g, v| {
            let p = BoundParams::bind(g, &params, false);
            let pooled = pooled_moving(g, &i0)?;
            let vel = decode_graph(g, &p, &cfg, v[0], &pooled)?;
            let (a, b) = (g.constant(i0.to_tensor()), g.constant(it.to_tensor()));
            symmetric_lcc_graph(g, a, b, vel, 9, 6)
        },
        H,
        None,
        &mut rng,
    )
    .unwrap();
    assert_pass("lcc wrt z_t", &r);
}
