//! Central finite-difference checks of every differentiable op and loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmim_core::losses::{
    combined_loss, feature_loss, ffl_loss, ffl_loss_weighted, ffl_weights, l1_loss, ssim_loss, FeatureExtractor,
    LossWeights,
};
use tmim_core::oracles::oracle_finite_diff;
use tmim_core::{Result, Tensor};

const SEEDS: u64 = 20;
const OP_TOL: f64 = 1e-5;
const LOSS_TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

/// Uniform values in `[lo, hi)` kept at least `gap` away from zero.
fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, gap: f64) -> Vec<f64> {
    let n: usize = shape.iter().product();
    (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if v.abs() >= gap {
                break v;
            }
        })
        .collect()
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

type Fun<'a> = dyn Fn(&[Tensor]) -> Result<Tensor> + 'a;

/// Checks `d/dx_i sum(f(x) ⊙ r)` for every input against central differences.
fn check(name: &str, seed: u64, inputs: &[Vec<f64>], shapes: &[&[usize]], f: &Fun, tol: f64) {
    let params: Vec<Tensor> = inputs
        .iter()
        .zip(shapes)
        .map(|(d, s)| Tensor::param(d.clone(), s).unwrap())
        .collect();
    let out = f(&params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let proj = Tensor::new(random(&mut rng, out.shape(), -1.0, 1.0, 0.0), out.shape()).unwrap();
    let project = |t: Tensor| -> Result<Tensor> { Ok(t.mul(&proj)?.sum()) };
    project(out).unwrap().backward().unwrap();
    for (i, p) in params.iter().enumerate() {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let mut probe = |x: &Tensor| -> Result<f64> {
            let mut args: Vec<Tensor> = inputs.iter().zip(shapes).map(|(d, s)| Tensor::new(d.clone(), s)).collect::<Result<_>>()?;
            args[i] = x.clone();
            Ok(project(f(&args)?)?.item())
        };
        let x = Tensor::new(inputs[i].clone(), shapes[i]).unwrap();
        let numeric = oracle_finite_diff(&mut probe, &x, EPS).unwrap();
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < tol, "{name} seed {seed} input {i}: rel err {err:.3e}");
    }
}

/// Runs `check` over `SEEDS` instances with inputs drawn in `[lo, hi)`.
fn sweep(name: &str, shapes: &[&[usize]], lo: f64, hi: f64, gap: f64, f: &Fun, tol: f64) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Vec<f64>> = shapes.iter().map(|s| random(&mut rng, s, lo, hi, gap)).collect();
        check(name, seed, &inputs, shapes, f, tol);
    }
}

fn op(name: &str, shapes: &[&[usize]], f: &Fun) {
    sweep(name, shapes, -1.0, 1.0, 0.0, f, OP_TOL);
}

/// Inputs away from the kink at zero.
fn kinked(name: &str, shapes: &[&[usize]], f: &Fun) {
    sweep(name, shapes, -1.0, 1.0, 1e-3, f, OP_TOL);
}

pub fn binary_ops_with_broadcasting() {
    let cases: [(&[usize], &[usize]); 4] = [(&[2, 3, 4], &[2, 3, 4]), (&[2, 3, 4], &[3, 1]), (&[4], &[2, 3, 4]), (&[2, 1, 4], &[1, 3, 1])];
    for (a, b) in cases {
        op("add", &[a, b], &|t| t[0].add(&t[1]));
        op("sub", &[a, b], &|t| t[0].sub(&t[1]));
        op("mul", &[a, b], &|t| t[0].mul(&t[1]));
        sweep("div", &[a, b], 0.5, 2.0, 0.0, &|t| t[0].div(&t[1]), OP_TOL);
    }
}

pub fn unary_ops() {
    let s: &[usize] = &[2, 3, 5];
    op("add_scalar", &[s], &|t| Ok(t[0].add_scalar(0.7)));
    op("mul_scalar", &[s], &|t| Ok(t[0].mul_scalar(-1.3)));
    op("neg", &[s], &|t| Ok(t[0].neg()));
    op("square", &[s], &|t| Ok(t[0].square()));
    kinked("abs", &[s], &|t| Ok(t[0].abs()));
    kinked("relu", &[s], &|t| Ok(t[0].relu()));
    kinked("leaky_relu", &[s], &|t| Ok(t[0].leaky_relu(0.2)));
    sweep("sigmoid", &[s], -6.0, 6.0, 0.0, &|t| Ok(t[0].sigmoid()), OP_TOL);
}

pub fn reductions() {
    let s: &[usize] = &[2, 3, 4];
    op("sum", &[s], &|t| Ok(t[0].sum()));
    op("mean", &[s], &|t| Ok(t[0].mean()));
    op("sum_axes", &[s], &|t| t[0].sum_axes(&[0, 2]));
    op("mean_axes", &[s], &|t| t[0].mean_axes(&[1]));
}

pub fn shape_ops() {
    op("reshape", &[&[2, 6]], &|t| t[0].reshape(&[3, 4]));
    op("transpose_last", &[&[2, 3, 4]], &|t| t[0].transpose_last());
    op("concat", &[&[2, 1, 3], &[2, 2, 3]], &|t| Tensor::concat(&[&t[0], &t[1]], 1));
    op("narrow", &[&[2, 5, 3]], &|t| t[0].narrow(1, 1, 3));
    op("pad_reflect", &[&[1, 2, 4, 5]], &|t| t[0].pad_reflect(2));
    op("upsample_nearest", &[&[1, 2, 3, 2]], &|t| t[0].upsample_nearest(2));
    op("separable_filter", &[&[2, 1, 6, 7]], &|t| t[0].separable_filter(&[0.2, -0.5, 0.9]));
}

pub fn matmul_plain_and_batched() {
    op("matmul", &[&[3, 4], &[4, 2]], &|t| t[0].matmul(&t[1]));
    op("matmul_batched", &[&[2, 3, 4], &[2, 4, 5]], &|t| t[0].matmul(&t[1]));
}

pub fn conv2d_all_paths() {
    op("conv2d_s1", &[&[2, 3, 6, 5], &[4, 3, 3, 3], &[4]], &|t| t[0].conv2d(&t[1], Some(&t[2]), 1, 1));
    op("conv2d_s2", &[&[2, 3, 7, 6], &[4, 3, 3, 3], &[4]], &|t| t[0].conv2d(&t[1], Some(&t[2]), 2, 1));
    op("conv2d_nopad", &[&[1, 2, 5, 5], &[3, 2, 3, 3]], &|t| t[0].conv2d(&t[1], None, 1, 0));
    op("conv2d_rect", &[&[1, 1, 6, 8], &[2, 1, 1, 5]], &|t| t[0].conv2d(&t[1], None, 1, 2));
}

pub fn dft2_transform() {
    op("dft2", &[&[1, 2, 4, 6]], &|t| t[0].dft2());
}

pub fn detach_blocks_gradient() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    let y = x.mul(&x.detach()).unwrap().sum();
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 2.0]);
}

fn image_pair(f: &Fun, name: &str) {
    sweep(name, &[&[1, 3, 8, 8], &[1, 3, 8, 8]], 0.0, 1.0, 0.0, f, LOSS_TOL);
}

pub fn l1_and_ssim_losses() {
    image_pair(&|t| l1_loss(&t[0], &t[1]), "l1_loss");
    image_pair(&|t| ssim_loss(&t[0], &t[1]), "ssim_loss");
}

pub fn ffl_with_frozen_weights() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape: &[usize] = &[1, 3, 8, 8];
        let (o, y) = (random(&mut rng, shape, 0.0, 1.0, 0.0), random(&mut rng, shape, 0.0, 1.0, 0.0));
        let w = ffl_weights(&Tensor::new(o.clone(), shape).unwrap(), &Tensor::new(y.clone(), shape).unwrap()).unwrap();
        // the spectrum weight is a constant of the loss, so it is held fixed
        check("ffl_loss", seed, &[o, y], &[shape, shape], &|t| ffl_loss_weighted(&t[0], &t[1], &w), LOSS_TOL);
    }
}

pub fn feature_loss_through_frozen_extractor() {
    let fx = FeatureExtractor::new();
    image_pair(&|t| feature_loss(&t[0], &t[1], &fx), "feature_loss");
}

pub fn combined_loss_gradient() {
    let fx = FeatureExtractor::new();
    let lw = LossWeights::default();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape: &[usize] = &[1, 3, 8, 8];
        let (o, y) = (random(&mut rng, shape, 0.0, 1.0, 0.0), random(&mut rng, shape, 0.0, 1.0, 0.0));
        let w = ffl_weights(&Tensor::new(o.clone(), shape).unwrap(), &Tensor::new(y.clone(), shape).unwrap()).unwrap();
        let f = |t: &[Tensor]| -> Result<Tensor> {
            // swap the self-weighted spectrum term for one with the weights frozen at the base point
            let frozen = ffl_loss_weighted(&t[0], &t[1], &w)?.sub(&ffl_loss(&t[0], &t[1])?)?;
            combined_loss(&t[0], &t[1], &lw, &fx)?.add(&frozen.mul_scalar(lw.lambda2))
        };
        check("combined_loss", seed, &[o, y], &[shape, shape], &f, LOSS_TOL);
    }
}

/// Every group, in the order they are reported.
pub const GROUPS: &[(&str, fn())] = &[
    ("binary ops", binary_ops_with_broadcasting),
    ("unary ops", unary_ops),
    ("reductions", reductions),
    ("shape ops", shape_ops),
    ("matmul", matmul_plain_and_batched),
    ("conv2d", conv2d_all_paths),
    ("dft2", dft2_transform),
    ("detach", detach_blocks_gradient),
    ("l1 and ssim", l1_and_ssim_losses),
    ("ffl", ffl_with_frozen_weights),
    ("feature loss", feature_loss_through_frozen_extractor),
    ("combined loss", combined_loss_gradient),
];
