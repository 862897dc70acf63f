//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates the forward pass; it never touches the
//! backward kernels it is used to verify.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{GradTape, Var};
use crate::tensor::{Mode, Padding, Result, Tensor};

/// Denominator floor for the relative error, so entries that are zero on both
/// sides compare absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Step used for parameter value `theta`.
pub fn step_for(theta: f64) -> f64 {
    1e-4 * theta.abs().max(1.0)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients of a scalar function of `inputs` against central
/// differences. `build` must record a scalar loss from the given leaves and be
/// a deterministic function of the input values.
pub fn check<F>(inputs: &[Tensor<f64>], build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = GradTape::new();
        let leaves: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = build(&mut tape, &leaves)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = GradTape::new();
    let leaves: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = build(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut values = inputs.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .wrt(*leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let theta = inputs[i].data()[j];
            let h = step_for(theta);
            values[i].data_mut()[j] = theta + h;
            let plus = eval(&values)?;
            values[i].data_mut()[j] = theta - h;
            let minus = eval(&values)?;
            values[i].data_mut()[j] = theta;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Differentiable ops covered by [`check_op`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradOp {
    Conv2dSame,
    Conv2dValid,
    Conv2dStem,
    Conv2dProjection,
    BatchNormTrain,
    BatchNormInfer,
    Relu,
    MaxPool,
    GlobalAvgPool,
    Dense,
    Dropout,
    Softmax,
    SparseCe,
    Add,
}

impl GradOp {
    pub const ALL: [GradOp; 14] = [
        GradOp::Conv2dSame,
        GradOp::Conv2dValid,
        GradOp::Conv2dStem,
        GradOp::Conv2dProjection,
        GradOp::BatchNormTrain,
        GradOp::BatchNormInfer,
        GradOp::Relu,
        GradOp::MaxPool,
        GradOp::GlobalAvgPool,
        GradOp::Dense,
        GradOp::Dropout,
        GradOp::Softmax,
        GradOp::SparseCe,
        GradOp::Add,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::Conv2dSame => "conv2d 3x3 same",
            GradOp::Conv2dValid => "conv2d 2x2 valid",
            GradOp::Conv2dStem => "conv2d 7x7 stride 2",
            GradOp::Conv2dProjection => "conv2d 1x1 stride 2",
            GradOp::BatchNormTrain => "batchnorm2d train",
            GradOp::BatchNormInfer => "batchnorm2d infer",
            GradOp::Relu => "relu",
            GradOp::MaxPool => "maxpool2d 3x3/2",
            GradOp::GlobalAvgPool => "global_avg_pool",
            GradOp::Dense => "dense",
            GradOp::Dropout => "dropout",
            GradOp::Softmax => "softmax",
            GradOp::SparseCe => "sparse_ce_loss",
            GradOp::Add => "residual add",
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so no finite-difference probe crosses the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// A shuffled ladder of well-separated values, so no window has a near-tie.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n)
        .map(|i| i as f64 * 0.1 + rng.random_range(0.0..0.01))
        .collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("shape matches")
}

fn conv_case(
    seed: u64,
    rng: &mut ChaCha8Rng,
    k: usize,
    stride: usize,
    padding: Padding,
) -> Result<GradCheckReport> {
    let h = rng.random_range(3..=4);
    let w = rng.random_range(3..=4);
    let n = 2;
    let (cin, cout) = (2, 3);
    let x = uniform(rng, &[n, cin, h, w], -1.0, 1.0);
    let wt = uniform(rng, &[cout, cin, k, k], -1.0, 1.0);
    let b = uniform(rng, &[cout], -1.0, 1.0);
    let ho = crate::kernels::output_extent(h, k, stride, padding).map(|e| e.0);
    let wo = crate::kernels::output_extent(w, k, stride, padding).map(|e| e.0);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        panic!("seed {seed}: invalid conv geometry");
    };
    let r = uniform(rng, &[n, cout, ho, wo], -1.0, 1.0);
    check(&[x, wt, b], |tape, v| {
        let y = tape.conv2d(v[0], v[1], Some(v[2]), stride, padding)?;
        tape.weighted_sum(y, &r)
    })
}

/// Gradient check of one op on random inputs (spatial extents at most 4×4) drawn from `seed`.
pub fn check_op(op: GradOp, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match op {
        GradOp::Conv2dSame => {
            let stride = rng.random_range(1..=2);
            conv_case(seed, &mut rng, 3, stride, Padding::Same)
        }
        GradOp::Conv2dValid => {
            let stride = rng.random_range(1..=2);
            conv_case(seed, &mut rng, 2, stride, Padding::Valid)
        }
        GradOp::Conv2dStem => conv_case(seed, &mut rng, 7, 2, Padding::Same),
        GradOp::Conv2dProjection => conv_case(seed, &mut rng, 1, 2, Padding::Same),
        GradOp::BatchNormTrain | GradOp::BatchNormInfer => {
            let mode = if op == GradOp::BatchNormTrain {
                Mode::Train
            } else {
                Mode::Infer
            };
            let shape = [2, 3, rng.random_range(2..=4), rng.random_range(2..=4)];
            let x = uniform(&mut rng, &shape, -2.0, 2.0);
            let gamma = uniform(&mut rng, &[3], 0.5, 1.5);
            let beta = uniform(&mut rng, &[3], -0.5, 0.5);
            let mean = uniform(&mut rng, &[3], -0.5, 0.5);
            let var = uniform(&mut rng, &[3], 0.5, 2.0);
            let r = uniform(&mut rng, &shape, -1.0, 1.0);
            check(&[x, gamma, beta], |tape, v| {
                let (mut m, mut s) = (mean.clone(), var.clone());
                let y = tape.batchnorm2d(v[0], v[1], v[2], &mut m, &mut s, mode)?;
                tape.weighted_sum(y, &r)
            })
        }
        GradOp::Relu => {
            let x = away_from_zero(&mut rng, &[2, 2, 4, 4]);
            let r = uniform(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
            check(&[x], |tape, v| {
                let y = tape.relu(v[0]);
                tape.weighted_sum(y, &r)
            })
        }
        GradOp::MaxPool => {
            let shape = [2, 2, rng.random_range(3..=4), rng.random_range(3..=4)];
            let x = distinct(&mut rng, &shape);
            let (ho, wo) = (shape[2].div_ceil(2), shape[3].div_ceil(2));
            let r = uniform(&mut rng, &[2, 2, ho, wo], -1.0, 1.0);
            check(&[x], |tape, v| {
                let y = tape.maxpool2d(v[0], 3, 2)?;
                tape.weighted_sum(y, &r)
            })
        }
        GradOp::GlobalAvgPool => {
            let x = uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
            let r = uniform(&mut rng, &[2, 3], -1.0, 1.0);
            check(&[x], |tape, v| {
                let y = tape.global_avg_pool(v[0])?;
                tape.weighted_sum(y, &r)
            })
        }
        GradOp::Dense => {
            let x = uniform(&mut rng, &[3, 4], -1.0, 1.0);
            let w = uniform(&mut rng, &[4, 2], -1.0, 1.0);
            let b = uniform(&mut rng, &[2], -1.0, 1.0);
            let r = uniform(&mut rng, &[3, 2], -1.0, 1.0);
            check(&[x, w, b], |tape, v| {
                let y = tape.dense(v[0], v[1], v[2])?;
                tape.weighted_sum(y, &r)
            })
        }
        GradOp::Dropout => {
            let x = uniform(&mut rng, &[4, 4], -1.0, 1.0);
            let r = uniform(&mut rng, &[4, 4], -1.0, 1.0);
            check(&[x], |tape, v| {
                // same seed on every evaluation, so the mask is fixed
                let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD80F);
                let y = tape.dropout(v[0], 0.5, Mode::Train, &mut mask_rng)?;
                tape.weighted_sum(y, &r)
            })
        }
        GradOp::Softmax => {
            let x = uniform(&mut rng, &[3, 4], -2.0, 2.0);
            let r = uniform(&mut rng, &[3, 4], -1.0, 1.0);
            check(&[x], |tape, v| {
                let y = tape.softmax(v[0])?;
                tape.weighted_sum(y, &r)
            })
        }
        GradOp::SparseCe => {
            let x = uniform(&mut rng, &[4, 2], -3.0, 3.0);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..2)).collect();
            check(&[x], |tape, v| tape.sparse_ce_loss(v[0], &labels))
        }
        GradOp::Add => {
            let a = uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
            let b = uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
            let r = uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
            check(&[a, b], |tape, v| {
                let y = tape.add(v[0], v[1])?;
                tape.weighted_sum(y, &r)
            })
        }
    }
}
