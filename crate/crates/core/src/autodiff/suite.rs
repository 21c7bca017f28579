//! Reference graphs exercising every tape operation, for gradient checks.

use alloc::boxed::Box;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Padding, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random values kept at least `gap` away from zero.
pub fn rand_away_from_zero(shape: &[usize], seed: u64, gap: f64) -> Tensor {
    let mut t = rand_tensor(shape, seed, -1.0, 1.0);
    for v in t.data_mut() {
        *v = if *v >= 0.0 { *v + gap } else { *v - gap };
    }
    t
}

pub type Graph = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// Reduces any tensor to a scalar through a fixed random weighting so every
/// output coordinate contributes a distinct gradient.
pub fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = rand_tensor(t.shape(y), seed, -1.0, 1.0);
    let w = t.constant(w);
    let m = t.mul(y, w)?;
    t.sum(m)
}

/// Named scalar-valued graphs covering every tape operation, with the
/// points at which to check them.
pub fn op_suite() -> Vec<(&'static str, Tensor, Graph)> {
    let mut v: Vec<(&'static str, Tensor, Graph)> = Vec::new();
    let m = || rand_tensor(&[3, 4], 11, -1.0, 1.0);
    v.push(("add", m(), Box::new(|t, x| {
        let c = t.constant(rand_tensor(&[3, 4], 1, -1.0, 1.0));
        let y = t.add(x, c)?;
        let y = t.mul(y, y)?;
        weighted_sum(t, y, 2)
    })));
    v.push(("sub", m(), Box::new(|t, x| {
        let c = t.constant(rand_tensor(&[3, 4], 1, -1.0, 1.0));
        let y = t.sub(c, x)?;
        let y = t.mul(y, y)?;
        weighted_sum(t, y, 2)
    })));
    v.push(("mul", m(), Box::new(|t, x| {
        let y = t.mul(x, x)?;
        let y = t.mul(y, x)?;
        weighted_sum(t, y, 3)
    })));
    v.push(("scale_add_scalar", m(), Box::new(|t, x| {
        let y = t.scale(x, -1.7)?;
        let y = t.add_scalar(y, 0.3)?;
        let y = t.mul(y, y)?;
        weighted_sum(t, y, 3)
    })));
    v.push(("add_mul_channel", rand_tensor(&[2, 3, 2, 2], 12, -1.0, 1.0), Box::new(|t, x| {
        let s = t.leaf(rand_tensor(&[3], 5, 0.5, 1.5), true);
        let b = t.leaf(rand_tensor(&[3], 6, -1.0, 1.0), true);
        let y = t.mul_channel(x, s)?;
        let y = t.add_channel(y, b)?;
        let y = t.mul(y, y)?;
        weighted_sum(t, y, 4)
    })));
    v.push(("channel_params", rand_tensor(&[3], 13, 0.5, 1.5), Box::new(|t, s| {
        let x = t.constant(rand_tensor(&[4, 3], 7, -1.0, 1.0));
        let y = t.mul_channel(x, s)?;
        let y = t.add_channel(y, s)?;
        let y = t.mul(y, y)?;
        weighted_sum(t, y, 4)
    })));
    v.push(("matmul", m(), Box::new(|t, x| {
        let w = t.leaf(rand_tensor(&[4, 5], 8, -1.0, 1.0), true);
        let y = t.matmul(x, w)?;
        let xt = t.reshape(x, &[4, 3])?;
        let c = t_const(t, &[5, 4], 9);
        let z = t.matmul(y, c)?;
        let z = t.matmul(z, xt)?;
        weighted_sum(t, z, 5)
    })));
    v.push(("exp", m(), Box::new(|t, x| {
        let y = t.exp(x)?;
        weighted_sum(t, y, 6)
    })));
    v.push(("ln", rand_tensor(&[3, 4], 14, 0.2, 2.0), Box::new(|t, x| {
        let y = t.ln(x)?;
        weighted_sum(t, y, 6)
    })));
    v.push(("relu", rand_away_from_zero(&[3, 4], 15, 0.05), Box::new(|t, x| {
        let y = t.relu(x)?;
        let y = t.mul(y, x)?;
        weighted_sum(t, y, 7)
    })));
    v.push(("leaky_relu", rand_away_from_zero(&[3, 4], 16, 0.05), Box::new(|t, x| {
        let y = t.leaky_relu(x, 0.2)?;
        let y = t.mul(y, x)?;
        weighted_sum(t, y, 7)
    })));
    v.push(("sigmoid", m(), Box::new(|t, x| {
        let y = t.sigmoid(x)?;
        weighted_sum(t, y, 8)
    })));
    v.push(("abs_l1", rand_away_from_zero(&[3, 4], 17, 0.05), Box::new(|t, x| {
        let c = t_const(t, &[3, 4], 3);
        let y = t.mul(x, c)?;
        let l = t.l1_norm(y)?;
        let l2 = t.mul(l, l)?;
        Ok(l2)
    })));
    v.push(("min_const", rand_tensor(&[4], 18, 0.0, 1.0), Box::new(|t, x| {
        // one side of the cap is active for the squared norm below
        let s = t.sq_norm(x)?;
        let big = t.min_const(s, 100.0)?;
        let capped = t.min_const(s, 0.01)?;
        let y = t.add(big, capped)?;
        Ok(y)
    })));
    v.push(("softmax", m(), Box::new(|t, x| {
        let y = t.softmax(x)?;
        weighted_sum(t, y, 9)
    })));
    v.push(("log_softmax", m(), Box::new(|t, x| {
        let y = t.log_softmax(x)?;
        weighted_sum(t, y, 10)
    })));
    v.push(("sum_mean", m(), Box::new(|t, x| {
        let y = t.mul(x, x)?;
        let a = t.sum(y)?;
        let b = t.mean(x)?;
        let b = t.mul(b, b)?;
        t.add(a, b)
    })));
    v.push(("sq_norm", m(), Box::new(|t, x| {
        let c = t_const(t, &[3, 4], 4);
        let y = t.mul(x, c)?;
        t.sq_norm(y)
    })));
    v.push(("mean_rows", m(), Box::new(|t, x| {
        let y = t.mean_rows(x)?;
        let y = t.mul(y, y)?;
        weighted_sum(t, y, 11)
    })));
    v.push(("sum_last_axis", m(), Box::new(|t, x| {
        let y = t.sum_last_axis(x)?;
        let y = t.mul(y, y)?;
        weighted_sum(t, y, 12)
    })));
    v.push(("slice_concat", m(), Box::new(|t, x| {
        let a = t.slice_rows(x, 0, 1)?;
        let b = t.slice_rows(x, 1, 3)?;
        let c = t.concat(b, a)?;
        let c = t.mul(c, x)?;
        weighted_sum(t, c, 13)
    })));
    v.push(("reshape_flatten", rand_tensor(&[2, 3, 2], 19, -1.0, 1.0), Box::new(|t, x| {
        let y = t.flatten(x)?;
        let y = t.reshape(y, &[3, 4])?;
        let y = t.mul(y, y)?;
        weighted_sum(t, y, 14)
    })));
    v.push(("conv2d_same", rand_tensor(&[2, 2, 4, 4], 20, -1.0, 1.0), Box::new(|t, x| {
        let w = t.leaf(rand_tensor(&[3, 2, 3, 3], 21, -1.0, 1.0), true);
        let y = t.conv2d(x, w, Padding::Same)?;
        let y = t.mul(y, y)?;
        weighted_sum(t, y, 15)
    })));
    v.push(("conv2d_weight", rand_tensor(&[2, 2, 3, 3], 22, -1.0, 1.0), Box::new(|t, w| {
        let x = t.constant(rand_tensor(&[2, 2, 5, 4], 23, -1.0, 1.0));
        let y = t.conv2d(x, w, Padding::Valid)?;
        let y = t.mul(y, y)?;
        weighted_sum(t, y, 16)
    })));
    v.push(("max_pool2", rand_tensor(&[2, 2, 4, 4], 24, -1.0, 1.0), Box::new(|t, x| {
        let y = t.max_pool2(x)?;
        let y = t.mul(y, y)?;
        weighted_sum(t, y, 17)
    })));
    v.push(("global_avg_pool", rand_tensor(&[2, 3, 2, 2], 25, -1.0, 1.0), Box::new(|t, x| {
        let y = t.global_avg_pool(x)?;
        let y = t.mul(y, y)?;
        weighted_sum(t, y, 18)
    })));
    v.push(("batch_norm_dense", rand_tensor(&[5, 3], 26, -1.0, 1.0), Box::new(|t, x| {
        let (y, _, _) = t.batch_norm(x, 1e-5)?;
        weighted_sum(t, y, 19)
    })));
    v.push(("batch_norm_conv", rand_tensor(&[3, 2, 2, 2], 27, -1.0, 1.0), Box::new(|t, x| {
        let (y, _, _) = t.batch_norm(x, 1e-5)?;
        weighted_sum(t, y, 20)
    })));
    v.push(("channel_standardize", rand_tensor(&[4, 3], 28, -1.0, 1.0), Box::new(|t, x| {
        let y = t.channel_standardize(x, &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?;
        let y = t.mul(y, y)?;
        weighted_sum(t, y, 21)
    })));
    v.push(("instance_norm", rand_tensor(&[2, 2, 3, 3], 29, -1.0, 1.0), Box::new(|t, x| {
        let y = t.instance_norm(x, 1e-6)?;
        weighted_sum(t, y, 22)
    })));
    v
}

fn t_const(t: &mut Tape, shape: &[usize], seed: u64) -> Var {
    t.constant(rand_tensor(shape, 1000 + seed, -1.0, 1.0))
}

