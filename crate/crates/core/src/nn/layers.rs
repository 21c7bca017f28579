use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::params::{Group, ParamId, ParamStore, StatsId};
use crate::autodiff::{Padding, Tape, Var};
use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-5;
pub const IN_EPS: f64 = 1e-6;

/// One scale/shift pair plus its running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnSet {
    pub scale: ParamId,
    pub shift: ParamId,
    pub stats: StatsId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stochastic {
    Dropout,
    GaussianNoise,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense { w: ParamId, b: ParamId },
    Conv { w: ParamId, b: ParamId, padding: Padding },
    /// Batch norm selecting the parameter set by hypothesis index; plain
    /// batch norm uses the same set in both slots.
    BatchNorm { sets: [BnSet; 2] },
    Relu,
    LeakyRelu(f64),
    Dropout(f64),
    GaussianNoise(f64),
    MaxPool2,
    GlobalAvgPool,
    Flatten,
    InstanceNorm,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
}

/// Forward behaviour of normalization and stochastic layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Normalize with batch statistics (otherwise running statistics).
    pub batch_stats: bool,
    /// Apply dropout and noise (otherwise identity).
    pub stochastic: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode {
        batch_stats: true,
        stochastic: true,
    };
    /// Batch statistics but no stochastic layers.
    pub const DETERMINISTIC: Mode = Mode {
        batch_stats: true,
        stochastic: false,
    };
    pub const EVAL: Mode = Mode {
        batch_stats: false,
        stochastic: false,
    };
}

/// A batch estimate waiting to be folded into running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsUpdate {
    pub id: StatsId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Binds parameter values to a tape for one forward pass.
///
/// Each parameter is inserted at most once, so shared parameters accumulate
/// the gradient of every use.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    values: &'a [Tensor],
    stats: &'a ParamStore,
    trainable: [bool; 2],
    bindings: Vec<Option<Var>>,
    pub mode: Mode,
    rng: Option<&'a mut Rng>,
    pub updates: Vec<StatsUpdate>,
}

impl<'a> Forward<'a> {
    /// `values` overrides the store's parameter values (e.g. averaged weights).
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, values: &'a [Tensor], mode: Mode) -> Self {
        Self {
            tape,
            values,
            stats: store,
            trainable: [false, false],
            bindings: vec![None; store.len()],
            mode,
            rng: None,
            updates: Vec::new(),
        }
    }

    pub fn with_rng(mut self, rng: &'a mut Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    /// Replaces the stream used by stochastic layers.
    pub fn set_rng(&mut self, rng: Option<&'a mut Rng>) {
        self.rng = rng;
    }

    /// Marks a parameter group as requiring gradients.
    pub fn train(mut self, group: Group) -> Self {
        self.trainable[group_index(group)] = true;
        self
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bindings[id.0] {
            return v;
        }
        let req = self.trainable[group_index(self.stats.meta(id).group)];
        let v = self.tape.leaf(self.values[id.0].clone(), req);
        self.bindings[id.0] = Some(v);
        v
    }

    /// Tape nodes of every bound parameter.
    pub fn bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bindings
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.map(|v| (ParamId(i), v)))
    }

    pub fn store(&self) -> &ParamStore {
        self.stats
    }

    fn rng(&mut self) -> Result<&mut Rng> {
        self.rng
            .as_deref_mut()
            .ok_or_else(|| invalid("stochastic layer", "no random stream attached in stochastic mode"))
    }
}

fn group_index(g: Group) -> usize {
    match g {
        Group::Classifier => 0,
        Group::Discriminator => 1,
    }
}

/// Affine map `x·W + b` for `x: [N, in]`, `W: [in, out]`.
pub fn dense_forward(fwd: &mut Forward<'_>, w: ParamId, b: ParamId, x: Var) -> Result<Var> {
    let wv = fwd.param(w);
    let bv = fwd.param(b);
    let y = fwd.tape.matmul(x, wv)?;
    fwd.tape.add_channel(y, bv)
}

/// Batch norm over axis 1 using the parameter set for `hypothesis` (0 or 1).
pub fn batchnorm_forward(fwd: &mut Forward<'_>, sets: &[BnSet; 2], hypothesis: usize, x: Var) -> Result<Var> {
    let set = sets[hypothesis];
    let normed = if fwd.mode.batch_stats {
        let (y, mean, var) = fwd.tape.batch_norm(x, BN_EPS)?;
        fwd.updates.push(StatsUpdate {
            id: set.stats,
            mean,
            var,
        });
        y
    } else {
        let s = &fwd.stats.stats()[set.stats.0];
        let (mean, var) = (s.mean.clone(), s.var.clone());
        fwd.tape.channel_standardize(x, &mean, &var, BN_EPS)?
    };
    let scale = fwd.param(set.scale);
    let shift = fwd.param(set.shift);
    let y = fwd.tape.mul_channel(normed, scale)?;
    fwd.tape.add_channel(y, shift)
}

/// Dropout (inverted scaling) or additive Gaussian noise; identity when the
/// forward mode is not stochastic.
pub fn stochastic_forward(fwd: &mut Forward<'_>, kind: Stochastic, x: Var, amount: f64) -> Result<Var> {
    match kind {
        Stochastic::Dropout if !(0.0..1.0).contains(&amount) => {
            return Err(invalid("dropout", "rate must lie in [0, 1)"));
        }
        Stochastic::GaussianNoise if !(amount >= 0.0) => {
            return Err(invalid("gaussian noise", "stddev must be non-negative"));
        }
        _ => {}
    }
    if !fwd.mode.stochastic || amount == 0.0 {
        return Ok(x);
    }
    let shape = fwd.tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let rng = fwd.rng()?;
    match kind {
        Stochastic::Dropout => {
            let keep = 1.0 - amount;
            let mask: Vec<f64> = (0..n)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let m = fwd.tape.constant(Tensor::new(shape, mask)?);
            fwd.tape.mul(x, m)
        }
        Stochastic::GaussianNoise => {
            let noise: Vec<f64> = (0..n)
                .map(|_| amount * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let e = fwd.tape.constant(Tensor::new(shape, noise)?);
            fwd.tape.add(x, e)
        }
    }
}

/// Per-sample, per-channel standardization of an image batch.
pub fn instance_norm_input(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.instance_norm(x, IN_EPS)
}

impl Layer {
    pub fn forward(&self, fwd: &mut Forward<'_>, hypothesis: usize, x: Var) -> Result<Var> {
        match self {
            Layer::Dense { w, b } => dense_forward(fwd, *w, *b, x),
            Layer::Conv { w, b, padding } => {
                let wv = fwd.param(*w);
                let bv = fwd.param(*b);
                let y = fwd.tape.conv2d(x, wv, *padding)?;
                fwd.tape.add_channel(y, bv)
            }
            Layer::BatchNorm { sets } => batchnorm_forward(fwd, sets, hypothesis, x),
            Layer::Relu => fwd.tape.relu(x),
            Layer::LeakyRelu(a) => fwd.tape.leaky_relu(x, *a),
            Layer::Dropout(r) => stochastic_forward(fwd, Stochastic::Dropout, x, *r),
            Layer::GaussianNoise(s) => stochastic_forward(fwd, Stochastic::GaussianNoise, x, *s),
            Layer::MaxPool2 => fwd.tape.max_pool2(x),
            Layer::GlobalAvgPool => fwd.tape.global_avg_pool(x),
            Layer::Flatten => fwd.tape.flatten(x),
            Layer::InstanceNorm => instance_norm_input(fwd.tape, x),
        }
    }

    /// Parameters referenced by this layer for the given hypothesis slot.
    pub fn params(&self, hypothesis: usize) -> Vec<ParamId> {
        match self {
            Layer::Dense { w, b } | Layer::Conv { w, b, .. } => vec![*w, *b],
            Layer::BatchNorm { sets } => vec![sets[hypothesis].scale, sets[hypothesis].shift],
            _ => Vec::new(),
        }
    }
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, hypothesis: usize, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(fwd, hypothesis, h)?;
        }
        Ok(h)
    }

    pub fn params(&self, hypothesis: usize) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params(hypothesis)).collect()
    }
}

/// Fan-in scaled Gaussian initialization, `std = sqrt(2 / fan_in)`.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = libm::sqrt(2.0 / fan_in as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}
