//! Assembly of feature generators, classifier heads, and discriminators into
//! hypothesis pairs under the three parameter-sharing schemes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Tape, Var};
use crate::error::{invalid, Result};
use crate::nn::{he_normal, BnSet, Forward, Group, Layer, Mode, Network, ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sharing {
    /// Two fully separate networks, initialized from different seeds.
    Independent,
    /// One set of weights; only batch-norm scale/shift (and running
    /// statistics) differ between the hypotheses.
    ConditionalBn,
    /// One network; the hypotheses differ only through stochastic layers.
    SharedStochastic,
}

impl Sharing {
    pub fn tag(self) -> u64 {
        match self {
            Sharing::Independent => 0,
            Sharing::ConditionalBn => 1,
            Sharing::SharedStochastic => 2,
        }
    }

    pub fn from_tag(tag: u64) -> Option<Self> {
        match tag {
            0 => Some(Sharing::Independent),
            1 => Some(Sharing::ConditionalBn),
            2 => Some(Sharing::SharedStochastic),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InputShape {
    Vector { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn sample_shape(&self) -> Vec<usize> {
        match *self {
            InputShape::Vector { dim } => vec![dim],
            InputShape::Image {
                channels,
                height,
                width,
            } => vec![channels, height, width],
        }
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub input: InputShape,
    pub classes: usize,
    /// Dense width for vector inputs, or channel count of the first conv block.
    pub hidden: usize,
    pub disc_hidden: usize,
    pub noise_std: f64,
    pub dropout: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input: InputShape::Vector { dim: 2 },
            classes: 2,
            hidden: 32,
            disc_hidden: 100,
            noise_std: 1.0,
            dropout: 0.5,
        }
    }
}

/// `f = h ∘ g` plus the domain discriminator `d` reading `g(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub generator: Network,
    pub head: Network,
    pub discriminator: Network,
    /// Which batch-norm parameter set this hypothesis uses.
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisPair {
    pub store: ParamStore,
    pub hypotheses: Vec<Hypothesis>,
    pub sharing: Sharing,
    pub arch: ArchConfig,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn dense(&mut self, name: &str, fan_in: usize, out: usize, group: Group) -> Layer {
        let w = he_normal(&[fan_in, out], fan_in, self.rng);
        let w = self.store.add(format!("{name}.w"), w, group);
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[out]), group);
        Layer::Dense { w, b }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Layer {
        let fan_in = cin * k * k;
        let w = he_normal(&[cout, cin, k, k], fan_in, self.rng);
        let w = self.store.add(format!("{name}.w"), w, Group::Classifier);
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[cout]), Group::Classifier);
        Layer::Conv {
            w,
            b,
            padding: Padding::Same,
        }
    }

    fn bn_set(&mut self, name: &str, c: usize) -> BnSet {
        BnSet {
            scale: self
                .store
                .add(format!("{name}.scale"), Tensor::filled(&[c], 1.0), Group::Classifier),
            shift: self
                .store
                .add(format!("{name}.shift"), Tensor::zeros(&[c]), Group::Classifier),
            stats: self.store.add_stats(name, c),
        }
    }
}

/// Layer templates with batch-norm placeholders that are bound per hypothesis.
enum Spec {
    Fixed(Layer),
    Bn(String, usize),
}

fn generator_spec(b: &mut Builder<'_>, arch: &ArchConfig, prefix: &str) -> (Vec<Spec>, usize) {
    let h = arch.hidden;
    match arch.input {
        InputShape::Vector { dim } => (
            vec![
                Spec::Fixed(b.dense(&format!("{prefix}g.dense0"), dim, h, Group::Classifier)),
                Spec::Bn("g.bn0".into(), h),
                Spec::Fixed(Layer::Relu),
                Spec::Fixed(Layer::Dropout(arch.dropout)),
                Spec::Fixed(Layer::GaussianNoise(arch.noise_std)),
                Spec::Fixed(b.dense(&format!("{prefix}g.dense1"), h, h, Group::Classifier)),
                Spec::Bn("g.bn1".into(), h),
                Spec::Fixed(Layer::Relu),
            ],
            h,
        ),
        InputShape::Image { channels, height, width } => {
            let c2 = 2 * h;
            (
                vec![
                    Spec::Fixed(Layer::InstanceNorm),
                    Spec::Fixed(b.conv(&format!("{prefix}g.conv0"), channels, h, 3)),
                    Spec::Bn("g.bn0".into(), h),
                    Spec::Fixed(Layer::Relu),
                    Spec::Fixed(b.conv(&format!("{prefix}g.conv1"), h, h, 3)),
                    Spec::Bn("g.bn1".into(), h),
                    Spec::Fixed(Layer::Relu),
                    Spec::Fixed(Layer::MaxPool2),
                    Spec::Fixed(Layer::Dropout(arch.dropout)),
                    Spec::Fixed(Layer::GaussianNoise(arch.noise_std)),
                    Spec::Fixed(b.conv(&format!("{prefix}g.conv2"), h, c2, 3)),
                    Spec::Bn("g.bn2".into(), c2),
                    Spec::Fixed(Layer::Relu),
                ],
                c2 * (height / 2) * (width / 2),
            )
        }
    }
}

fn head_spec(b: &mut Builder<'_>, arch: &ArchConfig, prefix: &str) -> Vec<Spec> {
    let k = arch.classes;
    match arch.input {
        InputShape::Vector { .. } => vec![
            Spec::Fixed(b.dense(&format!("{prefix}h.dense0"), arch.hidden, k, Group::Classifier)),
            Spec::Bn("h.bn0".into(), k),
        ],
        InputShape::Image { .. } => {
            let c2 = 2 * arch.hidden;
            vec![
                Spec::Fixed(b.conv(&format!("{prefix}h.conv0"), c2, c2, 3)),
                Spec::Bn("h.bn0".into(), c2),
                Spec::Fixed(Layer::Relu),
                Spec::Fixed(Layer::GlobalAvgPool),
                Spec::Fixed(b.dense(&format!("{prefix}h.dense0"), c2, k, Group::Classifier)),
                Spec::Bn("h.bn1".into(), k),
            ]
        }
    }
}

fn discriminator(b: &mut Builder<'_>, arch: &ArchConfig, feat_dim: usize, prefix: &str) -> Network {
    Network::new(vec![
        Layer::Flatten,
        b.dense(&format!("{prefix}d.dense0"), feat_dim, arch.disc_hidden, Group::Discriminator),
        Layer::Relu,
        b.dense(&format!("{prefix}d.dense1"), arch.disc_hidden, 1, Group::Discriminator),
    ])
}

/// Binds batch-norm placeholders; `sets` maps placeholder names to the two slots.
fn bind(specs: &[Spec], b: &mut Builder<'_>, prefixes: [&str; 2], distinct_sets: bool) -> Network {
    let layers = specs
        .iter()
        .map(|s| match s {
            Spec::Fixed(l) => l.clone(),
            Spec::Bn(name, c) => {
                let first = b.bn_set(&format!("{}{name}", prefixes[0]), *c);
                let second = if distinct_sets {
                    b.bn_set(&format!("{}{name}", prefixes[1]), *c)
                } else {
                    first
                };
                Layer::BatchNorm {
                    sets: [first, second],
                }
            }
        })
        .collect();
    Network::new(layers)
}

impl HypothesisPair {
    /// Builds `count` (1 or 2) hypotheses. `init_seeds[i]` seeds the weights
    /// of hypothesis `i` (only the first seed matters for shared modes).
    pub fn build(arch: &ArchConfig, sharing: Sharing, count: usize, init_seeds: [u64; 2]) -> Result<Self> {
        if !(1..=2).contains(&count) {
            return Err(invalid("hypotheses", "count must be 1 or 2"));
        }
        if arch.classes < 2 || arch.hidden == 0 || arch.disc_hidden == 0 {
            return Err(invalid("architecture", "classes must be >= 2 and widths positive"));
        }
        if let InputShape::Image { height, width, .. } = arch.input {
            if height < 2 || width < 2 {
                return Err(invalid("architecture", "images must be at least 2x2"));
            }
        }
        let mut store = ParamStore::new();
        let mut hypotheses = Vec::new();
        match sharing {
            Sharing::Independent => {
                for (i, &seed) in init_seeds.iter().take(count).enumerate() {
                    let mut r = rng::seeded(seed, rng::stream::INIT);
                    let mut b = Builder {
                        store: &mut store,
                        rng: &mut r,
                    };
                    let prefix = format!("h{}.", i + 1);
                    let (gs, feat) = generator_spec(&mut b, arch, &prefix);
                    let hs = head_spec(&mut b, arch, &prefix);
                    let generator = bind(&gs, &mut b, [&prefix, &prefix], false);
                    let head = bind(&hs, &mut b, [&prefix, &prefix], false);
                    let disc = discriminator(&mut b, arch, feat, &prefix);
                    hypotheses.push(Hypothesis {
                        generator,
                        head,
                        discriminator: disc,
                        slot: 0,
                    });
                }
            }
            Sharing::ConditionalBn | Sharing::SharedStochastic => {
                let mut r = rng::seeded(init_seeds[0], rng::stream::INIT);
                let mut b = Builder {
                    store: &mut store,
                    rng: &mut r,
                };
                let distinct = sharing == Sharing::ConditionalBn && count == 2;
                let prefixes = if distinct { ["h1.", "h2."] } else { ["shared.", "shared."] };
                let (gs, feat) = generator_spec(&mut b, arch, "shared.");
                let hs = head_spec(&mut b, arch, "shared.");
                let generator = bind(&gs, &mut b, prefixes, distinct);
                let head = bind(&hs, &mut b, prefixes, distinct);
                let mut discs = Vec::new();
                for i in 0..count {
                    let mut r = rng::seeded(init_seeds[i], rng::stream::INIT + 1);
                    let mut b = Builder {
                        store: &mut store,
                        rng: &mut r,
                    };
                    discs.push(discriminator(&mut b, arch, feat, &format!("h{}.", i + 1)));
                }
                for (i, disc) in discs.into_iter().enumerate() {
                    hypotheses.push(Hypothesis {
                        generator: generator.clone(),
                        head: head.clone(),
                        discriminator: disc,
                        slot: if distinct { i } else { 0 },
                    });
                }
            }
        }
        Ok(Self {
            store,
            hypotheses,
            sharing,
            arch: arch.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    /// Classifier parameters (g and h) of hypothesis `i`.
    pub fn classifier_params(&self, i: usize) -> Vec<ParamId> {
        let h = &self.hypotheses[i];
        let mut p = h.generator.params(h.slot);
        p.extend(h.head.params(h.slot));
        p
    }

    pub fn discriminator_params(&self, i: usize) -> Vec<ParamId> {
        self.hypotheses[i].discriminator.params(0)
    }

    /// Input tensor shape for a batch of `n` samples.
    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        let mut s = vec![n];
        s.extend(self.arch.input.sample_shape());
        s
    }

    /// `g_i(x)` flattened to `[N, D]`.
    pub fn features(&self, fwd: &mut Forward<'_>, i: usize, x: Var) -> Result<Var> {
        let h = &self.hypotheses[i];
        let f = h.generator.forward(fwd, h.slot, x)?;
        fwd.tape.flatten(f)
    }

    /// Class logits from (unflattened) generator output.
    pub fn head_logits(&self, fwd: &mut Forward<'_>, i: usize, feats: Var) -> Result<Var> {
        let h = &self.hypotheses[i];
        h.head.forward(fwd, h.slot, feats)
    }

    /// Generator output kept in its native layout plus its flattened view.
    pub fn generator_out(&self, fwd: &mut Forward<'_>, i: usize, x: Var) -> Result<(Var, Var)> {
        let h = &self.hypotheses[i];
        let f = h.generator.forward(fwd, h.slot, x)?;
        let flat = fwd.tape.flatten(f)?;
        Ok((f, flat))
    }

    /// Class probabilities `f_i(x)`.
    pub fn probs(&self, fwd: &mut Forward<'_>, i: usize, x: Var) -> Result<Var> {
        let h = &self.hypotheses[i];
        let f = h.generator.forward(fwd, h.slot, x)?;
        let z = h.head.forward(fwd, h.slot, f)?;
        fwd.tape.softmax(z)
    }

    /// Discriminator probability that flattened features come from the source domain.
    pub fn discriminate(&self, fwd: &mut Forward<'_>, i: usize, flat_feats: Var) -> Result<Var> {
        let z = self.hypotheses[i].discriminator.forward(fwd, 0, flat_feats)?;
        fwd.tape.sigmoid(z)
    }

    /// Evaluation-mode class probabilities for a whole input tensor.
    pub fn predict(&self, values: &[Tensor], i: usize, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &self.store, values, Mode::EVAL);
        let xv = fwd.tape.constant(x.clone());
        let p = self.probs(&mut fwd, i, xv)?;
        Ok(tape.value(p).clone())
    }

    /// Evaluation-mode flattened features.
    pub fn embed(&self, values: &[Tensor], i: usize, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &self.store, values, Mode::EVAL);
        let xv = fwd.tape.constant(x.clone());
        let f = self.features(&mut fwd, i, xv)?;
        Ok(tape.value(f).clone())
    }

    /// Copies the weights and statistics that hypothesis `src_i` of `src`
    /// reads into the slots that hypothesis `dst_i` of `self` reads.
    /// Architectures must match; values come from `src_values`.
    pub fn copy_hypothesis_from(&mut self, dst_i: usize, src: &HypothesisPair, src_values: &[Tensor], src_i: usize) -> Result<()> {
        if self.arch != src.arch {
            return Err(invalid("copy_hypothesis", "architectures differ"));
        }
        let (d, s) = (self.hypotheses[dst_i].clone(), &src.hypotheses[src_i]);
        let nets = [
            (&d.generator, &s.generator, true),
            (&d.head, &s.head, true),
            (&d.discriminator, &s.discriminator, false),
        ];
        for (dn, sn, slotted) in nets {
            for (dl, sl) in dn.layers.iter().zip(&sn.layers) {
                match (dl, sl) {
                    (Layer::Dense { w: dw, b: db }, Layer::Dense { w: sw, b: sb })
                    | (Layer::Conv { w: dw, b: db, .. }, Layer::Conv { w: sw, b: sb, .. }) => {
                        self.store.values_mut()[dw.0] = src_values[sw.0].clone();
                        self.store.values_mut()[db.0] = src_values[sb.0].clone();
                    }
                    (Layer::BatchNorm { sets: ds }, Layer::BatchNorm { sets: ss }) => {
                        let (dset, sset) = if slotted {
                            (ds[d.slot], ss[s.slot])
                        } else {
                            (ds[0], ss[0])
                        };
                        self.store.values_mut()[dset.scale.0] = src_values[sset.scale.0].clone();
                        self.store.values_mut()[dset.shift.0] = src_values[sset.shift.0].clone();
                        self.store.stats_mut()[dset.stats.0].mean = src.store.stats()[sset.stats.0].mean.clone();
                        self.store.stats_mut()[dset.stats.0].var = src.store.stats()[sset.stats.0].var.clone();
                    }
                    (a, b) if a == b => {}
                    _ => return Err(invalid("copy_hypothesis", "layer structure differs")),
                }
            }
        }
        Ok(())
    }
}
