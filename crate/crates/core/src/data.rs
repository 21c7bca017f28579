//! Synthetic domain pairs, labeled/unlabeled datasets, and seeded minibatch sampling.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Source,
    Target,
}

/// Samples along the leading axis of `inputs`, with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub inputs: Tensor,
    pub labels: Option<Vec<usize>>,
    pub domain: Domain,
    pub classes: usize,
}

impl DomainDataset {
    pub fn new(inputs: Tensor, labels: Option<Vec<usize>>, domain: Domain, classes: usize) -> Result<Self> {
        if inputs.rank() < 2 || inputs.rows() == 0 {
            return Err(CoreError::Data("inputs need a sample axis and at least one sample".into()));
        }
        if classes < 2 {
            return Err(CoreError::Data("at least two classes required".into()));
        }
        match &labels {
            Some(l) if l.len() != inputs.rows() => {
                return Err(CoreError::Data(alloc::format!(
                    "{} labels for {} samples",
                    l.len(),
                    inputs.rows()
                )))
            }
            Some(l) if l.iter().any(|&c| c >= classes) => {
                return Err(CoreError::Data(alloc::format!("label outside [0, {classes})")));
            }
            None if domain == Domain::Source => {
                return Err(CoreError::Data("source data must be labeled".into()));
            }
            _ => {}
        }
        Ok(Self {
            inputs,
            labels,
            domain,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| CoreError::Data("dataset has no labels".into()))
    }

    pub fn class_counts(&self) -> Result<Vec<usize>> {
        let mut c = vec![0; self.classes];
        for &l in self.labels()? {
            c[l] += 1;
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    TwoMoons,
    GaussianBlobs,
    PatchBlendImages,
}

/// Description of a source/target pair. Geometric shift fields apply to the
/// vector families; image pairs shift through the color patch blend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSpec {
    pub family: Family,
    pub rotation_deg: f64,
    pub translation: [f64; 2],
    /// Isotropic scaling of the target about the pivot.
    pub scale: f64,
    /// Rotation/scale centre; defaults to the family's natural centre.
    pub pivot: Option<[f64; 2]>,
    pub noise: f64,
    pub palette_seed: u64,
    pub n_per_class: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            family: Family::TwoMoons,
            rotation_deg: 35.0,
            translation: [0.0, 0.0],
            scale: 1.0,
            pivot: None,
            noise: 0.1,
            palette_seed: 0,
            n_per_class: 1000,
            classes: 2,
            seed: 0,
        }
    }
}

pub const IMAGE_SIDE: usize = 8;
pub const IMAGE_CHANNELS: usize = 3;
const BLOB_RADIUS: f64 = 2.0;
const PALETTE_SIZE: usize = 16;

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &'static str, reason: &'static str| Err(invalid(what, reason));
        if !(0.0..=90.0).contains(&self.rotation_deg) {
            return bad("rotation_deg", "must lie in [0, 90]");
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad("scale", "must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise", "must be non-negative");
        }
        if !self.translation.iter().all(|t| t.is_finite()) {
            return bad("translation", "must be finite");
        }
        if self.n_per_class < 2 {
            return bad("n_per_class", "need at least two samples per class");
        }
        match self.family {
            Family::TwoMoons if self.classes != 2 => bad("classes", "two-moons has exactly two classes"),
            Family::GaussianBlobs if self.classes < 2 => bad("classes", "need at least two classes"),
            Family::PatchBlendImages if !(2..=GLYPHS).contains(&self.classes) => {
                bad("classes", "patch-blend supports 2 to 4 classes")
            }
            _ => Ok(()),
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self.family {
            Family::TwoMoons | Family::GaussianBlobs => vec![2],
            Family::PatchBlendImages => vec![IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE],
        }
    }

    fn default_pivot(&self) -> [f64; 2] {
        match self.family {
            Family::TwoMoons => [0.5, 0.25],
            _ => [0.0, 0.0],
        }
    }

    /// Applies the target's geometric shift to a 2-D point.
    pub fn transform(&self, p: [f64; 2]) -> [f64; 2] {
        let c = self.pivot.unwrap_or_else(|| self.default_pivot());
        let a = self.rotation_deg.to_radians();
        let (s, co) = (libm::sin(a), libm::cos(a));
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        [
            c[0] + self.scale * (co * dx - s * dy) + self.translation[0],
            c[1] + self.scale * (s * dx + co * dy) + self.translation[1],
        ]
    }

    /// Noise-free class centroid of the untransformed family, for vector families.
    pub fn class_mean(&self, class: usize) -> Option<[f64; 2]> {
        match self.family {
            // E[cos t] = 0, E[sin t] = 2/π for t uniform on [0, π]
            Family::TwoMoons => Some(match class {
                0 => [0.0, 2.0 / core::f64::consts::PI],
                _ => [1.0, 0.5 - 2.0 / core::f64::consts::PI],
            }),
            Family::GaussianBlobs => Some(blob_center(class, self.classes)),
            Family::PatchBlendImages => None,
        }
    }
}

fn blob_center(k: usize, classes: usize) -> [f64; 2] {
    let a = 2.0 * core::f64::consts::PI * k as f64 / classes as f64;
    [BLOB_RADIUS * libm::cos(a), BLOB_RADIUS * libm::sin(a)]
}

fn gauss(r: &mut Rng) -> f64 {
    r.sample(StandardNormal)
}

fn base_point(spec: &ShiftSpec, class: usize, r: &mut Rng) -> [f64; 2] {
    let p = match spec.family {
        Family::TwoMoons => {
            let t = r.random_range(0.0..core::f64::consts::PI);
            if class == 0 {
                [libm::cos(t), libm::sin(t)]
            } else {
                [1.0 - libm::cos(t), 0.5 - libm::sin(t)]
            }
        }
        _ => blob_center(class, spec.classes),
    };
    [p[0] + spec.noise * gauss(r), p[1] + spec.noise * gauss(r)]
}

const GLYPHS: usize = 4;

/// 8x8 binary stroke masks: vertical bar, horizontal bar, diagonal, ring.
fn glyph(class: usize, dx: isize, dy: isize) -> [[f64; IMAGE_SIDE]; IMAGE_SIDE] {
    let mut g = [[0.0; IMAGE_SIDE]; IMAGE_SIDE];
    let n = IMAGE_SIDE as isize;
    for y in 0..n {
        for x in 0..n {
            let (u, v) = (x - dx, y - dy);
            let on = match class {
                0 => (3..=4).contains(&u) && (1..=6).contains(&v),
                1 => (3..=4).contains(&v) && (1..=6).contains(&u),
                2 => (1..=6).contains(&u) && (u - v).abs() <= 0,
                _ => {
                    let inb = (1..=6).contains(&u) && (1..=6).contains(&v);
                    inb && (u == 1 || u == 6 || v == 1 || v == 6)
                }
            };
            if on {
                g[y as usize][x as usize] = 1.0;
            }
        }
    }
    g
}

fn image(spec: &ShiftSpec, class: usize, target: bool, palette: &[[f64; 3]], r: &mut Rng) -> Vec<f64> {
    let g = glyph(class, r.random_range(-1i32..=1) as isize, r.random_range(-1i32..=1) as isize);
    let mut out = vec![0.0; IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE];
    let base = palette[r.random_range(0..palette.len())];
    for c in 0..IMAGE_CHANNELS {
        for y in 0..IMAGE_SIDE {
            for x in 0..IMAGE_SIDE {
                let mut v = g[y][x] + spec.noise * gauss(r);
                if target {
                    // smooth colour gradient across the patch
                    let shade = base[c] + 0.15 * ((x + y) as f64 / (2 * IMAGE_SIDE) as f64 - 0.25);
                    v = libm::fabs(v - shade);
                }
                out[(c * IMAGE_SIDE + y) * IMAGE_SIDE + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn generate(spec: &ShiftSpec, domain: Domain) -> Result<DomainDataset> {
    let stream = match domain {
        Domain::Source => rng::stream::DATA,
        Domain::Target => rng::stream::DATA + 1,
    };
    let mut r = rng::seeded(spec.seed, stream);
    let palette: Vec<[f64; 3]> = {
        let mut p = rng::seeded(spec.palette_seed, rng::stream::DATA + 2);
        (0..PALETTE_SIZE)
            .map(|_| [p.random::<f64>(), p.random::<f64>(), p.random::<f64>()])
            .collect()
    };
    let mut labels: Vec<usize> = (0..spec.classes)
        .flat_map(|k| core::iter::repeat_n(k, spec.n_per_class))
        .collect();
    labels.shuffle(&mut r);
    let target = domain == Domain::Target;
    let mut data = Vec::new();
    for &k in &labels {
        match spec.family {
            Family::TwoMoons | Family::GaussianBlobs => {
                let p = base_point(spec, k, &mut r);
                let p = if target { spec.transform(p) } else { p };
                data.extend_from_slice(&p);
            }
            Family::PatchBlendImages => data.extend(image(spec, k, target, &palette, &mut r)),
        }
    }
    let mut shape = vec![labels.len()];
    shape.extend(spec.input_shape());
    DomainDataset::new(Tensor::new(shape, data)?, Some(labels), domain, spec.classes)
}

/// Source and target datasets for a shift; a pure function of `spec`.
/// Target labels are kept for evaluation only.
pub fn gen_pair(spec: &ShiftSpec) -> Result<(DomainDataset, DomainDataset)> {
    spec.validate()?;
    Ok((generate(spec, Domain::Source)?, generate(spec, Domain::Target)?))
}

/// One training step's worth of data. The target side carries no labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    pub source_x: Tensor,
    pub source_y: Vec<usize>,
    pub target_x: Tensor,
    pub classes: usize,
}

impl DomainBatch {
    pub fn source_onehot(&self) -> Tensor {
        onehot(&self.source_y, self.classes)
    }
}

pub fn onehot(labels: &[usize], classes: usize) -> Tensor {
    let mut d = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        d[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], d).expect("one-hot shape")
}

/// Epoch-wise shuffled index stream over `n` samples. The last partial
/// batch of an epoch is dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampler {
    pub n: usize,
    pub batch: usize,
    pub perm: Vec<usize>,
    pub cursor: usize,
    pub rng: Rng,
}

impl Sampler {
    pub fn new(n: usize, batch: usize, mut rng: Rng) -> Result<Self> {
        if batch < 2 {
            return Err(invalid("batch_size", "must be at least 2"));
        }
        if batch > n {
            return Err(invalid("batch_size", "larger than the dataset"));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        Ok(Self {
            n,
            batch,
            perm,
            cursor: 0,
            rng,
        })
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.n {
            self.perm.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.perm[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

/// Paired source/target samplers with independent random streams.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSampler {
    pub source: Sampler,
    pub target: Sampler,
}

impl BatchSampler {
    pub fn new(source: &DomainDataset, target: &DomainDataset, batch: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            source: Sampler::new(source.len(), batch, rng::seeded(seed, rng::stream::SOURCE_SAMPLER))?,
            target: Sampler::new(target.len(), batch, rng::seeded(seed, rng::stream::TARGET_SAMPLER))?,
        })
    }

    pub fn next(&mut self, source: &DomainDataset, target: &DomainDataset) -> Result<DomainBatch> {
        if source.classes != target.classes || source.sample_shape() != target.sample_shape() {
            return Err(CoreError::Data("source and target datasets are incompatible".into()));
        }
        let si = self.source.next_indices();
        let ti = self.target.next_indices();
        let labels = source.labels()?;
        Ok(DomainBatch {
            source_x: source.inputs.select_rows(&si),
            source_y: si.iter().map(|&i| labels[i]).collect(),
            target_x: target.inputs.select_rows(&ti),
            classes: source.classes,
        })
    }
}

/// One minibatch drawn with a fresh sampler pair seeded by `seed`.
pub fn sample_minibatch(source: &DomainDataset, target: &DomainDataset, batch: usize, seed: u64) -> Result<DomainBatch> {
    BatchSampler::new(source, target, batch, seed)?.next(source, target)
}
