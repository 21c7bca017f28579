//! Run configuration files (JSON) and method variants.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use coda_core::data::{gen_pair, Domain, ShiftSpec};
use coda_core::model::{ArchConfig, InputShape, Sharing};
use coda_core::trainer::{Datasets, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::idx;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    CoDa,
    CoDaBn,
    CoDaSh,
    VadaSingle,
    CoDaNodiv,
    /// Source cross-entropy only, one hypothesis.
    SourceOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::CoDa,
        Variant::CoDaBn,
        Variant::CoDaSh,
        Variant::VadaSingle,
        Variant::CoDaNodiv,
        Variant::SourceOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CoDa => "co-da",
            Variant::CoDaBn => "co-da-bn",
            Variant::CoDaSh => "co-da-sh",
            Variant::VadaSingle => "vada-single",
            Variant::CoDaNodiv => "co-da-nodiv",
            Variant::SourceOnly => "source-only",
        }
    }

    /// Forces the sharing mode, hypothesis count, and the weights the
    /// variant pins.
    pub fn apply(self, t: &mut TrainConfig) {
        let w = &mut t.weights;
        match self {
            Variant::CoDa => {
                t.sharing = Sharing::Independent;
                t.hypotheses = 2;
            }
            Variant::CoDaBn => {
                t.sharing = Sharing::ConditionalBn;
                t.hypotheses = 2;
            }
            Variant::CoDaSh => {
                t.sharing = Sharing::SharedStochastic;
                t.hypotheses = 2;
                w.lambda_div = 0.0;
            }
            Variant::VadaSingle => {
                t.sharing = Sharing::Independent;
                t.hypotheses = 1;
                w.lambda_p = 0.0;
                w.lambda_div = 0.0;
            }
            Variant::CoDaNodiv => {
                t.sharing = Sharing::Independent;
                t.hypotheses = 2;
                w.lambda_div = 0.0;
            }
            Variant::SourceOnly => {
                t.sharing = Sharing::Independent;
                t.hypotheses = 1;
                w.lambda_d = 0.0;
                w.lambda_p = 0.0;
                w.lambda_div = 0.0;
                w.lambda_ce = 0.0;
                w.lambda_sv = 0.0;
            }
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated pair; the evaluation split uses `eval_seed`
    /// (default: `spec.seed` mixed with a fixed constant).
    Synthetic {
        #[serde(default)]
        spec: ShiftSpec,
        #[serde(default)]
        eval_seed: Option<u64>,
    },
    /// IDX files. Without explicit evaluation files the training files
    /// are evaluated (target labels are never used for training).
    Idx {
        source_images: PathBuf,
        source_labels: PathBuf,
        target_images: PathBuf,
        target_labels: PathBuf,
        #[serde(default)]
        eval_source_images: Option<PathBuf>,
        #[serde(default)]
        eval_source_labels: Option<PathBuf>,
        #[serde(default)]
        eval_target_images: Option<PathBuf>,
        #[serde(default)]
        eval_target_labels: Option<PathBuf>,
        classes: usize,
        #[serde(default)]
        channels: Option<usize>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            spec: ShiftSpec::default(),
            eval_seed: None,
        }
    }
}

const EVAL_SEED_MIX: u64 = 0x5EED_0E7A_1000_0001;

impl DataConfig {
    pub fn load(&self) -> Result<Datasets> {
        match self {
            DataConfig::Synthetic { spec, eval_seed } => {
                let (source, target) = gen_pair(spec)?;
                let eval = ShiftSpec {
                    seed: eval_seed.unwrap_or(spec.seed ^ EVAL_SEED_MIX),
                    ..spec.clone()
                };
                let (eval_source, eval_target) = gen_pair(&eval)?;
                Ok(Datasets {
                    source,
                    target,
                    eval_source,
                    eval_target,
                })
            }
            DataConfig::Idx {
                source_images,
                source_labels,
                target_images,
                target_labels,
                eval_source_images,
                eval_source_labels,
                eval_target_images,
                eval_target_labels,
                classes,
                channels,
            } => {
                let load = |x: &Path, y: &Path, d| idx::load_domain(x, Some(y), d, *classes, *channels);
                let source = load(source_images, source_labels, Domain::Source)?;
                let target = load(target_images, target_labels, Domain::Target)?;
                let pick = |x: &Option<PathBuf>, y: &Option<PathBuf>, d, fallback: &coda_core::data::DomainDataset| match (x, y) {
                    (Some(x), Some(y)) => load(x, y, d),
                    (None, None) => Ok(fallback.clone()),
                    _ => Err(Error::Config("evaluation images and labels must be given together".into())),
                };
                let eval_source = pick(eval_source_images, eval_source_labels, Domain::Source, &source)?;
                let eval_target = pick(eval_target_images, eval_target_labels, Domain::Target, &target)?;
                Ok(Datasets {
                    source,
                    target,
                    eval_source,
                    eval_target,
                })
            }
        }
    }
}

/// Hyperparameter axes; an empty axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub lambda_d: Vec<f64>,
    pub lambda_p: Vec<f64>,
    pub lambda_div: Vec<f64>,
    #[serde(with = "nu_list")]
    pub nu: Vec<f64>,
}

mod nu_list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Nu(#[serde(with = "coda_core::objective::nu_serde")] f64);

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|&x| Nu(x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Nu>::deserialize(d)?.into_iter().map(|n| n.0).collect())
    }
}

/// One grid point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridCell {
    pub lambda_d: f64,
    pub lambda_p: f64,
    pub lambda_div: f64,
    pub nu: f64,
}

impl GridSpec {
    pub fn cells(&self, base: &TrainConfig) -> Vec<GridCell> {
        let w = &base.weights;
        let axis = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
        let mut out = Vec::new();
        for &lambda_d in &axis(&self.lambda_d, w.lambda_d) {
            for &lambda_p in &axis(&self.lambda_p, w.lambda_p) {
                for &lambda_div in &axis(&self.lambda_div, w.lambda_div) {
                    for &nu in &axis(&self.nu, w.nu) {
                        out.push(GridCell {
                            lambda_d,
                            lambda_p,
                            lambda_div,
                            nu,
                        });
                    }
                }
            }
        }
        out
    }
}

pub const DEFAULT_KS: [usize; 4] = [1, 3, 5, 10];

fn default_ks() -> Vec<usize> {
    DEFAULT_KS.to_vec()
}

fn default_variant() -> String {
    Variant::CoDa.name().into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSettings {
    pub hidden: usize,
    pub disc_hidden: usize,
    pub noise_std: f64,
    pub dropout: f64,
}

impl Default for ArchSettings {
    fn default() -> Self {
        let a = ArchConfig::default();
        Self {
            hidden: a.hidden,
            disc_hidden: a.disc_hidden,
            noise_std: a.noise_std,
            dropout: a.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_variant")]
    pub variant: String,
    /// Training seed; copied into `train.seed`.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub arch: ArchSettings,
    pub train: TrainConfig,
    #[serde(default = "default_ks")]
    pub k: Vec<usize>,
    pub grid: GridSpec,
    /// Written into resolved configs; ignored on input.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub code_version: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: default_variant(),
            seed: 0,
            out: None,
            data: DataConfig::default(),
            arch: ArchSettings::default(),
            train: TrainConfig::default(),
            k: default_ks(),
            grid: GridSpec::default(),
            code_version: None,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub variant: Option<String>,
    pub iterations: Option<u64>,
    pub k: Option<Vec<usize>>,
}

pub const OUT_ENV: &str = "CODA_OUT";

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Applies overrides and the variant, then validates.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = Some(p.clone());
        }
        if let Some(v) = &o.variant {
            self.variant = v.clone();
        }
        if let Some(n) = o.iterations {
            self.train.iterations = n;
        }
        if let Some(k) = &o.k {
            self.k = k.clone();
        }
        let variant: Variant = self.variant.parse()?;
        variant.apply(&mut self.train);
        self.train.seed = self.seed;
        self.code_version = Some(env!("CARGO_PKG_VERSION").into());
        self.validate()?;
        Ok(self)
    }

    pub fn variant(&self) -> Result<Variant> {
        self.variant.parse()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.k.is_empty() || self.k.contains(&0) {
            return Err(Error::Config("k: values must be positive".into()));
        }
        if let DataConfig::Synthetic { spec, .. } = &self.data {
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// `--out`, else the file's `out`, else `$CODA_OUT/<variant>-seed<seed>`
    /// (root `runs` when the variable is unset).
    pub fn out_dir(&self) -> PathBuf {
        if let Some(p) = &self.out {
            return p.clone();
        }
        let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| "runs".into());
        root.join(format!("{}-seed{}", self.variant, self.seed))
    }

    /// Architecture with input shape and class count taken from the data.
    pub fn arch_for(&self, data: &Datasets) -> Result<ArchConfig> {
        let shape = data.source.sample_shape();
        let input = match shape {
            [dim] => InputShape::Vector { dim: *dim },
            [channels, height, width] => InputShape::Image {
                channels: *channels,
                height: *height,
                width: *width,
            },
            s => return Err(Error::Config(format!("unsupported sample shape {s:?}"))),
        };
        if data.target.sample_shape() != shape {
            return Err(Error::Config(format!(
                "source samples {:?} and target samples {:?} differ in shape",
                shape,
                data.target.sample_shape()
            )));
        }
        let a = &self.arch;
        Ok(ArchConfig {
            input,
            classes: data.source.classes,
            hidden: a.hidden,
            disc_hidden: a.disc_hidden,
            noise_std: a.noise_std,
            dropout: a.dropout,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config always serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_pin_their_weights() {
        let mut t = TrainConfig::default();
        Variant::CoDaSh.apply(&mut t);
        assert_eq!((t.weights.lambda_div, t.sharing, t.hypotheses), (0.0, Sharing::SharedStochastic, 2));
        let mut t = TrainConfig::default();
        Variant::VadaSingle.apply(&mut t);
        assert_eq!((t.weights.lambda_p, t.weights.lambda_div, t.hypotheses), (0.0, 0.0, 1));
        assert!(t.weights.lambda_d > 0.0);
        let mut t = TrainConfig::default();
        Variant::CoDaNodiv.apply(&mut t);
        assert_eq!(t.weights.lambda_div, 0.0);
        assert!(t.weights.lambda_p > 0.0);
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("co-dax".parse::<Variant>(), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn empty_file_gives_defaults_with_seed_zero() {
        let c = RunConfig::from_json("{}").unwrap().resolve(&Overrides::default()).unwrap();
        assert_eq!(c.seed, 0);
        assert_eq!(c.train.seed, 0);
        assert_eq!(c.k, DEFAULT_KS);
        assert_eq!(c.variant().unwrap(), Variant::CoDa);
    }

    #[test]
    fn flags_override_file() {
        let c = RunConfig::from_json(r#"{"seed": 4, "variant": "co-da-bn", "train": {"iterations": 9}}"#).unwrap();
        let o = Overrides {
            seed: Some(8),
            iterations: Some(3),
            variant: Some("co-da-sh".into()),
            k: Some(vec![2]),
            out: Some("x".into()),
        };
        let c = c.resolve(&o).unwrap();
        assert_eq!((c.seed, c.train.seed, c.train.iterations), (8, 8, 3));
        assert_eq!(c.train.sharing, Sharing::SharedStochastic);
        assert_eq!(c.k, [2]);
        assert_eq!(c.out_dir(), PathBuf::from("x"));
    }

    #[test]
    fn unknown_fields_are_rejected_with_their_name() {
        match RunConfig::from_json(r#"{"train": {"iteratons": 3}}"#) {
            Err(Error::Config(m)) => assert!(m.contains("iteratons"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::from_json("{").is_err());
        let bad = RunConfig::from_json(r#"{"train": {"batch_size": 1}}"#).unwrap();
        assert!(matches!(bad.resolve(&Overrides::default()), Err(Error::Config(_))));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::from_json(r#"{"grid": {"nu": [1, "inf"]}, "data": {"kind": "synthetic", "spec": {"family": "gaussian-blobs"}}}"#)
            .unwrap()
            .resolve(&Overrides::default())
            .unwrap();
        assert_eq!(c.grid.nu, [1.0, f64::INFINITY]);
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.resolve(&Overrides::default()).unwrap(), c);
    }

    #[test]
    fn grid_cells_are_the_cartesian_product() {
        let g = GridSpec {
            lambda_p: vec![1e-3, 1e-2, 1e-1],
            nu: vec![1.0, 5.0, 10.0, 100.0],
            ..GridSpec::default()
        };
        let t = TrainConfig::default();
        let cells = g.cells(&t);
        assert_eq!(cells.len(), 12);
        assert!(cells.iter().all(|c| c.lambda_d == t.weights.lambda_d));
        assert_eq!(GridSpec::default().cells(&t).len(), 1);
    }
}
