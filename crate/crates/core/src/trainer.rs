//! Alternating discriminator/classifier optimization, evaluation, and the
//! target-only refinement phase.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{BatchSampler, DomainDataset, Sampler};
use crate::error::{invalid, CoreError, Result};
use crate::model::{ArchConfig, HypothesisPair, Sharing};
use crate::nn::{Forward, Group, Mode, ParamId, ParamStore, StatsUpdate, BN_MOMENTUM};
use crate::objective::{
    build_pair_graph, dirtt_loss, discriminator_term, finish_total, squared_mean_gap, vat_perturbation,
    LossBreakdown, LossWeights, VatSource,
};
use crate::optim::{Adam, AdamConfig, Ema, EMA_MOMENTUM};
use crate::probe::{accuracy, agreement_rate, knn_probe, pca_fit, KnnAccuracy, MetricsRecord};
use crate::rng::{self, Rng};
use crate::state::{ArrayData, NamedArray};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    /// Samples per domain per step.
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: u64,
    pub weights: LossWeights,
    pub sharing: Sharing,
    /// 1 for a single hypothesis, 2 for a co-regularized pair.
    pub hypotheses: usize,
    /// Overrides the per-hypothesis initialization seeds derived from `seed`.
    pub init_seeds: Option<[u64; 2]>,
    pub dirtt_iterations: u64,
    pub refresh_interval: u64,
    pub adam: AdamSettings,
    pub ema_momentum: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        let c = AdamConfig::default();
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

impl From<AdamSettings> for AdamConfig {
    fn from(a: AdamSettings) -> Self {
        AdamConfig {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 64,
            seed: 0,
            eval_every: 100,
            weights: LossWeights::default(),
            sharing: Sharing::Independent,
            hypotheses: 2,
            init_seeds: None,
            dirtt_iterations: 1000,
            refresh_interval: 500,
            adam: AdamSettings::default(),
            ema_momentum: EMA_MOMENTUM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size < 2 {
            return Err(invalid("batch_size", "must be at least 2 for batch normalization"));
        }
        if !(1..=2).contains(&self.hypotheses) {
            return Err(invalid("hypotheses", "must be 1 or 2"));
        }
        if self.eval_every == 0 || self.refresh_interval == 0 {
            return Err(invalid("eval_every/refresh_interval", "must be positive"));
        }
        let a = self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(invalid("adam", "lr > 0, betas in [0, 1), eps > 0"));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(invalid("ema_momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn hypothesis_seeds(&self) -> [u64; 2] {
        self.init_seeds
            .unwrap_or([self.seed, self.seed.wrapping_add(0x9E37_79B9_7F4A_7C15)])
    }
}

/// Training and held-out evaluation splits of a domain pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub source: DomainDataset,
    pub target: DomainDataset,
    pub eval_source: DomainDataset,
    pub eval_target: DomainDataset,
}

pub struct Trainer {
    pub pair: HypothesisPair,
    pub config: TrainConfig,
    pub adam_cls: Adam,
    pub adam_disc: Adam,
    pub ema: Ema,
    pub iteration: u64,
    pub stochastic: Vec<Rng>,
    pub vat: Vec<Rng>,
    pub sampler: BatchSampler,
}

fn label_of(ds: &DomainDataset) -> Result<&[usize]> {
    ds.labels()
}

fn gradient_list(ids: &[ParamId], store: &ParamStore, found: &[(ParamId, Tensor)]) -> Vec<Tensor> {
    ids.iter()
        .map(|id| {
            found
                .iter()
                .find(|(f, _)| f == id)
                .map(|(_, g)| g.clone())
                .unwrap_or_else(|| Tensor::zeros(store.value(*id).shape()))
        })
        .collect()
}

fn apply_updates(store: &mut ParamStore, updates: &[StatsUpdate]) {
    for u in updates {
        store.update_stats(u.id, &u.mean, &u.var, BN_MOMENTUM);
    }
}

impl Trainer {
    pub fn new(arch: &ArchConfig, config: TrainConfig, data: &Datasets) -> Result<Self> {
        config.validate()?;
        let pair = HypothesisPair::build(arch, config.sharing, config.hypotheses, config.hypothesis_seeds())?;
        Self::with_pair(pair, config, data)
    }

    pub fn with_pair(pair: HypothesisPair, config: TrainConfig, data: &Datasets) -> Result<Self> {
        config.validate()?;
        let cls = pair.store.group_ids(Group::Classifier);
        let disc = pair.store.group_ids(Group::Discriminator);
        let seeds = config.hypothesis_seeds();
        let n = pair.len();
        Ok(Self {
            adam_cls: Adam::new(config.adam.into(), &pair.store, cls.clone()),
            adam_disc: Adam::new(config.adam.into(), &pair.store, disc),
            ema: Ema::new(config.ema_momentum, &pair.store, cls),
            iteration: 0,
            stochastic: (0..n).map(|i| rng::seeded(seeds[i], rng::stream::STOCHASTIC)).collect(),
            vat: (0..n).map(|i| rng::seeded(seeds[i], rng::stream::STOCHASTIC + 1)).collect(),
            sampler: BatchSampler::new(&data.source, &data.target, config.batch_size, config.seed)?,
            pair,
            config,
        })
    }

    /// One discriminator ascent step followed by one classifier descent step
    /// and an averaging update.
    pub fn step(&mut self, data: &Datasets) -> Result<LossBreakdown> {
        self.step_observed(data, &mut |_| {})
    }

    /// `step`, calling `after_disc` with the store between the
    /// discriminator and classifier updates.
    pub fn step_observed(&mut self, data: &Datasets, after_disc: &mut dyn FnMut(&ParamStore)) -> Result<LossBreakdown> {
        let batch = self.sampler.next(&data.source, &data.target)?;
        let w = self.config.weights.clone();
        let mut tape = Tape::new();
        let graph = build_pair_graph(
            &mut tape,
            &self.pair,
            self.pair.store.values(),
            &batch,
            &w,
            Mode::TRAIN,
            Some(&mut self.stochastic),
            VatSource::Search(&mut self.vat),
        )?;

        // (a) discriminators ascend L_disc on detached features
        let feats: Vec<Tensor> = graph.hypotheses.iter().map(|h| tape.value(h.features).clone()).collect();
        self.ascend_discriminators(&feats, graph.n_source)?;
        after_disc(&self.pair.store);

        // (b) classifiers descend the full objective against the updated discriminators
        let obj = finish_total(&mut tape, &self.pair, self.pair.store.values(), &graph, &w)?;
        if !obj.breakdown.coda_total.is_finite() {
            return Err(CoreError::NonFinite { op: "objective" });
        }
        let g = tape.backward(obj.total)?;
        let found: Vec<(ParamId, Tensor)> = graph.bindings.iter().map(|&(id, v)| (id, g.wrt(&tape, v))).collect();
        let grads = gradient_list(&self.adam_cls.ids, &self.pair.store, &found);
        self.adam_cls.step(&mut self.pair.store, &grads)?;
        apply_updates(&mut self.pair.store, &graph.updates);

        // (c)
        self.ema.update(&self.pair.store);
        self.iteration += 1;
        Ok(obj.breakdown)
    }

    /// One Adam ascent step of every discriminator on fixed flattened
    /// features (source rows first). Returns `L_disc` per hypothesis before
    /// the step.
    pub fn ascend_discriminators(&mut self, features: &[Tensor], n_source: usize) -> Result<Vec<f64>> {
        if features.len() != self.pair.len() {
            return Err(invalid("features", "one matrix per hypothesis required"));
        }
        let mut found = Vec::new();
        let mut before = Vec::new();
        for (i, f) in features.iter().enumerate() {
            let mut dt = Tape::new();
            let fv = dt.constant(f.clone());
            let (l, binds) = discriminator_term(&mut dt, &self.pair, self.pair.store.values(), i, fv, n_source, true)?;
            before.push(dt.value(l).item());
            let neg = dt.scale(l, -1.0)?;
            let g = dt.backward(neg)?;
            for (id, v) in binds {
                found.push((id, g.wrt(&dt, v)));
            }
        }
        let grads = gradient_list(&self.adam_disc.ids, &self.pair.store, &found);
        self.adam_disc.step(&mut self.pair.store, &grads)?;
        Ok(before)
    }

    /// Parameter values used for evaluation: averaged classifier weights,
    /// live discriminator weights.
    pub fn eval_values(&self) -> Vec<Tensor> {
        self.ema.values(&self.pair.store)
    }

    /// Objective terms at the current parameters without any update.
    pub fn probe_losses(&self, data: &Datasets) -> Result<LossBreakdown> {
        pair_losses(&self.pair, self.pair.store.values(), data, &self.config)
    }

    pub fn evaluate(&self, data: &Datasets, losses: &LossBreakdown) -> Result<MetricsRecord> {
        evaluate_pair(&self.pair, &self.eval_values(), data, losses, self.iteration)
    }

    /// kNN accuracy on target features, averaged over hypotheses.
    pub fn knn(&self, data: &Datasets, ks: &[usize]) -> Result<Vec<KnnAccuracy>> {
        knn_pair(&self.pair, &self.eval_values(), data, ks)
    }

    pub fn export_state(&self) -> Vec<NamedArray> {
        let mut out = model_state(&self.pair, self.pair.store.values());
        let name = |id: ParamId| &self.pair.store.meta(id).name;
        for (tag, adam) in [("cls", &self.adam_cls), ("disc", &self.adam_disc)] {
            for (k, &id) in adam.ids.iter().enumerate() {
                out.push(tensor_array(format!("adam/{tag}/m/{}", name(id)), &adam.m[k]));
                out.push(tensor_array(format!("adam/{tag}/v/{}", name(id)), &adam.v[k]));
            }
            out.push(NamedArray::u64(format!("adam/{tag}/t"), vec![adam.t]));
        }
        for (k, &id) in self.ema.ids.iter().enumerate() {
            out.push(tensor_array(format!("ema/{}", name(id)), &self.ema.shadow[k]));
        }
        for (i, r) in self.stochastic.iter().enumerate() {
            out.push(NamedArray::u64(format!("rng/stochastic/{i}"), rng::export(r).to_vec()));
        }
        for (i, r) in self.vat.iter().enumerate() {
            out.push(NamedArray::u64(format!("rng/vat/{i}"), rng::export(r).to_vec()));
        }
        for (tag, s) in [("source", &self.sampler.source), ("target", &self.sampler.target)] {
            out.extend(sampler_arrays(tag, s));
        }
        out.push(NamedArray::u64("meta/iteration", vec![self.iteration]));
        out
    }

    /// Restores a state produced by `export_state` on an identically
    /// configured trainer.
    pub fn import_state(&mut self, arrays: &[NamedArray]) -> Result<()> {
        let lookup = Lookup(arrays);
        import_model(&mut self.pair, arrays)?;
        let names: Vec<String> = self.pair.store.ids().map(|id| self.pair.store.meta(id).name.clone()).collect();
        for (tag, adam) in [("cls", &mut self.adam_cls), ("disc", &mut self.adam_disc)] {
            for k in 0..adam.ids.len() {
                let n = &names[adam.ids[k].0];
                lookup.fill_tensor(&format!("adam/{tag}/m/{n}"), &mut adam.m[k])?;
                lookup.fill_tensor(&format!("adam/{tag}/v/{n}"), &mut adam.v[k])?;
            }
            adam.t = lookup.u64s(&format!("adam/{tag}/t"), Some(1))?[0];
        }
        for k in 0..self.ema.ids.len() {
            let n = &names[self.ema.ids[k].0];
            lookup.fill_tensor(&format!("ema/{n}"), &mut self.ema.shadow[k])?;
        }
        for (tag, list) in [("stochastic", &mut self.stochastic), ("vat", &mut self.vat)] {
            for (i, r) in list.iter_mut().enumerate() {
                let name = format!("rng/{tag}/{i}");
                *r = rng::import(lookup.u64s(&name, Some(7))?).ok_or(CoreError::StateMissing { name })?;
            }
        }
        for (tag, s) in [("source", &mut self.sampler.source), ("target", &mut self.sampler.target)] {
            import_sampler(&lookup, tag, s)?;
        }
        self.iteration = lookup.u64s("meta/iteration", Some(1))?[0];
        Ok(())
    }
}

fn tensor_array(name: String, t: &Tensor) -> NamedArray {
    NamedArray::f64(name, t.shape(), t.data().to_vec())
}

fn sampler_arrays(tag: &str, s: &Sampler) -> Vec<NamedArray> {
    vec![
        NamedArray::u64(format!("sampler/{tag}/perm"), s.perm.iter().map(|&p| p as u64).collect()),
        NamedArray::u64(format!("sampler/{tag}/cursor"), vec![s.cursor as u64]),
        NamedArray::u64(format!("sampler/{tag}/rng"), rng::export(&s.rng).to_vec()),
    ]
}

fn import_sampler(lookup: &Lookup<'_>, tag: &str, s: &mut Sampler) -> Result<()> {
    let perm = lookup.u64s(&format!("sampler/{tag}/perm"), Some(s.n))?;
    s.perm = perm.iter().map(|&p| p as usize).collect();
    if s.perm.iter().any(|&p| p >= s.n) {
        return Err(CoreError::Data(format!("sampler/{tag}/perm holds an out-of-range index")));
    }
    s.cursor = lookup.u64s(&format!("sampler/{tag}/cursor"), Some(1))?[0] as usize;
    let name = format!("sampler/{tag}/rng");
    s.rng = rng::import(lookup.u64s(&name, Some(7))?).ok_or(CoreError::StateMissing { name })?;
    Ok(())
}

/// Parameter values (`param/…`) and running statistics (`stats/…`).
pub fn model_arrays(pair: &HypothesisPair, values: &[Tensor]) -> Vec<NamedArray> {
    let mut out = Vec::new();
    for id in pair.store.ids() {
        out.push(tensor_array(format!("param/{}", pair.store.meta(id).name), &values[id.0]));
    }
    for s in pair.store.stats() {
        out.push(NamedArray::f64(format!("stats/{}/mean", s.name), &[s.mean.len()], s.mean.clone()));
        out.push(NamedArray::f64(format!("stats/{}/var", s.name), &[s.var.len()], s.var.clone()));
    }
    out
}

/// `model_arrays` plus the `meta/sharing` and `meta/hypotheses` entries
/// needed to rebuild the pair.
pub fn model_state(pair: &HypothesisPair, values: &[Tensor]) -> Vec<NamedArray> {
    let mut out = model_arrays(pair, values);
    out.push(NamedArray::u64("meta/sharing", vec![pair.sharing.tag()]));
    out.push(NamedArray::u64("meta/hypotheses", vec![pair.len() as u64]));
    out
}

/// Rebuilds a pair from a saved state. Averaged weights (`ema/…`) replace
/// the live ones in the returned values when present.
pub fn restore_model(arch: &ArchConfig, arrays: &[NamedArray]) -> Result<(HypothesisPair, Vec<Tensor>)> {
    let lookup = Lookup(arrays);
    let tag = lookup.u64s("meta/sharing", Some(1))?[0];
    let sharing = Sharing::from_tag(tag).ok_or_else(|| invalid("meta/sharing", format!("unknown tag {tag}")))?;
    let count = lookup.u64s("meta/hypotheses", Some(1))?[0] as usize;
    if !(1..=2).contains(&count) {
        return Err(invalid("meta/hypotheses", "must be 1 or 2"));
    }
    let mut pair = HypothesisPair::build(arch, sharing, count, [0, 0])?;
    import_model(&mut pair, arrays)?;
    let mut values = pair.store.values().to_vec();
    for id in pair.store.ids() {
        let name = format!("ema/{}", pair.store.meta(id).name);
        if arrays.iter().any(|a| a.name == name) {
            lookup.fill_tensor(&name, &mut values[id.0])?;
        }
    }
    Ok((pair, values))
}

/// Loads `param/…` and `stats/…` entries into a pair of matching architecture.
pub fn import_model(pair: &mut HypothesisPair, arrays: &[NamedArray]) -> Result<()> {
    let lookup = Lookup(arrays);
    let ids: Vec<ParamId> = pair.store.ids().collect();
    for id in ids {
        let name = format!("param/{}", pair.store.meta(id).name);
        let mut t = pair.store.value(id).clone();
        lookup.fill_tensor(&name, &mut t)?;
        pair.store.values_mut()[id.0] = t;
    }
    for s in pair.store.stats_mut() {
        lookup.fill_vec(&format!("stats/{}/mean", s.name), &mut s.mean)?;
        lookup.fill_vec(&format!("stats/{}/var", s.name), &mut s.var)?;
    }
    Ok(())
}

struct Lookup<'a>(&'a [NamedArray]);

impl Lookup<'_> {
    fn get(&self, name: &str) -> Result<&NamedArray> {
        self.0
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| CoreError::StateMissing { name: name.into() })
    }

    fn f64s(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::F64(v) if a.shape == shape => Ok(v),
            _ => Err(CoreError::StateShapeMismatch {
                name: name.into(),
                expected: shape.to_vec(),
                found: a.shape.clone(),
            }),
        }
    }

    fn u64s(&self, name: &str, len: Option<usize>) -> Result<&[u64]> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::U64(v) if len.is_none_or(|l| v.len() == l && a.shape == [l]) => Ok(v),
            _ => Err(CoreError::StateShapeMismatch {
                name: name.into(),
                expected: len.map_or(vec![], |l| vec![l]),
                found: a.shape.clone(),
            }),
        }
    }

    fn fill_tensor(&self, name: &str, t: &mut Tensor) -> Result<()> {
        let src = self.f64s(name, t.shape())?;
        t.data_mut().copy_from_slice(src);
        Ok(())
    }

    fn fill_vec(&self, name: &str, v: &mut [f64]) -> Result<()> {
        let src = self.f64s(name, &[v.len()])?;
        v.copy_from_slice(src);
        Ok(())
    }
}

/// Objective terms of `pair` under `values`, without any update, on a batch
/// and random streams that training never consumes.
pub fn pair_losses(pair: &HypothesisPair, values: &[Tensor], data: &Datasets, config: &TrainConfig) -> Result<LossBreakdown> {
    let seed = config.seed ^ rng::stream::EVAL;
    let batch = crate::data::sample_minibatch(&data.source, &data.target, config.batch_size, seed)?;
    let mut vat: Vec<Rng> = (0..pair.len())
        .map(|i| rng::seeded(seed, rng::stream::EVAL + 1 + i as u64))
        .collect();
    let mut tape = Tape::new();
    let graph = build_pair_graph(
        &mut tape,
        pair,
        values,
        &batch,
        &config.weights,
        Mode::DETERMINISTIC,
        None,
        VatSource::Search(&mut vat),
    )?;
    Ok(finish_total(&mut tape, pair, values, &graph, &config.weights)?.breakdown)
}

/// Accuracies and agreement of a pair under `values`, combined with loss terms.
pub fn evaluate_pair(
    pair: &HypothesisPair,
    values: &[Tensor],
    data: &Datasets,
    losses: &LossBreakdown,
    iteration: u64,
) -> Result<MetricsRecord> {
    let tl = label_of(&data.eval_target)?;
    let sl = label_of(&data.eval_source)?;
    let mut acc_t = Vec::new();
    let mut acc_s = Vec::new();
    let mut preds = Vec::new();
    for i in 0..pair.len() {
        let pt = pair.predict(values, i, &data.eval_target.inputs)?;
        let ps = pair.predict(values, i, &data.eval_source.inputs)?;
        acc_t.push(accuracy(&pt, tl)?);
        acc_s.push(accuracy(&ps, sl)?);
        preds.push(pt);
    }
    let two = pair.len() == 2;
    let h = |k: usize| losses.hypotheses.get(k);
    let get = |k: usize, f: fn(&crate::objective::HypothesisTerms) -> f64| h(k).map(f).unwrap_or(f64::NAN);
    Ok(MetricsRecord {
        iter: iteration,
        acc_tgt_1: acc_t[0],
        acc_tgt_2: acc_t.get(1).copied(),
        acc_src_1: acc_s[0],
        acc_src_2: acc_s.get(1).copied(),
        agree: if two { Some(agreement_rate(&preds[0], &preds[1])?) } else { None },
        l_p: two.then_some(losses.l_p),
        l_d_1: get(0, |t| t.l_d),
        l_d_2: h(1).map(|t| t.l_d),
        l_y_1: get(0, |t| t.l_y),
        l_y_2: h(1).map(|t| t.l_y),
        l_ce_1: get(0, |t| t.l_ce),
        l_ce_2: h(1).map(|t| t.l_ce),
        d_g: two.then_some(losses.mean_gap_sq),
        knn: None,
    })
}

/// Output dimension of the PCA stage of the feature probe.
pub const PCA_DIMS: usize = 50;

/// PCA (fit on training-source features) then kNN from source to held-out
/// target, averaged over hypotheses.
pub fn knn_pair(pair: &HypothesisPair, values: &[Tensor], data: &Datasets, ks: &[usize]) -> Result<Vec<KnnAccuracy>> {
    let sl = label_of(&data.source)?;
    let tl = label_of(&data.eval_target)?;
    let mut sums = vec![0.0; ks.len()];
    for i in 0..pair.len() {
        let fs = pair.embed(values, i, &data.source.inputs)?;
        let ft = pair.embed(values, i, &data.eval_target.inputs)?;
        let pca = pca_fit(&fs, PCA_DIMS)?;
        let r = knn_probe(&pca.project(&fs)?, sl, &pca.project(&ft)?, tl, ks)?;
        for (s, e) in sums.iter_mut().zip(&r) {
            *s += e.acc;
        }
    }
    Ok(ks
        .iter()
        .zip(sums)
        .map(|(&k, s)| KnnAccuracy {
            k,
            acc: s / pair.len() as f64,
        })
        .collect())
}

/// Trains for `config.iterations` steps, reporting an initial record and one
/// every `eval_every` steps (plus the final step).
pub fn run_training(
    arch: &ArchConfig,
    config: &TrainConfig,
    data: &Datasets,
    sink: &mut dyn FnMut(&MetricsRecord),
) -> Result<Trainer> {
    let mut t = Trainer::new(arch, config.clone(), data)?;
    continue_training(&mut t, data, config.iterations, sink)?;
    Ok(t)
}

/// Runs until `t.iteration == until`, emitting records on the schedule.
pub fn continue_training(
    t: &mut Trainer,
    data: &Datasets,
    until: u64,
    sink: &mut dyn FnMut(&MetricsRecord),
) -> Result<()> {
    if t.iteration == 0 {
        let losses = t.probe_losses(data)?;
        sink(&t.evaluate(data, &losses)?);
    }
    while t.iteration < until {
        let losses = t.step(data)?;
        if t.iteration % t.config.eval_every == 0 || t.iteration == until {
            sink(&t.evaluate(data, &losses)?);
        }
    }
    Ok(())
}

/// Target-only refinement of one hypothesis, anchored to a periodically
/// refreshed teacher.
pub struct Refiner {
    /// Single-hypothesis model being refined (the student).
    pub model: HypothesisPair,
    pub teacher: Vec<Tensor>,
    pub adam: Adam,
    pub ema: Ema,
    pub sampler: Sampler,
    pub vat: Rng,
    pub iteration: u64,
    pub weights: LossWeights,
    pub refresh_interval: u64,
}

/// Learnable quantities reported by the refinement phase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RefineTerms {
    pub loss: f64,
}

impl Refiner {
    /// Copies hypothesis `i` of `pair` (under `values`) into a standalone
    /// student; the teacher starts from the same weights.
    pub fn new(pair: &HypothesisPair, values: &[Tensor], i: usize, target_len: usize, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if i >= pair.len() {
            return Err(invalid("hypothesis", "index out of range"));
        }
        let mut model = HypothesisPair::build(&pair.arch, Sharing::Independent, 1, [0, 0])?;
        model.copy_hypothesis_from(0, pair, values, i)?;
        let cls = model.store.group_ids(Group::Classifier);
        let seed = config.seed.wrapping_add(i as u64);
        Ok(Self {
            teacher: model.store.values().to_vec(),
            adam: Adam::new(config.adam.into(), &model.store, cls.clone()),
            ema: Ema::new(config.ema_momentum, &model.store, cls),
            sampler: Sampler::new(target_len, config.batch_size, rng::seeded(seed, rng::stream::TARGET_SAMPLER + 100))?,
            vat: rng::seeded(seed, rng::stream::STOCHASTIC + 100),
            iteration: 0,
            weights: config.weights.clone(),
            refresh_interval: config.refresh_interval,
            model,
        })
    }

    pub fn step(&mut self, target: &DomainDataset) -> Result<RefineTerms> {
        let x = target.inputs.select_rows(&self.sampler.next_indices());
        let w = &self.weights;
        let store = &self.model.store;
        let model = &self.model;

        let teacher = {
            let mut t = Tape::new();
            let mut fwd = Forward::new(&mut t, store, &self.teacher, Mode::DETERMINISTIC);
            let xv = fwd.tape.constant(x.clone());
            let p = model.probs(&mut fwd, 0, xv)?;
            t.value(p).clone()
        };
        let vat = if w.lambda_ce > 0.0 && w.eps_vat_target > 0.0 {
            let f = |t: &mut Tape, xv| {
                let mut fwd = Forward::new(t, store, store.values(), Mode::DETERMINISTIC);
                model.probs(&mut fwd, 0, xv)
            };
            Some(vat_perturbation(&f, &x, w.eps_vat_target, &mut self.vat)?)
        } else {
            None
        };

        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, store, store.values(), Mode::DETERMINISTIC).train(Group::Classifier);
        let xv = fwd.tape.constant(x.clone());
        let clean = model.probs(&mut fwd, 0, xv)?;
        let updates = core::mem::take(&mut fwd.updates);
        let perturbed = match &vat {
            Some(v) => {
                let xc = fwd.tape.constant(x.clone());
                let rc = fwd.tape.constant(v.r.clone());
                let xp = fwd.tape.add(xc, rc)?;
                Some((model.probs(&mut fwd, 0, xp)?, &v.teacher))
            }
            None => None,
        };
        fwd.updates.clear();
        let binds: Vec<(ParamId, _)> = fwd.bindings().collect();
        let loss = dirtt_loss(&mut tape, clean, perturbed, &teacher, w)?;
        let g = tape.backward(loss)?;
        let found: Vec<(ParamId, Tensor)> = binds.iter().map(|&(id, v)| (id, g.wrt(&tape, v))).collect();
        let grads = gradient_list(&self.adam.ids, &self.model.store, &found);
        let value = tape.value(loss).item();
        self.adam.step(&mut self.model.store, &grads)?;
        apply_updates(&mut self.model.store, &updates);
        self.ema.update(&self.model.store);
        self.iteration += 1;
        if self.iteration % self.refresh_interval == 0 {
            self.teacher = self.ema.values(&self.model.store);
        }
        Ok(RefineTerms { loss: value })
    }

    pub fn eval_values(&self) -> Vec<Tensor> {
        self.ema.values(&self.model.store)
    }

    pub fn target_accuracy(&self, target: &DomainDataset) -> Result<f64> {
        let p = self.model.predict(&self.eval_values(), 0, &target.inputs)?;
        accuracy(&p, target.labels()?)
    }
}

/// Refines hypothesis `i` for `config.dirtt_iterations` steps.
pub fn dirtt_refine(
    pair: &HypothesisPair,
    values: &[Tensor],
    i: usize,
    target: &DomainDataset,
    config: &TrainConfig,
) -> Result<Refiner> {
    let mut r = Refiner::new(pair, values, i, target.len(), config)?;
    for _ in 0..config.dirtt_iterations {
        r.step(target)?;
    }
    Ok(r)
}

/// Reassembles refined single hypotheses into one independent model with
/// the refined (averaged) weights.
pub fn assemble_refined(refined: &[Refiner]) -> Result<HypothesisPair> {
    let first = refined.first().ok_or_else(|| invalid("refined", "no hypotheses"))?;
    let mut pair = HypothesisPair::build(&first.model.arch, Sharing::Independent, refined.len(), [0, 0])?;
    for (i, r) in refined.iter().enumerate() {
        pair.copy_hypothesis_from(i, &r.model, &r.eval_values(), 0)?;
    }
    Ok(pair)
}

/// Squared distance between the hypotheses' mean evaluation-mode features on `x`.
pub fn feature_gap(pair: &HypothesisPair, values: &[Tensor], x: &Tensor) -> Result<f64> {
    if pair.len() != 2 {
        return Err(invalid("feature_gap", "needs two hypotheses"));
    }
    let a = pair.embed(values, 0, x)?;
    let b = pair.embed(values, 1, x)?;
    Ok(squared_mean_gap(&a, &b))
}
