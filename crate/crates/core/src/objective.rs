//! Loss terms of the co-regularized objective and their compositions.
//!
//! Term functions take tape nodes and return scalar nodes. The composite
//! objective is built in two stages so that a trainer can update the
//! discriminators between building the classifier graph and attaching the
//! adversarial term to it.

use alloc::vec;
use alloc::vec::Vec;

use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, CLAMP_EPS};
use crate::data::DomainBatch;
use crate::error::{invalid, CoreError, Result};
use crate::model::HypothesisPair;
use crate::nn::{Forward, Group, Mode, ParamId, StatsUpdate};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Probe scale of the power iteration.
pub const VAT_XI: f64 = 1e-6;
const ROW_SUM_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_p: f64,
    pub lambda_div: f64,
    pub lambda_ce: f64,
    pub lambda_sv: f64,
    /// Cap on the rewarded feature-mean disparity; `+inf` disables the cap
    /// and is written as the string `"inf"`.
    #[serde(with = "nu_serde")]
    pub nu: f64,
    pub eps_vat_source: f64,
    pub eps_vat_target: f64,
    pub beta_dirt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_d: 1e-2,
            lambda_p: 1e-2,
            lambda_div: 1e-2,
            lambda_ce: 1e-2,
            lambda_sv: 1.0,
            nu: 10.0,
            eps_vat_source: 3.5,
            eps_vat_target: 3.5,
            beta_dirt: 1e-2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda_d", self.lambda_d),
            ("lambda_p", self.lambda_p),
            ("lambda_div", self.lambda_div),
            ("lambda_ce", self.lambda_ce),
            ("lambda_sv", self.lambda_sv),
            ("eps_vat_source", self.eps_vat_source),
            ("eps_vat_target", self.eps_vat_target),
            ("beta_dirt", self.beta_dirt),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(name, "must be finite and non-negative"));
            }
        }
        if !(self.nu > 0.0) {
            return Err(invalid("nu", "must be positive (or inf)"));
        }
        Ok(())
    }

    fn needs_vat(&self) -> bool {
        (self.lambda_sv > 0.0 && self.eps_vat_source > 0.0) || (self.lambda_ce > 0.0 && self.eps_vat_target > 0.0)
    }
}

/// Serde adapter that writes an infinite cap as the string `"inf"`.
pub mod nu_serde {
    use core::fmt;

    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    struct NuVisitor;

    impl Visitor<'_> for NuVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.write_str("a positive number or \"inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            match v {
                "inf" | "infinity" | "Infinity" => Ok(f64::INFINITY),
                _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(NuVisitor)
    }
}

/// Per-hypothesis terms of one evaluation of the objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HypothesisTerms {
    pub l_y: f64,
    pub l_d: f64,
    pub l_sv: f64,
    pub l_ce: f64,
    pub l_vt: f64,
    /// `L_ce + L_vt` on the target batch.
    pub l_ce_plus_vt: f64,
    /// The weighted single-hypothesis loss.
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub hypotheses: Vec<HypothesisTerms>,
    pub l_p: f64,
    pub d_g: f64,
    /// `‖mean g_1 − mean g_2‖²` on the source batch before the cap.
    pub mean_gap_sq: f64,
    pub coda_total: f64,
}

fn check_stochastic(tape: &Tape, name: &'static str, p: Var) -> Result<()> {
    let v = tape.value(p);
    if v.rank() != 2 {
        return Err(CoreError::InvalidShape {
            op: name,
            shape: v.shape().to_vec(),
            reason: "expected [batch, classes] probabilities",
        });
    }
    for i in 0..v.rows() {
        let row = v.row(i);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&x| !(-ROW_SUM_TOL..=1.0 + ROW_SUM_TOL).contains(&x)) {
            return Err(invalid(name, "probability rows must be non-negative and sum to 1"));
        }
    }
    Ok(())
}

fn batch_rows(tape: &Tape, x: Var) -> f64 {
    tape.value(x).rows() as f64
}

/// `−mean_i y_iᵀ ln p_i` with clamped logs.
pub fn cross_entropy_source(tape: &mut Tape, probs: Var, onehot: Var) -> Result<Var> {
    check_stochastic(tape, "cross_entropy_source", probs)?;
    let y = tape.value(onehot);
    if y.shape() != tape.value(probs).shape() || y.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid("cross_entropy_source", "labels must be one-hot and match the probability shape"));
    }
    let n = batch_rows(tape, probs);
    let lp = tape.ln(probs)?;
    let m = tape.mul(lp, onehot)?;
    let s = tape.sum(m)?;
    tape.scale(s, -1.0 / n)
}

/// `mean ln d(source) + mean ln(1 − d(target))`.
pub fn discriminator_loss(tape: &mut Tape, d_source: Var, d_target: Var) -> Result<Var> {
    for v in [d_source, d_target] {
        if tape.value(v).data().iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(invalid("discriminator_loss", "outputs must lie in [0, 1]"));
        }
    }
    let ls = tape.ln(d_source)?;
    let a = tape.mean(ls)?;
    let neg = tape.scale(d_target, -1.0)?;
    let comp = tape.add_scalar(neg, 1.0)?;
    let lt = tape.ln(comp)?;
    let b = tape.mean(lt)?;
    tape.add(a, b)
}

/// Mean over rows of `‖p1 − p2‖₁`.
pub fn agreement_loss(tape: &mut Tape, p1: Var, p2: Var) -> Result<Var> {
    check_stochastic(tape, "agreement_loss", p1)?;
    check_stochastic(tape, "agreement_loss", p2)?;
    let n = batch_rows(tape, p1);
    let d = tape.sub(p1, p2)?;
    let s = tape.l1_norm(d)?;
    tape.scale(s, 1.0 / n)
}

/// `min(ν, ‖mean(f1) − mean(f2)‖²)` for flattened features.
pub fn diversity_penalty(tape: &mut Tape, f1: Var, f2: Var, nu: f64) -> Result<Var> {
    if tape.value(f1).rows() == 0 {
        return Err(invalid("diversity_penalty", "empty batch"));
    }
    if tape.shape(f1) != tape.shape(f2) {
        return Err(CoreError::ShapeMismatch {
            op: "diversity_penalty",
            lhs: tape.shape(f1).to_vec(),
            rhs: tape.shape(f2).to_vec(),
        });
    }
    let m1 = tape.mean_rows(f1)?;
    let m2 = tape.mean_rows(f2)?;
    let d = tape.sub(m1, m2)?;
    let s = tape.sq_norm(d)?;
    tape.min_const(s, nu)
}

/// `−mean_i p_iᵀ ln p_i`.
pub fn conditional_entropy(tape: &mut Tape, probs: Var) -> Result<Var> {
    check_stochastic(tape, "conditional_entropy", probs)?;
    let n = batch_rows(tape, probs);
    let lp = tape.ln(probs)?;
    let m = tape.mul(lp, probs)?;
    let s = tape.sum(m)?;
    tape.scale(s, -1.0 / n)
}

/// Mean over rows of `KL(teacher ‖ student)`; the teacher is a constant.
pub fn kl_to_student(tape: &mut Tape, teacher: &Tensor, student: Var) -> Result<Var> {
    if teacher.shape() != tape.shape(student) {
        return Err(CoreError::ShapeMismatch {
            op: "kl",
            lhs: teacher.shape().to_vec(),
            rhs: tape.shape(student).to_vec(),
        });
    }
    let n = teacher.rows() as f64;
    let neg_entropy: f64 = teacher
        .data()
        .iter()
        .map(|&t| t * libm::log(t.max(CLAMP_EPS)))
        .sum::<f64>()
        / n;
    let t = tape.constant(teacher.clone());
    let ls = tape.ln(student)?;
    let m = tape.mul(ls, t)?;
    let s = tape.sum(m)?;
    let cross = tape.scale(s, -1.0 / n)?;
    tape.add_scalar(cross, neg_entropy)
}

/// A virtual adversarial perturbation with the clean prediction it attacks.
#[derive(Clone, Debug, PartialEq)]
pub struct VatPerturbation {
    pub r: Tensor,
    pub teacher: Tensor,
}

fn normalize_rows(t: &mut Tensor) -> Vec<bool> {
    let w = t.row_len();
    t.data_mut()
        .chunks_mut(w)
        .map(|row| {
            let n = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            if n > 0.0 && n.is_finite() {
                row.iter_mut().for_each(|v| *v /= n);
                true
            } else {
                false
            }
        })
        .collect()
}

fn gaussian_like(x: &Tensor, rng: &mut Rng) -> Tensor {
    use rand::Rng as _;
    let d = (0..x.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(x.shape().to_vec(), d).expect("same shape")
}

/// Unit-norm (per sample) adversarial directions plus the clean prediction,
/// from one power iteration. `f` maps an input node to class probabilities.
pub fn vat_direction<F>(f: &F, x: &Tensor, rng: &mut Rng) -> Result<VatPerturbation>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xc = tape.constant(x.clone());
    let p = f(&mut tape, xc)?;
    let teacher = tape.value(p).clone();

    let mut u = gaussian_like(x, rng);
    normalize_rows(&mut u);
    let mut probe = u.clone();
    probe.data_mut().iter_mut().for_each(|v| *v *= VAT_XI);
    let mut tape = Tape::new();
    let xc = tape.constant(x.clone());
    let d = tape.leaf(probe, true);
    let xp = tape.add(xc, d)?;
    let p = f(&mut tape, xp)?;
    let kl = kl_to_student(&mut tape, &teacher, p)?;
    let mut g = tape.backward(kl)?.wrt(&tape, d);
    let ok = normalize_rows(&mut g);
    // a flat neighbourhood gives no direction; keep the random one
    let w = g.row_len();
    for (i, good) in ok.iter().enumerate() {
        if !good {
            g.data_mut()[i * w..(i + 1) * w].copy_from_slice(u.row(i));
        }
    }
    Ok(VatPerturbation { r: g, teacher })
}

/// Perturbation of per-sample L2 norm `eps`. `eps = 0` yields zeros.
pub fn vat_perturbation<F>(f: &F, x: &Tensor, eps: f64, rng: &mut Rng) -> Result<VatPerturbation>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps >= 0.0) {
        return Err(invalid("eps_vat", "must be non-negative"));
    }
    if eps == 0.0 {
        let mut tape = Tape::new();
        let xc = tape.constant(x.clone());
        let p = f(&mut tape, xc)?;
        return Ok(VatPerturbation {
            r: Tensor::zeros(x.shape()),
            teacher: tape.value(p).clone(),
        });
    }
    let mut v = vat_direction(f, x, rng)?;
    v.r.data_mut().iter_mut().for_each(|a| *a *= eps);
    Ok(v)
}

/// `mean KL(f(x) ‖ f(x + r))` where `student` is `f(x + r)` on the tape and
/// `teacher` is the detached `f(x)`.
pub fn vat_loss(tape: &mut Tape, teacher: &Tensor, student: Var) -> Result<Var> {
    kl_to_student(tape, teacher, student)
}

/// `λ_ce (L_ce + L_vt) + β mean KL(teacher ‖ student)` on target data.
/// `student_clean` is `f(x)`, `student_perturbed` is `f(x + r)`, and
/// `vat_teacher` is the detached `f(x)` used by the VAT term.
pub fn dirtt_loss(
    tape: &mut Tape,
    student_clean: Var,
    student_perturbed: Option<(Var, &Tensor)>,
    teacher: &Tensor,
    w: &LossWeights,
) -> Result<Var> {
    let ce = conditional_entropy(tape, student_clean)?;
    let inner = match student_perturbed {
        Some((sp, vt)) => {
            let v = vat_loss(tape, vt, sp)?;
            tape.add(ce, v)?
        }
        None => ce,
    };
    let a = tape.scale(inner, w.lambda_ce)?;
    let kl = kl_to_student(tape, teacher, student_clean)?;
    let b = tape.scale(kl, w.beta_dirt)?;
    tape.add(a, b)
}

/// Precomputed perturbation and teacher for one hypothesis over the
/// concatenated (source then target) batch.
#[derive(Clone, Debug, PartialEq)]
pub struct VatFixed {
    pub r: Tensor,
    pub teacher: Tensor,
}

/// How the VAT terms obtain their perturbations.
pub enum VatSource<'a> {
    /// Power iteration, one stream per hypothesis.
    Search(&'a mut [Rng]),
    /// Reuse fixed perturbations, one per hypothesis.
    Fixed(&'a [VatFixed]),
}

/// Nodes for one hypothesis; discriminator terms are attached later.
#[derive(Clone, Debug)]
pub struct HypothesisGraph {
    /// Flattened `g_i` over the concatenated batch.
    pub features: Var,
    pub probs_target: Var,
    pub l_y: Var,
    pub l_ce: Var,
    pub l_sv: Option<Var>,
    pub l_vt: Option<Var>,
    pub vat: Option<VatFixed>,
}

/// Classifier-side graph of the objective for every hypothesis.
#[derive(Clone, Debug)]
pub struct PairGraph {
    pub hypotheses: Vec<HypothesisGraph>,
    pub l_p: Option<Var>,
    pub d_g: Option<Var>,
    pub mean_gap_sq: f64,
    pub n_source: usize,
    /// Classifier parameter leaves, for gradient lookup.
    pub bindings: Vec<(ParamId, Var)>,
    /// Batch statistics from the stochastic forward passes.
    pub updates: Vec<StatsUpdate>,
}

/// Everything about the objective except the discriminator terms.
/// `mode` governs the main forward pass; VAT passes always run without
/// stochastic layers. Classifier parameters are leaves requiring gradients.
#[allow(clippy::too_many_arguments)]
pub fn build_pair_graph(
    tape: &mut Tape,
    pair: &HypothesisPair,
    values: &[Tensor],
    batch: &DomainBatch,
    w: &LossWeights,
    mode: Mode,
    stochastic: Option<&mut [Rng]>,
    mut vat: VatSource<'_>,
) -> Result<PairGraph> {
    w.validate()?;
    let ns = batch.source_x.rows();
    let nt = batch.target_x.rows();
    let x_all = Tensor::concat_rows(&batch.source_x, &batch.target_x)?;
    let onehot = batch.source_onehot();

    // VAT perturbations are found before the main graph so the search never
    // touches the stochastic stream.
    let mut vats: Vec<Option<VatFixed>> = Vec::new();
    for i in 0..pair.len() {
        let v = match &mut vat {
            VatSource::Fixed(f) => Some(f.get(i).cloned().ok_or_else(|| invalid("vat", "missing fixed perturbation"))?),
            VatSource::Search(_) if !w.needs_vat() => None,
            VatSource::Search(rngs) => {
                let r = rngs.get_mut(i).ok_or_else(|| invalid("vat", "one stream per hypothesis required"))?;
                let f = |t: &mut Tape, x: Var| {
                    let mut fwd = Forward::new(t, &pair.store, values, Mode::DETERMINISTIC);
                    pair.probs(&mut fwd, i, x)
                };
                let mut v = vat_direction(&f, &x_all, r)?;
                let wl = v.r.row_len();
                for (row, chunk) in v.r.data_mut().chunks_mut(wl).enumerate() {
                    let eps = if row < ns { w.eps_vat_source } else { w.eps_vat_target };
                    chunk.iter_mut().for_each(|a| *a *= eps);
                }
                Some(VatFixed {
                    r: v.r,
                    teacher: v.teacher,
                })
            }
        };
        vats.push(v);
    }

    let mut streams = stochastic.map(|s| s.iter_mut());
    let mut fwd = Forward::new(tape, &pair.store, values, mode).train(Group::Classifier);
    let mut hyps = Vec::new();
    for (i, v) in vats.into_iter().enumerate() {
        fwd.set_rng(streams.as_mut().and_then(|s| s.next()));
        let xv = fwd.tape.constant(x_all.clone());
        let h = &pair.hypotheses[i];
        let native = h.generator.forward(&mut fwd, h.slot, xv)?;
        let features = fwd.tape.flatten(native)?;
        let logits = h.head.forward(&mut fwd, h.slot, native)?;
        let probs = fwd.tape.softmax(logits)?;
        let ps = fwd.tape.slice_rows(probs, 0, ns)?;
        let pt = fwd.tape.slice_rows(probs, ns, ns + nt)?;
        let y = fwd.tape.constant(onehot.clone());
        let l_y = cross_entropy_source(fwd.tape, ps, y)?;
        let l_ce = conditional_entropy(fwd.tape, pt)?;

        let (mut l_sv, mut l_vt) = (None, None);
        if let Some(v) = &v {
            let saved = (fwd.mode, fwd.updates.len());
            fwd.mode = Mode::DETERMINISTIC;
            let xc = fwd.tape.constant(x_all.clone());
            let rc = fwd.tape.constant(v.r.clone());
            let xp = fwd.tape.add(xc, rc)?;
            let student = pair.probs(&mut fwd, i, xp)?;
            fwd.mode = saved.0;
            fwd.updates.truncate(saved.1);
            let ss = fwd.tape.slice_rows(student, 0, ns)?;
            let st = fwd.tape.slice_rows(student, ns, ns + nt)?;
            let ts = Tensor::new(
                vec![ns, batch.classes],
                v.teacher.data()[..ns * batch.classes].to_vec(),
            )?;
            let tt = Tensor::new(
                vec![nt, batch.classes],
                v.teacher.data()[ns * batch.classes..].to_vec(),
            )?;
            l_sv = Some(vat_loss(fwd.tape, &ts, ss)?);
            l_vt = Some(vat_loss(fwd.tape, &tt, st)?);
        }
        hyps.push(HypothesisGraph {
            features,
            probs_target: pt,
            l_y,
            l_ce,
            l_sv,
            l_vt,
            vat: v,
        });
    }
    let (mut l_p, mut d_g, mut mean_gap_sq) = (None, None, 0.0);
    if hyps.len() == 2 {
        l_p = Some(agreement_loss(fwd.tape, hyps[0].probs_target, hyps[1].probs_target)?);
        let s1 = fwd.tape.slice_rows(hyps[0].features, 0, ns)?;
        let s2 = fwd.tape.slice_rows(hyps[1].features, 0, ns)?;
        mean_gap_sq = squared_mean_gap(fwd.tape.value(s1), fwd.tape.value(s2));
        d_g = Some(diversity_penalty(fwd.tape, s1, s2, w.nu)?);
    }
    let bindings = fwd.bindings().collect();
    let updates = core::mem::take(&mut fwd.updates);
    Ok(PairGraph {
        hypotheses: hyps,
        l_p,
        d_g,
        mean_gap_sq,
        n_source: ns,
        bindings,
        updates,
    })
}

/// `‖mean(a) − mean(b)‖²` over rows of two equally shaped matrices.
pub fn squared_mean_gap(a: &Tensor, b: &Tensor) -> f64 {
    let (n, d) = (a.rows(), a.row_len());
    let mut s = 0.0;
    for j in 0..d {
        let (mut ma, mut mb) = (0.0, 0.0);
        for i in 0..n {
            ma += a.row(i)[j];
            mb += b.row(i)[j];
        }
        let g = (ma - mb) / n as f64;
        s += g * g;
    }
    s
}

/// `L_disc` of hypothesis `i` for flattened features (source rows first).
/// Discriminator parameters require gradients iff `train_disc`.
pub fn discriminator_term(
    tape: &mut Tape,
    pair: &HypothesisPair,
    values: &[Tensor],
    i: usize,
    features: Var,
    n_source: usize,
    train_disc: bool,
) -> Result<(Var, Vec<(ParamId, Var)>)> {
    let mut fwd = Forward::new(tape, &pair.store, values, Mode::EVAL);
    if train_disc {
        fwd = fwd.train(Group::Discriminator);
    }
    let n = fwd.tape.value(features).rows();
    let d = pair.discriminate(&mut fwd, i, features)?;
    let ds = fwd.tape.slice_rows(d, 0, n_source)?;
    let dt = fwd.tape.slice_rows(d, n_source, n)?;
    let l = discriminator_loss(fwd.tape, ds, dt)?;
    let b = fwd.bindings().collect();
    Ok((l, b))
}

/// Scalar nodes of a finished objective.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    /// Single-hypothesis losses `ℒ(f_i)`.
    pub vada: Vec<Var>,
    pub breakdown: LossBreakdown,
}

/// Finishes the objective: attaches `L_d` per hypothesis (discriminators
/// held constant at `disc_values`) and sums the weighted terms.
pub fn finish_total(
    tape: &mut Tape,
    pair: &HypothesisPair,
    disc_values: &[Tensor],
    graph: &PairGraph,
    w: &LossWeights,
) -> Result<Objective> {
    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Var> = None;
    let mut vadas = Vec::new();
    for (i, h) in graph.hypotheses.iter().enumerate() {
        let (l_d, _) = discriminator_term(tape, pair, disc_values, i, h.features, graph.n_source, false)?;
        let zero = || Tensor::scalar(0.0);
        let l_sv = match h.l_sv {
            Some(v) => v,
            None => tape.constant(zero()),
        };
        let l_vt = match h.l_vt {
            Some(v) => v,
            None => tape.constant(zero()),
        };
        let ce_vt = tape.add(h.l_ce, l_vt)?;
        let a = tape.scale(l_d, w.lambda_d)?;
        let b = tape.scale(l_sv, w.lambda_sv)?;
        let c = tape.scale(ce_vt, w.lambda_ce)?;
        let s = tape.add(h.l_y, a)?;
        let s = tape.add(s, b)?;
        let vada = tape.add(s, c)?;
        breakdown.hypotheses.push(HypothesisTerms {
            l_y: tape.value(h.l_y).item(),
            l_d: tape.value(l_d).item(),
            l_sv: tape.value(l_sv).item(),
            l_ce: tape.value(h.l_ce).item(),
            l_vt: tape.value(l_vt).item(),
            l_ce_plus_vt: tape.value(ce_vt).item(),
            total: tape.value(vada).item(),
        });
        vadas.push(vada);
        total = Some(match total {
            Some(t) => tape.add(t, vada)?,
            None => vada,
        });
    }
    let mut total = total.ok_or_else(|| invalid("objective", "no hypotheses"))?;
    if let (Some(lp), Some(dg)) = (graph.l_p, graph.d_g) {
        let a = tape.scale(lp, w.lambda_p)?;
        let b = tape.scale(dg, -w.lambda_div)?;
        total = tape.add(total, a)?;
        total = tape.add(total, b)?;
        breakdown.l_p = tape.value(lp).item();
        breakdown.d_g = tape.value(dg).item();
        breakdown.mean_gap_sq = graph.mean_gap_sq;
    }
    breakdown.coda_total = tape.value(total).item();
    Ok(Objective {
        total,
        vada: vadas,
        breakdown,
    })
}

/// Full objective with every parameter taken from `values`.
#[allow(clippy::too_many_arguments)]
pub fn coda_total(
    tape: &mut Tape,
    pair: &HypothesisPair,
    values: &[Tensor],
    batch: &DomainBatch,
    w: &LossWeights,
    mode: Mode,
    stochastic: Option<&mut [Rng]>,
    vat: VatSource<'_>,
) -> Result<(Objective, PairGraph)> {
    let graph = build_pair_graph(tape, pair, values, batch, w, mode, stochastic, vat)?;
    let obj = finish_total(tape, pair, values, &graph, w)?;
    Ok((obj, graph))
}

/// Single-hypothesis loss `ℒ(f_i)` of hypothesis `i`, ignoring the pair terms.
#[allow(clippy::too_many_arguments)]
pub fn vada_loss(
    tape: &mut Tape,
    pair: &HypothesisPair,
    i: usize,
    values: &[Tensor],
    batch: &DomainBatch,
    w: &LossWeights,
    mode: Mode,
    stochastic: Option<&mut [Rng]>,
    vat: VatSource<'_>,
) -> Result<(Var, HypothesisTerms)> {
    if i >= pair.len() {
        return Err(invalid("hypothesis", "index out of range"));
    }
    let (obj, _) = coda_total(tape, pair, values, batch, w, mode, stochastic, vat)?;
    Ok((obj.vada[i], obj.breakdown.hypotheses[i].clone()))
}

#[cfg(test)]
mod tests;
