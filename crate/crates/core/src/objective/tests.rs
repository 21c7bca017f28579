use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::*;
use crate::autodiff::relative_error;
use crate::model::{ArchConfig, Sharing};
use crate::rng::seeded;

macro_rules! ev {
    ($t:ident, $e:expr) => {{
        let v = $e.unwrap();
        $t.value(v).item()
    }};
}

fn c(tape: &mut Tape, rows: usize, cols: usize, d: &[f64]) -> Var {
    tape.constant(Tensor::matrix(rows, cols, d.to_vec()).unwrap())
}

fn close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b}");
}

fn random_stochastic(rows: usize, k: usize, seed: u64) -> Tensor {
    let mut r = seeded(seed, 0);
    let mut d = Vec::new();
    for _ in 0..rows {
        let row: Vec<f64> = (0..k).map(|_| r.random::<f64>() + 1e-3).collect();
        let s: f64 = row.iter().sum();
        d.extend(row.iter().map(|v| v / s));
    }
    Tensor::matrix(rows, k, d).unwrap()
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::new();
    let p = c(&mut t, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let y = c(&mut t, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let l = cross_entropy_source(&mut t, p, y).unwrap();
    assert!(t.value(l).item() <= 1e-6 && t.value(l).item() >= 0.0);

    let p = c(&mut t, 1, 10, &[0.1; 10]);
    let mut yv = [0.0; 10];
    yv[3] = 1.0;
    let y = c(&mut t, 1, 10, &yv);
    let l = cross_entropy_source(&mut t, p, y).unwrap();
    close(t.value(l).item(), libm::log(10.0), 1e-12);

    let p = c(&mut t, 1, 2, &[0.7, 0.3]);
    let y = c(&mut t, 1, 2, &[1.0, 0.0]);
    let l = cross_entropy_source(&mut t, p, y).unwrap();
    close(t.value(l).item(), 0.356675, 1e-6);
}

#[test]
fn cross_entropy_rejects_non_stochastic_rows_and_soft_labels() {
    let mut t = Tape::new();
    let p = c(&mut t, 1, 2, &[0.7, 0.4]);
    let y = c(&mut t, 1, 2, &[1.0, 0.0]);
    assert!(cross_entropy_source(&mut t, p, y).is_err());
    let p = c(&mut t, 1, 2, &[0.7, 0.3]);
    let y = c(&mut t, 1, 2, &[0.5, 0.5]);
    assert!(cross_entropy_source(&mut t, p, y).is_err());
}

#[test]
fn discriminator_loss_examples() {
    let mut t = Tape::new();
    let a = c(&mut t, 3, 1, &[0.5; 3]);
    let b = c(&mut t, 4, 1, &[0.5; 4]);
    let l = discriminator_loss(&mut t, a, b).unwrap();
    close(t.value(l).item(), 2.0 * libm::log(0.5), 1e-12);

    let a = c(&mut t, 2, 1, &[1.0, 1.0]);
    let b = c(&mut t, 2, 1, &[0.0, 0.0]);
    let l = ev!(t, discriminator_loss(&mut t, a, b));
    assert!(l <= 0.0 && l >= 2.0 * libm::log(1.0 - CLAMP_EPS) - 1e-12);

    let a = c(&mut t, 1, 1, &[1.5]);
    assert!(discriminator_loss(&mut t, a, b).is_err());
}

#[test]
fn optimal_discriminator_on_discrete_support_matches_jensen_shannon() {
    // source and target histograms over five feature values
    let ps = [0.4, 0.3, 0.1, 0.15, 0.05];
    let pt = [0.1, 0.1, 0.3, 0.2, 0.3];
    let n = 200usize;
    let mut ds = Vec::new();
    let mut dt = Vec::new();
    let opt: Vec<f64> = ps.iter().zip(&pt).map(|(a, b)| a / (a + b)).collect();
    for v in 0..5 {
        ds.extend(core::iter::repeat_n(opt[v], (ps[v] * n as f64).round() as usize));
        dt.extend(core::iter::repeat_n(opt[v], (pt[v] * n as f64).round() as usize));
    }
    let mut t = Tape::new();
    let a = c(&mut t, ds.len(), 1, &ds);
    let b = c(&mut t, dt.len(), 1, &dt);
    let got = ev!(t, discriminator_loss(&mut t, a, b));

    let kl = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * libm::log(a / b)).sum::<f64>();
    let m: Vec<f64> = ps.iter().zip(&pt).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl(&ps, &m) + 0.5 * kl(&pt, &m);
    close(got, 2.0 * js - 2.0 * libm::log(2.0), 1e-12);

    // any other discriminator scores lower
    for shift in [-0.05, 0.05] {
        let ds2: Vec<f64> = ds.iter().map(|v| v + shift).collect();
        let dt2: Vec<f64> = dt.iter().map(|v| v + shift).collect();
        let a = c(&mut t, ds2.len(), 1, &ds2);
        let b = c(&mut t, dt2.len(), 1, &dt2);
        assert!(ev!(t, discriminator_loss(&mut t, a, b)) < got);
    }
}

#[test]
fn agreement_loss_examples_and_oracle() {
    let mut t = Tape::new();
    let p = random_stochastic(6, 3, 1);
    let a = t.constant(p.clone());
    let b = t.constant(p);
    close(ev!(t, agreement_loss(&mut t, a, b)), 0.0, 0.0);

    let a = c(&mut t, 1, 2, &[1.0, 0.0]);
    let b = c(&mut t, 1, 2, &[0.0, 1.0]);
    close(ev!(t, agreement_loss(&mut t, a, b)), 2.0, 0.0);

    let (p, q) = (random_stochastic(9, 4, 2), random_stochastic(9, 4, 3));
    let oracle: f64 = p.data().iter().zip(q.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 9.0;
    let a = t.constant(p);
    let b = t.constant(q);
    let got = ev!(t, agreement_loss(&mut t, a, b));
    close(got, oracle, 1e-12);
    assert!((0.0..=2.0).contains(&got));
}

#[test]
fn diversity_examples_and_oracle() {
    let mut t = Tape::new();
    let f = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let a = t.constant(f.clone());
    let b = t.constant(f.clone());
    close(ev!(t, diversity_penalty(&mut t, a, b, 10.0)), 0.0, 0.0);

    // mean difference (3, 0): squared norm 9
    let shifted = Tensor::matrix(3, 2, f.data().iter().enumerate().map(|(i, v)| if i % 2 == 0 { v + 3.0 } else { *v }).collect()).unwrap();
    let b = t.constant(shifted);
    close(ev!(t, diversity_penalty(&mut t, a, b, 5.0)), 5.0, 0.0);
    close(ev!(t, diversity_penalty(&mut t, a, b, f64::INFINITY)), 9.0, 1e-12);

    let mut r = seeded(4, 0);
    let x: Vec<f64> = (0..40).map(|_| r.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..40).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut oracle = 0.0;
    for j in 0..5 {
        let mx: f64 = (0..8).map(|i| x[i * 5 + j]).sum::<f64>() / 8.0;
        let my: f64 = (0..8).map(|i| y[i * 5 + j]).sum::<f64>() / 8.0;
        oracle += (mx - my) * (mx - my);
    }
    let a = c(&mut t, 8, 5, &x);
    let b = c(&mut t, 8, 5, &y);
    close(ev!(t, diversity_penalty(&mut t, a, b, 100.0)), oracle, 1e-12);
}

#[test]
fn conditional_entropy_examples() {
    let mut t = Tape::new();
    let p = c(&mut t, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
    assert!(ev!(t, conditional_entropy(&mut t, p)).abs() <= 1e-6);
    let p = c(&mut t, 3, 4, &[0.25; 12]);
    close(ev!(t, conditional_entropy(&mut t, p)), libm::log(4.0), 1e-12);
    let p = c(&mut t, 1, 2, &[0.9, 0.1]);
    close(ev!(t, conditional_entropy(&mut t, p)), 0.325083, 1e-6);
}

#[test]
fn kl_examples() {
    let mut t = Tape::new();
    let teacher = Tensor::matrix(1, 2, vec![0.8, 0.2]).unwrap();
    let s = c(&mut t, 1, 2, &[0.6, 0.4]);
    let kl = ev!(t, vat_loss(&mut t, &teacher, s));
    close(kl, 0.8 * libm::log(0.8 / 0.6) + 0.2 * libm::log(0.2 / 0.4), 1e-12);
    close(kl, 0.091516, 1e-6);
    let s = c(&mut t, 1, 2, &[0.8, 0.2]);
    close(ev!(t, vat_loss(&mut t, &teacher, s)), 0.0, 1e-15);
    // zero teacher mass contributes nothing
    let teacher = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
    let s = c(&mut t, 1, 2, &[0.5, 0.5]);
    close(ev!(t, vat_loss(&mut t, &teacher, s)), libm::log(2.0), 1e-12);
}

#[test]
fn dirtt_examples() {
    let teacher = Tensor::matrix(1, 2, vec![0.8, 0.2]).unwrap();
    let w = LossWeights {
        lambda_ce: 0.0,
        beta_dirt: 1.0,
        ..LossWeights::default()
    };
    let mut t = Tape::new();
    let s = c(&mut t, 1, 2, &[0.5, 0.5]);
    let l = dirtt_loss(&mut t, s, None, &teacher, &w).unwrap();
    close(t.value(l).item(), 0.192745, 1e-6);

    // beta = 0 leaves entropy plus VAT
    let w = LossWeights {
        lambda_ce: 0.3,
        beta_dirt: 0.0,
        ..LossWeights::default()
    };
    let s = c(&mut t, 1, 2, &[0.9, 0.1]);
    let sp = c(&mut t, 1, 2, &[0.6, 0.4]);
    let vt = Tensor::matrix(1, 2, vec![0.8, 0.2]).unwrap();
    let l = dirtt_loss(&mut t, s, Some((sp, &vt)), &teacher, &w).unwrap();
    close(t.value(l).item(), 0.3 * (0.325083 + 0.091516), 1e-6);

    // student equal to teacher: KL vanishes
    let w = LossWeights {
        lambda_ce: 0.0,
        beta_dirt: 5.0,
        ..LossWeights::default()
    };
    let s = c(&mut t, 1, 2, &[0.8, 0.2]);
    close(ev!(t, dirtt_loss(&mut t, s, None, &teacher, &w)), 0.0, 1e-14);
}

// -- linear softmax model for VAT checks --------------------------------

fn linear_softmax(w: &Tensor) -> impl Fn(&mut Tape, Var) -> Result<Var> + '_ {
    move |t: &mut Tape, x: Var| {
        let wv = t.constant(w.clone());
        let z = t.matmul(x, wv)?;
        t.softmax(z)
    }
}

fn kl_at(f: &impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor, r: &Tensor, teacher: &Tensor) -> f64 {
    let mut t = Tape::new();
    let xc = t.constant(x.clone());
    let rc = t.constant(r.clone());
    let xp = t.add(xc, rc).unwrap();
    let p = f(&mut t, xp).unwrap();
    let k = kl_to_student(&mut t, teacher, p).unwrap();
    t.value(k).item()
}

#[test]
fn vat_zero_eps_gives_zero_perturbation_and_loss() {
    let w = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
    let f = linear_softmax(&w);
    let x = Tensor::matrix(3, 2, vec![0.1, 0.2, -0.3, 0.4, 1.0, -1.0]).unwrap();
    let v = vat_perturbation(&f, &x, 0.0, &mut seeded(1, 0)).unwrap();
    assert!(v.r.data().iter().all(|&a| a == 0.0));
    assert_eq!(kl_at(&f, &x, &v.r, &v.teacher), 0.0);
}

#[test]
fn vat_constant_classifier_is_indifferent_to_perturbation() {
    let w = Tensor::zeros(&[2, 3]);
    let f = linear_softmax(&w);
    let x = Tensor::matrix(2, 2, vec![0.1, 0.2, -0.3, 0.4]).unwrap();
    let v = vat_perturbation(&f, &x, 2.0, &mut seeded(1, 0)).unwrap();
    for i in 0..2 {
        let n: f64 = v.r.row(i).iter().map(|a| a * a).sum();
        close(libm::sqrt(n), 2.0, 1e-12);
    }
    close(kl_at(&f, &x, &v.r, &v.teacher), 0.0, 1e-15);
}

#[test]
fn vat_direction_has_per_sample_norm_eps() {
    let w = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
    let f = linear_softmax(&w);
    let x = Tensor::matrix(4, 2, vec![0.1, 0.2, -0.3, 0.4, 1.0, -1.0, 0.0, 0.0]).unwrap();
    let v = vat_perturbation(&f, &x, 0.7, &mut seeded(5, 0)).unwrap();
    for i in 0..4 {
        let n: f64 = v.r.row(i).iter().map(|a| a * a).sum();
        close(libm::sqrt(n), 0.7, 1e-12);
    }
}

#[test]
fn vat_beats_random_direction_on_linear_softmax() {
    let mut wins = 0;
    for trial in 0..100u64 {
        let mut r = seeded(trial, 7);
        let w = Tensor::matrix(5, 3, (0..15).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let x = Tensor::matrix(1, 5, (0..5).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let f = linear_softmax(&w);
        let eps = 0.5;
        let v = vat_perturbation(&f, &x, eps, &mut r).unwrap();
        let mut rnd = gaussian_like(&x, &mut r);
        normalize_rows(&mut rnd);
        rnd.data_mut().iter_mut().for_each(|a| *a *= eps);
        if kl_at(&f, &x, &v.r, &v.teacher) > kl_at(&f, &x, &rnd, &v.teacher) {
            wins += 1;
        }
    }
    assert!(wins >= 90, "{wins}/100");
}

// -- composite objective ------------------------------------------------

pub(crate) fn toy_pair(sharing: Sharing, count: usize) -> HypothesisPair {
    let arch = ArchConfig {
        hidden: 4,
        disc_hidden: 5,
        ..ArchConfig::default()
    };
    let mut p = HypothesisPair::build(&arch, sharing, count, [11, 12]).unwrap();
    // perturb batch-norm affine parameters so hypotheses differ under sharing
    let mut r = seeded(99, 0);
    for v in p.store.values_mut() {
        for a in v.data_mut() {
            *a += 0.1 * r.random_range(-1.0..1.0);
        }
    }
    p
}

pub(crate) fn toy_batch(ns: usize, nt: usize, seed: u64) -> DomainBatch {
    let mut r = seeded(seed, 3);
    let mut m = |n: usize| Tensor::matrix(n, 2, (0..2 * n).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap();
    let source_x = m(ns);
    let target_x = m(nt);
    DomainBatch {
        source_x,
        source_y: (0..ns).map(|i| i % 2).collect(),
        target_x,
        classes: 2,
    }
}

fn full_weights() -> LossWeights {
    LossWeights {
        lambda_d: 0.3,
        lambda_p: 0.7,
        lambda_div: 0.2,
        lambda_ce: 0.4,
        lambda_sv: 0.6,
        nu: 100.0,
        eps_vat_source: 0.5,
        eps_vat_target: 0.8,
        beta_dirt: 0.0,
    }
}

fn objective(pair: &HypothesisPair, values: &[Tensor], batch: &DomainBatch, w: &LossWeights, vat: VatSource<'_>) -> (Tape, Objective, PairGraph) {
    let mut tape = Tape::new();
    let (o, g) = coda_total(&mut tape, pair, values, batch, w, Mode::DETERMINISTIC, None, vat).unwrap();
    (tape, o, g)
}

#[test]
fn degenerate_weights_reduce_to_cross_entropy() {
    let pair = toy_pair(Sharing::Independent, 2);
    let batch = toy_batch(6, 6, 1);
    let w = LossWeights {
        lambda_d: 0.0,
        lambda_p: 0.0,
        lambda_div: 0.0,
        lambda_ce: 0.0,
        lambda_sv: 0.0,
        ..LossWeights::default()
    };
    let mut r = [seeded(0, 0), seeded(0, 1)];
    let (_, o, _) = objective(&pair, pair.store.values(), &batch, &w, VatSource::Search(&mut r));
    for h in &o.breakdown.hypotheses {
        assert_eq!(h.total, h.l_y);
    }
    let b = &o.breakdown;
    assert_eq!(b.coda_total, b.hypotheses[0].total + b.hypotheses[1].total);
}

#[test]
fn vada_loss_picks_one_hypothesis() {
    let pair = toy_pair(Sharing::ConditionalBn, 2);
    let batch = toy_batch(6, 6, 2);
    let w = full_weights();
    let mut r = [seeded(0, 0), seeded(0, 1)];
    let mut tape = Tape::new();
    let (v, terms) = vada_loss(&mut tape, &pair, 1, pair.store.values(), &batch, &w, Mode::DETERMINISTIC, None, VatSource::Search(&mut r)).unwrap();
    close(tape.value(v).item(), terms.total, 0.0);
    let hand = terms.l_y + w.lambda_d * terms.l_d + w.lambda_sv * terms.l_sv + w.lambda_ce * (terms.l_ce + terms.l_vt);
    close(terms.total, hand, 1e-12);
}

/// Independent recomputation of every term from deterministic-mode outputs.
fn oracle_total(pair: &HypothesisPair, batch: &DomainBatch, w: &LossWeights, vats: &[VatFixed]) -> f64 {
    let values = pair.store.values();
    let x = Tensor::concat_rows(&batch.source_x, &batch.target_x).unwrap();
    let ns = batch.source_x.rows();
    let n = x.rows();
    let run = |i: usize, input: &Tensor| -> (Tensor, Tensor, Tensor) {
        let mut t = Tape::new();
        let mut fwd = Forward::new(&mut t, &pair.store, values, Mode::DETERMINISTIC);
        let xv = fwd.tape.constant(input.clone());
        let f = pair.features(&mut fwd, i, xv).unwrap();
        let p = pair.probs(&mut fwd, i, xv).unwrap();
        let d = pair.discriminate(&mut fwd, i, f).unwrap();
        (t.value(f).clone(), t.value(p).clone(), t.value(d).clone())
    };
    let ln = |v: f64| libm::log(v.max(CLAMP_EPS));
    let mut total = 0.0;
    let mut probs_t = Vec::new();
    let mut means = Vec::new();
    for i in 0..pair.len() {
        let (f, p, d) = run(i, &x);
        let mut xp = x.clone();
        for (a, b) in xp.data_mut().iter_mut().zip(vats[i].r.data()) {
            *a += b;
        }
        let (_, pp, _) = run(i, &xp);
        let (mut ly, mut lce, mut lsv, mut lvt, mut lds, mut ldt) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for row in 0..n {
            let kl: f64 = (0..2).map(|k| {
                let q = p.row(row)[k];
                q * (ln(q) - ln(pp.row(row)[k]))
            }).sum();
            if row < ns {
                ly -= ln(p.row(row)[batch.source_y[row]]);
                lsv += kl;
                lds += ln(d.data()[row]);
            } else {
                lce -= p.row(row).iter().map(|&q| q * ln(q)).sum::<f64>();
                lvt += kl;
                ldt += ln(1.0 - d.data()[row]);
            }
        }
        let nt = (n - ns) as f64;
        let ns_f = ns as f64;
        total += ly / ns_f + w.lambda_d * (lds / ns_f + ldt / nt) + w.lambda_sv * lsv / ns_f + w.lambda_ce * (lce / nt + lvt / nt);
        probs_t.push(p);
        let dim = f.row_len();
        means.push((0..dim).map(|j| (0..ns).map(|r| f.row(r)[j]).sum::<f64>() / ns_f).collect::<Vec<f64>>());
    }
    if pair.len() == 2 {
        let nt = (n - ns) as f64;
        let lp: f64 = (ns..n).map(|r| (0..2).map(|k| (probs_t[0].row(r)[k] - probs_t[1].row(r)[k]).abs()).sum::<f64>()).sum::<f64>() / nt;
        let dg: f64 = means[0].iter().zip(&means[1]).map(|(a, b)| (a - b) * (a - b)).sum();
        total += w.lambda_p * lp - w.lambda_div * dg.min(w.nu);
    }
    total
}

#[test]
fn composite_matches_component_oracle_for_every_sharing_mode() {
    for sharing in [Sharing::Independent, Sharing::ConditionalBn, Sharing::SharedStochastic] {
        let pair = toy_pair(sharing, 2);
        let batch = toy_batch(8, 8, 4);
        let w = full_weights();
        let mut r = [seeded(0, 0), seeded(0, 1)];
        let (_, o, g) = objective(&pair, pair.store.values(), &batch, &w, VatSource::Search(&mut r));
        let vats: Vec<VatFixed> = g.hypotheses.iter().map(|h| h.vat.clone().unwrap()).collect();
        close(o.breakdown.coda_total, oracle_total(&pair, &batch, &w, &vats), 1e-9);
        let b = &o.breakdown;
        let sum = b.hypotheses[0].total + b.hypotheses[1].total + w.lambda_p * b.l_p - w.lambda_div * b.d_g;
        close(b.coda_total, sum, 1e-9);
        assert!((0.0..=2.0).contains(&b.l_p) && (0.0..=w.nu).contains(&b.d_g));
    }
}

#[test]
fn swapping_hypotheses_leaves_total_unchanged() {
    let pair = toy_pair(Sharing::Independent, 2);
    let mut swapped = pair.clone();
    swapped.hypotheses.swap(0, 1);
    let batch = toy_batch(8, 8, 5);
    let w = full_weights();
    let mut r = [seeded(0, 0), seeded(0, 1)];
    let (_, o, g) = objective(&pair, pair.store.values(), &batch, &w, VatSource::Search(&mut r));
    let mut vats: Vec<VatFixed> = g.hypotheses.iter().map(|h| h.vat.clone().unwrap()).collect();
    vats.swap(0, 1);
    let (_, o2, _) = objective(&swapped, swapped.store.values(), &batch, &w, VatSource::Fixed(&vats));
    close(o.breakdown.coda_total, o2.breakdown.coda_total, 1e-12);
}

#[test]
fn lambda_p_and_div_zero_sum_the_single_losses() {
    let pair = toy_pair(Sharing::ConditionalBn, 2);
    let batch = toy_batch(8, 8, 6);
    let w = LossWeights {
        lambda_p: 0.0,
        lambda_div: 0.0,
        ..full_weights()
    };
    let mut r = [seeded(0, 0), seeded(0, 1)];
    let (_, o, _) = objective(&pair, pair.store.values(), &batch, &w, VatSource::Search(&mut r));
    let b = &o.breakdown;
    assert_eq!(b.coda_total, b.hypotheses[0].total + b.hypotheses[1].total);
}

#[test]
fn weight_validation() {
    let w = LossWeights {
        nu: f64::INFINITY,
        ..LossWeights::default()
    };
    assert!(w.validate().is_ok());
    assert!(LossWeights { nu: 0.0, ..w.clone() }.validate().is_err());
    assert!(LossWeights { lambda_d: -1.0, ..w }.validate().is_err());
}

#[test]
fn adversarial_term_never_reaches_discriminator_parameters() {
    let pair = toy_pair(Sharing::Independent, 2);
    let batch = toy_batch(8, 8, 7);
    let mut r = [seeded(0, 0), seeded(0, 1)];
    let (tape, o, g) = objective(&pair, pair.store.values(), &batch, &full_weights(), VatSource::Search(&mut r));
    let grads = tape.backward(o.total).unwrap();
    let disc: Vec<ParamId> = (0..2).flat_map(|i| pair.discriminator_params(i)).collect();
    assert!(g.bindings.iter().all(|(id, _)| !disc.contains(id)));
    for (_, v) in &g.bindings {
        assert!(grads.get(*v).is_some());
    }
}

#[test]
fn discriminator_update_gradient_skips_classifier() {
    let pair = toy_pair(Sharing::Independent, 2);
    let mut tape = Tape::new();
    let feats = tape.constant(Tensor::matrix(6, 4, (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
    let (l, b) = discriminator_term(&mut tape, &pair, pair.store.values(), 0, feats, 3, true).unwrap();
    let g = tape.backward(l).unwrap();
    let own = pair.discriminator_params(0);
    assert_eq!(b.iter().map(|(id, _)| *id).collect::<Vec<_>>().len(), own.len());
    for (id, v) in b {
        assert!(own.contains(&id));
        assert!(g.get(v).is_some());
    }
    assert!(g.get(feats).is_none());
}

/// Central differences over every classifier parameter entry of the full
/// objective with fixed VAT perturbations and teachers.
pub(crate) fn objective_gradcheck(sharing: Sharing, ns: usize, nt: usize) -> f64 {
    let pair = toy_pair(sharing, 2);
    let batch = toy_batch(ns, nt, 8);
    let w = full_weights();
    let mut r = [seeded(0, 0), seeded(0, 1)];
    let base = pair.store.values().to_vec();
    let (tape, o, g) = objective(&pair, &base, &batch, &w, VatSource::Search(&mut r));
    let vats: Vec<VatFixed> = g.hypotheses.iter().map(|h| h.vat.clone().unwrap()).collect();
    let grads = tape.backward(o.total).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (id, v) in &g.bindings {
        let analytic = grads.wrt(&tape, *v);
        for j in 0..base[id.0].len() {
            let eval = |delta: f64| {
                let mut vals = base.clone();
                vals[id.0].data_mut()[j] += delta;
                objective(&pair, &vals, &batch, &w, VatSource::Fixed(&vats)).1.breakdown.coda_total
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    worst
}

#[test]
fn full_objective_gradient_matches_finite_differences() {
    for sharing in [Sharing::Independent, Sharing::ConditionalBn] {
        let e = objective_gradcheck(sharing, 8, 8);
        assert!(e <= 1e-4, "{sharing:?}: {e}");
    }
}

#[test]
fn vat_teacher_path_carries_no_gradient() {
    // moving only the teacher (clean-input) path changes the loss, yet the
    // analytic gradient equals the student-only finite difference
    let w = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
    let x = Tensor::matrix(2, 2, vec![0.3, -0.2, 0.1, 0.9]).unwrap();
    let r = Tensor::matrix(2, 2, vec![0.2, 0.1, -0.1, 0.3]).unwrap();
    let loss = |wt: &Tensor, ws: &Tensor| {
        let teacher = {
            let mut t = Tape::new();
            let xc = t.constant(x.clone());
            let p = linear_softmax(wt)(&mut t, xc).unwrap();
            t.value(p).clone()
        };
        let mut t = Tape::new();
        let wv = t.leaf(ws.clone(), true);
        let xc = t.constant(x.clone());
        let rc = t.constant(r.clone());
        let xp = t.add(xc, rc).unwrap();
        let z = t.matmul(xp, wv).unwrap();
        let p = t.softmax(z).unwrap();
        let l = vat_loss(&mut t, &teacher, p).unwrap();
        let g = t.backward(l).unwrap().wrt(&t, wv);
        (t.value(l).item(), g)
    };
    let (_, g) = loss(&w, &w);
    let h = 1e-6;
    let mut teacher_moves = false;
    for j in 0..4 {
        let mut wp = w.clone();
        wp.data_mut()[j] += h;
        let mut wm = w.clone();
        wm.data_mut()[j] -= h;
        let student_only = (loss(&w, &wp).0 - loss(&w, &wm).0) / (2.0 * h);
        let both = (loss(&wp, &wp).0 - loss(&wm, &wm).0) / (2.0 * h);
        assert!(relative_error(g.data()[j], student_only) < 1e-6);
        teacher_moves |= (both - student_only).abs() > 1e-6;
    }
    assert!(teacher_moves);
}
