//! Accuracy, inter-hypothesis agreement, and the PCA + kNN feature probe.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::tensor::Tensor;

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.rows() == 0 || labels.is_empty() {
        return Err(invalid("accuracy", "empty dataset"));
    }
    if probs.rows() != labels.len() {
        return Err(invalid("accuracy", "one label per prediction required"));
    }
    let hits = probs
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of rows on which the two predictions share an argmax.
pub fn agreement_rate(p1: &Tensor, p2: &Tensor) -> Result<f64> {
    if p1.shape() != p2.shape() || p1.rows() == 0 {
        return Err(invalid("agreement_rate", "predictions must be non-empty and of equal shape"));
    }
    let (a, b) = (p1.argmax_rows(), p2.argmax_rows());
    Ok(a.iter().zip(&b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64)
}

/// Mean-centred linear projection onto leading covariance eigenvectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `[dim, components]`, orthonormal columns.
    pub basis: Tensor,
    /// Component variances, descending.
    pub eigenvalues: Vec<f64>,
    /// Fewer components than requested were available.
    pub truncated: bool,
}

/// Relative eigenvalue floor below which a direction counts as absent.
const RANK_TOL: f64 = 1e-12;

pub fn pca_fit(features: &Tensor, out_dims: usize) -> Result<Pca> {
    if features.rank() != 2 || features.rows() < 2 {
        return Err(invalid("pca_fit", "need a 2-D matrix with at least two rows"));
    }
    if out_dims == 0 {
        return Err(invalid("pca_fit", "out_dims must be positive"));
    }
    let (n, d) = (features.rows(), features.row_len());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred = DMatrix::from_fn(n, d, |i, j| features.row(i)[j] - mean[j]);
    let cov = (centred.transpose() * &centred) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let available = order
        .iter()
        .take_while(|&&k| eig.eigenvalues[k] > RANK_TOL * top.max(f64::MIN_POSITIVE))
        .count();
    let k = out_dims.min(available).max(1);
    let mut basis = vec![0.0; d * k];
    for (c, &col) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(col);
        // fix the sign so the largest-magnitude entry is positive
        let mut lead = 0;
        for j in 1..d {
            if v[j].abs() > v[lead].abs() {
                lead = j;
            }
        }
        let s = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            basis[j * k + c] = s * v[j];
        }
    }
    Ok(Pca {
        mean,
        basis: Tensor::matrix(d, k, basis)?,
        eigenvalues: order.iter().take(k).map(|&c| eig.eigenvalues[c]).collect(),
        truncated: k < out_dims,
    })
}

impl Pca {
    pub fn components(&self) -> usize {
        self.basis.shape()[1]
    }

    pub fn project(&self, features: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if features.rank() != 2 || features.row_len() != d {
            return Err(CoreError::ShapeMismatch {
                op: "pca_project",
                lhs: features.shape().to_vec(),
                rhs: vec![d],
            });
        }
        let k = self.components();
        let b = self.basis.data();
        let mut out = vec![0.0; features.rows() * k];
        for i in 0..features.rows() {
            let row = features.row(i);
            for j in 0..d {
                let c = row[j] - self.mean[j];
                for (o, &bv) in out[i * k..(i + 1) * k].iter_mut().zip(&b[j * k..(j + 1) * k]) {
                    *o += c * bv;
                }
            }
        }
        Tensor::matrix(features.rows(), k, out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnAccuracy {
    pub k: usize,
    pub acc: f64,
}

/// Brute-force Euclidean kNN with majority vote. Distance ties keep the
/// lower training index; vote ties pick the smaller class.
pub fn knn_probe(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    ks: &[usize],
) -> Result<Vec<KnnAccuracy>> {
    if train.rows() != train_labels.len() || test.rows() != test_labels.len() {
        return Err(invalid("knn_probe", "one label per sample required"));
    }
    if test.rows() == 0 {
        return Err(invalid("knn_probe", "empty test set"));
    }
    if train.row_len() != test.row_len() {
        return Err(CoreError::ShapeMismatch {
            op: "knn_probe",
            lhs: train.shape().to_vec(),
            rhs: test.shape().to_vec(),
        });
    }
    let kmax = ks.iter().copied().max().unwrap_or(0);
    if ks.contains(&0) || kmax > train.rows() {
        return Err(invalid("knn_probe", "k must lie in [1, training size]"));
    }
    let classes = train_labels.iter().chain(test_labels).max().map_or(1, |m| m + 1);
    let mut hits = vec![0usize; ks.len()];
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(train.rows());
    for (t, &label) in test_labels.iter().enumerate() {
        let q = test.row(t);
        dist.clear();
        for i in 0..train.rows() {
            let d: f64 = train.row(i).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            dist.push((d, i));
        }
        let nth = kmax - 1;
        dist.select_nth_unstable_by(nth, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let head = &mut dist[..kmax];
        head.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (slot, &k) in ks.iter().enumerate() {
            let mut votes = vec![0usize; classes];
            for &(_, i) in &head[..k] {
                votes[train_labels[i]] += 1;
            }
            let mut best = 0;
            for c in 1..classes {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            if best == label {
                hits[slot] += 1;
            }
        }
    }
    Ok(ks
        .iter()
        .zip(hits)
        .map(|(&k, h)| KnnAccuracy {
            k,
            acc: h as f64 / test.rows() as f64,
        })
        .collect())
}

/// One evaluation point of a run. Second-hypothesis and pair fields are
/// `None` for single-hypothesis runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: u64,
    pub acc_tgt_1: f64,
    pub acc_tgt_2: Option<f64>,
    pub acc_src_1: f64,
    pub acc_src_2: Option<f64>,
    pub agree: Option<f64>,
    pub l_p: Option<f64>,
    pub l_d_1: f64,
    pub l_d_2: Option<f64>,
    pub l_y_1: f64,
    pub l_y_2: Option<f64>,
    pub l_ce_1: f64,
    pub l_ce_2: Option<f64>,
    /// Uncapped squared distance between the hypotheses' source feature means.
    pub d_g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knn: Option<Vec<KnnAccuracy>>,
}
