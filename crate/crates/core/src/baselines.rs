//! One-versus-one and one-versus-rest multi-class schemes built from the
//! same unbiased binary SVM.

use serde::{Deserialize, Serialize};

use crate::data::{SparseDataset, SparseVector};
use crate::error::Result;
use crate::kernel::KernelSpec;
use crate::par;
use crate::svm::{decision_value, train_binary, BinarySvmModel, SolverOptions};

/// One classifier per class pair `(i, j)`, `i < j`, class `i` positive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OneVsOneModel {
    pub class_count: usize,
    pub pairs: Vec<(usize, usize)>,
    pub classifiers: Vec<BinarySvmModel>,
}

/// Classifier `k - 1` separates class `k` (positive) from the rest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OneVsRestModel {
    pub class_count: usize,
    pub classifiers: Vec<BinarySvmModel>,
}

fn train_on(
    d: &SparseDataset,
    rows: &[usize],
    positive: impl Fn(usize) -> bool,
    kernel: &KernelSpec,
    c: f64,
    solver: &SolverOptions,
) -> Result<BinarySvmModel> {
    let vectors: Vec<&SparseVector> = rows.iter().map(|&i| d.instance(i)).collect();
    let signs: Vec<f64> = rows
        .iter()
        .map(|&i| if positive(d.label(i)) { 1.0 } else { -1.0 })
        .collect();
    train_binary(&vectors, rows, &signs, kernel, c, solver)
}

pub fn train_one_vs_one(
    d: &SparseDataset,
    kernel: &KernelSpec,
    c: f64,
    solver: &SolverOptions,
) -> Result<OneVsOneModel> {
    d.require_all_classes()?;
    let k = d.class_count();
    let pairs: Vec<(usize, usize)> = (1..=k)
        .flat_map(|i| ((i + 1)..=k).map(move |j| (i, j)))
        .collect();
    let classifiers = par::map_slice(&pairs, |&(i, j)| {
        let rows = d.indices_of_classes(&[i, j]);
        train_on(d, &rows, |y| y == i, kernel, c, solver)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(OneVsOneModel {
        class_count: k,
        pairs,
        classifiers,
    })
}

pub fn train_one_vs_rest(
    d: &SparseDataset,
    kernel: &KernelSpec,
    c: f64,
    solver: &SolverOptions,
) -> Result<OneVsRestModel> {
    d.require_all_classes()?;
    let k = d.class_count();
    let rows: Vec<usize> = (0..d.len()).collect();
    let classifiers = par::map_range(k, |m| train_on(d, &rows, |y| y == m + 1, kernel, c, solver))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(OneVsRestModel {
        class_count: k,
        classifiers,
    })
}

/// Majority vote over pairwise decisions. Ties go to the larger sum of
/// winning decision magnitudes, then to the smaller class.
pub fn vote_one_vs_one(class_count: usize, pairs: &[(usize, usize)], decisions: &[f64]) -> usize {
    let mut votes = vec![0usize; class_count + 1];
    let mut strength = vec![0.0f64; class_count + 1];
    for (&(i, j), &f) in pairs.iter().zip(decisions) {
        let winner = if f >= 0.0 { i } else { j };
        votes[winner] += 1;
        strength[winner] += f.abs();
    }
    (1..=class_count)
        .max_by(|&a, &b| {
            votes[a]
                .cmp(&votes[b])
                .then(strength[a].total_cmp(&strength[b]))
                .then(b.cmp(&a))
        })
        .expect("at least one class")
}

/// Largest decision value; ties go to the smaller class.
pub fn argmax_one_vs_rest(decisions: &[f64]) -> usize {
    let mut best = 0;
    for (k, &f) in decisions.iter().enumerate() {
        if f > decisions[best] {
            best = k;
        }
    }
    best + 1
}

impl OneVsOneModel {
    /// Predicted class and the number of classifiers evaluated.
    pub fn predict(&self, x: &SparseVector) -> (usize, usize) {
        let decisions: Vec<f64> = self.classifiers.iter().map(|m| decision_value(m, x)).collect();
        (
            vote_one_vs_one(self.class_count, &self.pairs, &decisions),
            decisions.len(),
        )
    }
}

impl OneVsRestModel {
    pub fn predict(&self, x: &SparseVector) -> (usize, usize) {
        let decisions: Vec<f64> = self.classifiers.iter().map(|m| decision_value(m, x)).collect();
        (argmax_one_vs_rest(&decisions), decisions.len())
    }
}
