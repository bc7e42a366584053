//! Kernel evaluation, Gram assembly and explicit feature maps recovered from
//! a Gram matrix by symmetric eigendecomposition.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{SparseDataset, SparseVector};
use crate::error::{Error, Result};
use crate::par;

/// Largest Gram matrix (rows) assembled unless the caller raises the cap.
pub const DEFAULT_GRAM_CAP: usize = 20_000;

/// Eigenvalues at or below this fraction of the largest one are dropped.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Negative eigenvalues beyond this fraction of the trace reject the matrix.
pub const PSD_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Gaussian,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "gaussian" | "rbf" => Ok(Self::Gaussian),
            other => Err(Error::InvalidParameter(format!("unknown kernel `{other}`"))),
        }
    }
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Gaussian => "gaussian",
        })
    }
}

/// `linear`: `<a, b>`; `gaussian`: `exp(-eta * |a - b|^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Gaussian width; ignored by the linear kernel.
    pub eta: f64,
}

impl KernelSpec {
    pub fn linear() -> Self {
        Self {
            kind: KernelKind::Linear,
            eta: 0.0,
        }
    }

    pub fn gaussian(eta: f64) -> Result<Self> {
        let spec = Self {
            kind: KernelKind::Gaussian,
            eta,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == KernelKind::Gaussian && !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gaussian kernel needs eta > 0, got {}",
                self.eta
            )));
        }
        Ok(())
    }

    pub fn eval(&self, a: &SparseVector, b: &SparseVector) -> f64 {
        eval_kernel(self, a, b)
    }
}

pub fn eval_kernel(spec: &KernelSpec, a: &SparseVector, b: &SparseVector) -> f64 {
    match spec.kind {
        KernelKind::Linear => a.dot(b),
        KernelKind::Gaussian => (-spec.eta * a.squared_distance(b)).exp(),
    }
}

/// Symmetric kernel matrix over a row subset.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub values: DMatrix<f64>,
    pub spec: KernelSpec,
}

impl GramMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.values.trace()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

pub fn gram(spec: &KernelSpec, d: &SparseDataset, rows: &[usize]) -> Result<GramMatrix> {
    let vectors: Vec<&SparseVector> = rows.iter().map(|&i| d.instance(i)).collect();
    gram_of(spec, &vectors, DEFAULT_GRAM_CAP)
}

/// Gram matrix of `vectors`. Each upper-triangle entry is computed
/// independently and mirrored, so the result does not depend on the thread
/// count.
pub fn gram_of(spec: &KernelSpec, vectors: &[&SparseVector], cap: usize) -> Result<GramMatrix> {
    let n = vectors.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if n > cap {
        return Err(Error::GramTooLarge { n, cap });
    }
    let upper: Vec<Vec<f64>> = par::map_range(n, |i| {
        (i..n)
            .map(|j| eval_kernel(spec, vectors[i], vectors[j]))
            .collect()
    });
    let mut values = DMatrix::zeros(n, n);
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            values[(i, i + off)] = v;
            values[(i + off, i)] = v;
        }
    }
    Ok(GramMatrix {
        values,
        spec: *spec,
    })
}

/// Rows `x_i` with `<x_i, x_j> = K_ij` up to the dropped spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitFeatures {
    pub rows: Vec<Vec<f64>>,
    pub s_eff: usize,
}

impl ExplicitFeatures {
    pub fn to_sparse(&self) -> Vec<SparseVector> {
        self.rows.iter().map(|r| SparseVector::from_dense(r)).collect()
    }

    pub fn reconstruction_error(&self, g: &GramMatrix) -> f64 {
        let n = self.rows.len();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = self.rows[i].iter().zip(&self.rows[j]).map(|(a, b)| a * b).sum();
                worst = worst.max((dot - g.get(i, j)).abs());
            }
        }
        worst
    }
}

/// Factorizes `K = U diag(lambda) U'` and returns `U * diag(lambda)^{1/2}`
/// restricted to the numerically nonzero spectrum, largest eigenvalue first.
pub fn explicit_features(g: &GramMatrix) -> Result<ExplicitFeatures> {
    let n = g.n();
    let trace = g.trace();
    let eig = SymmetricEigen::new(g.values.clone());
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig < -PSD_TOLERANCE * trace.abs() {
        return Err(Error::NotPsd {
            min_eigenvalue: min_eig,
            trace,
        });
    }
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let mut order: Vec<usize> = (0..n)
        .filter(|&m| eig.eigenvalues[m] > RANK_TOLERANCE * max_eig)
        .collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
            .then(a.cmp(&b))
    });
    let scales: Vec<f64> = order.iter().map(|&m| eig.eigenvalues[m].sqrt()).collect();
    let rows = (0..n)
        .map(|i| {
            order
                .iter()
                .zip(&scales)
                .map(|(&m, &s)| eig.eigenvectors[(i, m)] * s)
                .collect()
        })
        .collect();
    Ok(ExplicitFeatures {
        rows,
        s_eff: order.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_libsvm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sv(entries: &[(u32, f64)], dim: usize) -> SparseVector {
        SparseVector::new(entries.to_vec(), dim).unwrap()
    }

    #[test]
    fn kernel_examples() {
        let a = sv(&[(1, 2.0)], 2);
        let b = sv(&[(1, 3.0), (2, 5.0)], 2);
        assert_eq!(eval_kernel(&KernelSpec::linear(), &a, &b), 6.0);
        let g = KernelSpec::gaussian(0.7).unwrap();
        assert_eq!(eval_kernel(&g, &b, &b), 1.0);
        let flat = KernelSpec {
            kind: KernelKind::Gaussian,
            eta: 0.0,
        };
        assert_eq!(eval_kernel(&flat, &a, &b), 1.0);
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::gaussian(-1.0).is_err());
    }

    #[test]
    fn gram_examples() {
        let d = parse_libsvm("1 1:1\n2 2:1\n1 3:1").unwrap();
        let g = gram(&KernelSpec::linear(), &d, &[0, 1, 2]).unwrap();
        assert_eq!(g.values, DMatrix::identity(3, 3));
        let g1 = gram(&KernelSpec::gaussian(2.0).unwrap(), &d, &[1]).unwrap();
        assert_eq!(g1.n(), 1);
        assert_eq!(g1.get(0, 0), 1.0);
        let v: Vec<&SparseVector> = d.instances().iter().collect();
        assert!(matches!(
            gram_of(&KernelSpec::linear(), &v, 2),
            Err(Error::GramTooLarge { n: 3, cap: 2 })
        ));
    }

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> SparseDataset {
        let text: String = (0..n)
            .map(|i| {
                let mut s = format!("{}", i % 3 + 1);
                for f in 1..=dim {
                    if rng.gen_bool(0.7) {
                        s.push_str(&format!(" {f}:{}", rng.gen_range(-2.0..2.0)));
                    }
                }
                s.push('\n');
                s
            })
            .collect();
        parse_libsvm(&text).unwrap()
    }

    #[test]
    fn gram_matches_pointwise_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = random_dataset(&mut rng, 15, 5);
        let rows = [3, 0, 7, 7, 14, 2];
        for spec in [KernelSpec::linear(), KernelSpec::gaussian(0.3).unwrap()] {
            let g = gram(&spec, &d, &rows).unwrap();
            for (a, &i) in rows.iter().enumerate() {
                for (b, &j) in rows.iter().enumerate() {
                    assert_eq!(g.get(a, b), eval_kernel(&spec, d.instance(i), d.instance(j)));
                    assert_eq!(g.get(a, b), g.get(b, a));
                }
            }
        }
    }

    #[test]
    fn linear_gram_equals_xxt() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_dataset(&mut rng, 12, 4);
        let rows: Vec<usize> = (0..12).collect();
        let g = gram(&KernelSpec::linear(), &d, &rows).unwrap();
        let x = DMatrix::from_fn(12, 4, |i, f| d.instance(i).get(f as u32 + 1));
        let xxt = &x * x.transpose();
        assert!((g.values - xxt).amax() <= 1e-10);
    }

    #[test]
    fn identity_and_rank_one_factorizations() {
        let spec = KernelSpec::linear();
        let id = GramMatrix {
            values: DMatrix::identity(3, 3),
            spec,
        };
        let f = explicit_features(&id).unwrap();
        assert_eq!(f.s_eff, 3);
        assert!(f.reconstruction_error(&id) < 1e-12);

        let ones = GramMatrix {
            values: DMatrix::from_element(2, 2, 1.0),
            spec,
        };
        let f = explicit_features(&ones).unwrap();
        assert_eq!(f.s_eff, 1);
        let r0 = f.rows[0][0];
        assert!((r0.abs() - 1.0).abs() < 1e-12);
        assert!((f.rows[1][0] - r0).abs() < 1e-12);
    }

    #[test]
    fn random_psd_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..20 {
            let b = DMatrix::from_fn(10, 6, |_, _| rng.gen_range(-1.0..1.0));
            let values = &b * b.transpose();
            let g = GramMatrix {
                values,
                spec: KernelSpec::linear(),
            };
            let f = explicit_features(&g).unwrap();
            assert!(f.s_eff <= 6);
            assert!(f.reconstruction_error(&g) < 1e-8 * g.max_abs().max(1.0));
        }
    }

    #[test]
    fn gaussian_features_reproduce_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = random_dataset(&mut rng, 30, 3);
        let rows: Vec<usize> = (0..30).collect();
        let g = gram(&KernelSpec::gaussian(0.5).unwrap(), &d, &rows).unwrap();
        let f = explicit_features(&g).unwrap();
        assert!(f.reconstruction_error(&g) <= 1e-8 * g.max_abs());
    }

    #[test]
    fn indefinite_matrix_rejected() {
        let values = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0]);
        let g = GramMatrix {
            values,
            spec: KernelSpec::linear(),
        };
        assert!(matches!(explicit_features(&g), Err(Error::NotPsd { .. })));
    }
}
