//! Unbiased squared-hinge SVM solved in the dual.
//!
//! The dual problem is `max_{alpha >= 0} -1/2 alpha' Q alpha + 1' alpha` with
//! `Q = (K o zz') + I/C`. Because of the `I/C` ridge `Q` is positive definite
//! and there is no upper bound on `alpha` and no equality constraint. The
//! general solver is randomized coordinate descent over rows of `Q`; when an
//! explicit feature map of low dimension is at hand, a finite Newton method
//! on the primal solves the same problem.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SparseVector;
use crate::error::{Error, Result};
use crate::kernel::{
    eval_kernel, explicit_features, gram_of, GramMatrix, KernelKind, KernelSpec, DEFAULT_GRAM_CAP,
};

/// Norms below this are treated as a degenerate separator.
pub const DEGENERATE_NORM_SQ: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Largest tolerated projected-gradient entry at convergence.
    pub tol: f64,
    /// Cap on full sweeps; `None` means `10 * n` (at least 100).
    pub max_sweeps: Option<usize>,
    /// Seed of the per-sweep coordinate permutation.
    pub seed: u64,
    /// Byte budget of the kernel row cache.
    pub cache_bytes: usize,
    /// Every this many sweeps without convergence, the current support is
    /// solved exactly (when it has at most `polish_limit` members). 0 turns
    /// this off.
    pub polish_every: usize,
    pub polish_limit: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_sweeps: None,
            seed: 0,
            cache_bytes: 256 << 20,
            polish_every: 30,
            polish_limit: 3000,
        }
    }
}

impl SolverOptions {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    fn sweep_cap(&self, n: usize) -> usize {
        self.max_sweeps.unwrap_or_else(|| (10 * n).max(100))
    }
}

/// Row access to the dual Hessian `Q`, ridge included.
pub trait QRows {
    fn n(&self) -> usize;
    fn diag(&self, i: usize) -> f64;
    fn row(&mut self, i: usize) -> &[f64];
}

/// Fully materialized `Q`.
#[derive(Debug, Clone)]
pub struct DenseQ {
    q: DMatrix<f64>,
}

impl DenseQ {
    pub fn new(q: DMatrix<f64>) -> Self {
        assert_eq!(q.nrows(), q.ncols(), "Q must be square");
        Self { q }
    }

    /// `Q = K o zz' + I/C` for per-instance signs `z`.
    pub fn from_gram(gram: &GramMatrix, signs: &[f64], c: f64) -> Self {
        let n = gram.n();
        assert_eq!(signs.len(), n);
        let q = DMatrix::from_fn(n, n, |i, j| {
            let ridge = if i == j { 1.0 / c } else { 0.0 };
            gram.get(i, j) * signs[i] * signs[j] + ridge
        });
        Self { q }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }
}

impl QRows for DenseQ {
    fn n(&self) -> usize {
        self.q.nrows()
    }

    fn diag(&self, i: usize) -> f64 {
        self.q[(i, i)]
    }

    fn row(&mut self, i: usize) -> &[f64] {
        // Q is symmetric and column-major, so column i is row i.
        let n = self.q.nrows();
        &self.q.as_slice()[i * n..(i + 1) * n]
    }
}

/// Convex combination of sign-modulated copies of one Gram matrix.
///
/// Instances are partitioned into groups (classes) and every labeling assigns
/// one sign per group, so the effective kernel is
/// `Q_ij = K_ij * A[g_i][g_j] + [i = j] / C` with the group affinity
/// `A = sum_k mu_k s_k s_k'`. Singleton groups recover arbitrary
/// per-instance labelings.
#[derive(Debug, Clone)]
pub struct CombinedKernelView<'a> {
    pub gram: &'a GramMatrix,
    pub group_of: &'a [usize],
    pub label_set: &'a [Vec<f64>],
    pub mu: &'a [f64],
    pub c: f64,
}

impl CombinedKernelView<'_> {
    pub fn group_count(&self) -> usize {
        self.label_set.first().map_or(0, |s| s.len())
    }

    pub fn affinity(&self) -> DMatrix<f64> {
        label_affinity(self.label_set, self.mu)
    }

    pub fn effective(&self, i: usize, j: usize) -> f64 {
        let a = self
            .label_set
            .iter()
            .zip(self.mu)
            .map(|(s, &m)| m * s[self.group_of[i]] * s[self.group_of[j]])
            .sum::<f64>();
        let ridge = if i == j { 1.0 / self.c } else { 0.0 };
        self.gram.get(i, j) * a + ridge
    }

    pub fn to_dense(&self) -> DenseQ {
        let a = self.affinity();
        let n = self.gram.n();
        let q = DMatrix::from_fn(n, n, |i, j| {
            let ridge = if i == j { 1.0 / self.c } else { 0.0 };
            self.gram.get(i, j) * a[(self.group_of[i], self.group_of[j])] + ridge
        });
        DenseQ { q }
    }
}

/// `sum_k mu_k s_k s_k'` over equal-length sign vectors.
pub fn label_affinity(label_set: &[Vec<f64>], mu: &[f64]) -> DMatrix<f64> {
    let g = label_set.first().map_or(0, |s| s.len());
    DMatrix::from_fn(g, g, |a, b| {
        label_set
            .iter()
            .zip(mu)
            .map(|(s, &m)| m * s[a] * s[b])
            .sum()
    })
}

/// Kernel rows of `Q` computed on demand and kept under a byte budget with
/// least-recently-used eviction.
pub struct KernelRowCache<'a> {
    vectors: &'a [&'a SparseVector],
    signs: &'a [f64],
    kernel: KernelSpec,
    inv_c: f64,
    diag: Vec<f64>,
    rows: Vec<Option<Box<[f64]>>>,
    last_used: Vec<u64>,
    clock: u64,
    cached: usize,
    capacity: usize,
}

impl<'a> KernelRowCache<'a> {
    pub fn new(
        vectors: &'a [&'a SparseVector],
        signs: &'a [f64],
        kernel: KernelSpec,
        c: f64,
        cache_bytes: usize,
    ) -> Self {
        let n = vectors.len();
        let diag = vectors
            .iter()
            .map(|x| eval_kernel(&kernel, x, x) + 1.0 / c)
            .collect();
        let row_bytes = (n * std::mem::size_of::<f64>()).max(1);
        Self {
            vectors,
            signs,
            kernel,
            inv_c: 1.0 / c,
            diag,
            rows: vec![None; n],
            last_used: vec![0; n],
            clock: 0,
            cached: 0,
            capacity: (cache_bytes / row_bytes).max(2),
        }
    }

    pub fn cached_rows(&self) -> usize {
        self.cached
    }

    fn evict_one(&mut self) {
        let victim = (0..self.rows.len())
            .filter(|&r| self.rows[r].is_some())
            .min_by_key(|&r| self.last_used[r])
            .expect("cache is nonempty when full");
        self.rows[victim] = None;
        self.cached -= 1;
    }
}

impl QRows for KernelRowCache<'_> {
    fn n(&self) -> usize {
        self.vectors.len()
    }

    fn diag(&self, i: usize) -> f64 {
        self.diag[i]
    }

    fn row(&mut self, i: usize) -> &[f64] {
        self.clock += 1;
        self.last_used[i] = self.clock;
        if self.rows[i].is_none() {
            if self.cached >= self.capacity {
                self.evict_one();
            }
            let xi = self.vectors[i];
            let zi = self.signs[i];
            let row: Box<[f64]> = self
                .vectors
                .iter()
                .zip(self.signs)
                .enumerate()
                .map(|(j, (xj, &zj))| {
                    let ridge = if i == j { self.inv_c } else { 0.0 };
                    zi * zj * eval_kernel(&self.kernel, xi, xj) + ridge
                })
                .collect();
            self.rows[i] = Some(row);
            self.cached += 1;
        }
        self.rows[i].as_deref().expect("row just filled")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub alpha: Vec<f64>,
    /// Gradient of the minimization form, `Q alpha - 1`.
    pub grad: Vec<f64>,
    pub converged: bool,
    pub sweeps: usize,
    /// Largest projected-gradient magnitude at exit.
    pub max_violation: f64,
}

impl SolveOutcome {
    /// Dual objective `1' alpha - 1/2 alpha' Q alpha`.
    pub fn objective(&self) -> f64 {
        dual_objective_from_grad(&self.alpha, &self.grad)
    }

    /// `alpha' Q alpha - |alpha|^2 / C`, i.e. `|w|^2` when `Q` carries a
    /// single labeling and ridge `1/C`.
    pub fn w_norm_sq(&self, c: f64) -> f64 {
        let quad: f64 = self
            .alpha
            .iter()
            .zip(&self.grad)
            .map(|(a, g)| a * (g + 1.0))
            .sum();
        let ridge: f64 = self.alpha.iter().map(|a| a * a).sum::<f64>() / c;
        (quad - ridge).max(0.0)
    }
}

fn dual_objective_from_grad(alpha: &[f64], grad: &[f64]) -> f64 {
    alpha
        .iter()
        .zip(grad)
        .map(|(a, g)| 0.5 * a - 0.5 * a * g)
        .sum()
}

/// Dual objective evaluated directly from `Q`, for callers holding a dense
/// matrix.
pub fn dual_objective(q: &DMatrix<f64>, alpha: &[f64]) -> f64 {
    let a = nalgebra::DVector::from_column_slice(alpha);
    a.sum() - 0.5 * (a.transpose() * q * &a)[(0, 0)]
}

fn projected(alpha: f64, grad: f64) -> f64 {
    if alpha > 0.0 {
        grad
    } else {
        grad.min(0.0)
    }
}

/// Moves towards the exact maximizer restricted to the current support,
/// `Q_SS alpha_S = 1`, stopping where the first coordinate reaches zero.
/// The dual objective is concave, so the step never decreases it.
fn polish_support<Q: QRows>(q: &mut Q, alpha: &mut [f64], grad: &mut [f64], limit: usize) {
    let support: Vec<usize> = (0..alpha.len()).filter(|&i| alpha[i] > 0.0).collect();
    let m = support.len();
    if m == 0 || m > limit {
        return;
    }
    let mut block = DMatrix::zeros(m, m);
    for (a, &i) in support.iter().enumerate() {
        let row = q.row(i);
        for (b, &j) in support.iter().enumerate() {
            block[(a, b)] = row[j];
        }
    }
    let Some(chol) = block.cholesky() else {
        return;
    };
    let target = chol.solve(&DVector::from_element(m, 1.0));
    let mut step = 1.0f64;
    for (a, &i) in support.iter().enumerate() {
        if target[a] < 0.0 {
            step = step.min(alpha[i] / (alpha[i] - target[a]));
        }
    }
    if step <= 0.0 {
        return;
    }
    for (a, &i) in support.iter().enumerate() {
        let next = if step < 1.0 && target[a] < 0.0 && alpha[i] / (alpha[i] - target[a]) <= step {
            0.0
        } else {
            (alpha[i] + step * (target[a] - alpha[i])).max(0.0)
        };
        let delta = next - alpha[i];
        if delta != 0.0 {
            alpha[i] = next;
            for (g, qij) in grad.iter_mut().zip(q.row(i)) {
                *g += delta * qij;
            }
        }
    }
}

/// Maximizes the dual by exact coordinate steps in a seeded random order per
/// sweep. `warm` starts from a given nonnegative point.
pub fn solve_dual<Q: QRows>(q: &mut Q, warm: Option<&[f64]>, opts: &SolverOptions) -> SolveOutcome {
    let n = q.n();
    let mut alpha = match warm {
        Some(w) => {
            assert_eq!(w.len(), n, "warm start has the wrong length");
            w.iter().map(|&a| a.max(0.0)).collect()
        }
        None => vec![0.0; n],
    };
    let mut grad = vec![-1.0; n];
    for i in 0..n {
        if alpha[i] != 0.0 {
            let ai = alpha[i];
            for (g, qij) in grad.iter_mut().zip(q.row(i)) {
                *g += ai * qij;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let cap = opts.sweep_cap(n);
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < cap {
        order.shuffle(&mut rng);
        sweeps += 1;
        let mut worst = 0.0f64;
        for &i in &order {
            let pg = projected(alpha[i], grad[i]);
            worst = worst.max(pg.abs());
            if pg == 0.0 {
                continue;
            }
            let next = (alpha[i] - grad[i] / q.diag(i)).max(0.0);
            let delta = next - alpha[i];
            if delta == 0.0 {
                continue;
            }
            alpha[i] = next;
            for (g, qij) in grad.iter_mut().zip(q.row(i)) {
                *g += delta * qij;
            }
        }
        if worst <= opts.tol {
            converged = true;
            break;
        }
        if opts.polish_every > 0 && sweeps % opts.polish_every == 0 {
            polish_support(q, &mut alpha, &mut grad, opts.polish_limit);
        }
    }
    let max_violation = alpha
        .iter()
        .zip(&grad)
        .map(|(&a, &g)| projected(a, g).abs())
        .fold(0.0, f64::max);
    SolveOutcome {
        alpha,
        grad,
        converged,
        sweeps,
        max_violation,
    }
}

/// Dual coordinate descent for the linear kernel, keeping
/// `w = sum_j alpha_j z_j x_j` materialized so each step costs `O(nnz)`.
pub fn solve_linear(
    vectors: &[&SparseVector],
    signs: &[f64],
    c: f64,
    opts: &SolverOptions,
) -> (SolveOutcome, Vec<f64>) {
    let n = vectors.len();
    let dim = vectors.iter().map(|x| x.dim()).max().unwrap_or(0);
    let inv_c = 1.0 / c;
    let diag: Vec<f64> = vectors.iter().map(|x| x.norm_sq() + inv_c).collect();
    let mut w = vec![0.0; dim];
    let mut alpha = vec![0.0; n];
    let grad_at = |w: &[f64], alpha: &[f64], i: usize| {
        signs[i] * vectors[i].dot_dense(w) - 1.0 + alpha[i] * inv_c
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let cap = opts.sweep_cap(n);
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < cap {
        order.shuffle(&mut rng);
        sweeps += 1;
        let mut worst = 0.0f64;
        for &i in &order {
            let g = grad_at(&w, &alpha, i);
            let pg = projected(alpha[i], g);
            worst = worst.max(pg.abs());
            if pg == 0.0 {
                continue;
            }
            let next = (alpha[i] - g / diag[i]).max(0.0);
            let delta = next - alpha[i];
            if delta == 0.0 {
                continue;
            }
            alpha[i] = next;
            let step = delta * signs[i];
            for &(f, v) in vectors[i].entries() {
                w[f as usize - 1] += step * v;
            }
        }
        if worst <= opts.tol {
            converged = true;
            break;
        }
    }
    let grad: Vec<f64> = (0..n).map(|i| grad_at(&w, &alpha, i)).collect();
    let max_violation = alpha
        .iter()
        .zip(&grad)
        .map(|(&a, &g)| projected(a, g).abs())
        .fold(0.0, f64::max);
    (
        SolveOutcome {
            alpha,
            grad,
            converged,
            sweeps,
            max_violation,
        },
        w,
    )
}

/// Default iteration cap of [`solve_primal`]; an explicit `max_sweeps`
/// overrides it.
pub const NEWTON_CAP: usize = 100;

/// Feature dimension up to which linear-kernel training uses
/// [`solve_primal`] (when it is also below the instance count).
pub const PRIMAL_DIM_LIMIT: usize = 512;

/// Finite Newton method on the primal
/// `min_w 1/2 |w|^2 + C/2 sum_i max(0, 1 - f_i . w)^2`, where row `i` of
/// `features` is `z_i phi(x_i)`. Solves the same problem as [`solve_dual`]
/// with `Q = F F' + I/C` and returns the dual point `alpha = C (1 - F w)_+`.
/// Each step costs `O(n D^2)`, so it pays off when the dimension `D` is
/// well below `n`; unlike coordinate descent it is insensitive to large C.
pub fn solve_primal(
    features: &DMatrix<f64>,
    c: f64,
    warm: Option<&[f64]>,
    opts: &SolverOptions,
) -> SolveOutcome {
    let (n, dim) = features.shape();
    let mut w = match warm {
        Some(a) => {
            assert_eq!(a.len(), n, "warm start has the wrong length");
            features.tr_mul(&DVector::from_iterator(n, a.iter().map(|&v| v.max(0.0))))
        }
        None => DVector::zeros(dim),
    };
    let dual_point = |w: &DVector<f64>| -> (Vec<f64>, Vec<f64>) {
        let out = features * w;
        let alpha: Vec<f64> = out.iter().map(|&o| c * (1.0 - o).max(0.0)).collect();
        let w_alpha = features.tr_mul(&DVector::from_column_slice(&alpha));
        let fw = features * w_alpha;
        let grad = (0..n).map(|i| fw[i] + alpha[i] / c - 1.0).collect();
        (alpha, grad)
    };
    let violation = |alpha: &[f64], grad: &[f64]| {
        alpha
            .iter()
            .zip(grad)
            .map(|(&a, &g)| projected(a, g).abs())
            .fold(0.0, f64::max)
    };

    let cap = opts.max_sweeps.unwrap_or(NEWTON_CAP);
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let (alpha, grad) = dual_point(&w);
        let max_violation = violation(&alpha, &grad);
        if max_violation <= opts.tol {
            converged = true;
        }
        if converged || iterations >= cap {
            return SolveOutcome {
                alpha,
                grad,
                converged,
                sweeps: iterations,
                max_violation,
            };
        }
        iterations += 1;

        let out = features * &w;
        let active: Vec<usize> = (0..n).filter(|&i| out[i] < 1.0).collect();
        let fs = features.select_rows(&active);
        let residual = DVector::from_iterator(active.len(), active.iter().map(|&i| 1.0 - out[i]));
        let g = &w - fs.tr_mul(&residual) * c;
        let mut h = fs.tr_mul(&fs) * c;
        for k in 0..dim {
            h[(k, k)] += 1.0;
        }
        let Some(chol) = h.cholesky() else {
            break;
        };
        let d = -chol.solve(&g);
        let e = features * &d;
        let t = primal_line_search(&w, &d, &out, &e, c);
        if t <= 0.0 {
            break;
        }
        w += d * t;
    }
    let (alpha, grad) = dual_point(&w);
    let max_violation = violation(&alpha, &grad);
    SolveOutcome {
        alpha,
        grad,
        converged: max_violation <= opts.tol,
        sweeps: iterations,
        max_violation,
    }
}

/// Minimizes the convex piecewise quadratic `t -> f(w + t d)` by safeguarded
/// 1-D Newton steps on its piecewise linear derivative, starting from the
/// full step.
fn primal_line_search(
    w: &DVector<f64>,
    d: &DVector<f64>,
    out: &DVector<f64>,
    e: &DVector<f64>,
    c: f64,
) -> f64 {
    let wd = w.dot(d);
    let dd = d.dot(d);
    let slope = |t: f64| {
        let mut s = wd + t * dd;
        let mut curv = dd;
        for (o, ei) in out.iter().zip(e.iter()) {
            let r = 1.0 - o - t * ei;
            if r > 0.0 {
                s -= c * r * ei;
                curv += c * ei * ei;
            }
        }
        (s, curv)
    };
    let (s0, _) = slope(0.0);
    if s0 >= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut t = 1.0;
    for _ in 0..50 {
        let (s, curv) = slope(t);
        if s.abs() <= 1e-12 * s0.abs() {
            return t;
        }
        if s < 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let next = t - s / curv;
        t = if next > lo && next < hi {
            next
        } else if hi.is_finite() {
            0.5 * (lo + hi)
        } else {
            2.0 * t
        };
    }
    lo
}

/// Dense rows `z_i x_i` for the linear primal solver, or `None` when the
/// dimension makes it a poor fit.
fn linear_primal_rows(vectors: &[&SparseVector], signs: &[f64]) -> Option<DMatrix<f64>> {
    let dim = vectors.iter().map(|x| x.dim()).max().unwrap_or(0);
    if dim == 0 || dim > PRIMAL_DIM_LIMIT || dim >= vectors.len() {
        return None;
    }
    let mut f = DMatrix::zeros(vectors.len(), dim);
    for (i, (x, &s)) in vectors.iter().zip(signs).enumerate() {
        for &(k, v) in x.entries() {
            f[(i, k as usize - 1)] = s * v;
        }
    }
    Some(f)
}

/// Largest training set for which a stalled Gaussian solve is retried.
const RETRY_LIMIT: usize = 3000;

/// Coordinate descent stalls when `Q` is nearly singular, which for the
/// Gaussian kernel happens at small widths and large C. The primal Newton
/// method on the eigen feature rows of the Gram matrix then finishes the
/// solve from the stalled point. The dropped spectrum is below the rank
/// tolerance, so the problem is unchanged up to that perturbation.
fn low_rank_retry(
    vectors: &[&SparseVector],
    signs: &[f64],
    kernel: &KernelSpec,
    c: f64,
    opts: &SolverOptions,
    stalled: SolveOutcome,
) -> SolveOutcome {
    let n = vectors.len();
    if n > RETRY_LIMIT {
        return stalled;
    }
    let Ok(g) = gram_of(kernel, vectors, DEFAULT_GRAM_CAP) else {
        return stalled;
    };
    let Ok(features) = explicit_features(&g) else {
        return stalled;
    };
    let f = DMatrix::from_fn(n, features.s_eff, |i, k| signs[i] * features.rows[i][k]);
    let retry = solve_primal(&f, c, Some(&stalled.alpha), opts);
    // Judge the result against the full Gram matrix.
    let za = DVector::from_iterator(n, retry.alpha.iter().zip(signs).map(|(a, s)| a * s));
    let ka = &g.values * za;
    let grad: Vec<f64> = (0..n)
        .map(|i| signs[i] * ka[i] + retry.alpha[i] / c - 1.0)
        .collect();
    let max_violation = retry
        .alpha
        .iter()
        .zip(&grad)
        .map(|(&a, &gr)| projected(a, gr).abs())
        .fold(0.0, f64::max);
    if max_violation < stalled.max_violation {
        SolveOutcome {
            alpha: retry.alpha,
            grad,
            converged: max_violation <= opts.tol,
            sweeps: stalled.sweeps + retry.sweeps,
            max_violation,
        }
    } else {
        stalled
    }
}

/// Trained unbiased binary SVM. `alpha` and `z` run over the training
/// subset; `support` holds copies of the instances with `alpha > 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinarySvmModel {
    pub kernel: KernelSpec,
    #[serde(rename = "C")]
    pub c: f64,
    pub alpha: Vec<f64>,
    pub z: Vec<f64>,
    /// Dataset indices of the training subset, aligned with `alpha`.
    pub rows: Vec<usize>,
    /// Positions into `alpha` of the support vectors.
    pub support_refs: Vec<usize>,
    pub support: Vec<SparseVector>,
    pub w_norm_sq: f64,
    pub converged: bool,
    pub sweeps: usize,
    pub max_violation: f64,
    #[serde(skip)]
    linear_w: OnceLock<Vec<f64>>,
}

impl BinarySvmModel {
    fn from_outcome(
        outcome: SolveOutcome,
        vectors: &[&SparseVector],
        rows: &[usize],
        signs: &[f64],
        kernel: KernelSpec,
        c: f64,
    ) -> Self {
        let w_norm_sq = outcome.w_norm_sq(c);
        let support_refs: Vec<usize> = (0..vectors.len())
            .filter(|&j| outcome.alpha[j] > 0.0)
            .collect();
        let support = support_refs.iter().map(|&j| vectors[j].clone()).collect();
        Self {
            kernel,
            c,
            alpha: outcome.alpha,
            z: signs.to_vec(),
            rows: rows.to_vec(),
            support_refs,
            support,
            w_norm_sq,
            converged: outcome.converged,
            sweeps: outcome.sweeps,
            max_violation: outcome.max_violation,
            linear_w: OnceLock::new(),
        }
    }

    pub fn support_len(&self) -> usize {
        self.support.len()
    }

    fn weights(&self) -> &[f64] {
        self.linear_w.get_or_init(|| {
            let dim = self.support.iter().map(|x| x.dim()).max().unwrap_or(0);
            let mut w = vec![0.0; dim];
            for (x, &j) in self.support.iter().zip(&self.support_refs) {
                let s = self.alpha[j] * self.z[j];
                for &(f, v) in x.entries() {
                    w[f as usize - 1] += s * v;
                }
            }
            w
        })
    }

    /// `|w|^2 = alpha' (K o zz') alpha` recomputed from the stored supports.
    pub fn w_norm_sq_exact(&self) -> f64 {
        let mut acc = 0.0;
        for (xs, &s) in self.support.iter().zip(&self.support_refs) {
            for (xt, &t) in self.support.iter().zip(&self.support_refs) {
                acc += self.alpha[s]
                    * self.alpha[t]
                    * self.z[s]
                    * self.z[t]
                    * eval_kernel(&self.kernel, xs, xt);
            }
        }
        acc
    }
}

/// Trains on `vectors` with signs `z` (+1 / -1). `rows` records where the
/// vectors live in the owning dataset.
pub fn train_binary(
    vectors: &[&SparseVector],
    rows: &[usize],
    signs: &[f64],
    kernel: &KernelSpec,
    c: f64,
    opts: &SolverOptions,
) -> Result<BinarySvmModel> {
    if vectors.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if vectors.len() != signs.len() || vectors.len() != rows.len() {
        return Err(Error::InvalidParameter(
            "vectors, rows and signs must have equal length".into(),
        ));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidParameter(format!("C must be positive, got {c}")));
    }
    kernel.validate()?;
    let outcome = match kernel.kind {
        KernelKind::Linear => match linear_primal_rows(vectors, signs) {
            Some(f) => solve_primal(&f, c, None, opts),
            None => solve_linear(vectors, signs, c, opts).0,
        },
        KernelKind::Gaussian => {
            let mut cache = KernelRowCache::new(vectors, signs, *kernel, c, opts.cache_bytes);
            let outcome = solve_dual(&mut cache, None, opts);
            if outcome.converged {
                outcome
            } else {
                low_rank_retry(vectors, signs, kernel, c, opts, outcome)
            }
        }
    };
    Ok(BinarySvmModel::from_outcome(
        outcome, vectors, rows, signs, *kernel, c,
    ))
}

/// `sum_j alpha_j z_j k(x_j, x)`; no bias term.
pub fn decision_value(m: &BinarySvmModel, x: &SparseVector) -> f64 {
    match m.kernel.kind {
        KernelKind::Linear => x.dot_dense(m.weights()),
        KernelKind::Gaussian => m
            .support
            .iter()
            .zip(&m.support_refs)
            .map(|(xs, &j)| m.alpha[j] * m.z[j] * eval_kernel(&m.kernel, xs, x))
            .sum(),
    }
}

/// Separating margin score `2 / |w|^2`; infinite for a degenerate separator.
pub fn margin_from_norm(w_norm_sq: f64) -> f64 {
    if w_norm_sq < DEGENERATE_NORM_SQ {
        f64::INFINITY
    } else {
        2.0 / w_norm_sq
    }
}

pub fn margin_objective(m: &BinarySvmModel) -> f64 {
    margin_from_norm(m.w_norm_sq)
}

/// Largest KKT residual of a model on its own training vectors:
/// `|z f(x) - 1 + alpha / C|` where `alpha > tol`, otherwise the shortfall
/// `max(0, 1 - z f(x))`.
pub fn kkt_residual(m: &BinarySvmModel, train: &[&SparseVector], tol: f64) -> f64 {
    train
        .iter()
        .enumerate()
        .map(|(j, x)| {
            let margin = m.z[j] * decision_value(m, x);
            if m.alpha[j] > tol {
                (margin - 1.0 + m.alpha[j] / m.c).abs()
            } else {
                (1.0 - margin).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::gram_of;
    use rand::{Rng, SeedableRng};

    fn sv(values: &[f64]) -> SparseVector {
        SparseVector::from_dense(values)
    }

    fn tight() -> SolverOptions {
        SolverOptions::default().with_tol(1e-12)
    }

    #[test]
    fn primal_newton_matches_coordinate_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..30 {
            let n = rng.gen_range(8..40);
            let dim = rng.gen_range(1..5);
            let c = [0.01, 1.0, 100.0, 1e4][trial % 4];
            let f = DMatrix::from_fn(n, dim, |_, _| rng.gen_range(-1.0..1.0));
            let q = &f * f.transpose() + DMatrix::identity(n, n) / c;
            let opts = SolverOptions {
                max_sweeps: Some(200_000),
                ..tight()
            };
            let dual = solve_dual(&mut DenseQ::new(q.clone()), None, &opts);
            // Residuals carry roundoff of order C * eps, so 1e-12 is out of
            // reach at the largest C.
            let newton = SolverOptions::default().with_tol(1e-9);
            let primal = solve_primal(&f, c, None, &newton);
            assert!(primal.converged, "trial {trial}: {:e}", primal.max_violation);
            let (a, b) = (dual_objective(&q, &dual.alpha), dual_objective(&q, &primal.alpha));
            assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0), "trial {trial}: {a} vs {b}");
            assert!((primal.objective() - b).abs() <= 1e-8 * b.abs().max(1.0));
            let warm = solve_primal(&f, c, Some(&dual.alpha), &newton);
            assert!(warm.sweeps <= primal.sweeps.max(2));
        }
    }

    #[test]
    fn single_instance() {
        let x = [sv(&[1.0])];
        let refs: Vec<&SparseVector> = x.iter().collect();
        for kernel in [KernelSpec::linear(), KernelSpec::gaussian(1.0).unwrap()] {
            let m = train_binary(&refs, &[0], &[1.0], &kernel, 1.0, &tight()).unwrap();
            assert!((m.alpha[0] - 0.5).abs() < 1e-12);
            let f = decision_value(&m, &x[0]);
            assert!((f - 0.5).abs() < 1e-12);
            let xi = m.alpha[0] / m.c;
            assert!((f - (1.0 - xi)).abs() < 1e-12);
            assert!((m.w_norm_sq - 0.25).abs() < 1e-12);
            assert!((margin_objective(&m) - 8.0).abs() < 1e-10);
        }
    }

    #[test]
    fn symmetric_pair() {
        let x = [sv(&[1.0]), sv(&[-1.0])];
        let refs: Vec<&SparseVector> = x.iter().collect();
        let m = train_binary(&refs, &[0, 1], &[1.0, -1.0], &KernelSpec::linear(), 1.0, &tight())
            .unwrap();
        assert!((m.alpha[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.alpha[1] - 1.0 / 3.0).abs() < 1e-12);
        let w = decision_value(&m, &sv(&[1.0]));
        assert!((w - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_support_gives_zero() {
        let x = [sv(&[1.0])];
        let refs: Vec<&SparseVector> = x.iter().collect();
        let mut m =
            train_binary(&refs, &[0], &[1.0], &KernelSpec::gaussian(1.0).unwrap(), 1.0, &tight())
                .unwrap();
        m.alpha[0] = 0.0;
        m.support.clear();
        m.support_refs.clear();
        assert_eq!(decision_value(&m, &sv(&[3.0])), 0.0);
    }

    #[test]
    fn degenerate_norm_is_infinite_margin() {
        assert_eq!(margin_from_norm(0.0), f64::INFINITY);
        assert_eq!(margin_from_norm(1e-13), f64::INFINITY);
        assert_eq!(margin_from_norm(0.5), 4.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = [sv(&[1.0])];
        let refs: Vec<&SparseVector> = x.iter().collect();
        let k = KernelSpec::linear();
        assert!(train_binary(&refs, &[0], &[1.0], &k, 0.0, &tight()).is_err());
        assert!(train_binary(&refs, &[0, 1], &[1.0], &k, 1.0, &tight()).is_err());
        assert!(train_binary(&[], &[], &[], &k, 1.0, &tight()).is_err());
    }

    #[test]
    fn iteration_cap_flags_nonconvergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<SparseVector> = (0..40)
            .map(|_| sv(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]))
            .collect();
        let refs: Vec<&SparseVector> = x.iter().collect();
        let signs: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let opts = SolverOptions {
            max_sweeps: Some(1),
            tol: 1e-14,
            ..SolverOptions::default()
        };
        let rows: Vec<usize> = (0..40).collect();
        let m = train_binary(&refs, &rows, &signs, &KernelSpec::linear(), 1000.0, &opts).unwrap();
        assert!(!m.converged);
        assert_eq!(m.sweeps, 1);
        assert!(m.alpha.iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn row_cache_evicts_under_budget() {
        let x: Vec<SparseVector> = (0..10).map(|i| sv(&[i as f64 * 0.1])).collect();
        let refs: Vec<&SparseVector> = x.iter().collect();
        let signs = vec![1.0; 10];
        let bytes = 3 * 10 * std::mem::size_of::<f64>();
        let k = KernelSpec::gaussian(1.0).unwrap();
        let mut cache = KernelRowCache::new(&refs, &signs, k, 1.0, bytes);
        for i in 0..10 {
            let r = cache.row(i).to_vec();
            assert!((r[i] - 2.0).abs() < 1e-15);
            assert!(cache.cached_rows() <= 3);
        }
        let mut dense = DenseQ::from_gram(
            &gram_of(&k, &refs, 100).unwrap(),
            &signs,
            1.0,
        );
        let opts = SolverOptions::default().with_tol(1e-10);
        let a = solve_dual(&mut cache, None, &opts);
        let b = solve_dual(&mut dense, None, &opts);
        for (u, v) in a.alpha.iter().zip(&b.alpha) {
            assert!((u - v).abs() < 1e-8);
        }
    }

    #[test]
    fn linear_and_kernel_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<SparseVector> = (0..30)
            .map(|_| sv(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]))
            .collect();
        let refs: Vec<&SparseVector> = x.iter().collect();
        let signs: Vec<f64> = x.iter().map(|v| if v.get(1) > 0.0 { 1.0 } else { -1.0 }).collect();
        let opts = SolverOptions::default().with_tol(1e-11);
        let (lin, _) = solve_linear(&refs, &signs, 10.0, &opts);
        let mut q = DenseQ::from_gram(&gram_of(&KernelSpec::linear(), &refs, 100).unwrap(), &signs, 10.0);
        let ker = solve_dual(&mut q, None, &opts);
        assert!((lin.objective() - ker.objective()).abs() < 1e-9);
        assert!((lin.objective() - dual_objective(q.matrix(), &lin.alpha)).abs() < 1e-9);
    }

    #[test]
    fn explicit_weights_match_decision_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let x: Vec<SparseVector> = (0..15)
                .map(|_| sv(&[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]))
                .collect();
            let refs: Vec<&SparseVector> = x.iter().collect();
            let signs: Vec<f64> = (0..15).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
            let rows: Vec<usize> = (0..15).collect();
            let m = train_binary(&refs, &rows, &signs, &KernelSpec::linear(), 2.0, &tight()).unwrap();
            let mut w = [0.0; 2];
            for j in 0..15 {
                w[0] += m.alpha[j] * signs[j] * x[j].get(1);
                w[1] += m.alpha[j] * signs[j] * x[j].get(2);
            }
            let probe = sv(&[0.3, -1.7]);
            let explicit = w[0] * 0.3 - w[1] * 1.7;
            assert!((decision_value(&m, &probe) - explicit).abs() < 1e-12);
            let norm = w[0] * w[0] + w[1] * w[1];
            assert!((m.w_norm_sq - norm).abs() < 1e-9 * norm.max(1.0));
            assert!((m.w_norm_sq_exact() - norm).abs() < 1e-9 * norm.max(1.0));
        }
    }

    #[test]
    fn model_json_roundtrip_preserves_decisions() {
        let x: Vec<SparseVector> = (0..8).map(|i| sv(&[i as f64 - 3.5, (i * i) as f64 * 0.1])).collect();
        let refs: Vec<&SparseVector> = x.iter().collect();
        let signs: Vec<f64> = (0..8).map(|i| if i < 4 { 1.0 } else { -1.0 }).collect();
        let rows: Vec<usize> = (0..8).collect();
        for kernel in [KernelSpec::linear(), KernelSpec::gaussian(0.4).unwrap()] {
            let m = train_binary(&refs, &rows, &signs, &kernel, 3.0, &tight()).unwrap();
            let back: BinarySvmModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
            for probe in &x {
                assert!((decision_value(&m, probe) - decision_value(&back, probe)).abs() <= 1e-12);
            }
        }
    }
}
