//! Maximum-separating-margin split of one tree node.
//!
//! The exact problem picks, among all `2^(c-1) - 1` bipartitions of the
//! node's `c` classes, the one whose unbiased SVM separator has the largest
//! margin `2 / |w|^2` ([`msm0_brute_force`]). The relaxed problem gives every
//! instance a sign `z_j` that is shared within a class and balanced by
//! `|sum_j z_j| <= beta`, swaps the min over labelings with the max over the
//! dual, and turns the labelings into base kernels `K o z z'` mixed by simplex
//! weights `mu`:
//!
//! ```text
//! max_{alpha >= 0} min_{mu in simplex}
//!     -1/2 alpha' (sum_k mu_k K o z_k z_k' + I/C) alpha + 1' alpha
//! ```
//!
//! [`split_node`] grows the labeling set by cutting planes
//! ([`most_violated_label`]), solves each restricted problem with
//! reduced-gradient MKL ([`simple_mkl`]) and finally cuts a maximum spanning
//! tree of the weighted label affinity matrix ([`extract_partition`]).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{SparseDataset, SparseVector};
use crate::error::{Error, Result};
use crate::kernel::{explicit_features, gram, GramMatrix, KernelKind, KernelSpec};
use crate::par;
use crate::svm::{
    label_affinity, margin_from_norm, solve_dual, solve_primal, CombinedKernelView, DenseQ,
    SolveOutcome, SolverOptions,
};

/// Exhaustive enumeration is refused above this many classes.
pub const BRUTE_FORCE_CLASS_LIMIT: usize = 15;

/// Exact minimum-imbalance search is used up to this many classes.
const EXACT_BALANCE_LIMIT: usize = 20;

/// Cap on cutting-plane iterations regardless of the class count.
pub const DEFAULT_MAX_CUTS: usize = 50;

/// Per-class signs of one candidate labeling, stored with the first class
/// on the `+1` side (a labeling and its global flip induce the same kernel).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompressedLabel {
    signs: Vec<i8>,
}

impl CompressedLabel {
    pub fn new(signs: &[i8]) -> Result<Self> {
        if signs.len() < 2 {
            return Err(Error::InvalidParameter(
                "a labeling needs at least two classes".into(),
            ));
        }
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::InvalidParameter("signs must be +1 or -1".into()));
        }
        if signs.iter().all(|&s| s == signs[0]) {
            return Err(Error::InvalidParameter(
                "all classes on one side is the trivial labeling".into(),
            ));
        }
        let flip = signs[0];
        Ok(Self {
            signs: signs.iter().map(|&s| s * flip).collect(),
        })
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.signs.iter().map(|&s| f64::from(s)).collect()
    }

    /// `sum_k n_k s_k`.
    pub fn imbalance(&self, class_sizes: &[usize]) -> f64 {
        self.signs
            .iter()
            .zip(class_sizes)
            .map(|(&s, &n)| f64::from(s) * n as f64)
            .sum()
    }

    /// Positions of the `+1` and `-1` classes.
    pub fn groups(&self) -> (Vec<usize>, Vec<usize>) {
        let pos = (0..self.len()).filter(|&k| self.signs[k] > 0).collect();
        let neg = (0..self.len()).filter(|&k| self.signs[k] < 0).collect();
        (pos, neg)
    }
}

/// Smallest `|sum_k n_k s_k|` over nontrivial sign vectors, with a
/// labeling attaining it. Exact up to [`EXACT_BALANCE_LIMIT`] classes,
/// largest-differencing above.
pub fn min_imbalance(class_sizes: &[usize]) -> (f64, CompressedLabel) {
    let c = class_sizes.len();
    assert!(c >= 2, "need two classes");
    if c <= EXACT_BALANCE_LIMIT {
        let mut best = (f64::INFINITY, 0u32);
        let full = (1u32 << (c - 1)) - 1;
        for mask in 1..=full {
            let mut s = class_sizes[0] as i64;
            for k in 1..c {
                let n = class_sizes[k] as i64;
                s += if mask >> (k - 1) & 1 == 1 { -n } else { n };
            }
            let v = s.unsigned_abs() as f64;
            if v < best.0 {
                best = (v, mask);
            }
        }
        let mut signs = vec![1i8; c];
        for k in 1..c {
            if best.1 >> (k - 1) & 1 == 1 {
                signs[k] = -1;
            }
        }
        let label = CompressedLabel::new(&signs).expect("nonzero mask is nontrivial");
        (best.0, label)
    } else {
        // Karmarkar-Karp differencing, tracking which side every class is on.
        let mut heap: Vec<(i64, Vec<usize>, Vec<usize>)> = class_sizes
            .iter()
            .enumerate()
            .map(|(k, &n)| (n as i64, vec![k], Vec::new()))
            .collect();
        while heap.len() > 1 {
            heap.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let (va, pa, na) = heap.remove(0);
            let (vb, pb, nb) = heap.remove(0);
            let mut plus = pa;
            plus.extend(nb);
            let mut minus = na;
            minus.extend(pb);
            heap.push((va - vb, plus, minus));
        }
        let (v, plus, _) = heap.pop().expect("one item left");
        let mut signs = vec![-1i8; c];
        for k in plus {
            signs[k] = 1;
        }
        let label = CompressedLabel::new(&signs).expect("differencing splits the classes");
        (v as f64, label)
    }
}

/// One node's split problem: its classes, instances, Gram matrix and the
/// feature rows used by the most-violated search.
#[derive(Debug, Clone)]
pub struct NodeProblem {
    /// Global class indices, increasing.
    pub classes: Vec<usize>,
    /// Dataset rows of the node's instances.
    pub rows: Vec<usize>,
    /// Position in `classes` of every instance.
    pub local_class: Vec<usize>,
    pub class_sizes: Vec<usize>,
    pub gram: GramMatrix,
    /// Explicit feature rows: raw features for the linear kernel, the
    /// eigen-factorization of the Gram matrix otherwise. Empty when the
    /// problem was built for the exhaustive oracle only.
    pub features: Vec<SparseVector>,
    pub kernel: KernelSpec,
    pub c: f64,
    pub beta: f64,
    /// A feasible labeling of minimal imbalance.
    pub balanced_label: CompressedLabel,
}

impl NodeProblem {
    /// Builds the problem for `classes` of `d`. `beta = None` selects
    /// `ceil(|I| / 3)` raised to the smallest feasible value; an explicit
    /// infeasible `beta` is an error.
    pub fn new(
        d: &SparseDataset,
        classes: &[usize],
        kernel: &KernelSpec,
        c: f64,
        beta: Option<f64>,
    ) -> Result<Self> {
        Self::build(d, classes, kernel, c, beta, true)
    }

    /// Like [`NodeProblem::new`] but without the feature rows, which only
    /// the relaxed split needs.
    pub fn gram_only(
        d: &SparseDataset,
        classes: &[usize],
        kernel: &KernelSpec,
        c: f64,
    ) -> Result<Self> {
        Self::build(d, classes, kernel, c, None, false)
    }

    fn build(
        d: &SparseDataset,
        classes: &[usize],
        kernel: &KernelSpec,
        c: f64,
        beta: Option<f64>,
        with_features: bool,
    ) -> Result<Self> {
        let mut classes = classes.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::LeafReached);
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidParameter(format!("C must be positive, got {c}")));
        }
        kernel.validate()?;
        let rows = d.indices_of_classes(&classes);
        let local_class: Vec<usize> = rows
            .iter()
            .map(|&i| classes.binary_search(&d.label(i)).expect("row belongs to node"))
            .collect();
        let mut class_sizes = vec![0; classes.len()];
        for &k in &local_class {
            class_sizes[k] += 1;
        }
        if let Some(k) = class_sizes.iter().position(|&n| n == 0) {
            return Err(Error::InvalidParameter(format!(
                "class {} has no instance at this node",
                classes[k]
            )));
        }

        let (min_beta, balanced_label) = min_imbalance(&class_sizes);
        let beta = match beta {
            Some(b) if b < min_beta => {
                return Err(Error::InfeasibleBeta {
                    beta: b,
                    min_imbalance: min_beta,
                })
            }
            Some(b) => b,
            None => ((rows.len() as f64) / 3.0).ceil().max(min_beta),
        };

        let g = gram(kernel, d, &rows)?;
        let features = if !with_features {
            Vec::new()
        } else if kernel.kind == KernelKind::Linear {
            rows.iter().map(|&i| d.instance(i).clone()).collect()
        } else {
            explicit_features(&g)?.to_sparse()
        };
        Ok(Self {
            classes,
            rows,
            local_class,
            class_sizes,
            gram: g,
            features,
            kernel: *kernel,
            c,
            beta,
            balanced_label,
        })
    }

    /// Rows `phi(x_i) (x) (sqrt(mu_k) s_k[g_i])_k` whose inner products give
    /// the combined kernel, or `None` when their dimension is not well below
    /// the instance count (or no feature rows were built).
    pub fn combined_features(&self, signs: &[Vec<f64>], mu: &[f64]) -> Option<DMatrix<f64>> {
        let m = self.features.iter().map(|x| x.dim()).max().unwrap_or(0);
        let used: Vec<usize> = (0..mu.len()).filter(|&k| mu[k] > 0.0).collect();
        let dim = m * used.len();
        if m == 0 || 2 * dim > self.n() {
            return None;
        }
        let mut f = DMatrix::zeros(self.n(), dim);
        for (i, x) in self.features.iter().enumerate() {
            for (b, &k) in used.iter().enumerate() {
                let scale = mu[k].sqrt() * signs[k][self.local_class[i]];
                for &(j, v) in x.entries() {
                    f[(i, b * m + j as usize - 1)] = scale * v;
                }
            }
        }
        Some(f)
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn is_feasible(&self, label: &CompressedLabel) -> bool {
        label.imbalance(&self.class_sizes).abs() <= self.beta
    }

    /// Per-instance signs of a compressed labeling.
    pub fn expand(&self, label: &CompressedLabel) -> Vec<f64> {
        self.local_class
            .iter()
            .map(|&k| f64::from(label.signs()[k]))
            .collect()
    }

    /// Class-pair block sums `B_km = sum_{i in k, j in m} a_i a_j K_ij`, so
    /// that `alpha' (K o zz') alpha = s' B s` for any class signs `s`.
    pub fn class_blocks(&self, alpha: &[f64]) -> DMatrix<f64> {
        let c = self.class_count();
        let n = self.n();
        let partial: Vec<Vec<f64>> = par::map_range(n, |i| {
            let mut acc = vec![0.0; c];
            if alpha[i] != 0.0 {
                for j in 0..n {
                    acc[self.local_class[j]] += alpha[j] * self.gram.get(i, j);
                }
                for v in &mut acc {
                    *v *= alpha[i];
                }
            }
            acc
        });
        let mut blocks = DMatrix::zeros(c, c);
        for (i, acc) in partial.iter().enumerate() {
            let k = self.local_class[i];
            for (m, v) in acc.iter().enumerate() {
                blocks[(k, m)] += v;
            }
        }
        blocks
    }

    /// `J(alpha, z) = 1' alpha - 1/2 alpha' (K o zz' + I/C) alpha`.
    pub fn dual_value(&self, alpha: &[f64], blocks: &DMatrix<f64>, label: &CompressedLabel) -> f64 {
        let s = label.as_f64();
        let quad = quad_form(blocks, &s);
        let sum: f64 = alpha.iter().sum();
        let ridge: f64 = alpha.iter().map(|a| a * a).sum::<f64>() / self.c;
        sum - 0.5 * quad - 0.5 * ridge
    }
}

fn quad_form(blocks: &DMatrix<f64>, s: &[f64]) -> f64 {
    let c = s.len();
    let mut acc = 0.0;
    for k in 0..c {
        for m in 0..c {
            acc += s[k] * s[m] * blocks[(k, m)];
        }
    }
    acc
}

/// Most violated labeling with the `l_inf` surrogate score
/// `max_l |sum_k t_kl s_k|`, where `t_kl` sums `alpha_j x_jl` over class `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViolatedLabel {
    pub label: CompressedLabel,
    pub score: f64,
    pub dimension: usize,
}

/// Per-dimension signed class sums `t[l][k]`.
fn class_feature_sums(p: &NodeProblem, alpha: &[f64]) -> Vec<Vec<f64>> {
    let dim = p.features.iter().map(|x| x.dim()).max().unwrap_or(0);
    let c = p.class_count();
    let mut t = vec![vec![0.0; c]; dim];
    for (j, x) in p.features.iter().enumerate() {
        if alpha[j] == 0.0 {
            continue;
        }
        let k = p.local_class[j];
        for &(l, v) in x.entries() {
            t[l as usize - 1][k] += alpha[j] * v;
        }
    }
    t
}

/// Greedy sign choice for one dimension: follow the signs of `t`, then flip
/// the smallest-`|t|` majority-side classes until the balance bound holds.
fn greedy_signs(t: &[f64], sizes: &[usize], beta: f64) -> Option<Vec<i8>> {
    let c = t.len();
    let mut s: Vec<i8> = t.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect();
    let imbalance = |s: &[i8]| -> i64 {
        s.iter()
            .zip(sizes)
            .map(|(&x, &n)| i64::from(x) * n as i64)
            .sum()
    };
    loop {
        let total = imbalance(&s);
        if (total.unsigned_abs() as f64) <= beta {
            break;
        }
        let side = total.signum() as i8;
        let pick = (0..c)
            .filter(|&k| s[k] == side && (sizes[k] as i64) < total.abs())
            .min_by(|&a, &b| {
                t[a].abs()
                    .partial_cmp(&t[b].abs())
                    .expect("finite sums")
                    .then(a.cmp(&b))
            })?;
        s[pick] = -s[pick];
    }
    if s.iter().all(|&x| x == s[0]) {
        let total = imbalance(&s);
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| {
            t[a].abs()
                .partial_cmp(&t[b].abs())
                .expect("finite sums")
                .then(a.cmp(&b))
        });
        let k = order.into_iter().find(|&k| {
            let after = total - 2 * i64::from(s[k]) * sizes[k] as i64;
            after.unsigned_abs() as f64 <= beta
        })?;
        s[k] = -s[k];
    }
    Some(s)
}

/// Searches every feature dimension for the labeling maximizing
/// `|sum_k t_kl s_k|`; `None` when every dimension's candidate is trivial,
/// infeasible or excluded.
pub fn most_violated_label(
    p: &NodeProblem,
    alpha: &[f64],
    exclude: &[CompressedLabel],
) -> Option<ViolatedLabel> {
    let t = class_feature_sums(p, alpha);
    let candidates: Vec<Option<ViolatedLabel>> = par::map_slice(&t, |tl| {
        let signs = greedy_signs(tl, &p.class_sizes, p.beta)?;
        let label = CompressedLabel::new(&signs).ok()?;
        if exclude.contains(&label) {
            return None;
        }
        let score = tl
            .iter()
            .zip(label.signs())
            .map(|(v, &s)| v * f64::from(s))
            .sum::<f64>()
            .abs();
        Some(ViolatedLabel {
            label,
            score,
            dimension: 0,
        })
    });
    let mut best: Option<ViolatedLabel> = None;
    for (l, cand) in candidates.into_iter().enumerate() {
        if let Some(mut v) = cand {
            v.dimension = l;
            if best.as_ref().is_none_or(|b| v.score > b.score) {
                best = Some(v);
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MklOptions {
    /// Relative objective change (or weight step norm) that ends the
    /// alternation.
    pub tol: f64,
    /// Relative duality gap `F(mu) - min_k J(alpha, z_k)` that ends it.
    pub gap_tol: f64,
    /// The line search stops once the directional derivative has shrunk
    /// by this factor.
    pub line_search_tol: f64,
    /// Cap on inner solves per line search.
    pub line_search_evals: usize,
    pub max_iter: usize,
    pub solver: SolverOptions,
}

impl Default for MklOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            gap_tol: 1e-3,
            line_search_tol: 1e-2,
            line_search_evals: 30,
            max_iter: 100,
            solver: SolverOptions::default().with_tol(1e-6),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MklResult {
    pub mu: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Saddle value of the problem restricted to the given labelings.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub inner_converged: bool,
    pub line_search_failed: bool,
    /// Inner SVM solves performed.
    pub solves: usize,
    /// Objective after each accepted weight update, starting value first.
    pub trajectory: Vec<f64>,
}

/// Inner solve at fixed weights plus the Danskin gradient
/// `dF/dmu_k = -1/2 alpha' (K o z_k z_k') alpha`.
#[derive(Debug, Clone)]
pub struct MklPoint {
    pub mu: Vec<f64>,
    pub outcome: SolveOutcome,
    pub objective: f64,
    pub gradient: Vec<f64>,
}

impl MklPoint {
    /// `F(mu) - min_k J(alpha, z_k)`; nonnegative up to solver accuracy and
    /// an upper bound on the distance to the optimum.
    pub fn duality_gap(&self, c: f64) -> f64 {
        let alpha = &self.outcome.alpha;
        let base = alpha.iter().sum::<f64>() - 0.5 * alpha.iter().map(|a| a * a).sum::<f64>() / c;
        let worst = self
            .gradient
            .iter()
            .map(|g| base + g)
            .fold(f64::INFINITY, f64::min);
        self.objective - worst
    }
}

pub fn mkl_point(
    p: &NodeProblem,
    labels: &[CompressedLabel],
    mu: &[f64],
    warm: Option<&[f64]>,
    solver: &SolverOptions,
) -> MklPoint {
    let signs: Vec<Vec<f64>> = labels.iter().map(|l| l.as_f64()).collect();
    let outcome = match p.combined_features(&signs, mu) {
        Some(f) => solve_primal(&f, p.c, warm, solver),
        None => {
            let view = CombinedKernelView {
                gram: &p.gram,
                group_of: &p.local_class,
                label_set: &signs,
                mu,
                c: p.c,
            };
            solve_dual(&mut view.to_dense(), warm, solver)
        }
    };
    let blocks = p.class_blocks(&outcome.alpha);
    let gradient = signs.iter().map(|s| -0.5 * quad_form(&blocks, s)).collect();
    MklPoint {
        mu: mu.to_vec(),
        objective: outcome.objective(),
        outcome,
        gradient,
    }
}

fn on_simplex(mu: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = mu.iter().map(|&m| m.max(0.0)).collect();
    let sum: f64 = clamped.iter().sum();
    clamped.iter().map(|m| m / sum).collect()
}

/// Reduced-gradient descent direction on the simplex around the largest
/// weight.
fn descent_direction(mu: &[f64], grad: &[f64]) -> Vec<f64> {
    let m = (0..mu.len())
        .max_by(|&a, &b| mu[a].partial_cmp(&mu[b]).expect("finite").then(b.cmp(&a)))
        .expect("nonempty");
    let mut d = vec![0.0; mu.len()];
    for k in 0..mu.len() {
        if k == m {
            continue;
        }
        let r = grad[k] - grad[m];
        if !(mu[k] <= 0.0 && r > 0.0) {
            d[k] = -r;
        }
    }
    d[m] = -d.iter().sum::<f64>();
    d
}

fn directional(d: &[f64], grad: &[f64]) -> f64 {
    d.iter().zip(grad).map(|(a, b)| a * b).sum()
}

/// Solves the MKL problem over `labels` by alternating inner SVM solves with
/// reduced-gradient steps on `mu`. `mu0` defaults to uniform weights.
pub fn simple_mkl(
    p: &NodeProblem,
    labels: &[CompressedLabel],
    mu0: Option<&[f64]>,
    warm_alpha: Option<&[f64]>,
    opts: &MklOptions,
) -> Result<MklResult> {
    if labels.is_empty() {
        return Err(Error::InvalidParameter("MKL needs at least one labeling".into()));
    }
    if let Some(bad) = labels.iter().find(|l| l.len() != p.class_count()) {
        return Err(Error::InvalidParameter(format!(
            "labeling over {} classes at a {}-class node",
            bad.len(),
            p.class_count()
        )));
    }
    let k = labels.len();
    let mu = match mu0 {
        Some(m) if m.len() == k => on_simplex(m),
        Some(_) => {
            return Err(Error::InvalidParameter("weights and labelings differ in length".into()))
        }
        None => vec![1.0 / k as f64; k],
    };
    let solver = &opts.solver;
    let solves = std::cell::Cell::new(1usize);
    let mut cur = mkl_point(p, labels, &mu, warm_alpha, solver);
    let mut inner_converged = cur.outcome.converged;
    let mut trajectory = vec![cur.objective];
    let mut converged = k == 1;
    let mut line_search_failed = false;
    let mut iterations = 0;

    while !converged && iterations < opts.max_iter {
        if cur.duality_gap(p.c) <= opts.gap_tol * cur.objective.abs() {
            converged = true;
            break;
        }
        iterations += 1;
        let d = descent_direction(&cur.mu, &cur.gradient);
        let d_norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let slope0 = directional(&d, &cur.gradient);
        if d_norm <= opts.tol || slope0 >= 0.0 {
            converged = true;
            break;
        }
        let (gamma_max, blocking) = d
            .iter()
            .enumerate()
            .filter(|(_, &v)| v < 0.0)
            .map(|(i, &v)| (-cur.mu[i] / v, i))
            .min_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)))
            .expect("a descent direction on the simplex has a negative entry");

        let at = |gamma: f64, warm: &[f64]| -> MklPoint {
            let mut next: Vec<f64> = cur.mu.iter().zip(&d).map(|(m, v)| m + gamma * v).collect();
            if gamma >= gamma_max {
                next[blocking] = 0.0;
            }
            solves.set(solves.get() + 1);
            mkl_point(p, labels, &on_simplex(&next), Some(warm), solver)
        };

        // Exact line search on the convex restriction phi(g) = F(mu + g d):
        // accept the boundary if phi is still decreasing there, otherwise
        // locate phi' = 0 by safeguarded regula falsi.
        let end = at(gamma_max, &cur.outcome.alpha);
        inner_converged &= end.outcome.converged;
        let slope_end = directional(&d, &end.gradient);
        let mut best = end.clone();
        let mut best_gamma = gamma_max;
        if slope_end > 0.0 {
            let (mut lo, mut hi) = ((0.0, slope0), (gamma_max, slope_end));
            let mut side = 0i32;
            for _ in 0..opts.line_search_evals {
                let mut g = lo.0 - lo.1 * (hi.0 - lo.0) / (hi.1 - lo.1);
                if !(g > lo.0 && g < hi.0) {
                    g = 0.5 * (lo.0 + hi.0);
                }
                let pt = at(g, &best.outcome.alpha);
                inner_converged &= pt.outcome.converged;
                let s = directional(&d, &pt.gradient);
                if pt.objective < best.objective {
                    best = pt;
                    best_gamma = g;
                }
                if s.abs() <= opts.line_search_tol * slope0.abs()
                    || (hi.0 - lo.0) <= 1e-9 * gamma_max
                {
                    break;
                }
                if s < 0.0 {
                    lo = (g, s);
                    if side == -1 {
                        hi.1 *= 0.5;
                    }
                    side = -1;
                } else {
                    hi = (g, s);
                    if side == 1 {
                        lo.1 *= 0.5;
                    }
                    side = 1;
                }
            }
        }

        // Fall back to step halving if the search did not decrease F.
        let mut halvings = 0;
        while best.objective > cur.objective && halvings < 20 {
            halvings += 1;
            best_gamma *= 0.5;
            best = at(best_gamma, &cur.outcome.alpha);
            inner_converged &= best.outcome.converged;
        }
        if best.objective > cur.objective {
            line_search_failed = true;
            break;
        }

        let step: f64 = best
            .mu
            .iter()
            .zip(&cur.mu)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let rel = (cur.objective - best.objective).abs() / cur.objective.abs().max(1e-300);
        cur = best;
        trajectory.push(cur.objective);
        if rel <= opts.tol || step <= opts.tol {
            converged = true;
        }
    }

    Ok(MklResult {
        mu: cur.mu,
        alpha: cur.outcome.alpha,
        objective: cur.objective,
        iterations,
        converged,
        inner_converged,
        line_search_failed,
        solves: solves.get(),
        trajectory,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    /// Stop when the next labeling violates the current bound by at most
    /// this fraction of `|theta|`.
    pub tol_violation: f64,
    /// `None` means `min(2^(c-1) - 1, 50)`.
    pub max_cuts: Option<usize>,
    /// Balance bound; `None` selects the default rule of [`NodeProblem::new`].
    pub beta: Option<f64>,
    /// MKL iteration cap while labelings are still being added; the final
    /// set is then solved with `mkl.max_iter`. `None` always uses the full cap.
    pub cut_mkl_iters: Option<usize>,
    pub mkl: MklOptions,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            tol_violation: 1e-3,
            max_cuts: None,
            beta: None,
            cut_mkl_iters: Some(10),
            mkl: MklOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub active: usize,
    /// Restricted saddle value after the MKL solve.
    pub objective: f64,
    /// `-J(alpha, z_v) - theta` for the next candidate (0 when none).
    pub violation: f64,
}

impl std::fmt::Display for TraceRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "iter={} active={} objective={:.12e} violation={:.6e}",
            self.iteration, self.active, self.objective, self.violation
        )
    }
}

#[derive(Debug, Clone)]
pub struct SplitState {
    pub active: Vec<CompressedLabel>,
    pub mu: Vec<f64>,
    pub alpha: Vec<f64>,
    pub theta: f64,
    pub history: Vec<TraceRow>,
    pub affinity: DMatrix<f64>,
    pub mkl_flags: MklFlags,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MklFlags {
    pub inner_nonconverged: bool,
    pub line_search_failed: bool,
    pub mkl_nonconverged: bool,
}

#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub g1: Vec<usize>,
    pub g2: Vec<usize>,
    pub state: SplitState,
}

fn default_max_cuts(classes: usize) -> usize {
    if classes >= 8 {
        DEFAULT_MAX_CUTS
    } else {
        ((1usize << (classes - 1)) - 1).min(DEFAULT_MAX_CUTS)
    }
}

/// Cutting-plane solution of the relaxed split followed by partition
/// extraction. Returns global class indices.
pub fn split_node(p: &NodeProblem, opts: &SplitOptions) -> Result<SplitOutcome> {
    if p.class_count() < 2 {
        return Err(Error::LeafReached);
    }
    let max_cuts = opts.max_cuts.unwrap_or_else(|| default_max_cuts(p.class_count()));
    let init_alpha = vec![1.0 / p.n() as f64; p.n()];
    let first = most_violated_label(p, &init_alpha, &[])
        .map(|v| v.label)
        .unwrap_or_else(|| p.balanced_label.clone());

    let mut active = vec![first];
    let mut mu = vec![1.0];
    let mut alpha = init_alpha;
    let mut history = Vec::new();
    let mut flags = MklFlags::default();
    let mut theta;
    let coarse = MklOptions {
        max_iter: opts.cut_mkl_iters.unwrap_or(opts.mkl.max_iter),
        ..opts.mkl.clone()
    };
    let mut precise = false;

    loop {
        let mkl = if precise { &opts.mkl } else { &coarse };
        let res = simple_mkl(p, &active, Some(&mu), Some(&alpha), mkl)?;
        flags.inner_nonconverged |= !res.inner_converged;
        flags.line_search_failed |= res.line_search_failed;
        if precise || res.converged {
            flags.mkl_nonconverged |= !res.converged;
        }
        mu = res.mu;
        alpha = res.alpha;
        theta = -res.objective;
        let mut row = TraceRow {
            iteration: history.len() + 1,
            active: active.len(),
            objective: res.objective,
            violation: 0.0,
        };
        if precise {
            history.push(row);
            break;
        }
        let next = if active.len() >= max_cuts {
            None
        } else {
            most_violated_label(p, &alpha, &active)
        };
        if let Some(next) = &next {
            let blocks = p.class_blocks(&alpha);
            row.violation = -p.dual_value(&alpha, &blocks, &next.label) - theta;
        }
        let Some(next) = next.filter(|_| row.violation > opts.tol_violation * theta.abs()) else {
            history.push(row);
            // An early-stopped solve is refined on the final set before the
            // partition is read off.
            if res.converged {
                break;
            }
            precise = true;
            continue;
        };
        history.push(row);
        active.push(next.label);
        mu.push(0.0);
    }

    let signs: Vec<Vec<f64>> = active.iter().map(|l| l.as_f64()).collect();
    let affinity = label_affinity(&signs, &mu);
    let (g1, g2) = extract_partition(&affinity, &p.classes);
    Ok(SplitOutcome {
        g1,
        g2,
        state: SplitState {
            active,
            mu,
            alpha,
            theta,
            history,
            affinity,
            mkl_flags: flags,
        },
    })
}

/// Maximum spanning tree (Kruskal, ties in lexicographic edge order) with
/// its lightest edge removed; ties for the lightest edge go to the edge
/// added last. The side holding `classes[0]` is returned first.
pub fn extract_partition(a: &DMatrix<f64>, classes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let c = classes.len();
    assert!(c >= 2, "need two classes to cut");
    assert_eq!(a.nrows(), c);
    let mut edges: Vec<(usize, usize)> = (0..c)
        .flat_map(|i| ((i + 1)..c).map(move |j| (i, j)))
        .collect();
    // Stable sort keeps lexicographic order among equal weights.
    edges.sort_by(|&(i, j), &(k, l)| a[(k, l)].partial_cmp(&a[(i, j)]).expect("finite weights"));

    let mut parent: Vec<usize> = (0..c).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut tree = Vec::with_capacity(c - 1);
    for (i, j) in edges {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            parent[ri] = rj;
            tree.push((i, j));
            if tree.len() == c - 1 {
                break;
            }
        }
    }

    let cut = (0..tree.len())
        .rev()
        .min_by(|&x, &y| {
            let (wx, wy) = (a[tree[x]], a[tree[y]]);
            wx.partial_cmp(&wy).expect("finite weights")
        })
        .expect("tree has an edge");
    let mut parent: Vec<usize> = (0..c).collect();
    for (idx, &(i, j)) in tree.iter().enumerate() {
        if idx != cut {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            parent[ri] = rj;
        }
    }
    let root0 = find(&mut parent, 0);
    let mut g1 = Vec::new();
    let mut g2 = Vec::new();
    for k in 0..c {
        if find(&mut parent, k) == root0 {
            g1.push(classes[k]);
        } else {
            g2.push(classes[k]);
        }
    }
    (g1, g2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionScore {
    pub g1: Vec<usize>,
    pub g2: Vec<usize>,
    /// `2 / |w|^2` of the separator alone.
    pub margin: f64,
    /// `2 / (|w|^2 + C |xi|^2)`: the margin of the equivalent hard-margin
    /// machine on the kernel `K + I/C`. Partitions are ranked by this.
    pub score: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Msm0Result {
    pub g1: Vec<usize>,
    pub g2: Vec<usize>,
    pub score: f64,
    pub table: Vec<PartitionScore>,
}

/// Scores every bipartition by the margin of its SVM and returns the
/// argmax, ties going to the lexicographically smallest `G1`.
///
/// With squared slack the separator norm alone rewards labelings the
/// machine cannot fit (`w` shrinks towards zero), so the ranking uses the
/// slack-augmented norm, which is twice the SVM's optimal objective and
/// agrees with the quantity the relaxed split minimizes.
pub fn msm0_brute_force(p: &NodeProblem, solver: &SolverOptions) -> Result<Msm0Result> {
    let c = p.class_count();
    if c > BRUTE_FORCE_CLASS_LIMIT {
        return Err(Error::TooManyClasses {
            classes: c,
            limit: BRUTE_FORCE_CLASS_LIMIT,
        });
    }
    if c < 2 {
        return Err(Error::LeafReached);
    }
    let count = (1usize << (c - 1)) - 1;
    let table: Vec<PartitionScore> = par::map_range(count, |idx| {
        let mask = idx + 1;
        let mut signs = vec![1i8; c];
        for k in 1..c {
            if mask >> (k - 1) & 1 == 1 {
                signs[k] = -1;
            }
        }
        let label = CompressedLabel::new(&signs).expect("mask is nonzero");
        let z = p.expand(&label);
        let mut q = DenseQ::from_gram(&p.gram, &z, p.c);
        let outcome = solve_dual(&mut q, None, solver);
        let (pos, neg) = label.groups();
        let w_norm_sq = outcome.w_norm_sq(p.c);
        let slack: f64 = outcome.alpha.iter().map(|a| a * a).sum::<f64>() / p.c;
        PartitionScore {
            g1: pos.iter().map(|&k| p.classes[k]).collect(),
            g2: neg.iter().map(|&k| p.classes[k]).collect(),
            margin: margin_from_norm(w_norm_sq),
            score: margin_from_norm(w_norm_sq + slack),
            converged: outcome.converged,
        }
    });
    let best = table
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| {
            a.score
                .partial_cmp(&b.score)
                .expect("margins are not NaN")
                .then_with(|| b.g1.cmp(&a.g1))
        })
        .map(|(i, _)| i)
        .expect("at least one partition");
    Ok(Msm0Result {
        g1: table[best].g1.clone(),
        g2: table[best].g2.clone(),
        score: table[best].score,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_libsvm, LabelMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn lbl(s: &[i8]) -> CompressedLabel {
        CompressedLabel::new(s).unwrap()
    }

    #[test]
    fn compressed_label_canonical_and_trivial() {
        assert_eq!(lbl(&[-1, 1, 1]), lbl(&[1, -1, -1]));
        assert!(CompressedLabel::new(&[1, 1]).is_err());
        assert!(CompressedLabel::new(&[1]).is_err());
        assert_eq!(lbl(&[1, -1, 1]).imbalance(&[3, 2, 1]), 2.0);
    }

    #[test]
    fn min_imbalance_exact_and_differencing() {
        assert_eq!(min_imbalance(&[5, 5]).0, 0.0);
        assert_eq!(min_imbalance(&[10, 1, 1]).0, 8.0);
        assert_eq!(min_imbalance(&[3, 3, 3]).0, 3.0);
        let sizes: Vec<usize> = (1..=24).collect();
        let (v, label) = min_imbalance(&sizes);
        assert_eq!(label.imbalance(&sizes).abs(), v);
        assert!(v <= 1.0);
    }

    #[test]
    fn extract_partition_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert_eq!(extract_partition(&a, &[4, 9]), (vec![4], vec![9]));

        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.9, -0.8, 0.9, 1.0, -0.7, -0.8, -0.7, 1.0]);
        assert_eq!(extract_partition(&a, &[1, 2, 3]), (vec![1, 2], vec![3]));

        for c in 3..7 {
            let a = DMatrix::from_fn(c, c, |i, j| if i == j { 1.0 } else { 0.2 });
            let classes: Vec<usize> = (1..=c).collect();
            let (g1, g2) = extract_partition(&a, &classes);
            assert_eq!(g2, vec![c]);
            assert_eq!(g1, (1..c).collect::<Vec<_>>());
        }
    }

    /// Enumerates every spanning tree of the complete graph on three nodes.
    #[test]
    fn three_node_mst_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let w = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let a = DMatrix::from_row_slice(3, 3, &[1.0, w[0], w[1], w[0], 1.0, w[2], w[1], w[2], 1.0]);
            // Spanning trees drop exactly one of the three edges.
            let edges = [(0, 1), (0, 2), (1, 2)];
            let dropped = (0..3)
                .max_by(|&x, &y| (-w[x]).partial_cmp(&-w[y]).unwrap())
                .unwrap();
            let tree: Vec<usize> = (0..3).filter(|&e| e != dropped).collect();
            let cut = *tree.iter().min_by(|&&x, &&y| w[x].partial_cmp(&w[y]).unwrap()).unwrap();
            let (i, j) = edges[tree.iter().copied().find(|&e| e != cut).unwrap()];
            let mut g1: Vec<usize> = vec![i, j];
            g1.sort_unstable();
            let (got1, got2) = extract_partition(&a, &[0, 1, 2]);
            let expected_g1 = if g1.contains(&0) { g1.clone() } else { (0..3).filter(|k| !g1.contains(k)).collect() };
            assert_eq!(got1, expected_g1);
            assert_eq!(got1.len() + got2.len(), 3);
        }
    }

    /// Gaussian-ball clusters: class `k` centred at `centers[k]`.
    pub(crate) fn clusters(
        rng: &mut ChaCha8Rng,
        centers: &[(f64, f64)],
        per_class: usize,
        sd: f64,
    ) -> SparseDataset {
        let noise = Normal::new(0.0, sd).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (k, &(cx, cy)) in centers.iter().enumerate() {
            for _ in 0..per_class {
                xs.push(SparseVector::from_dense(&[
                    cx + noise.sample(rng),
                    cy + noise.sample(rng),
                ]));
                ys.push(k + 1);
            }
        }
        SparseDataset::new(xs, ys, LabelMap::identity(centers.len())).unwrap()
    }

    #[test]
    fn two_class_split_is_forced() {
        let d = parse_libsvm("1 1:1\n1 1:0.8\n2 1:-1\n2 1:-0.5\n").unwrap();
        let p = NodeProblem::new(&d, &[1, 2], &KernelSpec::linear(), 1.0, None).unwrap();
        let out = split_node(&p, &SplitOptions::default()).unwrap();
        assert_eq!((out.g1, out.g2), (vec![1], vec![2]));
        assert_eq!(out.state.active.len(), 1);
        assert_eq!(out.state.history.len(), 1);
        let oracle = msm0_brute_force(&p, &SolverOptions::default()).unwrap();
        assert_eq!(oracle.table.len(), 1);
    }

    #[test]
    fn single_class_is_a_leaf() {
        let d = parse_libsvm("1 1:1\n2 1:-1\n").unwrap();
        assert!(matches!(
            NodeProblem::new(&d, &[2], &KernelSpec::linear(), 1.0, None),
            Err(Error::LeafReached)
        ));
    }

    #[test]
    fn infeasible_beta_is_rejected() {
        let d = parse_libsvm("1 1:1\n1 1:1\n1 1:1\n2 1:-1\n").unwrap();
        let err = NodeProblem::new(&d, &[1, 2], &KernelSpec::linear(), 1.0, Some(1.0)).unwrap_err();
        assert!(matches!(err, Error::InfeasibleBeta { .. }));
        let p = NodeProblem::new(&d, &[1, 2], &KernelSpec::linear(), 1.0, None).unwrap();
        assert_eq!(p.beta, 2.0);
    }

    #[test]
    fn violated_label_follows_cluster_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = clusters(&mut rng, &[(-1.0, 0.0), (-1.0, 0.1), (1.0, 0.0), (1.0, 0.1)], 10, 0.05);
        let p = NodeProblem::new(&d, &[1, 2, 3, 4], &KernelSpec::linear(), 1.0, None).unwrap();
        let alpha = vec![1.0 / 40.0; 40];
        let v = most_violated_label(&p, &alpha, &[]).unwrap();
        assert_eq!(v.label, lbl(&[-1, -1, 1, 1]));
        assert_eq!(v.dimension, 0);
        // With the best labeling excluded the search moves on.
        let w = most_violated_label(&p, &alpha, std::slice::from_ref(&v.label));
        assert!(w.is_none_or(|w| w.label != v.label));
    }

    #[test]
    fn two_class_violated_label() {
        let d = parse_libsvm("1 1:1 2:3\n2 1:2 2:-1\n").unwrap();
        let p = NodeProblem::new(&d, &[1, 2], &KernelSpec::gaussian(0.5).unwrap(), 1.0, None).unwrap();
        let v = most_violated_label(&p, &[0.3, 0.7], &[]).unwrap();
        assert_eq!(v.label, lbl(&[1, -1]));
        assert!(most_violated_label(&p, &[0.3, 0.7], &[v.label]).is_none());
    }

    /// Exhaustive maximum of `|sum_k t_kl s_k|` over feasible nontrivial
    /// sign vectors and all dimensions.
    fn exhaustive_score(p: &NodeProblem, alpha: &[f64]) -> f64 {
        let c = p.class_count();
        let dim = p.features[0].dim();
        let mut best: f64 = 0.0;
        for l in 0..dim {
            let mut t = vec![0.0; c];
            for (j, x) in p.features.iter().enumerate() {
                t[p.local_class[j]] += alpha[j] * x.get(l as u32 + 1);
            }
            for mask in 0u32..(1 << c) {
                let s: Vec<i8> = (0..c).map(|k| if mask >> k & 1 == 1 { -1 } else { 1 }).collect();
                let Ok(label) = CompressedLabel::new(&s) else { continue };
                if !p.is_feasible(&label) {
                    continue;
                }
                let v: f64 = t.iter().zip(&s).map(|(a, &b)| a * f64::from(b)).sum();
                best = best.max(v.abs());
            }
        }
        best
    }

    #[test]
    fn violated_label_matches_enumeration_for_equal_class_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..200 {
            let c = rng.gen_range(2..=5);
            let per = rng.gen_range(1..=4);
            let dim = rng.gen_range(1..=4);
            let text: String = (0..c * per)
                .map(|i| {
                    let mut s = format!("{}", i % c + 1);
                    for f in 1..=dim {
                        s.push_str(&format!(" {f}:{}", rng.gen_range(-1.0..1.0)));
                    }
                    s.push('\n');
                    s
                })
                .collect();
            let d = parse_libsvm(&text).unwrap();
            let classes: Vec<usize> = (1..=c).collect();
            let beta = if trial % 2 == 0 { None } else { Some((c * per) as f64) };
            let p = NodeProblem::new(&d, &classes, &KernelSpec::linear(), 1.0, beta).unwrap();
            let alpha: Vec<f64> = (0..p.n()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let got = most_violated_label(&p, &alpha, &[]).unwrap();
            assert!(p.is_feasible(&got.label));
            let want = exhaustive_score(&p, &alpha);
            assert!((got.score - want).abs() <= 1e-12 * want.max(1.0), "trial {trial}: {} vs {want}", got.score);
        }
    }

    #[test]
    fn mkl_single_label_is_a_plain_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = clusters(&mut rng, &[(-1.0, 0.0), (0.0, 1.0), (1.0, 0.0)], 4, 0.3);
        let p = NodeProblem::new(&d, &[1, 2, 3], &KernelSpec::linear(), 1.0, None).unwrap();
        let z = lbl(&[1, 1, -1]);
        let res = simple_mkl(&p, std::slice::from_ref(&z), None, None, &MklOptions::default()).unwrap();
        assert_eq!(res.mu, vec![1.0]);
        let mut q = DenseQ::from_gram(&p.gram, &p.expand(&z), p.c);
        let plain = solve_dual(&mut q, None, &MklOptions::default().solver);
        assert!((res.objective - plain.objective()).abs() < 1e-10);
    }

    #[test]
    fn mkl_duplicate_labels_match_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = clusters(&mut rng, &[(-1.0, 0.0), (0.0, 1.0), (1.0, 0.0)], 4, 0.3);
        let p = NodeProblem::new(&d, &[1, 2, 3], &KernelSpec::gaussian(1.0).unwrap(), 1.0, None).unwrap();
        let z = lbl(&[1, -1, -1]);
        let one = simple_mkl(&p, std::slice::from_ref(&z), None, None, &MklOptions::default()).unwrap();
        let two = simple_mkl(&p, &[z.clone(), z], Some(&[0.3, 0.7]), None, &MklOptions::default()).unwrap();
        assert!((one.objective - two.objective).abs() < 1e-8);
        assert!((two.mu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mkl_matches_simplex_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = clusters(&mut rng, &[(-1.0, -1.0), (1.0, -1.0), (0.0, 1.0), (0.5, 0.5)], 3, 0.6);
        let p = NodeProblem::new(&d, &[1, 2, 3, 4], &KernelSpec::linear(), 1.0, Some(12.0)).unwrap();
        let labels = [lbl(&[1, 1, -1, -1]), lbl(&[1, -1, 1, -1]), lbl(&[1, -1, -1, 1])];
        let opts = MklOptions {
            tol: 1e-10,
            gap_tol: 1e-9,
            line_search_tol: 1e-6,
            line_search_evals: 30,
            max_iter: 500,
            solver: SolverOptions::default().with_tol(1e-10),
        };
        let res = simple_mkl(&p, &labels, None, None, &opts).unwrap();
        // The relaxed objective is a minimum over the simplex; a 0.01 grid
        // with exact inner solves bounds it from above.
        let mut grid_best = f64::INFINITY;
        for a in 0..=100 {
            for b in 0..=(100 - a) {
                let mu = [a as f64 / 100.0, b as f64 / 100.0, (100 - a - b) as f64 / 100.0];
                let pt = mkl_point(&p, &labels, &mu, None, &opts.solver);
                grid_best = grid_best.min(pt.objective);
            }
        }
        assert!(res.objective <= grid_best + 1e-5, "{} vs {grid_best}", res.objective);
        assert!(grid_best - res.objective < 1e-2, "grid resolution bound");
    }

    #[test]
    fn mkl_trajectory_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let d = clusters(&mut rng, &[(-1.0, -1.0), (1.0, -1.0), (0.0, 1.0), (0.5, 0.5)], 5, 0.4);
        let p = NodeProblem::new(&d, &[1, 2, 3, 4], &KernelSpec::gaussian(0.7).unwrap(), 10.0, Some(20.0)).unwrap();
        let labels = [lbl(&[1, 1, -1, -1]), lbl(&[1, -1, 1, -1]), lbl(&[1, -1, -1, 1])];
        let res = simple_mkl(&p, &labels, None, None, &MklOptions::default()).unwrap();
        for w in res.trajectory.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert!(res.mu.iter().all(|&m| m >= 0.0));
        assert!((res.mu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sign_flip_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let d = clusters(&mut rng, &[(-1.0, -1.0), (1.0, -1.0), (0.0, 1.0)], 4, 0.4);
        let p = NodeProblem::new(&d, &[1, 2, 3], &KernelSpec::linear(), 1.0, None).unwrap();
        let signs = [vec![1.0, -1.0, -1.0], vec![1.0, 1.0, -1.0]];
        let flipped = [vec![-1.0, 1.0, 1.0], vec![1.0, 1.0, -1.0]];
        let mu = [0.4, 0.6];
        assert_eq!(label_affinity(&signs, &mu), label_affinity(&flipped, &mu));
        let a = label_affinity(&signs, &mu);
        assert_eq!(extract_partition(&a, &p.classes), extract_partition(&label_affinity(&flipped, &mu), &p.classes));
        let labels = [lbl(&[1, -1, -1]), lbl(&[1, 1, -1])];
        let raw = [lbl(&[-1, 1, 1]), lbl(&[1, 1, -1])];
        let x = mkl_point(&p, &labels, &mu, None, &SolverOptions::default());
        let y = mkl_point(&p, &raw, &mu, None, &SolverOptions::default());
        assert_eq!(x.objective, y.objective);
    }

    fn four_clusters(rotated: bool) -> SparseDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let centers: Vec<(f64, f64)> = [(0.0, 0.0), (0.0, 1.0), (10.0, 0.0), (10.0, 1.0)]
            .iter()
            .map(|&(x, y)| if rotated { (-y, x) } else { (x, y) })
            .collect();
        let raw = clusters(&mut rng, &centers, 15, 0.1);
        crate::data::scale_features(&raw, &raw).0
    }

    #[test]
    fn cluster_split_matches_oracle() {
        for rotated in [false, true] {
            let d = four_clusters(rotated);
            let p = NodeProblem::new(&d, &[1, 2, 3, 4], &KernelSpec::linear(), 1.0, None).unwrap();
            let oracle = msm0_brute_force(&p, &SolverOptions::default().with_tol(1e-10)).unwrap();
            assert_eq!(oracle.table.len(), 7);
            assert_eq!((oracle.g1.clone(), oracle.g2.clone()), (vec![1, 2], vec![3, 4]));
            let others = oracle.table.iter().filter(|s| s.g1 != oracle.g1);
            for s in others {
                assert!(s.score < oracle.score);
            }
            let out = split_node(&p, &SplitOptions::default()).unwrap();
            assert_eq!((out.g1, out.g2), (vec![1, 2], vec![3, 4]));
            let a = &out.state.affinity;
            for k in 0..4 {
                assert_eq!(a[(k, k)], 1.0);
            }
            for w in out.state.history.windows(2) {
                assert!(w[1].objective <= w[0].objective + 1e-8 * w[0].objective.abs());
            }
        }
    }
}
