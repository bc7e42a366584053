//! Binary class-structure tree: top-down construction, per-node routing
//! classifiers and root-to-leaf prediction.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, SparseDataset, SparseVector};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::msm::{msm0_brute_force, split_node, MklFlags, NodeProblem, SplitOptions, TraceRow};
use crate::par;
use crate::svm::{decision_value, train_binary, BinarySvmModel, SolverOptions};

/// How an internal node's classes are divided between its children.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Splitter {
    /// Relaxed maximum-separating-margin split.
    Msm(SplitOptions),
    /// Uniformly random bipartition of sizes `ceil(c/2)` / `floor(c/2)`.
    Random { seed: u64 },
    /// Exhaustive search over all bipartitions.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub classes: Vec<usize>,
    pub left: Option<usize>,
    pub right: Option<usize>,
    /// Index into [`ClassTree::models`]; set on internal nodes.
    pub model_ref: Option<usize>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.left.is_none()
    }
}

/// Node layout without the classifiers, as written to `tree.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeLayout {
    pub nodes: Vec<TreeNode>,
    pub root: usize,
}

/// Arena of nodes in depth-first preorder plus the routing classifiers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassTree {
    pub nodes: Vec<TreeNode>,
    pub root: usize,
    pub models: Vec<BinarySvmModel>,
}

/// Split diagnostics of one internal node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTrace {
    /// `root`, `root.L`, `root.L.R`, ...
    pub path: String,
    pub classes: Vec<usize>,
    pub g1: Vec<usize>,
    pub g2: Vec<usize>,
    pub rows: Vec<TraceRow>,
    pub flags: MklFlags,
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub splitter: Splitter,
    pub solver: SolverOptions,
}

#[derive(Debug, Clone)]
pub struct BuiltTree {
    pub tree: ClassTree,
    pub traces: Vec<NodeTrace>,
}

struct Subtree {
    nodes: Vec<TreeNode>,
    models: Vec<BinarySvmModel>,
    traces: Vec<NodeTrace>,
}

/// Builds the tree over every class of `train`, depth first; sibling
/// subtrees may be built concurrently.
pub fn build_tree(
    train: &SparseDataset,
    kernel: &KernelSpec,
    c: f64,
    opts: &BuildOptions,
) -> Result<BuiltTree> {
    train.require_all_classes()?;
    let classes: Vec<usize> = (1..=train.class_count()).collect();
    let sub = build_subtree(train, &classes, kernel, c, opts, 1, "root")?;
    Ok(BuiltTree {
        tree: ClassTree {
            nodes: sub.nodes,
            root: 0,
            models: sub.models,
        },
        traces: sub.traces,
    })
}

fn build_subtree(
    d: &SparseDataset,
    classes: &[usize],
    kernel: &KernelSpec,
    c: f64,
    opts: &BuildOptions,
    heap_index: u64,
    path: &str,
) -> Result<Subtree> {
    if classes.len() == 1 {
        return Ok(Subtree {
            nodes: vec![TreeNode {
                classes: classes.to_vec(),
                left: None,
                right: None,
                model_ref: None,
            }],
            models: Vec::new(),
            traces: Vec::new(),
        });
    }
    let with_path = |e: Error| Error::Node {
        path: path.to_string(),
        source: Box::new(e),
    };
    let (g1, g2, trace) =
        split_classes(d, classes, kernel, c, opts, heap_index, path).map_err(with_path)?;
    let model = train_node_classifier(d, &g1, &g2, kernel, c, &opts.solver).map_err(with_path)?;

    let left_path = format!("{path}.L");
    let right_path = format!("{path}.R");
    let (left, right) = par::join(
        || build_subtree(d, &g1, kernel, c, opts, 2 * heap_index, &left_path),
        || build_subtree(d, &g2, kernel, c, opts, 2 * heap_index + 1, &right_path),
    );
    let (left, right) = (left?, right?);

    let mut nodes = Vec::with_capacity(1 + left.nodes.len() + right.nodes.len());
    nodes.push(TreeNode {
        classes: classes.to_vec(),
        left: Some(1),
        right: Some(1 + left.nodes.len()),
        model_ref: Some(0),
    });
    let mut models = vec![model];
    let mut traces: Vec<NodeTrace> = trace.into_iter().collect();
    for sub in [left, right] {
        let (node_off, model_off) = (nodes.len(), models.len());
        nodes.extend(sub.nodes.into_iter().map(|mut n| {
            n.left = n.left.map(|i| i + node_off);
            n.right = n.right.map(|i| i + node_off);
            n.model_ref = n.model_ref.map(|i| i + model_off);
            n
        }));
        models.extend(sub.models);
        traces.extend(sub.traces);
    }
    Ok(Subtree {
        nodes,
        models,
        traces,
    })
}

type Split = (Vec<usize>, Vec<usize>, Option<NodeTrace>);

fn split_classes(
    d: &SparseDataset,
    classes: &[usize],
    kernel: &KernelSpec,
    c: f64,
    opts: &BuildOptions,
    heap_index: u64,
    path: &str,
) -> Result<Split> {
    match &opts.splitter {
        Splitter::Random { seed } => {
            let (g1, g2) = random_split(classes, *seed, heap_index);
            Ok((g1, g2, None))
        }
        Splitter::Oracle => {
            let p = NodeProblem::gram_only(d, classes, kernel, c)?;
            let res = msm0_brute_force(&p, &opts.solver)?;
            Ok((res.g1, res.g2, None))
        }
        Splitter::Msm(split) => {
            let p = NodeProblem::new(d, classes, kernel, c, split.beta)?;
            let out = split_node(&p, split)?;
            let trace = NodeTrace {
                path: path.to_string(),
                classes: classes.to_vec(),
                g1: out.g1.clone(),
                g2: out.g2.clone(),
                rows: out.state.history,
                flags: out.state.mkl_flags,
            };
            Ok((out.g1, out.g2, Some(trace)))
        }
    }
}

/// Balanced random bipartition; the stream is keyed by the node's position
/// so the result does not depend on build order.
pub fn random_split(classes: &[usize], seed: u64, heap_index: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(heap_index);
    let mut shuffled = classes.to_vec();
    shuffled.shuffle(&mut rng);
    let half = classes.len().div_ceil(2);
    let mut g1 = shuffled[..half].to_vec();
    let mut g2 = shuffled[half..].to_vec();
    g1.sort_unstable();
    g2.sort_unstable();
    (g1, g2)
}

/// SVM separating the instances of `g1` (+1) from those of `g2` (-1).
pub fn train_node_classifier(
    d: &SparseDataset,
    g1: &[usize],
    g2: &[usize],
    kernel: &KernelSpec,
    c: f64,
    solver: &SolverOptions,
) -> Result<BinarySvmModel> {
    if g1.is_empty() || g2.is_empty() {
        return Err(Error::InvalidParameter(
            "both child class sets must be nonempty".into(),
        ));
    }
    let mut all: Vec<usize> = g1.iter().chain(g2).copied().collect();
    all.sort_unstable();
    let rows = d.indices_of_classes(&all);
    let vectors: Vec<&SparseVector> = rows.iter().map(|&i| d.instance(i)).collect();
    let signs: Vec<f64> = rows
        .iter()
        .map(|&i| if g1.contains(&d.label(i)) { 1.0 } else { -1.0 })
        .collect();
    train_binary(&vectors, &rows, &signs, kernel, c, solver)
}

impl ClassTree {
    pub fn class_count(&self) -> usize {
        self.nodes[self.root].classes.len()
    }

    pub fn internal_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_leaf()).count()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    pub fn layout(&self) -> TreeLayout {
        TreeLayout {
            nodes: self.nodes.clone(),
            root: self.root,
        }
    }

    /// Routes `x` from the root (`decision >= 0` goes left) and returns the
    /// leaf class with the number of classifiers evaluated.
    pub fn predict(&self, x: &SparseVector) -> (usize, usize) {
        let mut at = self.root;
        let mut evals = 0;
        loop {
            let node = &self.nodes[at];
            match (node.left, node.right, node.model_ref) {
                (Some(l), Some(r), Some(m)) => {
                    evals += 1;
                    at = if decision_value(&self.models[m], x) >= 0.0 { l } else { r };
                }
                _ => return (node.classes[0], evals),
            }
        }
    }

    /// Depth of every node, root at 0.
    pub fn depths(&self) -> Vec<usize> {
        let mut depth = vec![0; self.nodes.len()];
        let mut stack = vec![self.root];
        while let Some(i) = stack.pop() {
            for child in [self.nodes[i].left, self.nodes[i].right].into_iter().flatten() {
                depth[child] = depth[i] + 1;
                stack.push(child);
            }
        }
        depth
    }

    /// Checks the structural contract: root covers `1..=c`, children
    /// partition their parent, nodes on one layer are disjoint, leaves are
    /// singletons, `c` leaves and `c - 1` internal nodes each carrying a
    /// classifier.
    pub fn check_structure(&self, class_count: usize) -> std::result::Result<(), String> {
        let root = &self.nodes[self.root].classes;
        if *root != (1..=class_count).collect::<Vec<_>>() {
            return Err(format!("root holds {root:?}"));
        }
        if self.leaf_count() != class_count || self.internal_count() + 1 != class_count {
            return Err(format!(
                "{} leaves and {} internal nodes for {class_count} classes",
                self.leaf_count(),
                self.internal_count()
            ));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            match (n.left, n.right, n.model_ref) {
                (None, None, None) => {
                    if n.classes.len() != 1 {
                        return Err(format!("leaf {i} holds {:?}", n.classes));
                    }
                }
                (Some(l), Some(r), Some(m)) => {
                    if m >= self.models.len() {
                        return Err(format!("node {i} refers to missing model {m}"));
                    }
                    let (a, b) = (&self.nodes[l].classes, &self.nodes[r].classes);
                    if a.is_empty() || b.is_empty() || a.iter().any(|k| b.contains(k)) {
                        return Err(format!("children of node {i} overlap or are empty"));
                    }
                    let mut union: Vec<usize> = a.iter().chain(b).copied().collect();
                    union.sort_unstable();
                    if union != n.classes {
                        return Err(format!("children of node {i} do not partition it"));
                    }
                }
                _ => return Err(format!("node {i} is half internal")),
            }
        }
        let depths = self.depths();
        let max_depth = depths.iter().copied().max().unwrap_or(0);
        for layer in 0..=max_depth {
            let mut seen = std::collections::BTreeSet::new();
            for (i, n) in self.nodes.iter().enumerate() {
                if depths[i] == layer && !n.classes.iter().all(|&k| seen.insert(k)) {
                    return Err(format!("layer {layer} repeats a class"));
                }
            }
        }
        Ok(())
    }

    /// Nested grouping such as `((1 2) (3 (4 5)))` using label names.
    pub fn nested(&self, names: &LabelMap) -> String {
        fn go(t: &ClassTree, i: usize, names: &LabelMap, out: &mut String) {
            let n = &t.nodes[i];
            match (n.left, n.right) {
                (Some(l), Some(r)) => {
                    out.push('(');
                    go(t, l, names, out);
                    out.push(' ');
                    go(t, r, names, out);
                    out.push(')');
                }
                _ => out.push_str(names.name(n.classes[0])),
            }
        }
        let mut out = String::new();
        go(self, self.root, names, &mut out);
        out
    }

    /// Indented dump, one node per line.
    pub fn render(&self, names: &LabelMap) -> String {
        let mut out = String::new();
        let mut stack = vec![(self.root, 0usize)];
        while let Some((i, depth)) = stack.pop() {
            let n = &self.nodes[i];
            let labels: Vec<&str> = n.classes.iter().map(|&k| names.name(k)).collect();
            let _ = writeln!(out, "{}{{{}}}", "  ".repeat(depth), labels.join(" "));
            if let (Some(l), Some(r)) = (n.left, n.right) {
                stack.push((r, depth + 1));
                stack.push((l, depth + 1));
            }
        }
        out
    }

    /// Class sets of all internal nodes at depth `>= min_depth`.
    pub fn groups_at_depth(&self, min_depth: usize) -> Vec<Vec<usize>> {
        let depths = self.depths();
        self.nodes
            .iter()
            .enumerate()
            .filter(|(i, n)| depths[*i] >= min_depth && !n.is_leaf())
            .map(|(_, n)| n.classes.clone())
            .collect()
    }
}
