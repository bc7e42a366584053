//! Sequential versus rayon-parallel timings of the data-parallel kernels:
//! Gram assembly, exhaustive split enumeration and batch prediction.
//!
//! With the `parallel` feature each kernel runs inside a one-thread pool
//! and inside the default pool. Without it only the sequential path exists.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use msm_tree::data::{LabelMap, SparseDataset, SparseVector};
use msm_tree::harness::evaluate;
use msm_tree::kernel::{gram, KernelSpec};
use msm_tree::msm::{msm0_brute_force, NodeProblem};
use msm_tree::svm::SolverOptions;
use msm_tree::tree::{build_tree, BuildOptions, Splitter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ring(classes: usize, per_class: usize, seed: u64) -> SparseDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for k in 0..classes {
        let a = k as f64 * std::f64::consts::TAU / classes as f64;
        for _ in 0..per_class {
            xs.push(SparseVector::from_dense(&[
                a.cos() + rng.gen_range(-0.3..0.3),
                a.sin() + rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            ]));
            ys.push(k + 1);
        }
    }
    SparseDataset::new(xs, ys, LabelMap::identity(classes)).expect("valid data")
}

#[cfg(feature = "parallel")]
fn modes() -> Vec<(&'static str, rayon::ThreadPool)> {
    let pool = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
    };
    vec![("sequential", pool(1)), ("parallel", pool(0))]
}

fn run_modes(c: &mut Criterion, group: &str, work: impl Fn() + Sync) {
    let mut g = c.benchmark_group(group);
    #[cfg(feature = "parallel")]
    for (name, pool) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(&work))
        });
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| b.iter(&work));
    g.finish();
}

fn gram_assembly(c: &mut Criterion) {
    let d = ring(8, 100, 1);
    let rows: Vec<usize> = (0..d.len()).collect();
    let kernel = KernelSpec::gaussian(1.0).expect("valid width");
    run_modes(c, "gram_800", || {
        std::hint::black_box(gram(&kernel, &d, &rows).expect("gram"));
    });
}

fn split_enumeration(c: &mut Criterion) {
    let d = ring(7, 15, 2);
    let classes: Vec<usize> = (1..=7).collect();
    let kernel = KernelSpec::gaussian(1.0).expect("valid width");
    let p = NodeProblem::new(&d, &classes, &kernel, 10.0, None).expect("node");
    let solver = SolverOptions::default();
    run_modes(c, "enumerate_7_classes", || {
        std::hint::black_box(msm0_brute_force(&p, &solver).expect("oracle"));
    });
}

fn batch_prediction(c: &mut Criterion) {
    let train = ring(8, 30, 3);
    let test = ring(8, 250, 4);
    let kernel = KernelSpec::gaussian(1.0).expect("valid width");
    let opts = BuildOptions {
        splitter: Splitter::Random { seed: 0 },
        solver: SolverOptions::default(),
    };
    let tree = build_tree(&train, &kernel, 10.0, &opts).expect("tree").tree;
    run_modes(c, "predict_2000", || {
        std::hint::black_box(evaluate(&tree, &test).expect("evaluation"));
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = gram_assembly, split_enumeration, batch_prediction
}
criterion_main!(benches);
