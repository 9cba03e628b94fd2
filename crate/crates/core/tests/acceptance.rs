//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL` line.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use protospan::config::RunConfig;
use protospan::encoder::ModelDims;
use protospan::episodes::{build_pools, sample_episodes, CategoryPools, EpisodeSpec, PoolCaps};
use protospan::evalreport::{run_extension, scalability_table, Ablation, Experiment, ExtensionProtocol, ExtensionSplit, ScalabilityRow};
use protospan::metatrain::{inner_loop, meta_train, reptile_update, HardNegativeConfig, MetaConfig};
use protospan::numerics::gradcheck::{compare_gradients, primitive_suite};
use protospan::numerics::tensor::cosine;
use protospan::numerics::{Graph, SeedTree, StreamRng, Tensor};
use protospan::pipeline::{write_synthetic, Pipeline};
use protospan::protomodel::{proto_repulsion_loss, span_alignment_loss, span_alignment_terms, Model, Objective, ParamKind};
use protospan::synth::{category_name, cluster_spans, ClusterSpec};
use protospan::taxonomy::{build_merge_plan, pagerank, CooccurrenceGraph, MergePlan, TypeHierarchy, TypeNode, UNKNOWN_TYPE};

fn verdict(n: usize, ok: bool, detail: &str) {
    println!("criterion {n}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

fn random_matrix(rng: &mut StreamRng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn scalar(f: impl FnOnce(&Graph) -> protospan::numerics::Var) -> f64 {
    let g = Graph::new();
    let v = f(&g);
    g.scalar(v)
}

fn cluster_pools(spec: &ClusterSpec, ratio: f64, min_support: usize, seed: u64) -> (CategoryPools, protospan::encoder::StaticEmbeddingTable) {
    let (store, table) = cluster_spans(spec).unwrap();
    let cats: Vec<String> = store.by_category.keys().cloned().collect();
    let pools = build_pools(&store, &cats, ratio, min_support, PoolCaps::default(), &SeedTree::new(seed)).unwrap();
    (pools, table)
}

/// Fixture sizes for the learning checks; the smaller ones keep the slower suites fast.
fn learning_dims(prototypes: usize) -> ModelDims {
    ModelDims {
        hidden: 32,
        representation: 64,
        prototypes,
        ..ModelDims::default()
    }
}

fn small_dims(prototypes: usize) -> ModelDims {
    ModelDims {
        hidden: 16,
        representation: 32,
        prototypes,
        ..ModelDims::default()
    }
}

#[test]
fn criterion_01_gradient_suite() {
    let t = Instant::now();
    let checks = primitive_suite(42, 10, 1e-4).unwrap();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.primitive).collect();
    let (n, m, k, d) = (3, 2, 4, 8);
    let mut rng = SeedTree::new(7).stream("full-loss");
    let inputs = [random_matrix(&mut rng, n * m, d), random_matrix(&mut rng, n * k, d)];
    let full = compare_gradients(&inputs, 1e-6, |g, v| {
        let lp = proto_repulsion_loss(g, v[0])?;
        let ls = span_alignment_loss(g, v[0], v[1], n, m, k)?;
        g.add(lp, ls)
    })
    .unwrap()
    .max_relative_error();
    let elapsed = t.elapsed().as_secs_f64();
    verdict(
        1,
        failed.is_empty() && full < 1e-4 && elapsed < 60.0,
        &format!("{} primitives, failures {failed:?}, full loss rel. error {full:.2e}, {elapsed:.1}s", checks.len()),
    );
}

#[test]
fn criterion_02_loss_bounds() {
    let seeds = SeedTree::new(2);
    let mut violations = 0;
    for case in 0..1000u64 {
        let mut rng = seeds.indexed("config", case);
        let (n, m, k, d) = (
            rng.random_range(1..6),
            rng.random_range(1..4),
            rng.random_range(1..6),
            rng.random_range(2..10),
        );
        let p = random_matrix(&mut rng, n * m, d);
        let z = random_matrix(&mut rng, n * k, d);
        if n * m >= 2 {
            let lp = scalar(|g| proto_repulsion_loss(g, g.constant(p.clone())).unwrap());
            if !(0.0..=2.0).contains(&lp) {
                violations += 1;
            }
        }
        let g = Graph::new();
        let terms = span_alignment_terms(&g, g.constant(p.clone()), g.constant(z.clone()), n, m, k).unwrap();
        for t in terms {
            let v = g.scalar(t);
            if !(0.0..=1.0 / k as f64).contains(&v) {
                violations += 1;
            }
        }
    }
    let antipodal = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]]).unwrap();
    let identical = Tensor::from_rows(&[vec![0.3, 0.4, 0.5], vec![0.3, 0.4, 0.5]]).unwrap();
    let lp_anti = scalar(|g| proto_repulsion_loss(g, g.constant(antipodal.clone())).unwrap());
    let lp_same = scalar(|g| proto_repulsion_loss(g, g.constant(identical.clone())).unwrap());
    // one category: the ratio is exactly 1/K up to the stabiliser
    let mut worst_single = 0.0f64;
    let mut rng = seeds.stream("single");
    for k in 1..8 {
        let p = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        let z = Tensor::from_rows(&(0..k).map(|_| vec![-1.0, -1.0, rng.random_range(-1.0..1.0), 0.5]).collect::<Vec<_>>()).unwrap();
        let ls = scalar(|g| span_alignment_loss(g, g.constant(p.clone()), g.constant(z.clone()), 1, 2, k).unwrap());
        worst_single = worst_single.max((ls - 1.0 / k as f64).abs());
    }
    let ok = violations == 0 && lp_anti.abs() <= 1e-12 && (lp_same - 2.0).abs() <= 1e-12 && worst_single <= 1e-12;
    verdict(
        2,
        ok,
        &format!("1000 configs, {violations} bound violations; antipodal {lp_anti:.1e}, identical {lp_same}, N=1 error {worst_single:.1e}"),
    );
}

fn naive_span_loss(p: &Tensor, z: &Tensor, n: usize, m: usize, k: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..n {
        let (mut own, mut all) = (0.0, 0.0);
        for j in 0..n * k {
            let mut best = f64::INFINITY;
            for r in c * m..(c + 1) * m {
                best = best.min((1.0 - cosine(p.row(r), z.row(j))).powi(2));
            }
            all += best;
            if j / k == c {
                own += best;
            }
        }
        total += own / k as f64 / (all + 1e-12);
    }
    total
}

/// Dense Google-matrix power iteration: columns of isolated vertices are uniform.
fn dense_pagerank(w: &[Vec<f64>], d: f64) -> Vec<f64> {
    let n = w.len();
    let strength: Vec<f64> = w.iter().map(|r| r.iter().sum()).collect();
    let mut google = vec![vec![0.0; n]; n];
    for (j, col_strength) in strength.iter().enumerate() {
        for (i, row) in google.iter_mut().enumerate() {
            let t = if *col_strength == 0.0 { 1.0 / n as f64 } else { w[j][i] / col_strength };
            row[j] = d * t + (1.0 - d) / n as f64;
        }
    }
    let mut r = vec![1.0 / n as f64; n];
    for _ in 0..100_000 {
        let next: Vec<f64> = google.iter().map(|row| row.iter().zip(&r).map(|(a, b)| a * b).sum()).collect();
        let change = next.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        r = next;
        if change < 1e-16 {
            break;
        }
    }
    let s: f64 = r.iter().sum();
    r.iter().map(|x| x / s).collect()
}

#[test]
#[allow(clippy::needless_range_loop)]
fn criterion_03_oracles() {
    let seeds = SeedTree::new(3);
    let mut worst_span = 0.0f64;
    for case in 0..100u64 {
        let mut rng = seeds.indexed("span", case);
        let (n, m, k, d) = (
            rng.random_range(1..6),
            rng.random_range(1..5),
            rng.random_range(1..6),
            rng.random_range(2..12),
        );
        let p = random_matrix(&mut rng, n * m, d);
        let z = random_matrix(&mut rng, n * k, d);
        let fast = scalar(|g| span_alignment_loss(g, g.constant(p.clone()), g.constant(z.clone()), n, m, k).unwrap());
        worst_span = worst_span.max((fast - naive_span_loss(&p, &z, n, m, k)).abs());
    }
    let mut worst_rank = 0.0f64;
    for case in 0..50u64 {
        let mut rng = seeds.indexed("graph", case);
        let n = rng.random_range(1..=20);
        let density = rng.random_range(0.05..0.9);
        let mut w = vec![vec![0u64; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(density) {
                    let x = rng.random_range(1..20);
                    w[i][j] = x;
                    w[j][i] = x;
                }
            }
        }
        let names: Vec<String> = (0..n).map(|i| format!("t{i:02}")).collect();
        let graph = CooccurrenceGraph::from_weights(names.clone(), w.iter().flatten().copied().collect()).unwrap();
        let fast = pagerank(&graph, 0.85, 1e-14, 100_000).unwrap();
        let wf: Vec<Vec<f64>> = w.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
        for (name, o) in names.iter().zip(dense_pagerank(&wf, 0.85)) {
            worst_rank = worst_rank.max((fast[name] - o).abs());
        }
    }
    verdict(
        3,
        worst_span <= 1e-12 && worst_rank <= 1e-8,
        &format!("span loss max abs diff {worst_span:.1e} over 100 cases, pagerank max abs diff {worst_rank:.1e} over 50 graphs"),
    );
}

#[test]
fn criterion_04_reptile() {
    let spec = ClusterSpec::balanced(3, 40, 4);
    let (pools, table) = cluster_pools(&spec, 0.5, 4, 4);
    let dims = ModelDims {
        hidden: 6,
        representation: 8,
        output: 8,
        prototypes: 3,
        ..ModelDims::default()
    };
    let seeds = SeedTree::new(4);
    let espec = EpisodeSpec {
        ways: 3,
        shots: 4,
        count: 10,
        eval_per_category: 4,
    };
    let tasks = sample_episodes(&pools, espec, &seeds).unwrap();
    let cfg = MetaConfig {
        outer_epochs: 10,
        patience: 10,
        ..MetaConfig::default()
    };
    let theta0 = Model::new(pools.names(), dims, 0.1, &seeds).unwrap();
    let fitted = inner_loop(&theta0, &tasks[0], &table, &cfg, cfg.inner_epochs, &seeds).unwrap().model;
    let non_proto = |a: &Model, b: &Model| {
        a.params
            .iter()
            .zip(&b.params)
            .filter(|(p, _)| p.kind != ParamKind::Prototype)
            .all(|(p, q)| p.value.data() == q.value.data())
    };
    let mut copy = theta0.clone();
    reptile_update(&mut copy, &theta0, &fitted, 1.0).unwrap();
    let mut noop = theta0.clone();
    reptile_update(&mut noop, &theta0, &fitted, 0.0).unwrap();
    let algebra = non_proto(&copy, &fitted) && non_proto(&noop, &theta0) && !non_proto(&theta0, &fitted);

    let mut theta = theta0.clone();
    let mut worst = 0.0f64;
    for epoch in 0..cfg.outer_epochs {
        let task = &tasks[epoch % tasks.len()];
        let end = inner_loop(&theta, task, &table, &cfg, cfg.inner_epochs, &SeedTree::new(epoch as u64)).unwrap().model;
        let start = theta.clone();
        reptile_update(&mut theta, &start, &end, cfg.meta_step).unwrap();
        let p = theta.prototypes();
        for r in 0..p.rows() {
            worst = worst.max((p.row(r).iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs());
        }
    }
    let trained = meta_train(theta0, &tasks, &pools.validation_set(4), &table, &cfg, &seeds, 0, None).unwrap();
    let p = trained.best.prototypes();
    for r in 0..p.rows() {
        worst = worst.max((p.row(r).iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs());
    }
    verdict(
        4,
        algebra && worst <= 1e-6,
        &format!("copy/no-op identities {}, worst prototype norm deviation {worst:.1e} over 10 epochs", if algebra { "exact" } else { "broken" }),
    );
}

#[test]
fn criterion_05_synthetic_learning() {
    let t = Instant::now();
    let (pools, table) = cluster_pools(&ClusterSpec::balanced(5, 200, 42), 0.5, 10, 42);
    let exp = Experiment {
        pools: &pools,
        table: &table,
        spec: EpisodeSpec {
            ways: 5,
            shots: 10,
            count: 50,
            eval_per_category: 20,
        },
        dims: learning_dims(10),
        dropout: 0.1,
        meta: MetaConfig {
            outer_epochs: 50,
            patience: 50,
            ..MetaConfig::default()
        },
        hard_negatives: HardNegativeConfig::default(),
        eval_per_category: 20,
        seed: 42,
    };
    let r = exp.run(Ablation::HardNegOff, None, serde_json::Value::Null).unwrap();
    let history = r.outcome.history();
    let reached = history.iter().find(|h| h.val_f1 >= 0.95).map(|h| h.epoch + 1);
    let elapsed = t.elapsed().as_secs_f64();
    verdict(
        5,
        reached.is_some() && elapsed < 300.0,
        &format!(
            "best validation macro-F1 {:.3}, first >= 0.95 at epoch {reached:?}, query macro-F1 {:.3}, {elapsed:.0}s",
            r.outcome.best_f1(),
            r.report.macro_f1
        ),
    );
}

#[test]
fn criterion_06_ablation_direction() {
    let seeds = [42u64, 123, 999];
    let mut contrastive = Vec::new();
    let mut cross_entropy = Vec::new();
    let mut single = Vec::new();
    for &seed in &seeds {
        let mut spec = ClusterSpec::balanced(5, 40, seed);
        spec.counts[0] = 800;
        spec.modes = vec![4];
        spec.noise = 0.05;
        let (pools, table) = cluster_pools(&spec, 0.5, 5, seed);
        let run = |m: usize, objective: Objective| {
            let exp = Experiment {
                pools: &pools,
                table: &table,
                spec: EpisodeSpec {
                    ways: 5,
                    shots: 5,
                    count: 50,
                    eval_per_category: usize::MAX,
                },
                dims: learning_dims(m),
                dropout: 0.1,
                meta: MetaConfig {
                    outer_epochs: 60,
                    patience: 60,
                    objective,
                    ..MetaConfig::default()
                },
                hard_negatives: HardNegativeConfig::default(),
                eval_per_category: usize::MAX,
                seed,
            };
            exp.run(Ablation::HardNegOff, None, serde_json::Value::Null).unwrap().report.macro_f1
        };
        contrastive.push(run(10, Objective::Contrastive));
        cross_entropy.push(run(10, Objective::CrossEntropy));
        single.push(run(1, Objective::Contrastive));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ce_lower = contrastive.iter().zip(&cross_entropy).all(|(c, e)| e < c);
    let multi_ok = mean(&contrastive) >= mean(&single);
    verdict(
        6,
        ce_lower && multi_ok,
        &format!(
            "query macro-F1 per seed: contrastive M=10 {contrastive:.3?}, cross-entropy {cross_entropy:.3?}, M=1 {single:.3?}; CE strictly lower: {ce_lower}, mean M=10 >= M=1: {multi_ok}"
        ),
    );
}

/// 30-node hierarchy: (id, parent, frequency). Depth follows from the parent.
const FIXTURE: &[(&str, &str, u64)] = &[
    ("A", "-", 0),
    ("A1", "A", 40),
    ("A1a", "A1", 300),
    ("A1a1", "A1a", 30),
    ("A1a1x", "A1a1", 60),
    ("A1a1y", "A1a1", 10),
    ("A1a2", "A1a", 120),
    ("A1b", "A1", 80),
    ("A1b1", "A1b", 15),
    ("A2", "A", 150),
    ("A2a", "A2", 55),
    ("A2b", "A2", 45),
    ("A2b1", "A2b", 20),
    ("A2b1x", "A2b1", 70),
    ("A3", "A", 5),
    ("A3a", "A3", 20),
    ("A3b", "A3", 30),
    ("B", "-", 20),
    ("B1", "B", 30),
    ("B1a", "B1", 25),
    ("B2", "B", 10),
    ("C", "-", 500),
    ("C1", "C", 90),
    ("C1a", "C1", 10),
    ("C1a1", "C1a", 95),
    ("C1a1x", "C1a1", 5),
    ("C2", "C", 200),
    ("C2a", "C2", 49),
    ("C2b", "C2", 51),
    ("C2b1", "C2b", 50),
];

fn fixture_hierarchy() -> TypeHierarchy {
    let mut depth: BTreeMap<&str, usize> = BTreeMap::new();
    let nodes: Vec<TypeNode> = FIXTURE
        .iter()
        .map(|&(id, parent, frequency)| {
            let parent = (parent != "-").then(|| parent.to_string());
            let d = parent.as_deref().map_or(0, |p| depth[p] + 1);
            depth.insert(id, d);
            TypeNode {
                id: id.to_string(),
                name: id.to_string(),
                parent,
                depth: d,
                frequency,
            }
        })
        .collect();
    TypeHierarchy::new(nodes).unwrap()
}

fn expected_plan(
    depth_limit: usize,
    min_freq: u64,
    categories: &[(&str, u64)],
    unknown_frequency: u64,
    mapping: &[(&str, &str)],
) -> MergePlan {
    MergePlan {
        depth_limit,
        min_freq,
        mapping: mapping.iter().map(|(t, c)| (t.to_string(), c.to_string())).collect(),
        categories: categories
            .iter()
            .map(|&(name, frequency)| protospan::taxonomy::CategoryStat {
                name: name.to_string(),
                type_id: name.to_string(),
                frequency,
            })
            .collect(),
        unknown_frequency,
    }
}

#[test]
fn criterion_07_taxonomy_fixture() {
    let h = fixture_hierarchy();
    assert_eq!(h.len(), 30);
    const U: &str = UNKNOWN_TYPE;
    let shallow = expected_plan(
        3,
        100,
        &[
            ("C", 500),
            ("A1a", 300),
            ("C2", 249),
            ("A2", 205),
            ("A1", 135),
            ("A2b", 135),
            ("A1a2", 120),
            ("C2b", 101),
            ("A1a1", 100),
            ("C1", 100),
            ("C1a1", 100),
        ],
        140,
        &[
            ("A", U),
            ("A1", "A1"),
            ("A1a", "A1a"),
            ("A1a1", "A1a1"),
            ("A1a1x", "A1a1"),
            ("A1a1y", "A1a1"),
            ("A1a2", "A1a2"),
            ("A1b", "A1"),
            ("A1b1", "A1"),
            ("A2", "A2"),
            ("A2a", "A2"),
            ("A2b", "A2b"),
            ("A2b1", "A2b"),
            ("A2b1x", "A2b"),
            ("A3", U),
            ("A3a", U),
            ("A3b", U),
            ("B", U),
            ("B1", U),
            ("B1a", U),
            ("B2", U),
            ("C", "C"),
            ("C1", "C1"),
            ("C1a", "C1"),
            ("C1a1", "C1a1"),
            ("C1a1x", "C1a1"),
            ("C2", "C2"),
            ("C2a", "C2"),
            ("C2b", "C2b"),
            ("C2b1", "C2b"),
        ],
    );
    let deep = expected_plan(
        4,
        50,
        &[
            ("C", 500),
            ("A1a", 340),
            ("C2", 249),
            ("A2", 150),
            ("A1a2", 120),
            ("C1", 100),
            ("C1a1", 100),
            ("A1b", 95),
            ("A2b1x", 70),
            ("A2b", 65),
            ("A1a1x", 60),
            ("A2a", 55),
            ("A3", 55),
            ("B1", 55),
            ("C2b", 51),
            ("C2b1", 50),
        ],
        70,
        &[
            ("A", U),
            ("A1", U),
            ("A1a", "A1a"),
            ("A1a1", "A1a"),
            ("A1a1x", "A1a1x"),
            ("A1a1y", "A1a"),
            ("A1a2", "A1a2"),
            ("A1b", "A1b"),
            ("A1b1", "A1b"),
            ("A2", "A2"),
            ("A2a", "A2a"),
            ("A2b", "A2b"),
            ("A2b1", "A2b"),
            ("A2b1x", "A2b1x"),
            ("A3", "A3"),
            ("A3a", "A3"),
            ("A3b", "A3"),
            ("B", U),
            ("B1", "B1"),
            ("B1a", "B1"),
            ("B2", U),
            ("C", "C"),
            ("C1", "C1"),
            ("C1a", "C1"),
            ("C1a1", "C1a1"),
            ("C1a1x", "C1a1"),
            ("C2", "C2"),
            ("C2a", "C2"),
            ("C2b", "C2b"),
            ("C2b1", "C2b1"),
        ],
    );
    let got_shallow = build_merge_plan(&h, 3, 100).unwrap();
    let got_deep = build_merge_plan(&h, 4, 50).unwrap();
    if got_shallow != shallow {
        println!("depth 3 / min 100 mismatch:\n{got_shallow:#?}");
    }
    if got_deep != deep {
        println!("depth 4 / min 50 mismatch:\n{got_deep:#?}");
    }
    verdict(
        7,
        got_shallow == shallow && got_deep == deep,
        &format!(
            "depth-3/min-100: {} categories, roots A and B discarded; depth-4/min-50: {} categories",
            got_shallow.categories.len(),
            got_deep.categories.len()
        ),
    );
}

fn files_under(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn pipeline_run(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let cfg = RunConfig::load(&write_synthetic(dir, 4, 120, 42).unwrap()).unwrap();
    assert_eq!(cfg.seed, 42);
    let mut p = Pipeline::new(cfg);
    p.workdir = dir.join("work");
    p.run_all().unwrap();
    files_under(&p.workdir)
}

#[test]
fn criterion_08_pipeline_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline_run(a.path());
    let second = pipeline_run(b.path());
    let differing: Vec<&String> = first.keys().filter(|k| second.get(*k) != first.get(*k)).collect();
    let has = |prefix: &str| first.keys().any(|k| k.starts_with(prefix));
    let ok = first.len() == second.len() && differing.is_empty() && has("checkpoints/model.json") && has("reports/eval.json");
    verdict(8, ok, &format!("{} artifacts compared, differing: {differing:?}", first.len()));
}

#[test]
fn criterion_09_scalability() {
    let large = 25;
    let (pools, table) = cluster_pools(&ClusterSpec::balanced(large, 40, 9), 0.5, 5, 9);
    let small_names: Vec<String> = (0..10).map(category_name).collect();
    let small = pools.restricted(&small_names).unwrap();
    let run = |pools: &CategoryPools| {
        let exp = Experiment {
            pools,
            table: &table,
            spec: EpisodeSpec {
                ways: pools.categories.len(),
                shots: 5,
                count: 30,
                eval_per_category: 10,
            },
            dims: small_dims(10),
            dropout: 0.1,
            meta: MetaConfig {
                outer_epochs: 30,
                patience: 30,
                ..MetaConfig::default()
            },
            hard_negatives: HardNegativeConfig::default(),
            eval_per_category: 10,
            seed: 9,
        };
        exp.run(Ablation::HardNegOff, None, serde_json::Value::Null).unwrap().report.macro_f1
    };
    let (f_small, f_large) = (run(&small), run(&pools));
    let row = ScalabilityRow::new("synthetic clusters", 10, large, f_small, f_large);
    println!("{}", scalability_table(std::slice::from_ref(&row)));
    verdict(
        9,
        row.relative_drop_pct.is_finite() && row.delta.is_finite(),
        &format!("F1 {f_small:.3} -> {f_large:.3}, relative drop {:.1}%", row.relative_drop_pct),
    );
}

#[test]
fn criterion_10_extension() {
    let (pools, table) = cluster_pools(&ClusterSpec::balanced(6, 60, 10), 0.5, 5, 10);
    let exp = Experiment {
        pools: &pools,
        table: &table,
        spec: EpisodeSpec {
            ways: 6,
            shots: 5,
            count: 40,
            eval_per_category: 15,
        },
        dims: small_dims(10),
        dropout: 0.1,
        meta: MetaConfig::default(),
        hard_negatives: HardNegativeConfig::default(),
        eval_per_category: 15,
        seed: 10,
    };
    let protocol = ExtensionProtocol {
        splits: vec![ExtensionSplit {
            name: "two held out".into(),
            held_out: vec![category_name(4), category_name(5)],
        }],
        phase1_epochs: 50,
        phase2_epochs: 50,
        seeds: vec![42, 123, 999],
    };
    let report = run_extension(&exp, &protocol).unwrap();
    println!("{}", report.to_markdown());
    let leaks: usize = report.runs.iter().map(|r| r.phase1_held_out_predictions).sum();
    let drops: Vec<f64> = report.runs.iter().map(|r| 100.0 * (r.phase1_base_f1 - r.phase2_base_f1)).collect();
    verdict(
        10,
        leaks == 0 && drops.iter().all(|&d| d <= 5.0),
        &format!("held-out predictions in phase 1: {leaks}; base F1 drop per seed (points): {drops:.2?}"),
    );
}
