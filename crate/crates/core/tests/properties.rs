use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use protospan::corpus::{normalize_str, tokenize};
use protospan::episodes::{build_pools, PoolCaps};
use protospan::evalreport::macro_f1;
use protospan::numerics::{Graph, SeedTree, Tensor};
use protospan::protomodel::{predict, proto_repulsion_loss, span_alignment_terms, PredictRule};
use protospan::spans::{generate_spans, span_count};
use protospan::synth::{category_name, cluster_spans, ClusterSpec};
use protospan::taxonomy::{build_merge_plan, disambiguate, pagerank, CooccurrenceGraph, TypeHierarchy, TypeNode, UNKNOWN_TYPE};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..1.0, rows * cols)
        .prop_filter("rows must be non-zero", move |d| {
            d.chunks(cols).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        })
        .prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn hierarchy() -> impl Strategy<Value = TypeHierarchy> {
    (2usize..25)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(any::<prop::sample::Index>(), n),
                prop::collection::vec(prop::bool::weighted(0.15), n),
                prop::collection::vec(0u64..200, n),
            )
        })
        .prop_map(|(parents, roots, freqs)| {
            let mut nodes: Vec<TypeNode> = Vec::new();
            for i in 0..parents.len() {
                let parent = if i == 0 || roots[i] { None } else { Some(parents[i].index(i)) };
                let depth = parent.map_or(0, |p| nodes[p].depth + 1);
                nodes.push(TypeNode {
                    id: format!("T{i:02}"),
                    name: format!("Type {i}"),
                    parent: parent.map(|p| format!("T{p:02}")),
                    depth,
                    frequency: freqs[i],
                });
            }
            TypeHierarchy::new(nodes).unwrap()
        })
}

fn cooccurrence(max: usize) -> impl Strategy<Value = CooccurrenceGraph> {
    (1..=max).prop_flat_map(|n| {
        prop::collection::vec(0u64..6, n * (n - 1) / 2).prop_map(move |upper| {
            let mut w = vec![0; n * n];
            let mut it = upper.into_iter();
            for i in 0..n {
                for j in i + 1..n {
                    let v = it.next().unwrap();
                    w[i * n + j] = v;
                    w[j * n + i] = v;
                }
            }
            CooccurrenceGraph::from_weights((0..n).map(|i| format!("v{i:02}")).collect(), w).unwrap()
        })
    })
}

/// Signed permutation: an orthogonal map that keeps cosines intact.
fn rotate(t: &Tensor, perm: &[usize], signs: &[bool]) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..t.rows())
        .map(|r| perm.iter().zip(signs).map(|(&c, &s)| if s { -t.get(r, c) } else { t.get(r, c) }).collect())
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn losses(p: &Tensor, z: &Tensor, n: usize, m: usize, k: usize) -> (f64, Vec<f64>) {
    let g = Graph::new();
    let pv = g.constant(p.clone());
    let zv = g.constant(z.clone());
    let proto = if p.rows() > 1 { g.scalar(proto_repulsion_loss(&g, pv).unwrap()) } else { 0.0 };
    let terms = span_alignment_terms(&g, pv, zv, n, m, k).unwrap();
    (proto, terms.into_iter().map(|t| g.scalar(t)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalisation_is_idempotent(s in "[ a-zA-Z0-9α-ω.,;()\\-\u{00e9}\u{2013}\u{00a0}\t]{0,60}") {
        let once = normalize_str(&s);
        prop_assert_eq!(normalize_str(&once), once);
    }

    #[test]
    fn tokens_cover_text_exactly(s in "[ a-zA-Z0-9.,;()\\-]{0,80}") {
        let chars: Vec<char> = s.chars().collect();
        let mut last_end = 0;
        for sent in tokenize(&s) {
            prop_assert!(!sent.tokens.is_empty());
            for t in &sent.tokens {
                prop_assert!(t.start >= last_end && t.end > t.start);
                let slice: String = chars[t.start..t.end].iter().collect();
                prop_assert_eq!(&slice, &t.text);
                prop_assert!(!t.text.chars().any(char::is_whitespace));
                last_end = t.end;
            }
        }
        let non_space: String = chars.iter().filter(|c| !c.is_whitespace()).collect();
        let joined: String = tokenize(&s).iter().flat_map(|s| s.tokens.iter().map(|t| t.text.clone())).collect();
        prop_assert_eq!(joined, non_space);
    }

    #[test]
    fn span_enumeration_matches_count(words in prop::collection::vec("[a-z]{1,5}", 1..20), max_len in 1usize..10) {
        let text = words.join(" ");
        for sent in tokenize(&text) {
            let n = sent.tokens.len();
            let spans = generate_spans(&sent, max_len);
            prop_assert_eq!(spans.len(), span_count(n, max_len));
            let ids: BTreeSet<String> = spans.iter().map(|s| s.id()).collect();
            prop_assert_eq!(ids.len(), spans.len());
            for s in &spans {
                prop_assert!(!s.is_empty() && s.len() <= max_len);
            }
        }
    }

    #[test]
    fn merge_plan_conserves_mass(h in hierarchy(), depth in 1usize..5, min_freq in 1u64..300) {
        let plan = build_merge_plan(&h, depth, min_freq).unwrap();
        let total: u64 = h.nodes().map(|n| n.frequency).sum();
        let kept: u64 = plan.categories.iter().map(|c| c.frequency).sum();
        prop_assert_eq!(kept + plan.unknown_frequency, total);
        prop_assert!(plan.categories.iter().all(|c| c.frequency >= min_freq));
        prop_assert_eq!(plan.mapping.len(), h.len());
        let labels: BTreeSet<String> = plan.labels().into_iter().collect();
        prop_assert!(plan.mapping.values().all(|l| labels.contains(l)));
        for c in &plan.categories {
            prop_assert!(h.get(&c.type_id).unwrap().depth <= depth);
        }
        prop_assert_eq!(build_merge_plan(&h, depth, min_freq).unwrap(), plan);
    }

    #[test]
    fn pagerank_is_a_distribution_and_scale_free(g in cooccurrence(12), factor in 1u64..5) {
        let s = pagerank(&g, 0.85, 1e-12, 1000).unwrap();
        let sum: f64 = s.values().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(s.values().all(|&x| x > 0.0));
        let scaled = CooccurrenceGraph::from_weights(g.vertices.clone(), g.weights.iter().map(|w| w * factor).collect()).unwrap();
        let s2 = pagerank(&scaled, 0.85, 1e-12, 1000).unwrap();
        for (k, v) in &s {
            prop_assert!((v - s2[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn disambiguation_ignores_monotone_rescaling(
        scores in prop::collection::btree_map("[a-e]", 0.01f64..1.0, 1..5),
        extra in prop::collection::vec("[a-g]", 1..4),
    ) {
        let candidates: Vec<String> = scores.keys().cloned().chain(extra).collect();
        let before = disambiguate(&candidates, &scores).unwrap();
        let transformed: BTreeMap<String, f64> = scores.iter().map(|(k, v)| (k.clone(), 3.0 * v * v)).collect();
        prop_assert_eq!(disambiguate(&candidates, &transformed).unwrap(), before);
    }

    #[test]
    fn loss_bounds_and_rotation_invariance(
        (n, m, k, p, z) in (1usize..4, 1usize..3, 1usize..4)
            .prop_flat_map(|(n, m, k)| (Just(n), Just(m), Just(k), matrix(n * m, 5), matrix(n * k, 5))),
    ) {
        let (proto, terms) = losses(&p, &z, n, m, k);
        prop_assert!((0.0..=2.0 + 1e-12).contains(&proto));
        for t in &terms {
            prop_assert!(*t >= 0.0 && *t <= 1.0 / k as f64 + 1e-12);
        }
        let perm = [3, 0, 4, 1, 2];
        let signs = [true, false, false, true, false];
        let (proto_r, terms_r) = losses(&rotate(&p, &perm, &signs), &rotate(&z, &perm, &signs), n, m, k);
        prop_assert!((proto - proto_r).abs() < 1e-12);
        for (a, b) in terms.iter().zip(&terms_r) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_ignores_positive_scaling(p in matrix(6, 4), z in prop::collection::vec(-1.0f64..1.0, 4), c in 0.01f64..100.0) {
        prop_assume!(z.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        let scaled: Vec<f64> = z.iter().map(|x| x * c).collect();
        for rule in [PredictRule::Max, PredictRule::Mean] {
            let (a, sa) = predict(&z, &p, 2, rule);
            let (b, sb) = predict(&scaled, &p, 2, rule);
            prop_assert_eq!(a, b);
            prop_assert!((sa - sb).abs() < 1e-12);
        }
    }

    #[test]
    fn macro_f1_is_permutation_invariant(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40), shift in 0usize..4) {
        let (pred, gold): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let base = macro_f1(&pred, &gold, 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&base));
        let rev_p: Vec<usize> = pred.iter().rev().copied().collect();
        let rev_g: Vec<usize> = gold.iter().rev().copied().collect();
        prop_assert!((macro_f1(&rev_p, &rev_g, 4).unwrap() - base).abs() < 1e-12);
        let relabel = |x: &usize| (x + shift) % 4;
        let rp: Vec<usize> = pred.iter().map(relabel).collect();
        let rg: Vec<usize> = gold.iter().map(relabel).collect();
        prop_assert!((macro_f1(&rp, &rg, 4).unwrap() - base).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pools_are_disjoint(ratio in 0.3f64..=0.8, seed in any::<u64>(), per in 10usize..60) {
        let (store, _) = cluster_spans(&ClusterSpec::balanced(3, per, 1)).unwrap();
        let mut names: Vec<String> = (0..3).map(category_name).collect();
        names.push(UNKNOWN_TYPE.to_string());
        let pools = build_pools(&store, &names[..3], ratio, 1, PoolCaps::default(), &SeedTree::new(seed)).unwrap();
        for pool in &pools.categories {
            let ids = |v: &[protospan::spans::MarkedSpan]| v.iter().map(|s| s.id()).collect::<BTreeSet<_>>();
            let (s, v, q) = (ids(&pool.support), ids(&pool.validation), ids(&pool.query));
            prop_assert!(s.is_disjoint(&v) && s.is_disjoint(&q) && v.is_disjoint(&q));
            prop_assert_eq!(s.len() + v.len() + q.len(), per);
            prop_assert!(pool.support.iter().chain(&pool.validation).chain(&pool.query).all(|x| x.label == pool.name));
        }
    }
}
