//! Semantic-type taxonomy: pruning the type hierarchy into a fixed label set
//! and resolving multi-label entities by weighted PageRank centrality.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};

/// Label for spans and annotations that fall outside the final category set.
pub const UNKNOWN_TYPE: &str = "UnknownType";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeNode {
    pub id: String,
    pub name: String,
    pub parent: Option<String>,
    pub depth: usize,
    pub frequency: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeHierarchy {
    nodes: BTreeMap<String, TypeNode>,
}

impl TypeHierarchy {
    /// Build and validate: parents exist, `depth(child) = depth(parent) + 1`, roots at depth 0.
    pub fn new(nodes: impl IntoIterator<Item = TypeNode>) -> Result<Self> {
        let nodes: BTreeMap<String, TypeNode> = nodes.into_iter().map(|n| (n.id.clone(), n)).collect();
        for n in nodes.values() {
            match &n.parent {
                None if n.depth != 0 => {
                    return Err(Error::Taxonomy(format!("root `{}` has depth {}", n.id, n.depth)));
                }
                None => {}
                Some(p) => {
                    let parent = nodes
                        .get(p)
                        .ok_or_else(|| Error::Taxonomy(format!("orphan node `{}`: parent `{p}` not found", n.id)))?;
                    if parent.depth + 1 != n.depth {
                        return Err(Error::Taxonomy(format!(
                            "node `{}` at depth {} under `{p}` at depth {}",
                            n.id, n.depth, parent.depth
                        )));
                    }
                }
            }
        }
        Ok(Self { nodes })
    }

    /// Parse the tab-separated `type-id, parent-id|-, depth, name` format.
    pub fn parse(input: &str, source: &str) -> Result<Self> {
        let mut nodes = Vec::new();
        for (i, line) in input.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                message,
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 tab-separated fields, got {}", f.len())));
            }
            let depth = f[2].trim().parse().map_err(|_| err(format!("bad depth `{}`", f[2])))?;
            nodes.push(TypeNode {
                id: f[0].trim().to_string(),
                parent: match f[1].trim() {
                    "-" | "" => None,
                    p => Some(p.to_string()),
                },
                depth,
                name: f[3].trim().to_string(),
                frequency: 0,
            });
        }
        Self::new(nodes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_tsv(&self) -> String {
        self.nodes
            .values()
            .map(|n| format!("{}\t{}\t{}\t{}\n", n.id, n.parent.as_deref().unwrap_or("-"), n.depth, n.name))
            .collect()
    }

    /// Replace node frequencies; ids missing from the hierarchy are an error.
    pub fn with_frequencies(mut self, counts: &BTreeMap<String, u64>) -> Result<Self> {
        for n in self.nodes.values_mut() {
            n.frequency = 0;
        }
        for (id, &c) in counts {
            self.nodes
                .get_mut(id)
                .ok_or_else(|| Error::Taxonomy(format!("corpus type `{id}` is not in the hierarchy")))?
                .frequency = c;
        }
        Ok(self)
    }

    pub fn get(&self, id: &str) -> Option<&TypeNode> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TypeNode> {
        self.nodes.values()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn ancestor_at_depth<'a>(&'a self, mut node: &'a TypeNode, depth: usize) -> &'a TypeNode {
        while node.depth > depth {
            node = &self.nodes[node.parent.as_ref().expect("validated depth chain")];
        }
        node
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryStat {
    pub name: String,
    pub type_id: String,
    pub frequency: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergePlan {
    pub depth_limit: usize,
    pub min_freq: u64,
    /// type-id → final category name (or [`UNKNOWN_TYPE`])
    pub mapping: BTreeMap<String, String>,
    /// surviving categories by descending frequency, ties by name
    pub categories: Vec<CategoryStat>,
    /// annotations whose category was discarded
    pub unknown_frequency: u64,
}

impl MergePlan {
    pub fn category_of(&self, type_id: &str) -> Option<&str> {
        self.mapping.get(type_id).map(String::as_str)
    }

    /// Final label set: categories in plan order followed by [`UNKNOWN_TYPE`].
    pub fn labels(&self) -> Vec<String> {
        self.categories
            .iter()
            .map(|c| c.name.clone())
            .chain(std::iter::once(UNKNOWN_TYPE.to_string()))
            .collect()
    }
}

/// Prune the hierarchy into categories.
///
/// Stages, in order: (1) types deeper than `depth_limit` move to their
/// ancestor at that depth; (2) with frequencies re-aggregated, categories
/// below `min_freq` are merged into their parent, deepest first (ties by
/// id), until every non-root category meets the threshold; (3) roots still
/// below the threshold are discarded to [`UNKNOWN_TYPE`].
pub fn build_merge_plan(h: &TypeHierarchy, depth_limit: usize, min_freq: u64) -> Result<MergePlan> {
    if depth_limit < 1 || min_freq < 1 {
        return Err(Error::invalid("depth_limit and min_freq must be at least 1"));
    }
    // type-id → category node id
    let mut assign: BTreeMap<&str, &str> = h
        .nodes()
        .map(|n| (n.id.as_str(), h.ancestor_at_depth(n, depth_limit).id.as_str()))
        .collect();
    let mut mass: BTreeMap<&str, u64> = BTreeMap::new();
    for n in h.nodes() {
        *mass.entry(assign[n.id.as_str()]).or_default() += n.frequency;
    }

    loop {
        let victim = mass
            .iter()
            .filter(|(id, &m)| m < min_freq && h.nodes[**id].parent.is_some())
            .map(|(id, _)| *id)
            .max_by(|a, b| h.nodes[*a].depth.cmp(&h.nodes[*b].depth).then_with(|| b.cmp(a)));
        let Some(victim) = victim else { break };
        let parent = h.nodes[victim].parent.as_deref().expect("filtered on parent");
        let moved = mass.remove(victim).unwrap_or(0);
        *mass.entry(parent).or_default() += moved;
        for target in assign.values_mut() {
            if *target == victim {
                *target = parent;
            }
        }
    }

    let mut mapping = BTreeMap::new();
    let mut unknown_frequency = 0;
    let mut categories = Vec::new();
    let mut seen_names = BTreeSet::new();
    for (&cat, &m) in &mass {
        let node = &h.nodes[cat];
        if m < min_freq {
            unknown_frequency += m;
            continue;
        }
        if !seen_names.insert(node.name.as_str()) || node.name == UNKNOWN_TYPE {
            return Err(Error::Taxonomy(format!("duplicate category name `{}`", node.name)));
        }
        categories.push(CategoryStat {
            name: node.name.clone(),
            type_id: node.id.clone(),
            frequency: m,
        });
    }
    for (ty, cat) in assign {
        let name = if mass.get(cat).is_some_and(|&m| m >= min_freq) {
            h.nodes[cat].name.clone()
        } else {
            UNKNOWN_TYPE.to_string()
        };
        mapping.insert(ty.to_string(), name);
    }
    categories.sort_by(|a, b| b.frequency.cmp(&a.frequency).then_with(|| a.name.cmp(&b.name)));
    Ok(MergePlan {
        depth_limit,
        min_freq,
        mapping,
        categories,
        unknown_frequency,
    })
}

/// Symmetric co-occurrence counts between semantic types.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CooccurrenceGraph {
    pub vertices: Vec<String>,
    /// row-major `|V|×|V|`
    pub weights: Vec<u64>,
}

impl CooccurrenceGraph {
    pub fn from_weights(vertices: Vec<String>, weights: Vec<u64>) -> Result<Self> {
        let n = vertices.len();
        if weights.len() != n * n {
            return Err(Error::shape("CooccurrenceGraph", &[n, n], &[weights.len()]));
        }
        for i in 0..n {
            if weights[i * n + i] != 0 {
                return Err(Error::invalid("co-occurrence diagonal must be zero"));
            }
            for j in 0..i {
                if weights[i * n + j] != weights[j * n + i] {
                    return Err(Error::invalid("co-occurrence matrix must be symmetric"));
                }
            }
        }
        Ok(Self { vertices, weights })
    }

    pub fn weight(&self, i: usize, j: usize) -> u64 {
        self.weights[i * self.vertices.len() + j]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.vertices.iter().position(|v| v == id)
    }
}

/// Per-type annotation counts, counting every label of a multi-label entity.
pub fn type_frequencies(docs: &[Document]) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for d in docs {
        for a in &d.annotations {
            for t in &a.type_ids {
                *counts.entry(t.clone()).or_default() += 1;
            }
        }
    }
    counts
}

/// Build the co-occurrence graph from entity label sets.
///
/// Labels below `min_freq` are dropped first; each distinct multi-label
/// combination is recorded once, and each recorded combination adds 1 to
/// every unordered pair it contains.
pub fn build_cooccurrence_graph<'a>(
    label_sets: impl IntoIterator<Item = &'a [String]>,
    frequencies: &BTreeMap<String, u64>,
    min_freq: u64,
) -> CooccurrenceGraph {
    let mut combos: Vec<Vec<&str>> = Vec::new();
    let mut seen: BTreeSet<Vec<&str>> = BTreeSet::new();
    let mut vertices: BTreeSet<&str> = BTreeSet::new();
    for labels in label_sets {
        let mut y: Vec<&str> = labels
            .iter()
            .filter(|t| frequencies.get(*t).copied().unwrap_or(0) >= min_freq)
            .map(String::as_str)
            .collect();
        y.sort_unstable();
        y.dedup();
        if y.len() > 1 && seen.insert(y.clone()) {
            vertices.extend(y.iter().copied());
            combos.push(y);
        }
    }
    let vertices: Vec<String> = vertices.into_iter().map(String::from).collect();
    let index: HashMap<&str, usize> = vertices.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
    let n = vertices.len();
    let mut weights = vec![0u64; n * n];
    for y in &combos {
        for (a, ya) in y.iter().enumerate() {
            for yb in &y[a + 1..] {
                let (i, j) = (index[ya], index[yb]);
                weights[i * n + j] += 1;
                weights[j * n + i] += 1;
            }
        }
    }
    CooccurrenceGraph { vertices, weights }
}

pub const DEFAULT_DAMPING: f64 = 0.85;

/// Weighted PageRank by power iteration on the undirected graph.
///
/// Each vertex spreads its score over neighbours in proportion to edge
/// weight; vertices without edges spread theirs uniformly. Stops when the
/// L1 change drops below `tol` or after `max_iter` sweeps.
pub fn pagerank(g: &CooccurrenceGraph, damping: f64, tol: f64, max_iter: usize) -> Result<BTreeMap<String, f64>> {
    let n = g.vertices.len();
    if n == 0 {
        return Err(Error::invalid("pagerank on an empty graph"));
    }
    let strength: Vec<f64> = (0..n).map(|i| (0..n).map(|j| g.weight(i, j) as f64).sum()).collect();
    let uniform = 1.0 / n as f64;
    let mut rank = vec![uniform; n];
    for _ in 0..max_iter {
        let dangling: f64 = (0..n).filter(|&i| strength[i] == 0.0).map(|i| rank[i]).sum();
        let base = (1.0 - damping) * uniform + damping * dangling * uniform;
        let mut next = vec![base; n];
        for i in 0..n {
            if strength[i] == 0.0 {
                continue;
            }
            let share = damping * rank[i] / strength[i];
            for (j, nx) in next.iter_mut().enumerate() {
                let w = g.weight(i, j);
                if w != 0 {
                    *nx += share * w as f64;
                }
            }
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= total);
        let delta: f64 = next.iter().zip(&rank).map(|(a, b)| (a - b).abs()).sum();
        rank = next;
        if delta < tol {
            break;
        }
    }
    Ok(g.vertices.iter().cloned().zip(rank).collect())
}

/// Types sorted by descending score, ties by id.
pub fn ranked(scores: &BTreeMap<String, f64>) -> Vec<(String, f64)> {
    let mut v: Vec<(String, f64)> = scores.iter().map(|(k, &s)| (k.clone(), s)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

/// Pick the highest-scoring candidate; missing scores count as 0 and exact ties go to the smaller id.
pub fn disambiguate(candidates: &[String], scores: &BTreeMap<String, f64>) -> Result<String> {
    candidates
        .iter()
        .map(|c| (c, scores.get(c).copied().unwrap_or(0.0)))
        .max_by(|(a, sa), (b, sb)| sa.total_cmp(sb).then_with(|| b.cmp(a)))
        .map(|(c, _)| c.clone())
        .ok_or_else(|| Error::invalid("disambiguate called with no candidate types"))
}

/// Outcome of resolving every annotation to a single type.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Resolution {
    pub graph: CooccurrenceGraph,
    pub scores: BTreeMap<String, f64>,
    /// per-type counts after disambiguation
    pub frequencies: BTreeMap<String, u64>,
}

/// Build the co-occurrence graph over `docs`, rank types and collapse every
/// annotation's label set to one type in place.
pub fn resolve_documents(docs: &mut [Document], min_freq: u64) -> Result<Resolution> {
    let raw = type_frequencies(docs);
    let graph = build_cooccurrence_graph(
        docs.iter().flat_map(|d| d.annotations.iter().map(|a| a.type_ids.as_slice())),
        &raw,
        min_freq,
    );
    let scores = if graph.vertices.is_empty() {
        BTreeMap::new()
    } else {
        pagerank(&graph, DEFAULT_DAMPING, 1e-10, 200)?
    };
    let mut frequencies = BTreeMap::new();
    for d in docs.iter_mut() {
        for a in &mut d.annotations {
            let t = disambiguate(&a.type_ids, &scores)?;
            *frequencies.entry(t.clone()).or_default() += 1;
            a.type_ids = vec![t];
        }
    }
    Ok(Resolution {
        graph,
        scores,
        frequencies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, parent: Option<&str>, depth: usize, freq: u64) -> TypeNode {
        TypeNode {
            id: id.into(),
            name: format!("N{id}"),
            parent: parent.map(String::from),
            depth,
            frequency: freq,
        }
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn orphan_and_bad_depth_rejected() {
        assert!(TypeHierarchy::new(vec![node("a", Some("zz"), 1, 0)]).is_err());
        assert!(TypeHierarchy::new(vec![node("r", None, 0, 0), node("a", Some("r"), 2, 0)]).is_err());
        assert!(TypeHierarchy::parse("A\t-\t0\tRoot\nB\tA\t1\tKid\n", "h").is_ok());
    }

    #[test]
    fn single_type_identity() {
        let h = TypeHierarchy::new(vec![node("r", None, 0, 500)]).unwrap();
        let plan = build_merge_plan(&h, 3, 100).unwrap();
        assert_eq!(plan.category_of("r"), Some("Nr"));
        assert_eq!(plan.categories.len(), 1);
        assert_eq!(plan.unknown_frequency, 0);
    }

    #[test]
    fn cooccurrence_examples() {
        let freq: BTreeMap<String, u64> = [("a", 5), ("b", 5), ("c", 5)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let one = [s(&["a", "b"])];
        let g = build_cooccurrence_graph(one.iter().map(Vec::as_slice), &freq, 1);
        assert_eq!(g.weight(0, 1), 1);
        assert_eq!(g.weight(1, 0), 1);
        let two = [s(&["a", "b"]), s(&["b", "a"])];
        let g = build_cooccurrence_graph(two.iter().map(Vec::as_slice), &freq, 1);
        assert_eq!(g.weight(0, 1), 1);
        let three = [s(&["a", "b", "c"])];
        let g = build_cooccurrence_graph(three.iter().map(Vec::as_slice), &freq, 1);
        let edges: Vec<u64> = [(0, 1), (0, 2), (1, 2)].iter().map(|&(i, j)| g.weight(i, j)).collect();
        assert_eq!(edges, [1, 1, 1]);
        // below-threshold labels are filtered before combination
        let g = build_cooccurrence_graph(three.iter().map(Vec::as_slice), &freq, 6);
        assert!(g.vertices.is_empty());
    }

    #[test]
    fn pagerank_small_cases() {
        let g = CooccurrenceGraph::from_weights(s(&["a", "b"]), vec![0, 1, 1, 0]).unwrap();
        let pr = pagerank(&g, 0.85, 1e-12, 200).unwrap();
        assert!((pr["a"] - 0.5).abs() < 1e-12);
        let g = CooccurrenceGraph::from_weights(s(&["x"]), vec![0]).unwrap();
        assert!((pagerank(&g, 0.85, 1e-12, 200).unwrap()["x"] - 1.0).abs() < 1e-12);
        let g = CooccurrenceGraph::from_weights(s(&["a", "b", "c"]), vec![0, 1, 0, 1, 0, 1, 0, 1, 0]).unwrap();
        let pr = pagerank(&g, 0.85, 1e-12, 200).unwrap();
        assert!(pr["b"] > pr["a"] && (pr["a"] - pr["c"]).abs() < 1e-12);
        assert!(pagerank(&CooccurrenceGraph::from_weights(vec![], vec![]).unwrap(), 0.85, 1e-10, 10).is_err());
    }

    #[test]
    fn disambiguation_rules() {
        let sc: BTreeMap<String, f64> = [("a".to_string(), 0.6), ("b".to_string(), 0.4)].into();
        assert_eq!(disambiguate(&s(&["a", "b"]), &sc).unwrap(), "a");
        assert_eq!(disambiguate(&s(&["b"]), &sc).unwrap(), "b");
        let tie: BTreeMap<String, f64> = [("T2".to_string(), 0.5), ("T1".to_string(), 0.5)].into();
        assert_eq!(disambiguate(&s(&["T2", "T1"]), &tie).unwrap(), "T1");
        assert_eq!(disambiguate(&s(&["q", "p"]), &BTreeMap::new()).unwrap(), "p");
        assert!(disambiguate(&[], &sc).is_err());
    }
}
