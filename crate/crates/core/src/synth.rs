//! Synthetic fixtures: Gaussian-cluster vocabularies, labelled span stores
//! and a small annotated corpus with its type hierarchy.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, EntityAnnotation};
use crate::encoder::{StaticEmbeddingTable, EMBED_DIM};
use crate::error::Result;
use crate::numerics::{SeedTree, StreamRng};
use crate::spans::{MarkedSpan, SpanStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    /// spans generated per category
    pub counts: Vec<usize>,
    /// sub-clusters per category; missing entries mean one
    #[serde(default)]
    pub modes: Vec<usize>,
    pub words_per_category: usize,
    pub filler_words: usize,
    /// norm of each category centre
    pub separation: f64,
    /// per-coordinate standard deviation around the centre
    pub noise: f64,
    pub seed: u64,
}

impl ClusterSpec {
    pub fn balanced(categories: usize, per_category: usize, seed: u64) -> Self {
        Self {
            counts: vec![per_category; categories],
            modes: Vec::new(),
            words_per_category: 12,
            filler_words: 40,
            separation: 1.0,
            noise: 0.02,
            seed,
        }
    }
}

pub fn category_name(i: usize) -> String {
    format!("Cat{i:02}")
}

fn gaussian(rng: &mut StreamRng, centre: &[f64], sd: f64) -> Vec<f64> {
    centre
        .iter()
        .map(|c| c + sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn unit(rng: &mut StreamRng, dim: usize, norm: f64) -> Vec<f64> {
    let v = gaussian(rng, &vec![0.0; dim], 1.0);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| norm * x / n).collect()
}

/// Vocabulary words for every category plus shared fillers, with embeddings.
pub struct ClusterVocabulary {
    pub table: StaticEmbeddingTable,
    pub category_words: Vec<Vec<String>>,
    /// sub-cluster count per category; word `i` belongs to sub-cluster `i % modes`
    pub modes: Vec<usize>,
    pub fillers: Vec<String>,
}

pub fn cluster_vocabulary(spec: &ClusterSpec) -> Result<ClusterVocabulary> {
    let seeds = SeedTree::new(spec.seed);
    let mut rng = seeds.stream("vocabulary");
    let mut table = StaticEmbeddingTable::new(EMBED_DIM);
    let mut category_words = Vec::new();
    let mut all_modes = Vec::new();
    for c in 0..spec.counts.len() {
        let modes = spec.modes.get(c).copied().unwrap_or(1).max(1);
        let centres: Vec<Vec<f64>> = (0..modes).map(|_| unit(&mut rng, EMBED_DIM, spec.separation)).collect();
        let words: Vec<String> = (0..spec.words_per_category).map(|w| format!("c{c}w{w}")).collect();
        for (i, w) in words.iter().enumerate() {
            table.insert(w, gaussian(&mut rng, &centres[i % modes], spec.noise))?;
        }
        category_words.push(words);
        all_modes.push(modes);
    }
    let filler_centre = unit(&mut rng, EMBED_DIM, spec.separation);
    let fillers: Vec<String> = (0..spec.filler_words).map(|w| format!("f{w}")).collect();
    for w in &fillers {
        table.insert(w, gaussian(&mut rng, &filler_centre, spec.noise * 4.0))?;
    }
    Ok(ClusterVocabulary {
        table,
        category_words,
        modes: all_modes,
        fillers,
    })
}

fn sentence(rng: &mut StreamRng, vocab: &ClusterVocabulary, c: usize) -> (Vec<String>, usize, usize) {
    let before = rng.random_range(1..=4);
    let after = rng.random_range(1..=4);
    let len = rng.random_range(1..=3);
    let mut words = Vec::with_capacity(before + len + after);
    for _ in 0..before {
        words.push(vocab.fillers.choose(rng).expect("fillers").clone());
    }
    let modes = vocab.modes[c];
    let mode = if modes > 1 { rng.random_range(0..modes) } else { 0 };
    let own: Vec<&String> = vocab.category_words[c].iter().skip(mode).step_by(modes).collect();
    for _ in 0..len {
        words.push((*own.choose(rng).expect("words")).clone());
    }
    for _ in 0..after {
        words.push(vocab.fillers.choose(rng).expect("fillers").clone());
    }
    (words, before, before + len)
}

/// Labelled spans drawn directly from the cluster vocabulary.
pub fn cluster_spans(spec: &ClusterSpec) -> Result<(SpanStore, StaticEmbeddingTable)> {
    let vocab = cluster_vocabulary(spec)?;
    let seeds = SeedTree::new(spec.seed);
    let mut store = SpanStore::default();
    for (c, &count) in spec.counts.iter().enumerate() {
        let mut rng = seeds.indexed("spans", c as u64);
        let name = category_name(c);
        for i in 0..count {
            let (words, start, end) = sentence(&mut rng, &vocab, c);
            store.insert(MarkedSpan::from_tokens(&format!("{name}:{i}"), &words, start, end, &name)?);
        }
    }
    Ok((store, vocab.table))
}

/// A small annotated corpus: text, hierarchy (TSV) and embedding table.
pub struct SyntheticCorpus {
    pub documents: Vec<Document>,
    pub hierarchy_tsv: String,
    pub table: StaticEmbeddingTable,
}

/// Documents whose entities come from `categories` clusters. Each category
/// is a depth-1 hierarchy node with two depth-2 leaf types and one depth-3
/// type; one extra rare root receives a handful of mentions, and a share of
/// entities carries a second, co-occurring type.
pub fn corpus(categories: usize, documents: usize, seed: u64) -> Result<SyntheticCorpus> {
    let spec = ClusterSpec::balanced(categories, 0, seed);
    let vocab = cluster_vocabulary(&spec)?;
    let mut table = vocab.table.clone();
    for w in ["The", "."] {
        let v = crate::numerics::rng::hashed_unit_vector(w, EMBED_DIM);
        table.insert(w, v)?;
    }
    let mut tsv = String::from("R0\t-\t0\tRoot Entity\nRX\t-\t0\tRare Root\nRX1\tRX\t1\tRare Leaf\n");
    for c in 0..categories {
        tsv.push_str(&format!("C{c}\tR0\t1\t{}\n", category_name(c)));
        tsv.push_str(&format!("T{c}a\tC{c}\t2\tType {c}a\n"));
        tsv.push_str(&format!("T{c}b\tC{c}\t2\tType {c}b\n"));
        tsv.push_str(&format!("T{c}c\tT{c}a\t3\tType {c}c\n"));
    }
    let seeds = SeedTree::new(seed);
    let mut docs = Vec::with_capacity(documents);
    for d in 0..documents {
        let mut rng = seeds.indexed("document", d as u64);
        let mut text = String::new();
        let mut annotations = Vec::new();
        for _ in 0..rng.random_range(2..=4) {
            if !text.is_empty() {
                text.push(' ');
            }
            let rare = rng.random_range(0..40) == 0;
            let c = rng.random_range(0..categories);
            let (words, start, end) = sentence(&mut rng, &vocab, c);
            text.push_str("The ");
            for (i, w) in words.iter().enumerate() {
                if i == start {
                    let begin = text.chars().count();
                    let mention = words[start..end].join(" ");
                    let leaf = if rare {
                        "RX1".to_string()
                    } else {
                        format!("T{c}{}", ['a', 'b', 'c'][rng.random_range(0..3)])
                    };
                    let mut type_ids = vec![leaf];
                    if !rare && rng.random_range(0..5) == 0 {
                        type_ids.push(format!("T{c}{}", if type_ids[0].ends_with('b') { 'a' } else { 'b' }));
                    }
                    annotations.push(EntityAnnotation {
                        start: begin,
                        end: begin + mention.chars().count(),
                        mention,
                        type_ids,
                    });
                }
                text.push_str(w);
                text.push(' ');
            }
            text.push('.');
        }
        docs.push(Document {
            id: format!("{}", 1000 + d),
            text,
            annotations,
        });
    }
    Ok(SyntheticCorpus {
        documents: docs,
        hierarchy_tsv: tsv,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_pubtator_str, write_pubtator};
    use crate::taxonomy::TypeHierarchy;

    #[test]
    fn cluster_store_is_deterministic() {
        let spec = ClusterSpec::balanced(3, 20, 7);
        let (a, ta) = cluster_spans(&spec).unwrap();
        let (b, tb) = cluster_spans(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(a.total(), 60);
        assert!(a.get("Cat01").iter().all(|s| s.span_tokens().iter().all(|t| t.starts_with("c1w"))));
    }

    #[test]
    fn corpus_round_trips_and_hierarchy_is_valid() {
        let c = corpus(4, 30, 1).unwrap();
        TypeHierarchy::parse(&c.hierarchy_tsv, "h").unwrap();
        let parsed = parse_pubtator_str(&write_pubtator(&c.documents), "x").unwrap();
        assert_eq!(parsed.dropped_annotations, 0);
        assert_eq!(parsed.documents, c.documents);
    }
}
