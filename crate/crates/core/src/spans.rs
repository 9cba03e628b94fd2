//! Candidate span enumeration with a position marker, exact-match labelling
//! and the per-category span store.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{SentenceRecord, TokenizedSentence};
use crate::error::{Error, Result};
use crate::par;
use crate::taxonomy::{MergePlan, UNKNOWN_TYPE};

/// Reserved token inserted immediately before the span start.
pub const MARKER: &str = "[MARK]";
pub const DEFAULT_MAX_LEN: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedSpan {
    pub sentence_id: String,
    /// token range `[start, end)` in the unmarked sentence
    pub start: usize,
    pub end: usize,
    /// sentence tokens with [`MARKER`] at index `start`
    pub tokens: Vec<String>,
    pub label: String,
}

impl MarkedSpan {
    pub fn id(&self) -> String {
        format!("{}@{}+{}", self.sentence_id, self.start, self.end - self.start)
    }

    pub fn marker_index(&self) -> usize {
        self.start
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn span_tokens(&self) -> &[String] {
        &self.tokens[self.start + 1..self.end + 1]
    }

    /// Build a span directly from unmarked tokens.
    pub fn from_tokens(sentence_id: &str, words: &[String], start: usize, end: usize, label: &str) -> Result<Self> {
        if start >= end || end > words.len() {
            return Err(Error::invalid(format!("span [{start}, {end}) outside {} tokens", words.len())));
        }
        let mut tokens = Vec::with_capacity(words.len() + 1);
        tokens.extend_from_slice(&words[..start]);
        tokens.push(MARKER.to_string());
        tokens.extend_from_slice(&words[start..]);
        Ok(Self {
            sentence_id: sentence_id.to_string(),
            start,
            end,
            tokens,
            label: label.to_string(),
        })
    }
}

/// All contiguous spans of length `1..=max_len`, ordered by start then length, labelled [`UNKNOWN_TYPE`].
pub fn generate_spans(sent: &TokenizedSentence, max_len: usize) -> Vec<MarkedSpan> {
    let words: Vec<String> = sent.tokens.iter().map(|t| t.text.clone()).collect();
    let n = words.len();
    let mut out = Vec::new();
    for start in 0..n {
        for len in 1..=max_len.min(n - start) {
            out.push(
                MarkedSpan::from_tokens(&sent.id, &words, start, start + len, UNKNOWN_TYPE)
                    .expect("range checked above"),
            );
        }
    }
    out
}

/// Closed-form span count `Σ_{l=1..min(n,L)} (n-l+1)`.
pub fn span_count(n: usize, max_len: usize) -> usize {
    (1..=max_len.min(n)).map(|l| n - l + 1).sum()
}

/// Label spans whose token range exactly matches an annotation. Returns the
/// number of annotations that do not align with token boundaries.
pub fn label_spans(spans: &mut [MarkedSpan], sentence: &SentenceRecord, plan: &MergePlan) -> usize {
    let mut ranges: BTreeMap<(usize, usize), String> = BTreeMap::new();
    let mut misaligned = 0;
    for a in &sentence.annotations {
        let i = sentence.tokens.iter().position(|t| t.start == a.start);
        let j = sentence.tokens.iter().position(|t| t.end == a.end);
        match (i, j) {
            (Some(i), Some(j)) if i <= j => {
                let category = a
                    .type_ids
                    .first()
                    .and_then(|t| plan.category_of(t))
                    .unwrap_or(UNKNOWN_TYPE);
                ranges.insert((i, j + 1), category.to_string());
            }
            _ => misaligned += 1,
        }
    }
    for s in spans.iter_mut() {
        s.label = ranges.get(&(s.start, s.end)).cloned().unwrap_or_else(|| UNKNOWN_TYPE.to_string());
    }
    misaligned
}

/// Spans grouped by label.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanStore {
    pub by_category: BTreeMap<String, Vec<MarkedSpan>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanStats {
    pub sentences: usize,
    pub spans: usize,
    pub misaligned_annotations: usize,
    pub per_category: BTreeMap<String, usize>,
}

impl SpanStore {
    pub fn insert(&mut self, span: MarkedSpan) {
        self.by_category.entry(span.label.clone()).or_default().push(span);
    }

    pub fn get(&self, category: &str) -> &[MarkedSpan] {
        self.by_category.get(category).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn total(&self) -> usize {
        self.by_category.values().map(Vec::len).sum()
    }

    /// Write one `<category>.jsonl` file per label plus `index.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = BTreeMap::new();
        for (cat, spans) in &self.by_category {
            let file = format!("{}.jsonl", file_stem(cat));
            let path = dir.join(&file);
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = std::io::BufWriter::new(f);
            for s in spans {
                serde_json::to_writer(&mut w, s)?;
                w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            index.insert(cat.clone(), file);
        }
        let path = dir.join("index.json");
        std::fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: BTreeMap<String, String> = serde_json::from_str(&text)?;
        let mut store = Self::default();
        for (cat, file) in index {
            let path = dir.join(file);
            let f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut spans = Vec::new();
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                let span: MarkedSpan = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                spans.push(span);
            }
            store.by_category.insert(cat, spans);
        }
        Ok(store)
    }
}

fn file_stem(category: &str) -> String {
    category
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Enumerate and label spans for every sentence, in parallel per sentence.
pub fn build_span_store(records: &[SentenceRecord], plan: &MergePlan, max_len: usize) -> (SpanStore, SpanStats) {
    let per_sentence = par::map(records, |r| {
        let mut spans = generate_spans(&r.tokenized(), max_len);
        let misaligned = label_spans(&mut spans, r, plan);
        (spans, misaligned)
    });
    let mut store = SpanStore::default();
    let mut stats = SpanStats {
        sentences: records.len(),
        ..SpanStats::default()
    };
    for (spans, misaligned) in per_sentence {
        stats.misaligned_annotations += misaligned;
        for s in spans {
            stats.spans += 1;
            *stats.per_category.entry(s.label.clone()).or_default() += 1;
            store.insert(s);
        }
    }
    (store, stats)
}
