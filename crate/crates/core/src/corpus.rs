//! Annotated corpus ingestion, text normalisation and tokenisation.
//!
//! Offsets are character (not byte) offsets throughout.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Search radius, in characters, when re-locating a mention after normalisation.
pub const REANCHOR_WINDOW: usize = 40;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityAnnotation {
    pub start: usize,
    pub end: usize,
    pub mention: String,
    pub type_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub annotations: Vec<EntityAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedSentence {
    pub id: String,
    pub tokens: Vec<Token>,
}

/// Parsed corpus plus the number of annotations dropped on the way.
#[derive(Clone, Debug, Default)]
pub struct ParsedCorpus {
    pub documents: Vec<Document>,
    pub dropped_annotations: usize,
}

pub fn char_slice(text: &str, start: usize, end: usize) -> Option<String> {
    if start > end {
        return None;
    }
    let s: String = text.chars().skip(start).take(end - start).collect();
    (s.chars().count() == end - start).then_some(s)
}

pub fn parse_pubtator(path: &Path) -> Result<ParsedCorpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pubtator_str(&text, &path.display().to_string())
}

/// Parse PubTator text: `id|t|title`, `id|a|abstract`, then tab-separated
/// `id, start, end, mention, type-ids[, concept-id]` rows; blank lines separate documents.
pub fn parse_pubtator_str(input: &str, source: &str) -> Result<ParsedCorpus> {
    struct Partial {
        title: String,
        abstract_text: Option<String>,
        rows: Vec<(usize, EntityAnnotation)>,
    }
    let err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };

    let mut order: Vec<String> = Vec::new();
    let mut docs: BTreeMap<String, Partial> = BTreeMap::new();
    for (idx, raw) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut bar = line.splitn(3, '|');
        if let (Some(id), Some(kind @ ("t" | "a")), Some(body)) = (bar.next(), bar.next(), bar.next()) {
            if !id.contains('\t') {
                let entry = docs.entry(id.to_string()).or_insert_with(|| {
                    order.push(id.to_string());
                    Partial {
                        title: String::new(),
                        abstract_text: None,
                        rows: Vec::new(),
                    }
                });
                if kind == "t" {
                    entry.title = body.to_string();
                } else {
                    entry.abstract_text = Some(body.to_string());
                }
                continue;
            }
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 5 {
            return Err(err(line_no, format!("expected at least 5 tab-separated fields, got {}", fields.len())));
        }
        let parse_off = |s: &str| s.trim().parse::<usize>().map_err(|_| err(line_no, format!("bad offset `{s}`")));
        let (start, end) = (parse_off(fields[1])?, parse_off(fields[2])?);
        let mut type_ids: Vec<String> = fields[4]
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        type_ids.dedup();
        if type_ids.is_empty() {
            return Err(err(line_no, "empty type-id list".into()));
        }
        let doc = docs
            .get_mut(fields[0])
            .ok_or_else(|| err(line_no, format!("annotation for unknown document `{}`", fields[0])))?;
        doc.rows.push((
            line_no,
            EntityAnnotation {
                start,
                end,
                mention: fields[3].to_string(),
                type_ids,
            },
        ));
    }

    let mut out = ParsedCorpus::default();
    for id in order {
        let p = docs.remove(&id).expect("ordered id present");
        let text = match p.abstract_text {
            Some(a) => format!("{} {}", p.title, a),
            None => p.title,
        };
        let mut annotations = Vec::with_capacity(p.rows.len());
        for (line_no, ann) in p.rows {
            if char_slice(&text, ann.start, ann.end).as_deref() == Some(ann.mention.as_str()) {
                annotations.push(ann);
            } else {
                log::warn!("{source}:{line_no}: mention `{}` does not match text; dropped", ann.mention);
                out.dropped_annotations += 1;
            }
        }
        out.documents.push(Document { id, text, annotations });
    }
    Ok(out)
}

/// Inverse of [`parse_pubtator_str`] (the whole text is emitted as the title).
pub fn write_pubtator(docs: &[Document]) -> String {
    let mut s = String::new();
    for d in docs {
        let _ = writeln!(s, "{}|t|{}", d.id, d.text);
        for a in &d.annotations {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t-", d.id, a.start, a.end, a.mention, a.type_ids.join(","));
        }
        s.push('\n');
    }
    s
}

fn closer_for(c: char) -> Option<char> {
    match c {
        '(' => Some(')'),
        '[' => Some(']'),
        '{' => Some('}'),
        '<' => Some('>'),
        _ => None,
    }
}

fn is_bracket(c: char) -> bool {
    matches!(c, '(' | ')' | '[' | ']' | '{' | '}' | '<' | '>')
}

/// Normalise a string, returning it with the original char index of every kept char.
///
/// Bracket pairs that enclose no other bracket are deleted repeatedly until
/// none remain; unmatched brackets survive. Whitespace runs collapse to one
/// space and the ends are trimmed.
pub fn normalize_with_map(text: &str) -> (String, Vec<usize>) {
    let mut chars: Vec<(char, usize)> = text.chars().enumerate().map(|(i, c)| (c, i)).collect();
    loop {
        let mut remove = vec![false; chars.len()];
        let mut open: Option<usize> = None;
        let mut found = false;
        for (i, &(c, _)) in chars.iter().enumerate() {
            if closer_for(c).is_some() {
                open = Some(i);
            } else if is_bracket(c) {
                if let Some(o) = open {
                    if closer_for(chars[o].0) == Some(c) {
                        remove[o..=i].iter_mut().for_each(|r| *r = true);
                        found = true;
                    }
                }
                open = None;
            }
        }
        if !found {
            break;
        }
        chars = chars
            .into_iter()
            .zip(remove)
            .filter_map(|(c, r)| (!r).then_some(c))
            .collect();
    }

    let mut out = String::new();
    let mut map = Vec::new();
    let mut pending_space: Option<usize> = None;
    for (c, orig) in chars {
        if c.is_whitespace() {
            if !map.is_empty() && pending_space.is_none() {
                pending_space = Some(orig);
            }
            continue;
        }
        if let Some(sp) = pending_space.take() {
            out.push(' ');
            map.push(sp);
        }
        out.push(c);
        map.push(orig);
    }
    (out, map)
}

pub fn normalize_str(text: &str) -> String {
    normalize_with_map(text).0
}

fn find_near(hay: &[char], needle: &[char], center: usize, window: usize) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    let lo = center.saturating_sub(window);
    let hi = (center + window).min(hay.len() - needle.len());
    (lo..=hi)
        .filter(|&s| hay[s..s + needle.len()] == *needle)
        .min_by_key(|&s| (s.abs_diff(center), s))
}

/// Normalise a document's text and re-anchor its annotations.
///
/// Returns the new document and the number of annotations that could not be re-located.
pub fn normalize_document(doc: &Document) -> (Document, usize) {
    let (text, map) = normalize_with_map(&doc.text);
    let hay: Vec<char> = text.chars().collect();
    let mut dropped = 0;
    let mut annotations = Vec::with_capacity(doc.annotations.len());
    for ann in &doc.annotations {
        let mention = normalize_str(&ann.mention);
        let needle: Vec<char> = mention.chars().collect();
        let approx = map.partition_point(|&o| o < ann.start);
        match find_near(&hay, &needle, approx, REANCHOR_WINDOW) {
            Some(start) => annotations.push(EntityAnnotation {
                start,
                end: start + needle.len(),
                mention,
                type_ids: ann.type_ids.clone(),
            }),
            None => dropped += 1,
        }
    }
    (
        Document {
            id: doc.id.clone(),
            text,
            annotations,
        },
        dropped,
    )
}

fn split_chunk(chunk: &[(usize, char)], out: &mut Vec<Token>) {
    let is_p = |c: char| c.is_ascii_punctuation();
    let lead = chunk.iter().take_while(|(_, c)| is_p(*c)).count();
    let trail = if lead == chunk.len() {
        0
    } else {
        chunk.iter().rev().take_while(|(_, c)| is_p(*c)).count()
    };
    let single = |&(i, c): &(usize, char)| Token {
        text: c.to_string(),
        start: i,
        end: i + 1,
    };
    out.extend(chunk[..lead].iter().map(single));
    let core = &chunk[lead..chunk.len() - trail];
    if !core.is_empty() {
        out.push(Token {
            text: core.iter().map(|(_, c)| c).collect(),
            start: core[0].0,
            end: core[core.len() - 1].0 + 1,
        });
    }
    out.extend(chunk[chunk.len() - trail..].iter().map(single));
}

/// Tokenise into sentences; ids are `"{prefix}{index}"`.
pub fn tokenize_with_prefix(text: &str, prefix: &str) -> Vec<TokenizedSentence> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut chunk: Vec<(usize, char)> = Vec::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            if !chunk.is_empty() {
                split_chunk(&chunk, &mut tokens);
                chunk.clear();
            }
        } else {
            chunk.push((i, c));
        }
    }
    if !chunk.is_empty() {
        split_chunk(&chunk, &mut tokens);
    }

    let mut sentences = Vec::new();
    let mut current = Vec::new();
    for tok in tokens {
        let ends = matches!(tok.text.as_str(), "." | "?" | "!") && {
            let after = tok.end;
            after < chars.len()
                && chars[after].is_whitespace()
                && chars[after..]
                    .iter()
                    .find(|c| !c.is_whitespace())
                    .is_some_and(|c| c.is_uppercase())
        };
        current.push(tok);
        if ends {
            sentences.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    sentences
        .into_iter()
        .enumerate()
        .map(|(i, tokens)| TokenizedSentence {
            id: format!("{prefix}{i}"),
            tokens,
        })
        .collect()
}

pub fn tokenize(text: &str) -> Vec<TokenizedSentence> {
    tokenize_with_prefix(text, "")
}

/// One persisted sentence with its annotations, offsets relative to the sentence text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: String,
    pub text: String,
    pub tokens: Vec<Token>,
    pub annotations: Vec<EntityAnnotation>,
}

/// Normalise, tokenise and split a document into sentence records.
pub fn sentence_records(doc: &Document) -> (Vec<SentenceRecord>, usize) {
    let (norm, dropped) = normalize_document(doc);
    let records = tokenize_with_prefix(&norm.text, &format!("{}:", norm.id))
        .into_iter()
        .map(|s| {
            let base = s.tokens[0].start;
            let end = s.tokens[s.tokens.len() - 1].end;
            let text = char_slice(&norm.text, base, end).unwrap_or_default();
            let tokens = s
                .tokens
                .into_iter()
                .map(|t| Token {
                    start: t.start - base,
                    end: t.end - base,
                    text: t.text,
                })
                .collect();
            let annotations = norm
                .annotations
                .iter()
                .filter(|a| a.start >= base && a.end <= end)
                .map(|a| EntityAnnotation {
                    start: a.start - base,
                    end: a.end - base,
                    ..a.clone()
                })
                .collect();
            SentenceRecord {
                id: s.id,
                text,
                tokens,
                annotations,
            }
        })
        .collect();
    (records, dropped)
}

impl SentenceRecord {
    pub fn tokenized(&self) -> TokenizedSentence {
        TokenizedSentence {
            id: self.id.clone(),
            tokens: self.tokens.clone(),
        }
    }
}
