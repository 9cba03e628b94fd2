//! Span encoder: static token embeddings with sub-unit weighting, sinusoidal
//! positions, a single-layer BiLSTM and a linear projection read at the
//! marker position.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::hashed_unit_vector;
use crate::numerics::{Axis, Graph, Tensor, Var};
use crate::spans::{MarkedSpan, MARKER};

pub const EMBED_DIM: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub embed: usize,
    pub position: usize,
    /// BiLSTM hidden size per direction
    pub hidden: usize,
    /// span representation width, also the projection hidden width
    pub representation: usize,
    /// prototype space dimension D
    pub output: usize,
    /// prototypes per category M
    pub prototypes: usize,
    /// maximum sequence length T
    pub max_tokens: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            embed: EMBED_DIM,
            position: 200,
            hidden: 1024,
            representation: 512,
            output: 50,
            prototypes: 10,
            max_tokens: 300,
        }
    }
}

impl ModelDims {
    pub fn input(&self) -> usize {
        self.embed + self.position
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.embed,
            self.position,
            self.hidden,
            self.representation,
            self.output,
            self.prototypes,
            self.max_tokens,
        ];
        if fields.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if !self.position.is_multiple_of(2) {
            return Err(Error::Config(format!("positional width {} must be even", self.position)));
        }
        Ok(())
    }
}

/// Frozen token → vector table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StaticEmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl StaticEmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, token: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::shape("embedding insert", &[self.dim], &[vector.len()]));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding for `{token}`")));
        }
        self.vectors.insert(token.to_string(), vector);
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    /// Exact, then lowercase, then a hashed unit vector.
    pub fn lookup(&self, token: &str) -> Vec<f64> {
        self.get(token)
            .or_else(|| self.get(&token.to_lowercase()))
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| hashed_unit_vector(token, self.dim))
    }

    /// Parse the text format: a `count dim` header, then `token v1 … vdim` per line.
    pub fn parse(input: &str, source: &str, expected_dim: usize) -> Result<Self> {
        Self::read(BufReader::new(input.as_bytes()), source, expected_dim)
    }

    pub fn load(path: &Path, expected_dim: usize) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(f), &path.display().to_string(), expected_dim)
    }

    fn read(reader: impl BufRead, source: &str, expected_dim: usize) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: source.to_string(),
            line,
            message,
        };
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| err(1, "empty embedding file".into()))?
            .map_err(|e| err(1, e.to_string()))?;
        let head: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err(1, format!("bad header `{header}`")))?;
        let [count, dim] = head[..] else {
            return Err(err(1, format!("header needs `count dim`, got `{header}`")));
        };
        if dim != expected_dim {
            return Err(err(1, format!("embedding dimension {dim}, expected {expected_dim}")));
        }
        let mut table = Self::new(dim);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| err(i + 2, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().expect("non-empty line");
            let v: Vec<f64> = parts
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| err(i + 2, format!("bad float in vector for `{token}`")))?;
            if v.len() != dim {
                return Err(err(i + 2, format!("`{token}` has {} values, expected {dim}", v.len())));
            }
            table.insert(token, v).map_err(|e| err(i + 2, e.to_string()))?;
        }
        if table.len() != count {
            log::warn!("{source}: header announces {count} vectors, read {}", table.len());
        }
        Ok(table)
    }

    /// Write in the text format, tokens sorted for byte-stable output.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        let mut tokens: Vec<&String> = self.vectors.keys().collect();
        tokens.sort();
        let io = |e| Error::io(path, e);
        writeln!(w, "{} {}", tokens.len(), self.dim).map_err(io)?;
        for t in tokens {
            write!(w, "{t}").map_err(io)?;
            for x in &self.vectors[t] {
                write!(w, " {x}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Split on internal hyphens and slashes; ordinary tokens give one unit.
pub fn sub_units(token: &str) -> Vec<&str> {
    let parts: Vec<&str> = token.split(['-', '/']).filter(|p| !p.is_empty()).collect();
    if parts.len() > 1 {
        parts
    } else {
        vec![token]
    }
}

/// `w_i = 1 + 0.1((C - i)/2)²` for `i = 0..C`.
pub fn sub_unit_weights(c: usize) -> Vec<f64> {
    (0..c)
        .map(|i| {
            let r = (c - i) as f64 / 2.0;
            1.0 + 0.1 * r * r
        })
        .collect()
}

/// Weighted sum of the ℓ2-normalised sub-unit vectors.
pub fn embed_token(token: &str, table: &StaticEmbeddingTable) -> Vec<f64> {
    let units = sub_units(token);
    let weights = sub_unit_weights(units.len());
    let mut out = vec![0.0; table.dim()];
    for (unit, w) in units.iter().zip(weights) {
        let v = table.lookup(unit);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for (o, x) in out.iter_mut().zip(&v) {
            *o += w * x / n;
        }
    }
    out
}

/// `P[p, 2i] = sin(p / 10000^{2i/d})`, `P[p, 2i+1] = cos(p / 10000^{2i/d})`.
pub fn positional_encoding(t: usize, d: usize) -> Result<Tensor> {
    if !d.is_multiple_of(2) {
        return Err(Error::invalid(format!("positional width {d} must be even")));
    }
    let mut data = vec![0.0; t * d];
    for p in 0..t {
        for i in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[p * d + 2 * i] = angle.sin();
            data[p * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(t, d, data)
}

/// Frozen unit vector standing in for the marker token.
pub fn marker_vector(seed: u64, dim: usize) -> Vec<f64> {
    hashed_unit_vector(&format!("{MARKER}#{seed}"), dim)
}

/// Encoder input rows for one span: embeddings ‖ positions, unpadded.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    pub x: Tensor,
    /// true sequence length; rows beyond it are padding and never read
    pub length: usize,
    pub marker: usize,
}

/// Embed a marked span, truncating to a window of `pe.rows()` tokens centred on the marker.
pub fn prepare_input(
    span: &MarkedSpan,
    table: &StaticEmbeddingTable,
    marker: &[f64],
    pe: &Tensor,
) -> Result<EncoderInput> {
    let m = span
        .tokens
        .iter()
        .position(|t| t == MARKER)
        .ok_or_else(|| Error::invalid(format!("span {} has no marker token", span.id())))?;
    let t = pe.rows();
    let n = span.tokens.len();
    let lo = if n <= t { 0 } else { m.saturating_sub(t / 2).min(n - t) };
    let hi = (lo + t).min(n);
    let (de, dp) = (table.dim(), pe.cols());
    let mut data = Vec::with_capacity((hi - lo) * (de + dp));
    for (p, tok) in span.tokens[lo..hi].iter().enumerate() {
        if p + lo == m {
            data.extend_from_slice(marker);
        } else {
            data.extend(embed_token(tok, table));
        }
        data.extend_from_slice(pe.row(p));
    }
    Ok(EncoderInput {
        x: Tensor::matrix(hi - lo, de + dp, data)?,
        length: hi - lo,
        marker: m - lo,
    })
}

/// Graph handles for one direction of the LSTM.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// input → gates, `input × 4h`, gate order i, f, g, o
    pub w_ih: Var,
    /// hidden → gates, `h × 4h`
    pub w_hh: Var,
    /// `1 × 4h`
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub forward: LstmVars,
    pub backward: LstmVars,
    /// `2h × representation`
    pub w_p: Var,
}

/// Run one LSTM direction over `steps`, returning the final hidden state.
fn lstm_run(g: &Graph, xw: Var, vars: &LstmVars, hidden: usize, steps: impl Iterator<Item = usize>) -> Result<Var> {
    let mut state: Option<(Var, Var)> = None;
    for t in steps {
        let mut gates = g.slice_rows(xw, t, t + 1)?;
        if let Some((h, _)) = state {
            gates = g.add(gates, g.matmul(h, vars.w_hh)?)?;
        }
        let i = g.sigmoid(g.slice_cols(gates, 0, hidden)?);
        let f = g.sigmoid(g.slice_cols(gates, hidden, 2 * hidden)?);
        let cand = g.tanh(g.slice_cols(gates, 2 * hidden, 3 * hidden)?);
        let o = g.sigmoid(g.slice_cols(gates, 3 * hidden, 4 * hidden)?);
        let mut c = g.mul(i, cand)?;
        if let Some((_, c_prev)) = state {
            c = g.add(c, g.mul(f, c_prev)?)?;
        }
        let h = g.mul(o, g.tanh(c))?;
        state = Some((h, c));
    }
    state
        .map(|(h, _)| h)
        .ok_or_else(|| Error::invalid("LSTM run over zero steps"))
}

/// `1 × representation` span representation.
///
/// With length masking the forward state at the marker depends only on
/// steps `0..=marker` and the backward state only on `marker..length`, so
/// only those steps are evaluated.
pub fn encode(g: &Graph, input: &EncoderInput, vars: &EncoderVars, hidden: usize) -> Result<Var> {
    if input.marker >= input.length || input.length > input.x.rows() {
        return Err(Error::invalid(format!(
            "marker {} outside sequence of length {}",
            input.marker, input.length
        )));
    }
    let x = g.constant(input.x.clone());
    let x = if input.length < input.x.rows() {
        g.slice_rows(x, 0, input.length)?
    } else {
        x
    };
    let run = |v: &LstmVars, steps: Box<dyn Iterator<Item = usize>>| -> Result<Var> {
        let xw = g.add(g.matmul(x, v.w_ih)?, v.bias)?;
        lstm_run(g, xw, v, hidden, steps)
    };
    let hf = run(&vars.forward, Box::new(0..=input.marker))?;
    let hb = run(&vars.backward, Box::new((input.marker..input.length).rev()))?;
    let both = g.concat(&[hf, hb], Axis::Cols)?;
    g.matmul(both, vars.w_p)
}
