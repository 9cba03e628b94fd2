//! Prototype bank, projection network, loss terms, prediction and checkpoints.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{self, EncoderInput, EncoderVars, LstmVars, ModelDims, StaticEmbeddingTable};
use crate::error::{Error, Result};
use crate::numerics::{xavier_uniform, Axis, Graph, SeedTree, StreamRng, Tensor, Var};
use crate::par;
use crate::spans::MarkedSpan;

pub const L_SPAN_EPS: f64 = 1e-12;
pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_DROPOUT: f64 = 0.1;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Trainable,
    /// trainable, row-normalised after every meta-update
    Prototype,
    /// running statistics; interpolated by the meta-update but never differentiated
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Arc<Tensor>,
}

/// Parameter layout. Order is fixed and checked on checkpoint load.
pub const PARAM_NAMES: [&str; 18] = [
    "lstm.fwd.w_ih",
    "lstm.fwd.w_hh",
    "lstm.fwd.bias",
    "lstm.bwd.w_ih",
    "lstm.bwd.w_hh",
    "lstm.bwd.bias",
    "encoder.w_p",
    "net.w_hidden",
    "net.b_hidden",
    "net.bn_gamma",
    "net.bn_beta",
    "net.bn_mean",
    "net.bn_var",
    "net.w_out",
    "net.b_out",
    "net.ln_gamma",
    "net.ln_beta",
    "prototypes",
];
const W_HIDDEN: usize = 7;
const BN_MEAN: usize = 11;
const BN_VAR: usize = 12;
const PROTOTYPES: usize = 17;
const ENCODER_PARAMS: usize = 7;

/// One span's encoder graph, its output and the encoder parameter leaves.
type EncodedSpan = (Graph, Var, [Var; ENCODER_PARAMS]);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictRule {
    #[default]
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// `L_proto + L_span`
    #[default]
    Contrastive,
    /// softmax cross-entropy over max-cosine category scores
    CrossEntropy,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub dims: ModelDims,
    pub categories: Vec<String>,
    pub params: Vec<Param>,
    pub marker: Vec<f64>,
    pub dropout: f64,
    pe: Arc<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    dims: ModelDims,
    categories: Vec<String>,
    dropout: f64,
    marker: Vec<f64>,
    params: Vec<Param>,
}

fn prototype_rows(rng: &mut StreamRng, rows: usize, dim: usize) -> Result<Tensor> {
    let mut p = xavier_uniform(rng, rows, dim)?;
    p.normalize_rows();
    Ok(p)
}

impl Model {
    pub fn new(categories: Vec<String>, dims: ModelDims, dropout: f64, seeds: &SeedTree) -> Result<Self> {
        dims.validate()?;
        if categories.is_empty() {
            return Err(Error::invalid("model needs at least one category"));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        let (inp, h, r, d) = (dims.input(), dims.hidden, dims.representation, dims.output);
        let mut rng = seeds.stream("init");
        let mut values = Vec::with_capacity(PARAM_NAMES.len());
        for _ in 0..2 {
            values.push(xavier_uniform(&mut rng, inp, 4 * h)?);
            values.push(xavier_uniform(&mut rng, h, 4 * h)?);
            values.push(Tensor::zeros(&[1, 4 * h]));
        }
        values.push(xavier_uniform(&mut rng, 2 * h, r)?);
        values.push(xavier_uniform(&mut rng, r, r)?);
        values.push(Tensor::zeros(&[1, r]));
        values.push(Tensor::filled(&[1, r], 1.0));
        values.push(Tensor::zeros(&[1, r]));
        values.push(Tensor::zeros(&[1, r]));
        values.push(Tensor::filled(&[1, r], 1.0));
        values.push(xavier_uniform(&mut rng, r, d)?);
        values.push(Tensor::zeros(&[1, d]));
        values.push(Tensor::filled(&[1, d], 1.0));
        values.push(Tensor::zeros(&[1, d]));
        let mut proto_rng = seeds.stream("prototypes");
        values.push(prototype_rows(&mut proto_rng, categories.len() * dims.prototypes, d)?);
        let params = PARAM_NAMES
            .iter()
            .zip(values)
            .enumerate()
            .map(|(i, (name, value))| Param {
                name: name.to_string(),
                kind: match i {
                    PROTOTYPES => ParamKind::Prototype,
                    BN_MEAN | BN_VAR => ParamKind::Buffer,
                    _ => ParamKind::Trainable,
                },
                value: Arc::new(value),
            })
            .collect();
        Ok(Self {
            pe: Arc::new(encoder::positional_encoding(dims.max_tokens, dims.position)?),
            marker: encoder::marker_vector(seeds.seed(), dims.embed),
            dims,
            categories,
            params,
            dropout,
        })
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.params[PROTOTYPES].value
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    /// Append categories with fresh, normalised Xavier prototype rows; existing rows are kept.
    pub fn extend_categories(&mut self, new: &[String], seeds: &SeedTree) -> Result<()> {
        let fresh: Vec<String> = new.iter().filter(|c| !self.categories.contains(c)).cloned().collect();
        if fresh.is_empty() {
            return Ok(());
        }
        let d = self.dims.output;
        let mut rng = seeds.stream(&format!("prototypes+{}", fresh.join(",")));
        let rows = prototype_rows(&mut rng, fresh.len() * self.dims.prototypes, d)?;
        let mut data = self.prototypes().data().to_vec();
        data.extend_from_slice(rows.data());
        let total = self.categories.len() + fresh.len();
        self.params[PROTOTYPES].value = Arc::new(Tensor::matrix(total * self.dims.prototypes, d, data)?);
        self.categories.extend(fresh);
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&Checkpoint {
            version: CHECKPOINT_VERSION,
            dims: self.dims,
            categories: self.categories.clone(),
            dropout: self.dropout,
            marker: self.marker.clone(),
            params: self.params.clone(),
        })?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let c: Checkpoint = serde_json::from_slice(bytes)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", c.version)));
        }
        let names: Vec<&str> = c.params.iter().map(|p| p.name.as_str()).collect();
        if names != PARAM_NAMES {
            return Err(Error::Config(format!("unexpected checkpoint parameter layout {names:?}")));
        }
        Ok(Self {
            pe: Arc::new(encoder::positional_encoding(c.dims.max_tokens, c.dims.position)?),
            dims: c.dims,
            categories: c.categories,
            params: c.params,
            marker: c.marker,
            dropout: c.dropout,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn checksum(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_json()?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn prepare(&self, span: &MarkedSpan, table: &StaticEmbeddingTable) -> Result<EncoderInput> {
        if table.dim() != self.dims.embed {
            return Err(Error::shape("embedding table", &[self.dims.embed], &[table.dim()]));
        }
        encoder::prepare_input(span, table, &self.marker, &self.pe)
    }

    fn encoder_leaves(&self, g: &Graph) -> (EncoderVars, [Var; ENCODER_PARAMS]) {
        let v: [Var; ENCODER_PARAMS] = std::array::from_fn(|i| g.leaf_shared(self.params[i].value.clone()));
        let vars = EncoderVars {
            forward: LstmVars { w_ih: v[0], w_hh: v[1], bias: v[2] },
            backward: LstmVars { w_ih: v[3], w_hh: v[4], bias: v[5] },
            w_p: v[6],
        };
        (vars, v)
    }

    /// Span representations `B × representation`, no gradients.
    pub fn represent(&self, spans: &[MarkedSpan], table: &StaticEmbeddingTable) -> Result<Tensor> {
        let rows = par::map(spans, |s| -> Result<Vec<f64>> {
            let input = self.prepare(s, table)?;
            let g = Graph::new();
            let (vars, _) = self.encoder_leaves(&g);
            let out = encoder::encode(&g, &input, &vars, self.dims.hidden)?;
            Ok(g.value(out).data().to_vec())
        });
        let rows: Vec<Vec<f64>> = rows.into_iter().collect::<Result<_>>()?;
        if rows.is_empty() {
            return Ok(Tensor::zeros(&[0, self.dims.representation]));
        }
        Tensor::from_rows(&rows)
    }

    /// Projection network on `s` (`B × representation`).
    ///
    /// In train mode batch statistics normalise the hidden layer and the
    /// updated running averages are returned; in eval mode the running
    /// averages are used and dropout is off.
    pub fn project(
        &self,
        g: &Graph,
        s: Var,
        net: &[Var],
        train: Option<&mut StreamRng>,
    ) -> Result<(Var, Option<(Tensor, Tensor)>)> {
        let [w1, b1, gamma, beta, _, _, w_out, b_out, ln_gamma, ln_beta] = net[..] else {
            return Err(Error::invalid("projection needs 10 parameter handles"));
        };
        let pre = g.add(g.matmul(s, w1)?, b1)?;
        let mut running = None;
        let normed = match train {
            Some(_) => {
                let v = g.value(pre);
                let (rows, cols) = (v.rows(), v.cols());
                let mut mean = vec![0.0; cols];
                let mut var = vec![0.0; cols];
                for r in 0..rows {
                    for (m, x) in mean.iter_mut().zip(v.row(r)) {
                        *m += x / rows as f64;
                    }
                }
                for r in 0..rows {
                    for ((s2, m), x) in var.iter_mut().zip(&mean).zip(v.row(r)) {
                        *s2 += (x - m).powi(2) / rows as f64;
                    }
                }
                let blend = |old: &Tensor, new: &[f64]| {
                    let data = old
                        .data()
                        .iter()
                        .zip(new)
                        .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n)
                        .collect();
                    Tensor::matrix(1, cols, data)
                };
                running = Some((
                    blend(&self.params[BN_MEAN].value, &mean)?,
                    blend(&self.params[BN_VAR].value, &var)?,
                ));
                g.standardize(pre, Axis::Rows, NORM_EPS)
            }
            None => {
                let mean = g.constant((*self.params[BN_MEAN].value).clone());
                let inv = self.params[BN_VAR].value.map(|v| 1.0 / (v + NORM_EPS).sqrt());
                g.mul(g.sub(pre, mean)?, g.constant(inv))?
            }
        };
        let bn = g.add(g.mul(normed, gamma)?, beta)?;
        let mut act = g.gelu(bn);
        if let Some(rng) = train {
            if self.dropout > 0.0 {
                let shape = g.shape(act);
                let keep = 1.0 - self.dropout;
                let n: usize = shape.iter().product();
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < self.dropout { 0.0 } else { 1.0 / keep })
                    .collect();
                act = g.mul(act, g.constant(Tensor::new(shape, mask)?))?;
            }
        }
        let out = g.add(g.matmul(act, w_out)?, b_out)?;
        let z = g.add(g.mul(g.standardize(out, Axis::Cols, NORM_EPS), ln_gamma)?, ln_beta)?;
        Ok((z, running))
    }

    fn net_leaves(&self, g: &Graph) -> Vec<Var> {
        (W_HIDDEN..PROTOTYPES).map(|i| g.leaf_shared(self.params[i].value.clone())).collect()
    }

    /// Projected vectors `B × D` in eval mode.
    pub fn embed(&self, spans: &[MarkedSpan], table: &StaticEmbeddingTable) -> Result<Tensor> {
        if spans.is_empty() {
            return Ok(Tensor::zeros(&[0, self.dims.output]));
        }
        let s = self.represent(spans, table)?;
        let g = Graph::new();
        let sv = g.constant(s);
        let (z, _) = self.project(&g, sv, &self.net_leaves(&g), None)?;
        Ok((*g.value(z)).clone())
    }

    /// `(category index, score)` for each span.
    pub fn predict_spans(
        &self,
        spans: &[MarkedSpan],
        table: &StaticEmbeddingTable,
        rule: PredictRule,
    ) -> Result<Vec<(usize, f64)>> {
        let z = self.embed(spans, table)?;
        Ok((0..z.rows())
            .map(|r| predict(z.row(r), self.prototypes(), self.dims.prototypes, rule))
            .collect())
    }

    /// Global prototype-row indices for the listed categories.
    fn prototype_rows_for(&self, categories: &[String]) -> Result<Vec<usize>> {
        let m = self.dims.prototypes;
        let mut rows = Vec::with_capacity(categories.len() * m);
        for c in categories {
            let i = self
                .category_index(c)
                .ok_or_else(|| Error::invalid(format!("category `{c}` not in model")))?;
            rows.extend(i * m..(i + 1) * m);
        }
        Ok(rows)
    }

    /// Loss on a support batch grouped as `shots` spans per listed category,
    /// with gradients for every non-buffer parameter.
    pub fn loss_and_gradients(
        &self,
        support: &[MarkedSpan],
        categories: &[String],
        shots: usize,
        table: &StaticEmbeddingTable,
        objective: Objective,
        rng: &mut StreamRng,
    ) -> Result<StepOutput> {
        let (n, m, k) = (categories.len(), self.dims.prototypes, shots);
        if support.len() != n * k || n == 0 || k == 0 {
            return Err(Error::invalid(format!(
                "support has {} spans, expected {n}×{k}",
                support.len()
            )));
        }
        let inputs: Vec<EncoderInput> = par::map(support, |s| self.prepare(s, table))
            .into_iter()
            .collect::<Result<_>>()?;
        let encoded = par::map_owned(inputs, |input| -> Result<(Graph, Var, [Var; ENCODER_PARAMS])> {
            let g = Graph::new();
            let (vars, leaves) = self.encoder_leaves(&g);
            let s = encoder::encode(&g, &input, &vars, self.dims.hidden)?;
            Ok((g, s, leaves))
        });
        let encoded: Vec<(Graph, Var, [Var; ENCODER_PARAMS])> = encoded.into_iter().collect::<Result<_>>()?;
        let rows: Vec<Vec<f64>> = encoded.iter().map(|(g, s, _)| g.value(*s).data().to_vec()).collect();

        let g = Graph::new();
        let s = g.leaf(Tensor::from_rows(&rows)?);
        let net = self.net_leaves(&g);
        let p_all = g.leaf_shared(self.params[PROTOTYPES].value.clone());
        let (z, running) = self.project(&g, s, &net, Some(rng))?;
        let rows_for_task = self.prototype_rows_for(categories)?;
        let p_task = if rows_for_task.len() == self.prototypes().rows() && rows_for_task.iter().enumerate().all(|(i, &r)| i == r) {
            p_all
        } else {
            g.gather_rows(p_all, &rows_for_task)?
        };
        let mut breakdown = LossBreakdown::default();
        let total = match objective {
            Objective::Contrastive => {
                let lp = proto_repulsion_loss(&g, p_all)?;
                let ls = span_alignment_loss(&g, p_task, z, n, m, k)?;
                breakdown.proto = g.scalar(lp);
                breakdown.span = g.scalar(ls);
                g.add(lp, ls)?
            }
            Objective::CrossEntropy => {
                let ce = cross_entropy_loss(&g, p_task, z, n, m, k)?;
                breakdown.cross_entropy = g.scalar(ce);
                ce
            }
        };
        breakdown.total = g.scalar(total);
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("loss {breakdown:?}")));
        }
        let mut grads = g.backward(total)?;
        let ds = grads.take(s);

        let seeds: Vec<(usize, EncodedSpan)> = encoded.into_iter().enumerate().collect();
        let per_span = par::map_owned(seeds, |(i, (eg, sv, leaves))| -> Result<Vec<Tensor>> {
            let seed = Tensor::matrix(1, ds.cols(), ds.row(i).to_vec())?;
            let gr = eg.backward_seeded(sv, seed)?;
            Ok(leaves.iter().map(|&l| gr.wrt(l)).collect())
        });
        let mut encoder_grads: Vec<Tensor> = (0..ENCODER_PARAMS)
            .map(|i| Tensor::zeros(self.params[i].value.shape()))
            .collect();
        for span_grads in per_span {
            for (acc, gi) in encoder_grads.iter_mut().zip(span_grads?) {
                acc.add_scaled(&gi, 1.0)?;
            }
        }
        let mut out: Vec<Option<Tensor>> = encoder_grads.into_iter().map(Some).collect();
        for (i, v) in net.iter().enumerate() {
            let idx = W_HIDDEN + i;
            out.push((self.params[idx].kind == ParamKind::Trainable).then(|| grads.wrt(*v)));
        }
        out.push(Some(grads.wrt(p_all)));
        Ok(StepOutput {
            loss: breakdown,
            grads: out,
            running,
        })
    }

    /// Install updated batch-norm running statistics.
    pub fn set_running_stats(&mut self, mean: Tensor, var: Tensor) {
        self.params[BN_MEAN].value = Arc::new(mean);
        self.params[BN_VAR].value = Arc::new(var);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub proto: f64,
    pub span: f64,
    pub cross_entropy: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: LossBreakdown,
    /// aligned with [`Model::params`]; `None` for buffers
    pub grads: Vec<Option<Tensor>>,
    pub running: Option<(Tensor, Tensor)>,
}

fn diagonal_mask(n: usize, value: f64) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.row_mut(i)[i] = value;
    }
    t
}

/// `(1/NM) Σ_i max_{j≠i} (cos(p_i, p_j) + 1)` over every prototype row.
pub fn proto_repulsion_loss(g: &Graph, p: Var) -> Result<Var> {
    let n = g.value(p).rows();
    if n < 2 {
        return Err(Error::invalid("prototype repulsion needs at least two prototypes"));
    }
    let cos = g.cosine_similarity(p, p)?;
    // cos ≥ −1, so an offset of −4 removes the diagonal from every row max
    let masked = g.add(cos, g.constant(diagonal_mask(n, -4.0)))?;
    Ok(g.mean(g.add_scalar(g.max_over_axis(masked, Axis::Cols), 1.0)))
}

/// Per-category terms `(1/K) Σ_{j∈c} H̃_{c,j} / (Σ_j H̃_{c,j} + ε)`.
pub fn span_alignment_terms(g: &Graph, p: Var, z: Var, n: usize, m: usize, k: usize) -> Result<Vec<Var>> {
    let (pr, zr) = (g.value(p).rows(), g.value(z).rows());
    if pr != n * m || zr != n * k {
        return Err(Error::shape("span_alignment_loss", &[pr, zr], &[n * m, n * k]));
    }
    let dist = g.square(g.add_scalar(g.scale(g.cosine_similarity(p, z)?, -1.0), 1.0));
    (0..n)
        .map(|c| {
            let pooled = g.min_over_axis(g.slice_rows(dist, c * m, (c + 1) * m)?, Axis::Rows);
            let own = g.scale(g.sum(g.slice_cols(pooled, c * k, (c + 1) * k)?), 1.0 / k as f64);
            let all = g.sum(pooled);
            if g.scalar(all) == 0.0 {
                log::warn!("span alignment denominator vanished for category block {c}");
            }
            g.div(own, g.add_scalar(all, L_SPAN_EPS))
        })
        .collect()
}

pub fn span_alignment_loss(g: &Graph, p: Var, z: Var, n: usize, m: usize, k: usize) -> Result<Var> {
    let terms = span_alignment_terms(g, p, z, n, m, k)?;
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Mean softmax cross-entropy with logits `max_{k∈c} cos(p_k, z_j)`.
pub fn cross_entropy_loss(g: &Graph, p: Var, z: Var, n: usize, m: usize, k: usize) -> Result<Var> {
    let cos = g.cosine_similarity(p, z)?;
    let per_cat: Vec<Var> = (0..n)
        .map(|c| Ok(g.max_over_axis(g.slice_rows(cos, c * m, (c + 1) * m)?, Axis::Rows)))
        .collect::<Result<_>>()?;
    let logits = g.transpose(g.concat(&per_cat, Axis::Rows)?);
    let mut onehot = Tensor::zeros(&[n * k, n]);
    for j in 0..n * k {
        onehot.row_mut(j)[j / k] = 1.0;
    }
    let picked = g.sum(g.mul(g.log_softmax(logits), g.constant(onehot))?);
    Ok(g.scale(picked, -1.0 / (n * k) as f64))
}

/// Best category by max (or mean) cosine over its `m` prototypes; ties go to the lowest index.
pub fn predict(z: &[f64], prototypes: &Tensor, m: usize, rule: PredictRule) -> (usize, f64) {
    let n = prototypes.rows() / m;
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..n {
        let sims = (c * m..(c + 1) * m).map(|r| crate::numerics::tensor::cosine(z, prototypes.row(r)));
        let score = match rule {
            PredictRule::Max => sims.fold(f64::NEG_INFINITY, f64::max),
            PredictRule::Mean => sims.sum::<f64>() / m as f64,
        };
        if score > best.1 {
            best = (c, score);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::compare_gradients;
    use crate::numerics::tensor::cosine;

    fn random(seed: u64, r: usize, c: usize) -> Tensor {
        xavier_uniform(&mut SeedTree::new(seed).stream("t"), r, c).unwrap()
    }

    fn naive_span_loss(p: &Tensor, z: &Tensor, n: usize, m: usize, k: usize) -> f64 {
        let mut total = 0.0;
        for c in 0..n {
            let mut own = 0.0;
            let mut all = 0.0;
            for j in 0..n * k {
                let mut best = f64::INFINITY;
                for r in c * m..(c + 1) * m {
                    let h = (1.0 - cosine(p.row(r), z.row(j))).powi(2);
                    best = best.min(h);
                }
                all += best;
                if j / k == c {
                    own += best;
                }
            }
            total += (own / k as f64) / (all + L_SPAN_EPS);
        }
        total
    }

    fn eval<F: Fn(&Graph, Var, Var) -> Result<Var>>(p: &Tensor, z: &Tensor, f: F) -> f64 {
        let g = Graph::new();
        let (pv, zv) = (g.leaf(p.clone()), g.leaf(z.clone()));
        let out = f(&g, pv, zv).unwrap();
        g.scalar(out)
    }

    #[test]
    fn repulsion_analytic_cases() {
        let lp = |rows: &[Vec<f64>]| {
            let p = Tensor::from_rows(rows).unwrap();
            eval(&p, &p, |g, p, _| proto_repulsion_loss(g, p))
        };
        assert!(lp(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).abs() < 1e-12);
        assert!((lp(&[vec![0.3, 0.4], vec![0.3, 0.4]]) - 2.0).abs() < 1e-12);
        let eye = [vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        assert!((lp(&eye) - 1.0).abs() < 1e-12);
        let g = Graph::new();
        let single = g.leaf(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        assert!(proto_repulsion_loss(&g, single).is_err());
    }

    #[test]
    fn span_loss_matches_naive_loops() {
        for seed in 0..10 {
            let (n, m, k, d) = (3, 2, 4, 8);
            let p = random(seed, n * m, d);
            let z = random(seed + 100, n * k, d);
            let fast = eval(&p, &z, |g, p, z| span_alignment_loss(g, p, z, n, m, k));
            assert!((fast - naive_span_loss(&p, &z, n, m, k)).abs() < 1e-12);
        }
    }

    #[test]
    fn span_loss_special_cases() {
        let p = random(4, 3, 5);
        let z = random(5, 4, 5);
        let one = eval(&p, &z, |g, p, z| span_alignment_loss(g, p, z, 1, 3, 4));
        assert!((one - 0.25).abs() < 1e-12);
        // spans sitting on their own prototypes, far from the other category
        let p = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let z = Tensor::from_rows(&[vec![2.0, 0.0], vec![-3.0, 0.0]]).unwrap();
        assert!(eval(&p, &z, |g, p, z| span_alignment_loss(g, p, z, 2, 1, 1)).abs() < 1e-12);
    }

    #[test]
    fn full_loss_gradients() {
        let (n, m, k, d) = (3, 2, 4, 8);
        let inputs = [random(1, n * m, d), random(2, n * k, d)];
        let cmp = compare_gradients(&inputs, 1e-6, |g, v| {
            let lp = proto_repulsion_loss(g, v[0])?;
            let ls = span_alignment_loss(g, v[0], v[1], n, m, k)?;
            g.add(lp, ls)
        })
        .unwrap();
        assert!(cmp.max_relative_error() < 1e-4, "{}", cmp.max_relative_error());
        let cmp = compare_gradients(&inputs, 1e-6, |g, v| cross_entropy_loss(g, v[0], v[1], n, m, k)).unwrap();
        assert!(cmp.max_relative_error() < 1e-4, "{}", cmp.max_relative_error());
    }

    #[test]
    fn prediction_rules() {
        let p = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.6, 0.8]]).unwrap();
        let (c, s) = predict(&[0.6, 0.8], &p, 2, PredictRule::Max);
        assert_eq!(c, 1);
        assert!((s - 1.0).abs() < 1e-12);
        // orthogonal to everything → first category wins the tie at score 0
        let q = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(predict(&[1.0, 0.0, 0.0], &q, 1, PredictRule::Max), (0, 0.0));
        assert_eq!(predict(&[0.6, 0.8], &p, 2, PredictRule::Mean).0, 0);
    }

    fn tiny_dims() -> ModelDims {
        ModelDims {
            embed: 6,
            position: 4,
            hidden: 3,
            representation: 5,
            output: 4,
            prototypes: 2,
            max_tokens: 12,
        }
    }

    fn tiny_setup() -> (Model, StaticEmbeddingTable, Vec<MarkedSpan>, Vec<String>) {
        let cats: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let model = Model::new(cats.clone(), tiny_dims(), 0.0, &SeedTree::new(42)).unwrap();
        let table = StaticEmbeddingTable::new(6);
        let words: Vec<String> = ["the", "red", "cell", "grew", "fast"].iter().map(|s| s.to_string()).collect();
        let spans = vec![
            MarkedSpan::from_tokens("s", &words, 1, 3, "a").unwrap(),
            MarkedSpan::from_tokens("s", &words, 0, 1, "a").unwrap(),
            MarkedSpan::from_tokens("s", &words, 3, 4, "b").unwrap(),
            MarkedSpan::from_tokens("s", &words, 2, 5, "b").unwrap(),
        ];
        (model, table, spans, cats)
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let (model, table, spans, cats) = tiny_setup();
        let out = model
            .loss_and_gradients(&spans, &cats, 2, &table, Objective::Contrastive, &mut SeedTree::new(1).stream("d"))
            .unwrap();
        for idx in [0, 1, 6, 7, 13, 16, PROTOTYPES] {
            let analytic = out.grads[idx].as_ref().unwrap();
            let h = 1e-6;
            let mut numeric = vec![0.0; analytic.len()];
            for (e, num) in numeric.iter_mut().enumerate() {
                let loss_at = |delta: f64| {
                    let mut m2 = model.clone();
                    let mut t = (*m2.params[idx].value).clone();
                    t.data_mut()[e] += delta;
                    m2.params[idx].value = Arc::new(t);
                    m2.loss_and_gradients(&spans, &cats, 2, &table, Objective::Contrastive, &mut SeedTree::new(1).stream("d"))
                        .unwrap()
                        .loss
                        .total
                };
                *num = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            }
            let err = crate::numerics::gradcheck::relative_error(analytic.data(), &numeric);
            assert!(err < 1e-4, "{}: {err}", PARAM_NAMES[idx]);
        }
        assert!(out.grads[BN_MEAN].is_none());
    }

    #[test]
    fn eval_projection_deterministic_and_layer_normalised() {
        let (model, table, spans, _) = tiny_setup();
        let a = model.embed(&spans, &table).unwrap();
        assert_eq!(a, model.embed(&spans, &table).unwrap());
        for r in 0..a.rows() {
            let mean: f64 = a.row(r).iter().sum::<f64>() / a.cols() as f64;
            assert!(mean.abs() < 1e-9);
        }
        let empty = model.embed(&[], &table).unwrap();
        assert_eq!(empty.shape(), &[0, 4]);
    }

    #[test]
    fn checkpoint_round_trip_and_extension() {
        let (mut model, _, _, _) = tiny_setup();
        let bytes = model.to_json().unwrap();
        let back = Model::from_json(&bytes).unwrap();
        assert_eq!(back.to_json().unwrap(), bytes);
        let before = model.prototypes().clone();
        model.extend_categories(&["c".to_string()], &SeedTree::new(42)).unwrap();
        assert_eq!(model.prototypes().rows(), 6);
        assert_eq!(&model.prototypes().data()[..before.len()], before.data());
        for r in 0..6 {
            let n: f64 = model.prototypes().row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
