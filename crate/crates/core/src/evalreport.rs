//! Metrics, reports, the ablation harness, the tag-set extension protocol and
//! the scalability comparison.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::encoder::{ModelDims, StaticEmbeddingTable};
use crate::episodes::{sample_episodes, CategoryPools, EpisodeSpec, EpisodeTask};
use crate::error::{Error, Result};
use crate::metatrain::{train_profile, HardNegativeConfig, MetaConfig, ProfileOutcome};
use crate::numerics::SeedTree;
use crate::protomodel::{Model, Objective, PredictRule};
use crate::spans::MarkedSpan;
use crate::taxonomy::UNKNOWN_TYPE;

/// `counts[gold][pred]`.
pub fn confusion(pred: &[usize], gold: &[usize], n: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != gold.len() {
        return Err(Error::invalid(format!("{} predictions for {} gold labels", pred.len(), gold.len())));
    }
    let mut m = vec![vec![0u64; n]; n];
    for (&p, &g) in pred.iter().zip(gold) {
        if p >= n || g >= n {
            return Err(Error::invalid(format!("label index {} outside {n} categories", p.max(g))));
        }
        m[g][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Precision, recall and F1 per category; any zero denominator gives 0.
pub fn per_category(conf: &[Vec<u64>], names: &[String]) -> Vec<CategoryMetrics> {
    let n = conf.len();
    (0..n)
        .map(|c| {
            let tp = conf[c][c] as f64;
            let gold: u64 = conf[c].iter().sum();
            let predicted: u64 = (0..n).map(|r| conf[r][c]).sum();
            let ratio = |a: f64, b: u64| if b == 0 { 0.0 } else { a / b as f64 };
            let (p, r) = (ratio(tp, predicted), ratio(tp, gold));
            CategoryMetrics {
                name: names.get(c).cloned().unwrap_or_else(|| c.to_string()),
                precision: p,
                recall: r,
                f1: if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) },
                support: gold,
            }
        })
        .collect()
}

/// Unweighted mean of per-category F1 over all `n` categories.
pub fn macro_f1(pred: &[usize], gold: &[usize], n: usize) -> Result<f64> {
    let all: Vec<usize> = (0..n).collect();
    macro_f1_over(pred, gold, n, &all)
}

/// Macro-F1 averaged over the category indices in `subset` only.
pub fn macro_f1_over(pred: &[usize], gold: &[usize], n: usize, subset: &[usize]) -> Result<f64> {
    if pred.is_empty() || subset.is_empty() {
        return Err(Error::invalid("macro-F1 of an empty set"));
    }
    let m = per_category(&confusion(pred, gold, n)?, &[]);
    Ok(subset.iter().map(|&c| m[c].f1).sum::<f64>() / subset.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<String>,
    pub per_category: Vec<CategoryMetrics>,
    pub macro_f1: f64,
    pub confusion: Vec<Vec<u64>>,
    pub total: usize,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn from_predictions(pred: &[usize], gold: &[usize], categories: &[String], config: serde_json::Value) -> Result<Self> {
        let conf = confusion(pred, gold, categories.len())?;
        let per = per_category(&conf, categories);
        let macro_f1 = if per.is_empty() {
            0.0
        } else {
            per.iter().map(|m| m.f1).sum::<f64>() / per.len() as f64
        };
        Ok(Self {
            categories: categories.to_vec(),
            per_category: per,
            macro_f1,
            confusion: conf,
            total: pred.len(),
            config,
        })
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| Category | Precision | Recall | F1 | Support |");
        let _ = writeln!(s, "|---|---:|---:|---:|---:|");
        for m in &self.per_category {
            let _ = writeln!(
                s,
                "| {} | {:.2} | {:.2} | {:.2} | {} |",
                m.name,
                100.0 * m.precision,
                100.0 * m.recall,
                100.0 * m.f1,
                m.support
            );
        }
        let _ = writeln!(s, "\nMacro-F1 (%): {:.2} over {} spans", 100.0 * self.macro_f1, self.total);
        s
    }

    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("gold\\pred");
        for c in &self.categories {
            let _ = write!(s, ",{}", csv_field(c));
        }
        s.push('\n');
        for (c, row) in self.categories.iter().zip(&self.confusion) {
            s.push_str(&csv_field(c));
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Write `<stem>.json`, `<stem>.md` and `<stem>_confusion.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            (format!("{stem}.json"), serde_json::to_string_pretty(self)?),
            (format!("{stem}.md"), self.to_markdown()),
            (format!("{stem}_confusion.csv"), self.confusion_csv()),
        ];
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Gold indices for `spans` under `model`'s category order.
pub fn gold_indices(model: &Model, spans: &[MarkedSpan]) -> Result<Vec<usize>> {
    spans
        .iter()
        .map(|s| {
            model
                .category_index(&s.label)
                .ok_or_else(|| Error::invalid(format!("label `{}` unknown to the model", s.label)))
        })
        .collect()
}

pub fn evaluate(
    model: &Model,
    spans: &[MarkedSpan],
    table: &StaticEmbeddingTable,
    rule: PredictRule,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let gold = gold_indices(model, spans)?;
    let pred: Vec<usize> = model.predict_spans(spans, table, rule)?.into_iter().map(|p| p.0).collect();
    EvalReport::from_predictions(&pred, &gold, &model.categories, config)
}

/// CSV of `category, z_0 … z_{D-1}` per span; values round-trip exactly.
pub fn dump_projections(model: &Model, spans: &[MarkedSpan], table: &StaticEmbeddingTable, path: &Path) -> Result<()> {
    let z = model.embed(spans, table)?;
    let mut s = String::from("category");
    for d in 0..model.dims.output {
        let _ = write!(s, ",z{d}");
    }
    s.push('\n');
    for (r, span) in spans.iter().enumerate() {
        s.push_str(&csv_field(&span.label));
        for x in z.row(r) {
            let _ = write!(s, ",{x}");
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_projections(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, line)| {
            let (label, rest) = split_label(line);
            let values = rest
                .split(',')
                .filter(|f| !f.is_empty())
                .map(str::parse)
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            Ok((label.replace("\"\"", "\""), values))
        })
        .collect()
}

fn split_label(line: &str) -> (&str, &str) {
    if let Some(rest) = line.strip_prefix('"') {
        // quoted label: find the closing quote not followed by another quote
        let bytes = rest.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i] == b'"' {
                if bytes.get(i + 1) == Some(&b'"') {
                    i += 2;
                    continue;
                }
                return (&rest[..i], rest[i + 1..].trim_start_matches(','));
            }
            i += 1;
        }
        (rest, "")
    } else {
        line.split_once(',').unwrap_or((line, ""))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    SingleProto,
    CeLoss,
    HardNegOff,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "single-proto" => Ok(Self::SingleProto),
            "ce-loss" => Ok(Self::CeLoss),
            "hard-neg-off" => Ok(Self::HardNegOff),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected none, single-proto, ce-loss or hard-neg-off)"
            ))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::SingleProto => "single-proto",
            Self::CeLoss => "ce-loss",
            Self::HardNegOff => "hard-neg-off",
        })
    }
}

/// Everything a training run needs besides the model.
#[derive(Clone, Debug)]
pub struct Experiment<'a> {
    pub pools: &'a CategoryPools,
    pub table: &'a StaticEmbeddingTable,
    pub spec: EpisodeSpec,
    pub dims: ModelDims,
    pub dropout: f64,
    pub meta: MetaConfig,
    pub hard_negatives: HardNegativeConfig,
    /// validation and query spans used per category
    pub eval_per_category: usize,
    pub seed: u64,
}

pub struct RunResult {
    pub outcome: ProfileOutcome,
    pub report: EvalReport,
}

impl Experiment<'_> {
    pub fn validation(&self) -> Vec<MarkedSpan> {
        self.pools.validation_set(self.eval_per_category)
    }

    pub fn query(&self) -> Vec<MarkedSpan> {
        self.pools.query_set(self.eval_per_category)
    }

    pub fn tasks(&self) -> Result<Vec<EpisodeTask>> {
        sample_episodes(self.pools, self.spec, &SeedTree::new(self.seed))
    }

    /// The default profile with exactly one modification applied.
    pub fn run(&self, ablation: Ablation, tasks: Option<&[EpisodeTask]>, config: serde_json::Value) -> Result<RunResult> {
        let seeds = SeedTree::new(self.seed);
        let mut dims = self.dims;
        let mut meta = self.meta;
        let mut hard = Some(&self.hard_negatives);
        match ablation {
            Ablation::None => {}
            Ablation::SingleProto => dims.prototypes = 1,
            Ablation::CeLoss => meta.objective = Objective::CrossEntropy,
            Ablation::HardNegOff => hard = None,
        }
        let owned;
        let tasks = match tasks {
            Some(t) => t,
            None => {
                owned = self.tasks()?;
                &owned
            }
        };
        let model = Model::new(self.pools.names(), dims, self.dropout, &seeds)?;
        let outcome = train_profile(model, tasks, self.pools, self.spec, &self.validation(), self.table, &meta, hard, &seeds)?;
        let report = evaluate(outcome.best(), &self.query(), self.table, meta.predict_rule, config)?;
        Ok(RunResult { outcome, report })
    }
}

/// Mean and Student-t half-width at 95% over the samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub half_width: Option<f64>,
}

pub fn t_interval(values: &[f64]) -> Result<Interval> {
    if values.is_empty() {
        return Err(Error::invalid("confidence interval of no values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return Ok(Interval { mean, half_width: None });
    }
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::invalid(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(Interval {
        mean,
        half_width: Some(t * sd / n.sqrt()),
    })
}

/// Two-sided paired t-test p-value; `None` with fewer than two pairs.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::invalid("paired test needs equal-length samples"));
    }
    if a.len() < 2 {
        return Ok(None);
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd == 0.0 {
        return Ok(Some(if mean == 0.0 { 1.0 } else { 0.0 }));
    }
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(Some(2.0 * (1.0 - dist.cdf(t.abs()))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtensionSplit {
    pub name: String,
    pub held_out: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtensionProtocol {
    pub splits: Vec<ExtensionSplit>,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub seeds: Vec<u64>,
}

impl Default for ExtensionProtocol {
    fn default() -> Self {
        Self {
            splits: Vec::new(),
            phase1_epochs: 100,
            phase2_epochs: 100,
            seeds: vec![42, 123, 999],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtensionRun {
    pub split: String,
    pub seed: u64,
    pub base_categories: usize,
    pub phase1_base_f1: f64,
    pub phase2_base_f1: f64,
    pub phase2_full_f1: f64,
    /// phase-1 predictions naming a held-out label
    pub phase1_held_out_predictions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtensionSummary {
    pub split: String,
    pub phase1_base: Interval,
    pub phase2_base: Interval,
    pub phase2_full: Interval,
    pub base_p_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtensionReport {
    pub runs: Vec<ExtensionRun>,
    pub summaries: Vec<ExtensionSummary>,
}

impl ExtensionReport {
    pub fn to_markdown(&self) -> String {
        let fmt = |i: &Interval| match i.half_width {
            Some(h) => format!("{:.2} ± {:.2}", 100.0 * i.mean, 100.0 * h),
            None => format!("{:.2}", 100.0 * i.mean),
        };
        let mut s = String::from("| Split | Phase-1 Base F1 | Phase-2 Base F1 | Phase-2 Full F1 | p (base) |\n|---|---:|---:|---:|---:|\n");
        for r in &self.summaries {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                r.split,
                fmt(&r.phase1_base),
                fmt(&r.phase2_base),
                fmt(&r.phase2_full),
                r.base_p_value.map_or("n/a".to_string(), |p| format!("{p:.3}"))
            );
        }
        s
    }
}

/// Train on the retained labels, then add the held-out ones and continue training.
pub fn run_extension(exp: &Experiment, protocol: &ExtensionProtocol) -> Result<ExtensionReport> {
    let all = exp.pools.names();
    let query = exp.query();
    let mut runs = Vec::new();
    for split in &protocol.splits {
        if split.held_out.iter().any(|h| h == UNKNOWN_TYPE) {
            return Err(Error::Config(format!("split {} may not hold out {UNKNOWN_TYPE}", split.name)));
        }
        if let Some(h) = split.held_out.iter().find(|h| !all.contains(h)) {
            return Err(Error::Config(format!("split {} holds out unknown label `{h}`", split.name)));
        }
        let base: Vec<String> = all.iter().filter(|c| !split.held_out.contains(c)).cloned().collect();
        let base_pools = exp.pools.restricted(&base)?;
        for &seed in &protocol.seeds {
            let seeds = SeedTree::new(seed);
            let spec1 = EpisodeSpec {
                ways: exp.spec.ways.min(base.len()),
                ..exp.spec
            };
            let tasks1 = sample_episodes(&base_pools, spec1, &seeds)?;
            let meta1 = MetaConfig {
                outer_epochs: protocol.phase1_epochs,
                ..exp.meta
            };
            let model = Model::new(base.clone(), exp.dims, exp.dropout, &seeds)?;
            let val1 = base_pools.validation_set(exp.eval_per_category);
            let p1 = train_profile(model, &tasks1, &base_pools, spec1, &val1, exp.table, &meta1, None, &seeds)?;
            let phase1 = p1.best();

            let preds1 = phase1.predict_spans(&query, exp.table, exp.meta.predict_rule)?;
            let held_out_predictions = preds1
                .iter()
                .filter(|(c, _)| split.held_out.contains(&phase1.categories[*c]))
                .count();
            let base_query: Vec<MarkedSpan> = query.iter().filter(|s| base.contains(&s.label)).cloned().collect();
            let base_idx: Vec<usize> = (0..base.len()).collect();
            let phase1_base_f1 = {
                let gold = gold_indices(phase1, &base_query)?;
                let pred: Vec<usize> = phase1.predict_spans(&base_query, exp.table, exp.meta.predict_rule)?.into_iter().map(|p| p.0).collect();
                macro_f1_over(&pred, &gold, phase1.categories.len(), &base_idx)?
            };

            let mut model2 = phase1.clone();
            model2.extend_categories(&split.held_out, &seeds)?;
            let seeds2 = SeedTree::new(seed ^ 0x5048_4153_4532);
            let spec2 = EpisodeSpec {
                ways: exp.spec.ways.min(all.len()),
                ..exp.spec
            };
            let tasks2 = sample_episodes(exp.pools, spec2, &seeds2)?;
            let meta2 = MetaConfig {
                outer_epochs: protocol.phase2_epochs,
                ..exp.meta
            };
            let p2 = train_profile(model2, &tasks2, exp.pools, spec2, &exp.validation(), exp.table, &meta2, None, &seeds2)?;
            let phase2 = p2.best();
            let gold = gold_indices(phase2, &query)?;
            let pred: Vec<usize> = phase2.predict_spans(&query, exp.table, exp.meta.predict_rule)?.into_iter().map(|p| p.0).collect();
            let phase2_full_f1 = macro_f1(&pred, &gold, phase2.categories.len())?;
            let base_in_phase2: Vec<usize> = base.iter().map(|c| phase2.category_index(c).expect("base kept")).collect();
            let keep: Vec<usize> = (0..query.len()).filter(|&i| base.contains(&query[i].label)).collect();
            let phase2_base_f1 = macro_f1_over(
                &keep.iter().map(|&i| pred[i]).collect::<Vec<_>>(),
                &keep.iter().map(|&i| gold[i]).collect::<Vec<_>>(),
                phase2.categories.len(),
                &base_in_phase2,
            )?;
            log::info!(
                "extension {} seed {seed}: base {phase1_base_f1:.4} -> {phase2_base_f1:.4}, full {phase2_full_f1:.4}",
                split.name
            );
            runs.push(ExtensionRun {
                split: split.name.clone(),
                seed,
                base_categories: base.len(),
                phase1_base_f1,
                phase2_base_f1,
                phase2_full_f1,
                phase1_held_out_predictions: held_out_predictions,
            });
        }
    }
    let summaries = protocol
        .splits
        .iter()
        .map(|split| {
            let rs: Vec<&ExtensionRun> = runs.iter().filter(|r| r.split == split.name).collect();
            let col = |f: fn(&ExtensionRun) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (b1, b2, full) = (col(|r| r.phase1_base_f1), col(|r| r.phase2_base_f1), col(|r| r.phase2_full_f1));
            Ok(ExtensionSummary {
                split: split.name.clone(),
                phase1_base: t_interval(&b1)?,
                phase2_base: t_interval(&b2)?,
                phase2_full: t_interval(&full)?,
                base_p_value: paired_t_test(&b1, &b2)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ExtensionReport { runs, summaries })
}

/// Macro-F1 at a smaller and a larger category count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalabilityRow {
    pub setting: String,
    pub small_categories: usize,
    pub large_categories: usize,
    pub f1_small: f64,
    pub f1_large: f64,
    pub delta: f64,
    pub relative_drop_pct: f64,
}

/// `ΔF1 = small − large` and `ΔF1 / small` in percent.
pub fn relative_drop(f1_small: f64, f1_large: f64) -> (f64, f64) {
    let delta = f1_small - f1_large;
    (delta, 100.0 * delta / f1_small)
}

impl ScalabilityRow {
    pub fn new(setting: &str, small: usize, large: usize, f1_small: f64, f1_large: f64) -> Self {
        let (delta, relative_drop_pct) = relative_drop(f1_small, f1_large);
        Self {
            setting: setting.to_string(),
            small_categories: small,
            large_categories: large,
            f1_small,
            f1_large,
            delta,
            relative_drop_pct,
        }
    }
}

/// Markdown table with F1 values on the percentage scale.
pub fn scalability_table(rows: &[ScalabilityRow]) -> String {
    let mut s = String::from("| Setting | F1 (small) | F1 (large) | ΔF1 | Relative drop (%) |\n|---|---:|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} ({} → {}) | {:.2} | {:.2} | {:.2} | {:.1} |",
            r.setting,
            r.small_categories,
            r.large_categories,
            100.0 * r.f1_small,
            100.0 * r.f1_large,
            100.0 * r.delta,
            r.relative_drop_pct
        );
    }
    s
}
