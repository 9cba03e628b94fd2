//! Multi-stage pipeline over a working directory.
//!
//! Layout: `corpus/ taxonomy/ spans/ episodes/ checkpoints/ reports/`. Each
//! stage directory carries a `.stamp` holding a SHA-256 over the stage's
//! inputs (upstream stamp, input files, relevant config). A stage whose
//! stamp already matches is skipped; a stage whose upstream stamp is missing
//! or stale fails with the command that produces it.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::corpus::{parse_pubtator, sentence_records, Document, SentenceRecord};
use crate::encoder::StaticEmbeddingTable;
use crate::episodes::{build_pools, load_tasks, sample_episodes, save_tasks, CategoryPools, EpisodeSpec};
use crate::error::{Error, Result};
use crate::evalreport::{dump_projections, evaluate, run_extension, Ablation, Experiment};
use crate::numerics::gradcheck::{primitive_suite, PrimitiveCheck};
use crate::numerics::SeedTree;
use crate::protomodel::Model;
use crate::spans::{build_span_store, SpanStore};
use crate::taxonomy::{build_merge_plan, ranked, resolve_documents, MergePlan, TypeHierarchy, UNKNOWN_TYPE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Taxonomy,
    Spans,
    Episodes,
    Train,
    Evaluate,
}

impl Stage {
    pub fn dir(self) -> &'static str {
        match self {
            Self::Ingest => "corpus",
            Self::Taxonomy => "taxonomy",
            Self::Spans => "spans",
            Self::Episodes => "episodes",
            Self::Train => "checkpoints",
            Self::Evaluate => "reports",
        }
    }

    pub fn command(self) -> &'static str {
        match self {
            Self::Ingest => "ingest",
            Self::Taxonomy => "taxonomy build",
            Self::Spans => "spans generate",
            Self::Episodes => "episodes sample",
            Self::Train => "train",
            Self::Evaluate => "evaluate",
        }
    }
}

/// Whether a stage ran or was already up to date.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub workdir: PathBuf,
    pub force: bool,
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub documents: usize,
    pub sentences: usize,
    pub annotations: usize,
    pub dropped_at_parse: usize,
    pub dropped_at_normalisation: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub ablation: Ablation,
    pub best_f1: f64,
    pub epochs_round1: usize,
    pub epochs_round2: Option<usize>,
    pub hard_negatives: Option<usize>,
    pub checksum: String,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Self {
        let workdir = cfg.workdir();
        Self {
            cfg,
            workdir,
            force: false,
        }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.workdir.join(stage.dir())
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join(".stamp")
    }

    fn section<T: Serialize>(value: &T) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(value)?)
    }

    /// The stamp a stage would have under the current inputs.
    pub fn expected_stamp(&self, stage: Stage) -> Result<String> {
        let c = &self.cfg;
        Ok(match stage {
            Stage::Ingest => sha256_hex(&[b"ingest", &read_bytes(&c.resolve(&c.paths.corpus))?]),
            Stage::Taxonomy => sha256_hex(&[
                b"taxonomy",
                self.expected_stamp(Stage::Ingest)?.as_bytes(),
                &read_bytes(&c.resolve(&c.paths.hierarchy))?,
                &Self::section(&c.taxonomy)?,
            ]),
            Stage::Spans => sha256_hex(&[
                b"spans",
                self.expected_stamp(Stage::Taxonomy)?.as_bytes(),
                &Self::section(&c.spans)?,
            ]),
            Stage::Episodes => sha256_hex(&[
                b"episodes",
                self.expected_stamp(Stage::Spans)?.as_bytes(),
                &Self::section(&c.episodes)?,
                &c.seed.to_le_bytes(),
            ]),
            Stage::Train => sha256_hex(&[
                b"train",
                self.expected_stamp(Stage::Episodes)?.as_bytes(),
                &read_bytes(&c.resolve(&c.paths.embeddings))?,
                &Self::section(&(&c.model, &c.meta, &c.hard_negatives, c.ablation))?,
            ]),
            Stage::Evaluate => sha256_hex(&[b"evaluate", self.expected_stamp(Stage::Train)?.as_bytes()]),
        })
    }

    fn current_stamp(&self, stage: Stage) -> Option<String> {
        std::fs::read_to_string(self.stamp_path(stage)).ok()
    }

    /// Fail unless `stage` has run with the current inputs.
    fn require(&self, stage: Stage) -> Result<()> {
        let current = self.current_stamp(stage);
        if current.as_deref() != Some(self.expected_stamp(stage)?.as_str()) {
            return Err(Error::MissingStage {
                path: self.stamp_path(stage),
                prerequisite: stage.command(),
            });
        }
        Ok(())
    }

    fn begin(&self, stage: Stage) -> Result<Option<String>> {
        let expected = self.expected_stamp(stage)?;
        if !self.force && self.current_stamp(stage).as_deref() == Some(expected.as_str()) {
            log::info!("{} is up to date", stage.dir());
            return Ok(None);
        }
        let dir = self.stage_dir(stage);
        if dir.exists() && stage != Stage::Evaluate {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let _ = std::fs::remove_file(self.stamp_path(stage));
        Ok(Some(expected))
    }

    fn finish(&self, stage: Stage, stamp: String) -> Result<StageStatus> {
        write_file(&self.stamp_path(stage), stamp)?;
        Ok(StageStatus::Ran)
    }

    fn config_snapshot(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(&self.cfg)?)
    }

    pub fn ingest(&self) -> Result<StageStatus> {
        let Some(stamp) = self.begin(Stage::Ingest)? else {
            return Ok(StageStatus::UpToDate);
        };
        let parsed = parse_pubtator(&self.cfg.resolve(&self.cfg.paths.corpus))?;
        let per_doc = crate::par::map(&parsed.documents, sentence_records);
        let mut stats = IngestStats {
            documents: parsed.documents.len(),
            dropped_at_parse: parsed.dropped_annotations,
            ..IngestStats::default()
        };
        let mut records = Vec::new();
        for (recs, dropped) in per_doc {
            stats.dropped_at_normalisation += dropped;
            stats.annotations += recs.iter().map(|r| r.annotations.len()).sum::<usize>();
            records.extend(recs);
        }
        stats.sentences = records.len();
        let dir = self.stage_dir(Stage::Ingest);
        write_jsonl(&dir.join("sentences.jsonl"), &records)?;
        write_file(&dir.join("stats.json"), json(&stats)?)?;
        self.finish(Stage::Ingest, stamp)
    }

    pub fn taxonomy(&self) -> Result<StageStatus> {
        self.require(Stage::Ingest)?;
        let Some(stamp) = self.begin(Stage::Taxonomy)? else {
            return Ok(StageStatus::UpToDate);
        };
        let records: Vec<SentenceRecord> = read_jsonl(&self.stage_dir(Stage::Ingest).join("sentences.jsonl"))?;
        let mut docs: Vec<Document> = records
            .iter()
            .map(|r| Document {
                id: r.id.clone(),
                text: r.text.clone(),
                annotations: r.annotations.clone(),
            })
            .collect();
        let t = self.cfg.taxonomy;
        let resolution = resolve_documents(&mut docs, t.min_freq)?;
        let hierarchy = TypeHierarchy::load(&self.cfg.resolve(&self.cfg.paths.hierarchy))?
            .with_frequencies(&resolution.frequencies)?;
        let plan = build_merge_plan(&hierarchy, t.depth, t.min_freq)?;
        let resolved: Vec<SentenceRecord> = records
            .into_iter()
            .zip(docs)
            .map(|(r, d)| SentenceRecord {
                annotations: d.annotations,
                ..r
            })
            .collect();
        let dir = self.stage_dir(Stage::Taxonomy);
        write_file(&dir.join("merge_plan.json"), json(&plan)?)?;
        write_file(&dir.join("pagerank.json"), json(&ranked(&resolution.scores))?)?;
        write_file(&dir.join("cooccurrence.json"), json(&resolution.graph)?)?;
        write_jsonl(&dir.join("sentences.jsonl"), &resolved)?;
        log::info!("{} categories after pruning", plan.categories.len());
        self.finish(Stage::Taxonomy, stamp)
    }

    pub fn merge_plan(&self) -> Result<MergePlan> {
        let path = self.stage_dir(Stage::Taxonomy).join("merge_plan.json");
        Ok(serde_json::from_slice(&read_bytes(&path)?)?)
    }

    pub fn spans(&self) -> Result<StageStatus> {
        self.require(Stage::Taxonomy)?;
        let Some(stamp) = self.begin(Stage::Spans)? else {
            return Ok(StageStatus::UpToDate);
        };
        let records: Vec<SentenceRecord> = read_jsonl(&self.stage_dir(Stage::Taxonomy).join("sentences.jsonl"))?;
        let plan = self.merge_plan()?;
        let (store, stats) = build_span_store(&records, &plan, self.cfg.spans.max_len);
        let dir = self.stage_dir(Stage::Spans);
        store.save(&dir)?;
        write_file(&dir.join("stats.json"), json(&stats)?)?;
        self.finish(Stage::Spans, stamp)
    }

    /// Categories used for episodes: the plan's labels, optionally without [`UNKNOWN_TYPE`].
    pub fn episode_categories(&self) -> Result<Vec<String>> {
        let mut labels = self.merge_plan()?.labels();
        if self.cfg.episodes.exclude_unknown {
            labels.retain(|l| l != UNKNOWN_TYPE);
        }
        Ok(labels)
    }

    pub fn episode_spec(&self, categories: usize) -> EpisodeSpec {
        let e = &self.cfg.episodes;
        EpisodeSpec {
            ways: if e.ways == 0 { categories } else { e.ways },
            shots: e.shots,
            count: e.count,
            eval_per_category: e.eval_per_category,
        }
    }

    pub fn episodes(&self) -> Result<StageStatus> {
        self.require(Stage::Spans)?;
        let Some(stamp) = self.begin(Stage::Episodes)? else {
            return Ok(StageStatus::UpToDate);
        };
        let store = SpanStore::load(&self.stage_dir(Stage::Spans))?;
        let categories = self.episode_categories()?;
        let e = &self.cfg.episodes;
        let seeds = SeedTree::new(self.cfg.seed);
        let pools = build_pools(&store, &categories, e.ratio, e.shots, e.caps, &seeds)?;
        let tasks = sample_episodes(&pools, self.episode_spec(categories.len()), &seeds)?;
        let dir = self.stage_dir(Stage::Episodes);
        pools.save(&dir.join("pools.json"))?;
        save_tasks(&tasks, &dir)?;
        self.finish(Stage::Episodes, stamp)
    }

    pub fn pools(&self) -> Result<CategoryPools> {
        CategoryPools::load(&self.stage_dir(Stage::Episodes).join("pools.json"))
    }

    pub fn embeddings(&self) -> Result<StaticEmbeddingTable> {
        StaticEmbeddingTable::load(&self.cfg.resolve(&self.cfg.paths.embeddings), self.cfg.model.dims.embed)
    }

    fn experiment<'a>(&self, pools: &'a CategoryPools, table: &'a StaticEmbeddingTable) -> Experiment<'a> {
        Experiment {
            pools,
            table,
            spec: self.episode_spec(pools.categories.len()),
            dims: self.cfg.model.dims,
            dropout: self.cfg.model.dropout,
            meta: self.cfg.meta,
            hard_negatives: self.cfg.hard_negatives,
            eval_per_category: self.cfg.episodes.eval_per_category,
            seed: self.cfg.seed,
        }
    }

    pub fn train(&self) -> Result<StageStatus> {
        self.require(Stage::Episodes)?;
        let Some(stamp) = self.begin(Stage::Train)? else {
            return Ok(StageStatus::UpToDate);
        };
        let pools = self.pools()?;
        let tasks = load_tasks(&self.stage_dir(Stage::Episodes))?;
        let table = self.embeddings()?;
        let exp = self.experiment(&pools, &table);
        let result = exp.run(self.cfg.ablation, Some(&tasks), self.config_snapshot()?)?;
        let dir = self.stage_dir(Stage::Train);
        let best = result.outcome.best();
        best.save(&dir.join("model.json"))?;
        write_jsonl(&dir.join("train_log.jsonl"), &result.outcome.history())?;
        let summary = TrainSummary {
            ablation: self.cfg.ablation,
            best_f1: result.outcome.best_f1(),
            epochs_round1: result.outcome.first.epochs_run,
            epochs_round2: result.outcome.second.as_ref().map(|s| s.epochs_run),
            hard_negatives: result.outcome.hard_negatives.as_ref().map(|h| h.total),
            checksum: best.checksum()?,
        };
        write_file(&dir.join("summary.json"), json(&summary)?)?;
        self.finish(Stage::Train, stamp)
    }

    pub fn model(&self) -> Result<Model> {
        Model::load(&self.stage_dir(Stage::Train).join("model.json"))
    }

    pub fn evaluate(&self) -> Result<StageStatus> {
        self.require(Stage::Train)?;
        let Some(stamp) = self.begin(Stage::Evaluate)? else {
            return Ok(StageStatus::UpToDate);
        };
        let model = self.model()?;
        let pools = self.pools()?;
        let table = self.embeddings()?;
        let query = pools.query_set(self.cfg.episodes.eval_per_category);
        let report = evaluate(&model, &query, &table, self.cfg.meta.predict_rule, self.config_snapshot()?)?;
        let dir = self.stage_dir(Stage::Evaluate);
        report.write(&dir, "eval")?;
        dump_projections(&model, &query, &table, &dir.join("projections.csv"))?;
        self.finish(Stage::Evaluate, stamp)
    }

    /// Train and evaluate one ablation on the prepared episodes.
    pub fn ablate(&self, ablation: Ablation) -> Result<crate::evalreport::EvalReport> {
        self.require(Stage::Episodes)?;
        let pools = self.pools()?;
        let tasks = load_tasks(&self.stage_dir(Stage::Episodes))?;
        let table = self.embeddings()?;
        let mut snapshot = self.config_snapshot()?;
        snapshot["ablation"] = serde_json::Value::String(ablation.to_string());
        let result = self.experiment(&pools, &table).run(ablation, Some(&tasks), snapshot)?;
        result
            .report
            .write(&self.stage_dir(Stage::Evaluate), &format!("ablation_{ablation}"))?;
        Ok(result.report)
    }

    pub fn extend(&self) -> Result<crate::evalreport::ExtensionReport> {
        self.require(Stage::Episodes)?;
        if self.cfg.extension.splits.is_empty() {
            return Err(Error::Config("no [[extension.splits]] configured".into()));
        }
        let pools = self.pools()?;
        let table = self.embeddings()?;
        let report = run_extension(&self.experiment(&pools, &table), &self.cfg.extension)?;
        let dir = self.stage_dir(Stage::Evaluate);
        write_file(&dir.join("extension.json"), json(&report)?)?;
        write_file(&dir.join("extension.md"), report.to_markdown())?;
        Ok(report)
    }

    /// Run every stage from ingestion to evaluation.
    pub fn run_all(&self) -> Result<Vec<(&'static str, StageStatus)>> {
        Ok(vec![
            ("ingest", self.ingest()?),
            ("taxonomy", self.taxonomy()?),
            ("spans", self.spans()?),
            ("episodes", self.episodes()?),
            ("train", self.train()?),
            ("evaluate", self.evaluate()?),
        ])
    }
}

/// Finite-difference check of every graph primitive; writes a JSON report when `out` is given.
pub fn gradcheck(seed: u64, cases: usize, tolerance: f64, out: Option<&Path>) -> Result<Vec<PrimitiveCheck>> {
    let checks = primitive_suite(seed, cases, tolerance)?;
    if let Some(path) = out {
        write_file(path, json(&checks)?)?;
    }
    Ok(checks)
}

/// Write a synthetic corpus, hierarchy, embeddings and a matching config into `dir`.
pub fn write_synthetic(dir: &Path, categories: usize, documents: usize, seed: u64) -> Result<PathBuf> {
    let c = crate::synth::corpus(categories, documents, seed)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("corpus.pubtator"), crate::corpus::write_pubtator(&c.documents))?;
    write_file(&dir.join("hierarchy.tsv"), &c.hierarchy_tsv)?;
    c.table.save(&dir.join("embeddings.txt"))?;
    let held: Vec<String> = (0..categories.min(2)).map(crate::synth::category_name).collect();
    let config = format!(
        r#"seed = {seed}
ablation = "none"

[paths]
corpus = "corpus.pubtator"
hierarchy = "hierarchy.tsv"
embeddings = "embeddings.txt"
workdir = "work"

[taxonomy]
depth = 1
min_freq = 10

[spans]
max_len = 4

[episodes]
ways = 0
shots = 5
ratio = 0.5
count = 20
exclude_unknown = false
eval_per_category = 10

[model]
dropout = 0.1

[model.dims]
hidden = 8
representation = 16
output = 16
prototypes = 4

[meta]
outer_epochs = 6
patience = 6

[hard_negatives]
threshold = 0.5
rho = 0.3

[extension]
phase1_epochs = 3
phase2_epochs = 3
seeds = [42, 123, 999]

[[extension.splits]]
name = "A"
held_out = {held:?}
"#
    );
    let path = dir.join("config.toml");
    write_file(&path, config)?;
    Ok(path)
}
