use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use protospan::config::{RunConfig, WORKDIR_ENV};
use protospan::evalreport::Ablation;
use protospan::pipeline::{self, Pipeline, StageStatus};

/// Few-shot span classification pipeline.
///
/// Stages run in order (ingest, taxonomy build, spans generate, episodes
/// sample, train, evaluate) and write into the configured working directory.
/// A stage whose inputs are unchanged since its last run is skipped.
#[derive(Parser)]
#[command(name = "protospan", version)]
struct Cli {
    /// Run configuration (TOML)
    #[arg(short, long, global = true, default_value = "protospan.toml")]
    config: PathBuf,
    /// Working directory; overrides `paths.workdir`
    #[arg(long, global = true, env = WORKDIR_ENV)]
    workdir: Option<PathBuf>,
    /// Rerun stages even when their stamps are current
    #[arg(long, global = true)]
    force: bool,
    /// Log verbosity (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the annotated corpus into sentence records
    Ingest,
    /// Taxonomy operations
    Taxonomy {
        #[command(subcommand)]
        action: TaxonomyAction,
    },
    /// Span operations
    Spans {
        #[command(subcommand)]
        action: SpansAction,
    },
    /// Episode operations
    Episodes {
        #[command(subcommand)]
        action: EpisodesAction,
    },
    /// Meta-train a model on the sampled episodes
    Train {
        #[command(flatten)]
        episodes: EpisodeFlags,
        /// Model variant to train
        #[arg(long)]
        ablation: Option<Ablation>,
    },
    /// Score the trained model on the query pools
    Evaluate,
    /// Train and evaluate one or more ablations on the current episodes
    Ablate {
        /// Variants to run; defaults to all four
        #[arg(long, value_delimiter = ',')]
        ablation: Vec<Ablation>,
    },
    /// Run the category-extension protocol over the configured splits
    Extend,
    /// Finite-difference check of every differentiable primitive
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Random cases per primitive
        #[arg(long, default_value_t = 20)]
        cases: usize,
        /// Maximum accepted relative error
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Write the report here as JSON
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic corpus, hierarchy, embeddings and config
    Synth {
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        categories: usize,
        #[arg(long, default_value_t = 200)]
        documents: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run every stage from ingest to evaluate
    Run,
}

#[derive(Subcommand)]
enum TaxonomyAction {
    /// Resolve multi-type entities and build the merge plan
    Build {
        /// Deepest hierarchy level kept
        #[arg(long)]
        depth: Option<usize>,
        /// Minimum mention frequency for a category
        #[arg(long)]
        min_freq: Option<u64>,
    },
}

#[derive(Subcommand)]
enum SpansAction {
    /// Enumerate and label marked spans
    Generate {
        /// Longest span, in tokens
        #[arg(long)]
        max_len: Option<usize>,
    },
}

#[derive(Subcommand)]
enum EpisodesAction {
    /// Split category pools and sample training tasks
    Sample {
        #[command(flatten)]
        episodes: EpisodeFlags,
        /// Number of tasks
        #[arg(long)]
        count: Option<usize>,
    },
}

#[derive(Args)]
struct EpisodeFlags {
    /// Categories per task (0 = all)
    #[arg(long)]
    ways: Option<usize>,
    /// Support spans per category
    #[arg(long)]
    shots: Option<usize>,
    /// Share of each category used as support
    #[arg(long)]
    ratio: Option<f64>,
    /// Master seed
    #[arg(long)]
    seed: Option<u64>,
}

impl EpisodeFlags {
    fn any(&self) -> bool {
        self.ways.is_some() || self.shots.is_some() || self.ratio.is_some() || self.seed.is_some()
    }

    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(w) = self.ways {
            cfg.episodes.ways = w;
        }
        if let Some(s) = self.shots {
            cfg.episodes.shots = s;
        }
        if let Some(r) = self.ratio {
            cfg.episodes.ratio = r;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
    }
}

fn report(stage: &str, status: StageStatus) {
    match status {
        StageStatus::Ran => println!("{stage}: done"),
        StageStatus::UpToDate => println!("{stage}: up to date"),
    }
}

fn load(cli: &Cli, edit: impl FnOnce(&mut RunConfig)) -> protospan::Result<Pipeline> {
    let mut cfg = RunConfig::load(&cli.config)?;
    edit(&mut cfg);
    cfg.validate()?;
    let mut p = Pipeline::new(cfg);
    if let Some(w) = &cli.workdir {
        p.workdir = w.clone();
    }
    p.force = cli.force;
    Ok(p)
}

fn run(cli: &Cli) -> protospan::Result<bool> {
    match &cli.command {
        Command::Ingest => report("ingest", load(cli, |_| {})?.ingest()?),
        Command::Taxonomy {
            action: TaxonomyAction::Build { depth, min_freq },
        } => {
            let p = load(cli, |c| {
                if let Some(d) = depth {
                    c.taxonomy.depth = *d;
                }
                if let Some(m) = min_freq {
                    c.taxonomy.min_freq = *m;
                }
            })?;
            report("taxonomy", p.taxonomy()?);
        }
        Command::Spans {
            action: SpansAction::Generate { max_len },
        } => {
            let p = load(cli, |c| {
                if let Some(m) = max_len {
                    c.spans.max_len = *m;
                }
            })?;
            report("spans", p.spans()?);
        }
        Command::Episodes {
            action: EpisodesAction::Sample { episodes, count },
        } => {
            let p = load(cli, |c| {
                episodes.apply(c);
                if let Some(n) = count {
                    c.episodes.count = *n;
                }
            })?;
            report("episodes", p.episodes()?);
        }
        Command::Train { episodes, ablation } => {
            let p = load(cli, |c| {
                episodes.apply(c);
                if let Some(a) = ablation {
                    c.ablation = *a;
                }
            })?;
            if episodes.any() {
                report("episodes", p.episodes()?);
            }
            report("train", p.train()?);
        }
        Command::Evaluate => {
            let p = load(cli, |_| {})?;
            report("evaluate", p.evaluate()?);
            let eval = p.stage_dir(pipeline::Stage::Evaluate).join("eval.md");
            println!("report: {}", eval.display());
        }
        Command::Ablate { ablation } => {
            let p = load(cli, |_| {})?;
            let which = if ablation.is_empty() {
                vec![Ablation::None, Ablation::SingleProto, Ablation::CeLoss, Ablation::HardNegOff]
            } else {
                ablation.clone()
            };
            for a in which {
                let r = p.ablate(a)?;
                println!("{a}: macro-F1 {:.2}", 100.0 * r.macro_f1);
            }
        }
        Command::Extend => {
            let r = load(cli, |_| {})?.extend()?;
            print!("{}", r.to_markdown());
        }
        Command::Gradcheck {
            seed,
            cases,
            tolerance,
            out,
        } => {
            let checks = pipeline::gradcheck(*seed, *cases, *tolerance, out.as_deref())?;
            let mut ok = true;
            for c in &checks {
                let verdict = if c.passed { "ok" } else { "FAIL" };
                println!("{:<16} {:>4} cases  worst {:.3e}  {verdict}", c.primitive, c.cases, c.worst_relative_error);
                ok &= c.passed;
            }
            return Ok(ok);
        }
        Command::Synth {
            out,
            categories,
            documents,
            seed,
        } => {
            let path = pipeline::write_synthetic(out, *categories, *documents, *seed)?;
            println!("config: {}", path.display());
        }
        Command::Run => {
            for (stage, status) in load(cli, |_| {})?.run_all()? {
                report(stage, status);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
