use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use apr_domain_adapt::backend::{BackendKind, NeuralConfig};
use apr_domain_adapt::corpus::{save_corpus, DatasetFormat, ScenarioKind};
use apr_domain_adapt::eval::Normalization;
use apr_domain_adapt::methods::MethodId;
use apr_domain_adapt::study::{Study, StudyConfig};
use apr_domain_adapt::toy;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

/// Domain adaptation study for automated program repair.
#[derive(Parser)]
#[command(name = "apr-da", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override keys of the TOML config.
#[derive(Args)]
struct Overrides {
    /// Study config (TOML); defaults apply without one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    format: Option<DatasetFormat>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// `memorizer` or `toy-neural`.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Comma-separated method ids.
    #[arg(long, global = true, value_delimiter = ',')]
    methods: Option<Vec<MethodId>>,
    #[arg(long, global = true)]
    min_samples: Option<usize>,
    #[arg(long, global = true)]
    stride: Option<usize>,
    /// Partition seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Applies to pretraining, adaptation and generator training.
    #[arg(long, global = true)]
    max_epochs: Option<usize>,
    #[arg(long, global = true)]
    probe_size: Option<usize>,
    #[arg(long, global = true)]
    normalization: Option<Normalization>,
}

#[derive(Subcommand)]
enum Command {
    /// Select target projects and split every project.
    Split,
    /// Train the repair model for one scenario.
    Pretrain {
        #[arg(long)]
        scenario: ScenarioKind,
    },
    /// Adapt the excluded-scenario model to target projects.
    Adapt {
        #[arg(long)]
        method: MethodId,
        #[arg(long, conflicts_with = "all")]
        project: Option<String>,
        #[arg(long)]
        all: bool,
    },
    /// Synthesize repair data for one target project.
    Synthesize {
        #[arg(long)]
        project: String,
    },
    /// Evaluate every configured method and write reports.
    Evaluate,
    /// Re-render reports from the stored evaluation.
    Report,
    /// split, pretrain, adapt and evaluate.
    RunAll,
    /// Write the generated toy corpus.
    ToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

impl Overrides {
    fn apply(&self) -> anyhow::Result<StudyConfig> {
        let mut cfg = match &self.config {
            Some(path) => StudyConfig::load(path)?,
            None => StudyConfig::default(),
        };
        if let Some(v) = &self.dataset {
            cfg.dataset.path = v.clone();
        }
        if let Some(v) = self.format {
            cfg.dataset.format = v;
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &self.backend {
            cfg.backend = match v.as_str() {
                "memorizer" => BackendKind::Memorizer,
                "toy-neural" => match &cfg.backend {
                    BackendKind::ToyNeural(_) => cfg.backend.clone(),
                    BackendKind::Memorizer => BackendKind::ToyNeural(NeuralConfig::default()),
                },
                other => bail!("unknown backend `{other}`"),
            };
        }
        if let Some(v) = &self.methods {
            cfg.methods = v.clone();
        }
        if let Some(v) = self.min_samples {
            cfg.partition.min_samples = v;
        }
        if let Some(v) = self.stride {
            cfg.partition.stride = v;
        }
        if let Some(v) = self.seed {
            cfg.partition.seed = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.pretrain.max_epochs = v;
            cfg.adapt.max_epochs = v;
            cfg.synth.train.max_epochs = v;
        }
        if let Some(v) = self.probe_size {
            cfg.eval.probe_size = v;
        }
        if let Some(v) = self.normalization {
            cfg.eval.normalization = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::ToyCorpus { out, seed } = &cli.command {
        let corpus = toy::toy_corpus(&toy::default_projects(), *seed)?;
        save_corpus(corpus.samples(), out)?;
        println!("wrote {} samples to {}", corpus.len(), out.display());
        return Ok(());
    }
    let study = Study::new(cli.overrides.apply()?)?;
    match cli.command {
        Command::Split => {
            let out = study.split()?;
            println!(
                "{} source and {} target projects",
                out.partition.source_projects.len(),
                out.partition.target_projects.len()
            );
            for r in &out.summary {
                println!(
                    "{}: {} train / {} validation / {} test",
                    r.project_id, r.train, r.validation, r.test
                );
            }
        }
        Command::Pretrain { scenario } => {
            let out = study.pretrain(scenario)?;
            println!(
                "{}: {} epochs, best {}, {:.1}s",
                out.checkpoint.display(),
                out.record.history.executed_epochs(),
                out.record.history.best_epoch,
                out.record.prep_time_s
            );
        }
        Command::Adapt {
            method,
            project,
            all,
        } => {
            let outcomes = match (project, all) {
                (Some(p), false) => vec![study.adapt(method, &p)?],
                (None, true) => {
                    let partition = study.partition()?;
                    partition
                        .target_projects
                        .iter()
                        .map(|p| study.adapt(method, p))
                        .collect::<Result<Vec<_>, _>>()?
                }
                _ => bail!("pass --project <id> or --all"),
            };
            for out in outcomes {
                println!(
                    "{}/{}: {:.1}s, {} bytes",
                    out.method, out.project_id, out.record.prep_time_s, out.checkpoint_bytes
                );
            }
        }
        Command::Synthesize { project } => {
            let out = study.synthesize(&project)?;
            println!(
                "{}: {} generated, {} skipped -> {}",
                out.project_id,
                out.generated,
                out.skipped,
                out.dataset.display()
            );
        }
        Command::Evaluate | Command::RunAll => {
            let evaluation = if matches!(cli.command, Command::RunAll) {
                study.run_all()?
            } else {
                study.evaluate()?
            };
            for r in &evaluation.reports {
                println!(
                    "{:<14} weighted {:6.2}  average {:6.2}  median {:6.2}",
                    r.method,
                    r.aggregates.weighted_average,
                    r.aggregates.average,
                    r.aggregates.median
                );
            }
        }
        Command::Report => {
            for p in study.report()? {
                println!("{}", p.display());
            }
        }
        Command::ToyCorpus { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli).context("apr-da failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<apr_domain_adapt::Error>())
                .map_or("internal", |e| e.kind());
            let message = e
                .chain()
                .skip(1)
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(": ");
            eprintln!("{}", json!({"error": {"kind": kind, "message": message}}));
            ExitCode::FAILURE
        }
    }
}
