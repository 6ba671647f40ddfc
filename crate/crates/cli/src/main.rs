//! `elsa`: command-line driver for corpus synthesis, training and evaluation.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use elsa_core::captions::RephraserEndpoint;
use elsa_core::pipeline::{self, RunConfig, RunDir};
use elsa_core::roomsim::Split;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "elsa", version, about = "Spatial audio-language embeddings: simulate, train, evaluate")]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per logical core).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// External caption rephraser endpoint.
    #[arg(long, global = true, env = "ELSA_REPHRASER_URL")]
    rephraser_url: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Inputs {
    /// Corpus directory [default: <out>/corpus].
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Feature cache directory [default: <out>/features].
    #[arg(long)]
    features: Option<PathBuf>,
    /// Model checkpoint [default: <out>/checkpoints/best.ckpt].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic spatial corpus into <out>/corpus.
    SynthCorpus,
    /// Spatialize a WAV file in a sampled room.
    Simulate {
        #[arg(long)]
        input: PathBuf,
        /// Output FOA WAV [default: <out>/simulated.wav].
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        room_index: u64,
        /// Base caption to spatialize.
        #[arg(long)]
        caption: Option<String>,
    },
    /// Extract pooled features for every corpus record.
    Featurize {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Train the dual encoder and keep the best validation checkpoint.
    Train {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Retrieval metrics on a split, or on a precomputed embedding file.
    Evaluate {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Matrix file with aligned `audio` and `text` matrices.
        #[arg(long, conflicts_with_all = ["corpus", "features", "checkpoint"])]
        embeddings: Option<PathBuf>,
    },
    /// Zero-shot attribute probes and MLP classification probes.
    Probe {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Direction swap and removal experiment.
    Swap {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// DOA regression probe with an error breakdown.
    Doa {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Export embeddings and labels of a split.
    ExportEmbeddings {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Every stage from corpus synthesis to the DOA probe.
    Pipeline,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthCorpus => "synth-corpus",
            Command::Simulate { .. } => "simulate",
            Command::Featurize { .. } => "featurize",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Probe { .. } => "probe",
            Command::Swap { .. } => "swap",
            Command::Doa { .. } => "doa",
            Command::ExportEmbeddings { .. } => "export-embeddings",
            Command::Pipeline => "pipeline",
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum UsageError {
    #[error("{0}")]
    Config(String),
}

/// Writes log records to stderr and to the run's log file.
struct Tee {
    file: Mutex<File>,
}

impl Write for &Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.file.lock().expect("log file lock").write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.file.lock().expect("log file lock").flush()
    }
}

fn init_logging(path: &Path) -> Result<()> {
    let tee: &'static Tee = Box::leak(Box::new(Tee { file: Mutex::new(File::create(path)?) }));
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(tee)))
        .try_init()?;
    Ok(())
}

struct Ctx {
    cfg: RunConfig,
    run: RunDir,
    inputs: Inputs,
}

impl Ctx {
    fn corpus(&self) -> PathBuf {
        self.inputs.corpus.clone().unwrap_or_else(|| self.run.corpus())
    }
    fn features(&self) -> PathBuf {
        self.inputs.features.clone().unwrap_or_else(|| self.run.features())
    }
    fn checkpoint(&self) -> PathBuf {
        self.inputs.checkpoint.clone().unwrap_or_else(|| self.run.best_checkpoint())
    }
    fn dataset(&self, split: Split) -> Result<pipeline::Dataset> {
        Ok(pipeline::load_dataset(&self.cfg, &self.corpus(), &self.features(), split)?)
    }
    fn model(&self) -> Result<elsa_core::model::ElsaModel> {
        Ok(pipeline::load_model(&self.checkpoint())?)
    }
    fn embeddings(&self, model: &elsa_core::model::ElsaModel) -> Result<(pipeline::SplitEmbeddings, pipeline::SplitEmbeddings)> {
        let train = pipeline::embed_spatial(model, &self.dataset(Split::Train)?)?;
        let test = pipeline::embed_spatial(model, &self.dataset(Split::Test)?)?;
        Ok((train, test))
    }
    fn record(&self, stage: &str, report: &impl Serialize) -> Result<()> {
        self.run.record_report(stage, report)?;
        log::info!("{stage}: report written to {}", self.run.report_path().display());
        Ok(())
    }
}

fn log_epoch(e: &elsa_core::model::EpochLog) {
    log::info!(
        "epoch {:>3} lr {:.2e} tau {:.4} loss {:.4} (clip {:.4} dir {:.4} dist {:.4} area {:.4}) val mAP@10 {:.4}",
        e.epoch,
        e.lr,
        e.tau,
        e.train_loss.total,
        e.train_loss.clip,
        e.train_loss.dir,
        e.train_loss.dist,
        e.train_loss.area,
        e.val.mean_map10()
    );
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    }
    .resolved(cli.seed);
    cfg.validate()?;
    let run = RunDir::create(&cli.out)?;
    let name = cli.command.name();
    init_logging(&run.logs().join(format!("{name}.log")))?;
    run.write_config(&cfg)?;
    let inputs = match &cli.command {
        Command::Featurize { inputs }
        | Command::Train { inputs }
        | Command::Evaluate { inputs, .. }
        | Command::Probe { inputs }
        | Command::Swap { inputs }
        | Command::Doa { inputs }
        | Command::ExportEmbeddings { inputs, .. } => inputs.clone(),
        _ => Inputs { corpus: None, features: None, checkpoint: None },
    };
    let ctx = Ctx { cfg, run, inputs };
    log::info!("{name}: run directory {}", ctx.run.root().display());
    pipeline::with_workers(cli.workers, || dispatch(cli, &ctx))?
}

fn dispatch(cli: &Cli, ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    match &cli.command {
        Command::SynthCorpus => {
            let summary = pipeline::synth_corpus(cfg, &ctx.corpus())?;
            log::info!("corpus: spatial {:?}, mono {:?}", summary.spatial, summary.mono);
            ctx.record("synth-corpus", &summary)
        }
        Command::Simulate { input, output, split, room_index, caption } => {
            let output = output.clone().unwrap_or_else(|| ctx.run.root().join("simulated.wav"));
            let endpoint = cli.rephraser_url.as_ref().map(RephraserEndpoint::new);
            if endpoint.is_some() && caption.is_none() {
                return Err(UsageError::Config("--rephraser-url needs --caption".into()).into());
            }
            let report =
                pipeline::simulate_file(cfg, input, &output, *split, *room_index, caption.as_deref(), endpoint.as_ref())?;
            log::info!("simulate: wrote {}", report.output);
            ctx.record("simulate", &report)
        }
        Command::Featurize { .. } => {
            let report = pipeline::featurize(cfg, &ctx.corpus(), &ctx.features())?;
            ctx.record("featurize", &report)
        }
        Command::Train { .. } => {
            let train = ctx.dataset(Split::Train)?;
            let val = ctx.dataset(Split::Val)?;
            let (model, report) = pipeline::train_stage(cfg, &train, &val, log_epoch)?;
            let path = ctx.inputs.checkpoint.clone().unwrap_or_else(|| ctx.run.best_checkpoint());
            pipeline::save_model(&model, &path)?;
            log::info!("train: best epoch {} (val mAP@10 {:.4}), saved {}", report.best_epoch, report.best_val_map10, path.display());
            ctx.record("train", &report)
        }
        Command::Evaluate { split, embeddings, .. } => match embeddings {
            Some(path) => {
                let report = pipeline::retrieval_from_matrix_file(path)?;
                ctx.record("evaluate", &report)
            }
            None => {
                let report = pipeline::evaluate(&ctx.model()?, &ctx.dataset(*split)?)?;
                log::info!(
                    "evaluate: R@1 a2t {:.4} t2a {:.4} (chance {:.4})",
                    report.retrieval.audio_to_text.r1,
                    report.retrieval.text_to_audio.r1,
                    report.chance_r1
                );
                ctx.record("evaluate", &report)
            }
        },
        Command::Probe { .. } => {
            let model = ctx.model()?;
            let (train, test) = ctx.embeddings(&model)?;
            let report = pipeline::probe_stage(cfg, &model, &train, &test)?;
            for z in &report.zero_shot {
                log::info!("zero-shot {}: {:.4} over {}", z.attribute, z.accuracy, z.n);
            }
            ctx.record("probe", &report)
        }
        Command::Swap { .. } => {
            let model = ctx.model()?;
            let (train, test) = ctx.embeddings(&model)?;
            let report = pipeline::swap_stage(cfg, &model, &train, &test)?;
            log::info!("swap: success {:.4}, removal keeps original {:.4}", report.swap.swap_success_rate, report.swap.removal_original_rate);
            ctx.record("swap", &report)
        }
        Command::Doa { .. } => {
            let model = ctx.model()?;
            let (train, test) = ctx.embeddings(&model)?;
            let report = pipeline::doa_stage(cfg, &train, &test)?;
            let table = report.breakdown.to_table();
            std::fs::write(ctx.run.root().join("doa_breakdown.txt"), &table)?;
            log::info!("doa: test MAE {:.2} deg\n{table}", report.probe.test_metric);
            ctx.record("doa", &report)
        }
        Command::ExportEmbeddings { split, .. } => {
            let report = pipeline::export_embeddings(&ctx.model()?, &ctx.dataset(*split)?, &ctx.run.embeddings())?;
            ctx.record("export-embeddings", &report)
        }
        Command::Pipeline => {
            let report = pipeline::run_pipeline(cfg, &ctx.run, log_epoch)?;
            log::info!(
                "pipeline: R@1 {:.4}/{:.4}, swap {:.4}, DOA MAE {:.2} deg",
                report.evaluate.retrieval.audio_to_text.r1,
                report.evaluate.retrieval.text_to_audio.r1,
                report.swap.swap.swap_success_rate,
                report.doa.probe.test_metric
            );
            Ok(())
        }
    }
}

/// Exit code 1 for problems with the inputs, 2 for failures inside a stage.
fn exit_code(err: &anyhow::Error) -> u8 {
    use elsa_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<std::io::Error>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_)
                | E::Io(_)
                | E::Json(_)
                | E::Wav(_)
                | E::Malformed(_)
                | E::Version { .. }
                | E::ChannelCount { .. }
                | E::UnknownLabel(_)
                | E::EmptyCaption
                | E::EmptyCorpus
                | E::MissingClass(_)
                | E::DegenerateSplit(_)
                | E::TooShort { .. }
                | E::Silent => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
