//! `lud`: runs pipeline stages through the HTTP service.
//!
//! Without `--server` an in-process server is started on a loopback port
//! for the duration of the command.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use lud_client::{ClientError, LudClient};
use lud_core::api::{DecodeMode, DecodeRequest, Stage, StageRequest};
use lud_core::corpus::CorpusKind;
use lud_core::decode::Beta;
use lud_core::eval;
use lud_core::pipeline::{Overrides, PipelineConfig};

#[derive(Parser)]
#[command(name = "lud", version, about = "Lexical unit decoding pipeline")]
struct Cli {
    /// Base URL of a running `lud serve`; defaults to an in-process server.
    #[arg(long, global = true)]
    server: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Pipeline config (TOML). Without it the desk-scale defaults for `--kind` apply.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus kind for the built-in defaults.
    #[arg(long, default_value = "templated_code")]
    kind: CorpusKind,
    /// Replaces every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Acceptance threshold in [0, 1], or `force_ar`.
    #[arg(long)]
    beta: Option<Beta>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn request(&self) -> anyhow::Result<StageRequest> {
        let config = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::desk_default(self.kind),
        };
        let overrides = Overrides {
            seed: self.seed,
            beta: self.beta,
            alpha: self.alpha,
            k: self.k,
            run_dir: self.run_dir.clone(),
        };
        // Fail on bad overrides before contacting the server.
        config.clone().apply(&overrides)?;
        Ok(StageRequest { config, overrides })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training corpus and held-out set.
    GenCorpus(ConfigArgs),
    /// Fine-tune a fresh model on the corpus.
    Finetune(ConfigArgs),
    /// Teacher-forced probabilities and lexical units.
    Identify(ConfigArgs),
    /// Build and audit the PAD instances.
    Reconfigure(ConfigArgs),
    /// Continue training on the original data mixed with PAD instances.
    ContinualTrain(ConfigArgs),
    /// Greedy and LUD decoding of the held-out prompts at the configured beta.
    Decode(ConfigArgs),
    /// Decode at every beta in the sweep list.
    Sweep(ConfigArgs),
    /// Static report from saved traces.
    Report(ConfigArgs),
    /// Every stage in order: gen-corpus through sweep, then report.
    All(ConfigArgs),
    /// Print the default config as TOML.
    InitConfig {
        #[arg(long, default_value = "templated_code")]
        kind: CorpusKind,
    },
    /// Decode one prompt with the continually trained model.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        prompt: String,
        /// Greedy decoding instead of LUD.
        #[arg(long)]
        ar: bool,
    },
    /// Quality ratio from an order-swapped judge score file.
    Quality {
        #[arg(long)]
        scores: PathBuf,
    },
    /// Run the HTTP service in the foreground.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn print_json(v: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

async fn connect(server: Option<String>) -> anyhow::Result<LudClient> {
    let base = match server {
        Some(url) => url,
        None => {
            let addr = lud_server::spawn(([127, 0, 0, 1], 0).into())
                .await
                .context("starting in-process server")?;
            format!("http://{addr}")
        }
    };
    let client = LudClient::new(base)?;
    client
        .health()
        .await
        .with_context(|| format!("service at {} is not reachable", client.base_url()))?;
    Ok(client)
}

async fn stage(client: &LudClient, stage: Stage, args: &ConfigArgs) -> anyhow::Result<()> {
    let req = args.request()?;
    tracing::info!(%stage, "running");
    let resp = client.run_stage(stage, &req).await?;
    print_json(&resp)
}

async fn run(cli: Cli) -> anyhow::Result<()> {
    let stages = |c: &Command| -> Option<(Vec<Stage>, ConfigArgs)> {
        let one = |s: Stage, a: &ConfigArgs| Some((vec![s], a.clone()));
        match c {
            Command::GenCorpus(a) => one(Stage::GenCorpus, a),
            Command::Finetune(a) => one(Stage::Finetune, a),
            Command::Identify(a) => one(Stage::Identify, a),
            Command::Reconfigure(a) => one(Stage::Reconfigure, a),
            Command::ContinualTrain(a) => one(Stage::ContinualTrain, a),
            Command::Decode(a) => one(Stage::Decode, a),
            Command::Sweep(a) => one(Stage::Sweep, a),
            Command::Report(a) => one(Stage::Report, a),
            Command::All(a) => Some((
                vec![
                    Stage::GenCorpus,
                    Stage::Finetune,
                    Stage::Identify,
                    Stage::Reconfigure,
                    Stage::ContinualTrain,
                    Stage::Sweep,
                    Stage::Report,
                ],
                a.clone(),
            )),
            _ => None,
        }
    };
    if let Some((list, args)) = stages(&cli.command) {
        let client = connect(cli.server).await?;
        for s in list {
            stage(&client, s, &args).await?;
        }
        return Ok(());
    }
    match cli.command {
        Command::InitConfig { kind } => {
            print!("{}", PipelineConfig::desk_default(kind).to_toml()?);
        }
        Command::Generate { cfg, prompt, ar } => {
            let req = cfg.request()?;
            let mut config = req.config;
            config.apply(&req.overrides)?;
            let client = connect(cli.server).await?;
            let resp = client
                .decode(&DecodeRequest {
                    checkpoint: config.path(&config.paths.continual),
                    dataset: config.path(&config.paths.corpus),
                    prompt,
                    mode: if ar { DecodeMode::Ar } else { DecodeMode::Lud },
                    config: config.decode_config(config.decode.beta, config.decode.repetition_check),
                })
                .await?;
            print_json(&serde_json::json!({
                "text": resp.text,
                "n_tokens": resp.trace.n_tokens(),
                "n_forwards": resp.trace.n_forwards(),
                "spans": resp.trace.steps.iter().map(|s| s.accepted_len).collect::<Vec<_>>(),
            }))?;
        }
        Command::Quality { scores } => {
            let records = eval::load_scores(&scores)?;
            if records.is_empty() {
                bail!("{} has no score records", scores.display());
            }
            let tally = eval::tally_scores(&records);
            let client = connect(cli.server).await?;
            let ratio = client.quality_ratio(tally).await?;
            print_json(&serde_json::json!({ "tally": tally, "quality_ratio": ratio }))?;
        }
        Command::Serve { addr } => {
            let listener = tokio::net::TcpListener::bind(addr)
                .await
                .with_context(|| format!("binding {addr}"))?;
            tracing::info!(addr = %listener.local_addr()?, "serving");
            tokio::select! {
                r = lud_server::serve(listener) => r?,
                _ = tokio::signal::ctrl_c() => tracing::info!("shutting down"),
            }
        }
        _ => unreachable!("stage commands handled above"),
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<ClientError>() {
                Some(ClientError::Api { kind, message, .. }) => eprintln!("error ({kind}): {message}"),
                _ => eprintln!("error: {e:#}"),
            }
            ExitCode::FAILURE
        }
    }
}
