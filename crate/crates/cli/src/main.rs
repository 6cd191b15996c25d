use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use tidepool::assembly::Stage;
use tidepool::config::Config;
use tidepool::service::{Clients, JobKind, JobState, Service, ServiceError};

/// Curate image-text training corpora: ingest, caption, generate
/// instruction data, deduplicate and assemble staged manifests.
#[derive(Parser)]
#[command(name = "tidepool", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Store directory (event log, images, manifests).
    #[arg(long, global = true, default_value = "tidepool-store")]
    store: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorArg {
    Llm,
    TemplateFact,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Import dumps, videos, web pages and knowledge files.
    Ingest {
        /// Dataset-dump manifest (repeatable).
        #[arg(long)]
        dump: Vec<PathBuf>,
        /// Video without subtitles (repeatable).
        #[arg(long)]
        video: Vec<PathBuf>,
        /// Video and its .srt/.vtt track (repeatable).
        #[arg(long, num_args = 2, value_names = ["VIDEO", "SUBTITLES"])]
        subtitled_video: Vec<PathBuf>,
        /// Web page URL (repeatable).
        #[arg(long)]
        page: Vec<String>,
        /// Category annotation for the videos and pages of this run.
        #[arg(long)]
        category: Option<String>,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        taxa: Option<PathBuf>,
        #[arg(long)]
        facts: Option<PathBuf>,
        /// Raw JSON job params; replaces all other ingest flags.
        #[arg(long, conflicts_with_all = ["dump", "video", "subtitled_video", "page", "schema", "taxa", "facts"])]
        params: Option<PathBuf>,
    },
    /// Expand captions from the knowledge base and align subtitle text.
    Expand {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Caption the remaining records with the captioner.
    Diversify {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Generate instruction-tuning samples.
    Instruct {
        #[arg(long)]
        per_record: Option<usize>,
        #[arg(long, value_enum, default_value = "both")]
        generator: GeneratorArg,
    },
    /// Hash images and cluster near-duplicates.
    Dedup {
        #[arg(long)]
        max_hamming: Option<u32>,
    },
    /// Write the manifest for one stage.
    Assemble {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Leave records awaiting review out instead of failing.
        #[arg(long)]
        exclude_pending: bool,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
    /// Print corpus statistics.
    Stats,
}

const EXIT_JOB_FAILED: u8 = 1;
const EXIT_INVALID: u8 = 2;

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn job_for(command: &Command) -> anyhow::Result<Option<(JobKind, Value)>> {
    let abs = |v: &[PathBuf]| v.iter().map(|p| absolute(p)).collect::<Vec<_>>();
    Ok(Some(match command {
        Command::Ingest { dump, video, subtitled_video, page, category, schema, taxa, facts, params } => {
            if let Some(file) = params {
                let text = std::fs::read_to_string(file)?;
                return Ok(Some((JobKind::Ingest, serde_json::from_str(&text)?)));
            }
            let mut videos: Vec<Value> =
                abs(video).into_iter().map(|p| json!({"path": p, "category": category})).collect();
            for pair in subtitled_video.chunks(2) {
                videos.push(json!({"path": absolute(&pair[0]), "subtitles": absolute(&pair[1]), "category": category}));
            }
            let dumps: Vec<Value> = abs(dump).into_iter().map(|p| json!({"path": p})).collect();
            let pages: Vec<Value> = page.iter().map(|u| json!({"url": u, "category": category})).collect();
            let mut p = json!({"dumps": dumps, "videos": videos, "pages": pages});
            for (key, path) in [("schema", schema), ("taxa", taxa), ("facts", facts)] {
                if let Some(path) = path {
                    p[key] = json!(absolute(path));
                }
            }
            (JobKind::Ingest, p)
        }
        Command::Expand { k } => (JobKind::Expand, opt_params("k", k)),
        Command::Diversify { n } => (JobKind::Diversify, opt_params("n", n)),
        Command::Instruct { per_record, generator } => {
            let mut p = opt_params("per_record", per_record);
            p["generator"] = json!(match generator {
                GeneratorArg::Llm => "llm",
                GeneratorArg::TemplateFact => "template_fact",
                GeneratorArg::Both => "both",
            });
            (JobKind::Instruct, p)
        }
        Command::Dedup { max_hamming } => (JobKind::Dedup, opt_params("max_hamming", max_hamming)),
        Command::Assemble { stage, exclude_pending } => {
            let stage = match stage {
                StageArg::Pretrain => Stage::Pretrain,
                StageArg::Finetune => Stage::Finetune,
            };
            (JobKind::Assemble, json!({"stage": stage, "exclude_pending": exclude_pending}))
        }
        Command::Serve { .. } | Command::Stats => return Ok(None),
    }))
}

fn opt_params<T: serde::Serialize>(key: &str, value: &Option<T>) -> Value {
    match value {
        Some(v) => json!({ key: v }),
        None => json!({}),
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<u8, (u8, anyhow::Error)> {
    let invalid = |e: anyhow::Error| (EXIT_INVALID, e);
    let config = load_config(&cli).map_err(invalid)?;
    let clients = Clients::from_config(&config).map_err(|e| invalid(e.into()))?;
    let service = Service::open(&absolute(&cli.store), config, clients).map_err(|e| match e {
        ServiceError::Config(_) => invalid(e.into()),
        other => (EXIT_JOB_FAILED, other.into()),
    })?;
    match &cli.command {
        Command::Serve { port, host } => {
            let addr = SocketAddr::new(*host, *port);
            let rt = tokio::runtime::Runtime::new().map_err(|e| (EXIT_JOB_FAILED, e.into()))?;
            rt.block_on(tidepool::service::http::serve(Arc::new(service), addr))
                .map_err(|e| (EXIT_JOB_FAILED, e.into()))?;
            Ok(0)
        }
        Command::Stats => {
            println!("{}", serde_json::to_string_pretty(&service.stats()).expect("stats serialize"));
            Ok(0)
        }
        command => {
            let (kind, params) = job_for(command).map_err(invalid)?.expect("job command");
            let job = service.run_job(kind, params).map_err(|e| match e {
                ServiceError::InvalidParams(_) => invalid(e.into()),
                other => (EXIT_JOB_FAILED, other.into()),
            })?;
            println!("{}", serde_json::to_string_pretty(&job).expect("job serializes"));
            if job.state == JobState::Failed {
                eprintln!("error: {} job failed: {}", kind.as_str(), job.error.unwrap_or_default());
                return Ok(EXIT_JOB_FAILED);
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve { .. }) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err((code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
