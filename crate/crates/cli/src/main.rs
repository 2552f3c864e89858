use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use futures::stream::{self, StreamExt};
use tracing::{error, info, warn};
use ultima_core::config::PipelineConfig;
use ultima_core::curation::{
    compute_stats, read_verdict_log, tasks_from_manifest, AssignmentOrder, CurationConfig, ReviewService, ServeRoots,
};
use ultima_core::dataset::{
    check_balance, export_instruction_json, ingest_labeled_images, IngestOptions, Manifest, ManifestHeader,
    ManifestWriter, ReviewFilter, Split,
};
use ultima_core::eval::{
    benchmark_items, compute_report, grade_with_llm, grade_with_matcher, render_report_table, run_benchmark,
    ChatVisionModel, ConstantResponder, GradeVerdict, GroundTruthResponder, RunOptions, UniformRandomResponder,
    VisionModel,
};
use ultima_core::geometry::CameraObjectRelation;
use ultima_core::llm::HttpChatClient;
use ultima_core::load_catalog;
use ultima_core::pipeline::{generate_dataset, render_all_priors, Services};
use ultima_core::vqa::{llm_pair_to_item, make_template_vqas, qa_rng, request_llm_vqas, NumericRelation};

#[derive(Parser)]
#[command(
    name = "ultima",
    version,
    about = "Camera-object relation dataset synthesis, evaluation and review"
)]
struct Cli {
    /// TOML configuration; every key is optional.
    #[arg(short, long, global = true, env = "ULTIMA_CONFIG")]
    config: Option<PathBuf>,

    /// Log filter, e.g. `info` or `ultima_core=debug`.
    #[arg(long, global = true, default_value = "info", env = "ULTIMA_LOG")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render priors, describe, generate images and QAs for every asset and grid relation.
    Generate {
        /// Output root (overrides `paths.output`).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Asset catalog (overrides `paths.catalog`).
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// Use offline stand-ins for the LLM and the diffusion server.
        #[arg(long)]
        mock: bool,
    },
    /// Write depth, RGB, mask and edge priors without generating images.
    RenderPriors {
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Add labeled real images to a manifest.
    Ingest {
        /// Directory holding the images.
        #[arg(long)]
        images: PathBuf,
        /// CSV with columns image,orientation,viewpoint,shot.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "person")]
        category: String,
        #[arg(long, value_enum, default_value_t = SplitArg::Benchmark)]
        split: SplitArg,
        /// Downsample every label bin to the smallest one.
        #[arg(long)]
        resample: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the QAs for one relation as JSON.
    Vqa {
        #[arg(long)]
        category: String,
        /// Orientation azimuth in degrees.
        #[arg(long, allow_hyphen_values = true)]
        phi: f64,
        /// Elevation in degrees.
        #[arg(long, allow_hyphen_values = true)]
        theta: f64,
        /// Relative distance.
        #[arg(long)]
        dist: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also ask the configured LLM for QAs.
        #[arg(long)]
        llm: bool,
    },
    /// Report per-axis class counts and whether they are uniform.
    Balance {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        /// Largest max/min count ratio considered uniform.
        #[arg(long, default_value_t = 1.0)]
        tolerance: f64,
        /// Exit non-zero when not uniform.
        #[arg(long)]
        strict: bool,
    },
    /// Write instruction-tuning conversations for one split.
    Export {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        /// Review statuses to include; defaults to accepted only for the benchmark.
        #[arg(long, value_enum)]
        filter: Option<FilterArg>,
    },
    /// Query a model on the benchmark, grade the replies and report accuracy.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Benchmark)]
        split: SplitArg,
        #[arg(long, value_enum)]
        filter: Option<FilterArg>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum, default_value_t = ResponderArg::Model)]
        responder: ResponderArg,
        /// Reply of the constant responder.
        #[arg(long, default_value = "Front Left")]
        constant: String,
        /// Seed of the random responder.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = GraderArg::Matcher)]
        grader: GraderArg,
        /// Directory for responses, verdicts and reports.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the review API (and UI files) over HTTP.
    ReviewServe {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Directory of static UI files.
        #[arg(long)]
        ui: Option<PathBuf>,
        /// Verdict log; defaults to `review/verdicts.jsonl` beside the manifest.
        #[arg(long)]
        verdicts: Option<PathBuf>,
        #[arg(long, default_value_t = 600)]
        lease_secs: u64,
        /// Offer tasks in manifest order instead of a per-reviewer shuffle.
        #[arg(long)]
        sequential: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Review statistics from a verdict log.
    Stats {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        verdicts: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Benchmark,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Benchmark => Split::Benchmark,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FilterArg {
    Accepted,
    AcceptedAndPending,
}

impl From<FilterArg> for ReviewFilter {
    fn from(f: FilterArg) -> Self {
        match f {
            FilterArg::Accepted => ReviewFilter::AcceptedOnly,
            FilterArg::AcceptedAndPending => ReviewFilter::AcceptedAndPending,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ResponderArg {
    /// The configured model endpoint.
    Model,
    GroundTruth,
    Random,
    Constant,
}

#[derive(Clone, Copy, ValueEnum)]
enum GraderArg {
    Matcher,
    Llm,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => Ok(PipelineConfig::load(p)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn manifest_path(config: &PipelineConfig, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| config.paths.manifest())
}

fn root_of(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

async fn run(cli: Cli) -> Result<ExitCode> {
    let mut config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Generate { output, catalog, mock } => {
            if let Some(o) = output {
                config.paths.output = o;
            }
            if let Some(c) = catalog {
                config.paths.catalog = c;
            }
            if mock {
                config.mock.llm = true;
                config.mock.diffusion = true;
            }
            config.validate()?;
            let catalog = load_catalog(&config.paths.catalog)?;
            let services = Services::from_config(&config)?;
            let summary = generate_dataset(&config, &catalog, services).await?;
            print_json(&summary)?;
        }
        Command::RenderPriors { output, catalog } => {
            if let Some(o) = output {
                config.paths.output = o;
            }
            if let Some(c) = catalog {
                config.paths.catalog = c;
            }
            config.validate()?;
            let catalog = load_catalog(&config.paths.catalog)?;
            let written = tokio::task::spawn_blocking(move || render_all_priors(&config, &catalog)).await??;
            print_json(&serde_json::json!({ "priors_written": written }))?;
        }
        Command::Ingest {
            images,
            labels,
            manifest,
            category,
            split,
            resample,
            seed,
        } => {
            let path = manifest_path(&config, manifest);
            let options = IngestOptions {
                category,
                split: split.into(),
                resample,
                seed,
                templates: config.vqa.templates.clone(),
            };
            let records = ingest_labeled_images(&images, &labels, &options)?;
            let mut writer = ManifestWriter::open(&path, ManifestHeader::new(config.digest()))?;
            let mut added = 0;
            for r in records {
                if writer.manifest().contains(&r.sample_id) {
                    continue;
                }
                writer.append(r)?;
                added += 1;
            }
            print_json(&serde_json::json!({ "records_added": added }))?;
        }
        Command::Vqa {
            category,
            phi,
            theta,
            dist,
            seed,
            llm,
        } => {
            let beta = CameraObjectRelation::from_degrees(phi, theta, dist)?;
            let mut rng = qa_rng(seed);
            let mut items = make_template_vqas(&beta, &category, &mut rng, &config.vqa.templates, "query")?;
            if llm {
                let client = HttpChatClient::new(config.llm.clone())?;
                let numeric = NumericRelation::from(&beta);
                let pairs =
                    request_llm_vqas(&client, &category, &beta, &numeric, None, config.vqa.llm_temperature).await?;
                items.extend(pairs.iter().filter_map(|(q, a)| llm_pair_to_item(q, a, "query")));
            }
            print_json(&items)?;
        }
        Command::Balance {
            manifest,
            split,
            tolerance,
            strict,
        } => {
            let m = Manifest::load(&manifest_path(&config, manifest))?;
            let report = check_balance(&m, split.map(Split::from), tolerance);
            print_json(&report)?;
            if strict && !report.uniform {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Export {
            manifest,
            split,
            out,
            filter,
        } => {
            let m = Manifest::load(&manifest_path(&config, manifest))?;
            let split = Split::from(split);
            let filter = filter
                .map(ReviewFilter::from)
                .unwrap_or(ReviewFilter::default_for(split));
            let n = export_instruction_json(&m, split, filter, &out)?;
            print_json(&serde_json::json!({ "conversations": n, "out": out }))?;
        }
        Command::Eval {
            manifest,
            split,
            filter,
            limit,
            responder,
            constant,
            seed,
            grader,
            out,
        } => {
            let path = manifest_path(&config, manifest);
            let m = Manifest::load(&path)?;
            let split = Split::from(split);
            let filter = filter
                .map(ReviewFilter::from)
                .unwrap_or(ReviewFilter::default_for(split));
            let items = benchmark_items(&m, split, filter, &root_of(&path));
            if items.is_empty() {
                warn!("no benchmark items match the split and review filter");
            }
            let (name, model): (String, Box<dyn VisionModel>) = match responder {
                ResponderArg::Model => (
                    config.model.model.clone(),
                    Box::new(ChatVisionModel::new(
                        HttpChatClient::new(config.model.clone())?,
                        config.model.temperature,
                    )),
                ),
                ResponderArg::GroundTruth => ("ground-truth".into(), Box::new(GroundTruthResponder)),
                ResponderArg::Random => (format!("random-{seed}"), Box::new(UniformRandomResponder { seed })),
                ResponderArg::Constant => (format!("constant-{constant}"), Box::new(ConstantResponder(constant))),
            };
            let out = out.unwrap_or_else(|| root_of(&path).join("eval").join(name.replace(['/', ' '], "_")));
            std::fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
            let options = RunOptions {
                concurrency: config.concurrency.eval,
                limit,
                log_path: Some(out.join("responses.jsonl")),
            };
            let responses = run_benchmark(model.as_ref(), &items, &options).await?;
            let verdicts: Vec<GradeVerdict> = match grader {
                GraderArg::Matcher => responses
                    .iter()
                    .zip(&items)
                    .map(|(r, i)| grade_with_matcher(r, &i.item))
                    .collect(),
                GraderArg::Llm => {
                    let judge = HttpChatClient::new(config.grader.clone())?;
                    let judge = &judge;
                    stream::iter(responses.iter().zip(&items))
                        .map(|(r, i)| grade_with_llm(judge, &i.item, r, 3))
                        .buffered(config.concurrency.eval)
                        .collect()
                        .await
                }
            };
            let mut lines = String::new();
            for v in &verdicts {
                lines.push_str(&serde_json::to_string(v)?);
                lines.push('\n');
            }
            std::fs::write(out.join("verdicts.jsonl"), lines)?;
            let report = compute_report(&name, &items, &verdicts);
            std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            let table = render_report_table(&report);
            std::fs::write(out.join("report.txt"), &table)?;
            print!("{table}");
        }
        Command::ReviewServe {
            manifest,
            bind,
            ui,
            verdicts,
            lease_secs,
            sequential,
            seed,
        } => {
            let path = manifest_path(&config, manifest);
            let root = root_of(&path);
            let writer = ManifestWriter::open(&path, ManifestHeader::new(config.digest()))?;
            let tasks = tasks_from_manifest(writer.manifest(), &root)?;
            let log = verdicts.unwrap_or_else(|| root.join("review").join("verdicts.jsonl"));
            let curation = CurationConfig {
                lease: Duration::from_secs(lease_secs),
                order: if sequential {
                    AssignmentOrder::Sequential
                } else {
                    AssignmentOrder::Random { seed }
                },
            };
            let service = ReviewService::new(tasks, curation)
                .with_log(&log)?
                .with_manifest(writer)?;
            info!(tasks = service.tasks().len(), %bind, "serving review API");
            let listener = tokio::net::TcpListener::bind(bind).await?;
            let roots = ServeRoots { images: root, ui };
            let shutdown = async {
                let _ = tokio::signal::ctrl_c().await;
            };
            ultima_core::curation::serve(listener, Arc::new(service), roots, shutdown).await?;
        }
        Command::Stats { manifest, verdicts } => {
            let path = manifest_path(&config, manifest);
            let root = root_of(&path);
            let m = Manifest::load(&path)?;
            let tasks = tasks_from_manifest(&m, &root)?;
            let log = verdicts.unwrap_or_else(|| root.join("review").join("verdicts.jsonl"));
            if !log.exists() {
                bail!("verdict log {} does not exist", log.display());
            }
            print_json(&compute_stats(tasks.len(), &read_verdict_log(&log)?))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_new(&cli.log).unwrap_or_else(|_| "info".into()))
        .init();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            error!("cannot start runtime: {e}");
            return ExitCode::from(2);
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(code) => code,
        Err(e) => {
            error!("{e:#}");
            ExitCode::from(2)
        }
    }
}
