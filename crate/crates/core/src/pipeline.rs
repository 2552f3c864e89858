//! End-to-end dataset generation: priors, description, image, QAs and the
//! manifest record for every asset and grid relation.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use futures::stream::{self, StreamExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{info, warn};

use crate::asset::{Asset, AssetCatalog};
use crate::config::{PipelineConfig, SplitConfig, VqaMode};
use crate::dataset::{
    sample_id_for, DatasetError, ManifestHeader, ManifestWriter, PartialClasses, ReviewStatus, SampleRecord,
    SampleSource, Split,
};
use crate::diffusion::{build_request, derive_seed, DiffusionBackend, HttpBackend, MockBackend};
use crate::geometry::{compute_camera_pose, enumerate_relation_grid, CameraIntrinsics, CameraObjectRelation};
use crate::llm::{ChatClient, ChatRequest, FnChatClient, HttpChatClient};
use crate::prompt::{compose_prompt, request_description, DescriptionMode, ImageDescription};
use crate::render::{canny, encode_depth_control, rasterize, write_prior_pngs, PriorPaths, PriorSet, RenderConfig};
use crate::vqa::{
    llm_pair_to_item, make_template_vqas, request_llm_vqas, NumericRelation, VQA_GENERATION_SYSTEM_PROMPT,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// External services used during generation.
#[derive(Clone)]
pub struct Services {
    pub llm: Arc<dyn ChatClient>,
    pub backend: Arc<dyn DiffusionBackend>,
}

impl Services {
    pub fn mock() -> Self {
        Self {
            llm: mock_llm(),
            backend: Arc::new(MockBackend),
        }
    }

    /// Real or mock services as the configuration's mock flags say.
    pub fn from_config(config: &PipelineConfig) -> Result<Self, PipelineError> {
        let llm: Arc<dyn ChatClient> = if config.mock.llm {
            mock_llm()
        } else {
            Arc::new(HttpChatClient::new(config.llm.clone()).map_err(|e| PipelineError::Config(e.to_string()))?)
        };
        let backend: Arc<dyn DiffusionBackend> = if config.mock.diffusion {
            Arc::new(MockBackend)
        } else {
            Arc::new(HttpBackend::new(config.diffusion.clone()).map_err(|e| PipelineError::Config(e.to_string()))?)
        };
        Ok(Self { llm, backend })
    }
}

fn mock_reply(request: &ChatRequest) -> String {
    if request.system_text() == Some(VQA_GENERATION_SYSTEM_PROMPT) {
        return String::new();
    }
    let noun = request
        .last_user_text()
        .and_then(|t| t.strip_prefix("Please generate the visual prompt of "))
        .map(|t| t.trim_end_matches('.'))
        .unwrap_or("object");
    format!(
        "A {noun} standing on a wooden table in a bright room. The {noun} is shown in natural colors under soft daylight."
    )
}

/// Offline chat client: a fixed two-sentence description per category and
/// an empty QA block for QA requests.
pub fn mock_llm() -> Arc<dyn ChatClient> {
    Arc::new(FnChatClient::new(|req: &ChatRequest| Ok(mock_reply(req))))
}

/// Split of every image of `asset_id`. Listed assets go to the benchmark;
/// otherwise an id hash below `benchmark_fraction` does.
pub fn split_for(asset_id: &str, config: &SplitConfig) -> Split {
    if config.benchmark_assets.iter().any(|a| a == asset_id) {
        return Split::Benchmark;
    }
    let d = Sha256::digest(asset_id.as_bytes());
    let u = u64::from_be_bytes(d[..8].try_into().expect("32-byte digest")) as f64 / 2f64.powi(64);
    if u < config.benchmark_fraction {
        Split::Benchmark
    } else {
        Split::Train
    }
}

#[derive(Debug, Clone)]
pub struct Job {
    pub asset: Asset,
    pub beta: CameraObjectRelation,
    pub sample_id: String,
    pub attempt: u32,
}

/// Every asset crossed with every grid relation, asset-major.
pub fn plan_jobs(catalog: &AssetCatalog, config: &PipelineConfig) -> Result<Vec<Job>, PipelineError> {
    let grid = enumerate_relation_grid(&config.grid).map_err(|e| PipelineError::Config(e.to_string()))?;
    Ok(catalog
        .assets
        .iter()
        .flat_map(|asset| {
            grid.iter().map(move |beta| Job {
                asset: asset.clone(),
                beta: *beta,
                sample_id: sample_id_for(&asset.id, &beta.classes(), 0),
                attempt: 0,
            })
        })
        .collect())
}

/// Rasterize, detect edges and encode the depth control for one job.
pub fn render_prior(
    asset: &Asset,
    beta: &CameraObjectRelation,
    intrinsics: &CameraIntrinsics,
    render: &RenderConfig,
) -> Result<PriorSet, String> {
    let pose = compute_camera_pose(beta, asset.extent(), &asset.facing, intrinsics).map_err(|e| e.to_string())?;
    let prior = rasterize(&asset.mesh, &pose, intrinsics, render).map_err(|e| e.to_string())?;
    if prior.coverage() == 0 {
        return Err(format!("asset {} is not visible at {:?}", asset.id, beta.classes()));
    }
    Ok(encode_depth_control(canny(prior, render)))
}

fn rel_string(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

fn prior_map(paths: &PriorPaths) -> BTreeMap<String, String> {
    let root = Path::new("priors");
    [
        ("rgb", &paths.rgb),
        ("depth", &paths.depth),
        ("mask", &paths.mask),
        ("canny", &paths.canny),
    ]
    .into_iter()
    .map(|(k, p)| (k.to_string(), rel_string(&root.join(p))))
    .collect()
}

struct Context {
    config: PipelineConfig,
    services: Services,
    output: PathBuf,
    intrinsics: CameraIntrinsics,
    descriptions: BTreeMap<String, ImageDescription>,
}

async fn process(job: Job, ctx: Arc<Context>) -> Result<SampleRecord, String> {
    let Job {
        asset,
        beta,
        sample_id,
        attempt,
    } = job;
    let output = ctx.output.clone();
    let render_ctx = ctx.clone();
    let render_asset = asset.clone();
    let (prior, prior_paths) = tokio::task::spawn_blocking(move || {
        let prior = render_prior(&render_asset, &beta, &render_ctx.intrinsics, &render_ctx.config.render)?;
        let paths =
            write_prior_pngs(&prior, &output.join("priors"), &render_asset.id, &beta).map_err(|e| e.to_string())?;
        Ok::<_, String>((prior, paths))
    })
    .await
    .map_err(|e| e.to_string())??;

    let description = match ctx.descriptions.get(&asset.category) {
        Some(d) => d.clone(),
        None => request_description(&ctx.services.llm, &asset.category, &ctx.config.prompt)
            .await
            .map_err(|e| e.to_string())?,
    };
    let prompt = compose_prompt(&description, &beta, &ctx.config.prompt);
    let classes = beta.classes();
    let seed = ctx
        .config
        .generation
        .seed
        .unwrap_or_else(|| derive_seed(&asset.id, &classes, attempt));
    let request = build_request(&prior, &prompt, &ctx.config.generation, seed).map_err(|e| e.to_string())?;
    let generated = ctx
        .services
        .backend
        .generate(&request)
        .await
        .map_err(|e| e.to_string())?;

    let image_rel = PathBuf::from("images").join(&asset.id).join(format!("{sample_id}.png"));
    let image_abs = ctx.output.join(&image_rel);
    tokio::task::spawn_blocking(move || {
        if let Some(dir) = image_abs.parent() {
            std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        }
        generated
            .image
            .save_with_format(&image_abs, image::ImageFormat::Png)
            .map_err(|e| format!("{}: {e}", image_abs.display()))
    })
    .await
    .map_err(|e| e.to_string())??;

    let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.vqa.seed ^ seed);
    let mut qas = make_template_vqas(&beta, &asset.category, &mut rng, &ctx.config.vqa.templates, &sample_id)
        .map_err(|e| e.to_string())?;
    if ctx.config.vqa.mode == VqaMode::TemplateAndLlm {
        let numeric = NumericRelation::from(&beta);
        match request_llm_vqas(
            &ctx.services.llm,
            &asset.category,
            &beta,
            &numeric,
            Some(&description),
            ctx.config.vqa.llm_temperature,
        )
        .await
        {
            Ok(pairs) => qas.extend(pairs.iter().filter_map(|(q, a)| llm_pair_to_item(q, a, &sample_id))),
            Err(e) => warn!(sample = %sample_id, error = %e, "LLM QA generation failed; keeping template QAs"),
        }
    }

    Ok(SampleRecord {
        sample_id,
        asset_id: asset.id.clone(),
        category: asset.category.clone(),
        source: SampleSource::Synthetic,
        beta: Some(beta),
        classes: PartialClasses::from(classes),
        prompt: Some(prompt),
        image_path: rel_string(&image_rel),
        prior_paths: prior_map(&prior_paths),
        qas,
        split: split_for(&asset.id, &ctx.config.split),
        review: ReviewStatus::Pending,
        attempt,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GenerateSummary {
    pub planned: usize,
    /// Already in the manifest before this run.
    pub skipped: usize,
    pub written: usize,
    pub failed: usize,
    pub qas_written: usize,
}

#[derive(Serialize)]
struct Progress<'a> {
    sample_id: &'a str,
    asset_id: &'a str,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
    qas: usize,
    elapsed_ms: u64,
}

fn open_append(path: &Path) -> Result<File, PipelineError> {
    let io = |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    OpenOptions::new().create(true).append(true).open(path).map_err(io)
}

/// Generate every missing sample of `catalog` × grid into the configured
/// output directory. Samples already in the manifest are skipped; samples
/// that fail are logged and skipped. Records are appended in plan order.
pub async fn generate_dataset(
    config: &PipelineConfig,
    catalog: &AssetCatalog,
    services: Services,
) -> Result<GenerateSummary, PipelineError> {
    config
        .validate_settings()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let output = config.paths.output.clone();
    let mut writer = ManifestWriter::open(&config.paths.manifest(), ManifestHeader::new(config.digest()))?;
    if writer.manifest().header.config_digest != config.digest() {
        warn!("manifest was created with a different configuration");
    }
    let progress_path = config.paths.progress_log();
    let mut progress = open_append(&progress_path)?;

    let jobs = plan_jobs(catalog, config)?;
    let mut summary = GenerateSummary {
        planned: jobs.len(),
        ..GenerateSummary::default()
    };
    let pending: Vec<Job> = jobs
        .into_iter()
        .filter(|j| {
            let exists = writer.manifest().contains(&j.sample_id);
            summary.skipped += exists as usize;
            !exists
        })
        .collect();
    info!(
        planned = summary.planned,
        skipped = summary.skipped,
        "starting generation"
    );

    let mut descriptions = BTreeMap::new();
    if config.prompt.mode == DescriptionMode::PerCategory {
        let categories: std::collections::BTreeSet<&str> = pending.iter().map(|j| j.asset.category.as_str()).collect();
        for category in categories {
            match request_description(&services.llm, category, &config.prompt).await {
                Ok(d) => {
                    descriptions.insert(category.to_string(), d);
                }
                Err(e) => warn!(%category, error = %e, "description failed; falling back to per-image requests"),
            }
        }
    }
    let ctx = Arc::new(Context {
        config: config.clone(),
        services,
        output,
        intrinsics: config.intrinsics(),
        descriptions,
    });

    let mut results = stream::iter(pending)
        .map(|job| {
            let ctx = ctx.clone();
            async move {
                let start = Instant::now();
                let ids = (job.sample_id.clone(), job.asset.id.clone());
                (ids, process(job, ctx).await, start.elapsed().as_millis() as u64)
            }
        })
        .buffered(config.concurrency.samples.max(1));

    while let Some(((sample_id, asset_id), result, elapsed_ms)) = results.next().await {
        let outcome = match result {
            Ok(record) => {
                let qas = record.qas.len();
                match writer.append(record) {
                    Ok(()) => Ok(qas),
                    Err(e @ DatasetError::Io { .. }) => return Err(e.into()),
                    Err(e) => Err(e.to_string()),
                }
            }
            Err(e) => Err(e),
        };
        let line = match &outcome {
            Ok(qas) => {
                summary.written += 1;
                summary.qas_written += qas;
                Progress {
                    sample_id: &sample_id,
                    asset_id: &asset_id,
                    status: "written",
                    error: None,
                    qas: *qas,
                    elapsed_ms,
                }
            }
            Err(e) => {
                summary.failed += 1;
                warn!(sample = %sample_id, asset = %asset_id, error = %e, "sample failed");
                Progress {
                    sample_id: &sample_id,
                    asset_id: &asset_id,
                    status: "failed",
                    error: Some(e),
                    qas: 0,
                    elapsed_ms,
                }
            }
        };
        let mut text = serde_json::to_string(&line).expect("progress serializes");
        text.push('\n');
        progress
            .write_all(text.as_bytes())
            .and_then(|_| progress.flush())
            .map_err(|source| PipelineError::Io {
                path: progress_path.clone(),
                source,
            })?;
    }
    info!(
        written = summary.written,
        failed = summary.failed,
        "generation finished"
    );
    Ok(summary)
}

/// Render and write priors for every asset × grid relation without
/// generating images. Returns the number of prior sets written.
pub fn render_all_priors(config: &PipelineConfig, catalog: &AssetCatalog) -> Result<usize, PipelineError> {
    config
        .validate_settings()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let root = config.paths.output.join("priors");
    let intrinsics = config.intrinsics();
    let mut written = 0;
    for job in plan_jobs(catalog, config)? {
        match render_prior(&job.asset, &job.beta, &intrinsics, &config.render)
            .and_then(|p| write_prior_pngs(&p, &root, &job.asset.id, &job.beta).map_err(|e| e.to_string()))
        {
            Ok(_) => written += 1,
            Err(e) => warn!(asset = %job.asset.id, error = %e, "prior rendering failed"),
        }
    }
    Ok(written)
}
