//! Dataset generation against offline services.

mod common;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use ultima_core::config::VqaMode;
use ultima_core::dataset::{check_balance, DatasetError, Manifest};
use ultima_core::diffusion::{mock_generate, DiffusionBackend, DiffusionError, GenerationRequest, GenerationResult};
use ultima_core::geometry::{OrientationClass, RelationAxis, ShotClass, ViewpointClass};
use ultima_core::llm::{ChatRequest, FnChatClient};
use ultima_core::pipeline::{mock_llm, render_all_priors};
use ultima_core::prompt::{DescriptionMode, IMAGE_DESCRIPTION_SYSTEM_PROMPT};
use ultima_core::vqa::VQA_GENERATION_SYSTEM_PROMPT;
use ultima_core::{generate_dataset, load_catalog, PipelineConfig, Services, Split};

fn setup(assets: usize) -> (tempfile::TempDir, PipelineConfig) {
    let dir = tempfile::tempdir().unwrap();
    let catalog = common::write_catalog(&dir.path().join("assets"), assets);
    let config = common::mock_config(&catalog, &dir.path().join("out"), 64);
    (dir, config)
}

fn manifest(config: &PipelineConfig) -> Manifest {
    Manifest::load(&config.paths.manifest()).unwrap()
}

fn progress_lines(config: &PipelineConfig) -> Vec<serde_json::Value> {
    std::fs::read_to_string(config.paths.progress_log())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[tokio::test]
async fn full_grid_for_two_assets() {
    let (_dir, config) = setup(2);
    let catalog = load_catalog(&config.paths.catalog).unwrap();
    let s = generate_dataset(&config, &catalog, Services::mock()).await.unwrap();
    assert_eq!(
        (s.planned, s.written, s.failed, s.skipped, s.qas_written),
        (144, 144, 0, 0, 432)
    );

    let m = manifest(&config);
    assert_eq!(m.len(), 144);
    let out = &config.paths.output;
    for r in m.records() {
        r.validate().unwrap();
        assert_eq!(r.qas.len(), 3);
        assert_eq!(r.split, Split::Train);
        assert!(out.join(&r.image_path).is_file());
        for kind in ["rgb", "depth", "mask", "canny"] {
            assert!(
                out.join(&r.prior_paths[kind]).is_file(),
                "{kind} prior of {}",
                r.sample_id
            );
        }
        let prompt = r.prompt.as_ref().unwrap();
        assert!(prompt.positive.contains(&prompt.relation_clause));
    }
    let balance = check_balance(&m, None, 1.0);
    assert!(balance.uniform);
    let orientations = &balance
        .axes
        .iter()
        .find(|a| a.axis == RelationAxis::Orientation)
        .unwrap()
        .counts;
    assert!(orientations.iter().all(|(_, c)| *c == 18));

    let again = generate_dataset(&config, &catalog, Services::mock()).await.unwrap();
    assert_eq!((again.skipped, again.written), (144, 0));
    assert_eq!(manifest(&config).to_jsonl(), m.to_jsonl());
}

/// Fails the `fail_at`-th call, serves the rest from the mock.
struct FlakyBackend {
    calls: AtomicUsize,
    fail_at: usize,
}

#[async_trait]
impl DiffusionBackend for FlakyBackend {
    async fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, DiffusionError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) == self.fail_at {
            return Err(DiffusionError::Backend {
                status: 503,
                body: "overloaded".into(),
            });
        }
        Ok(mock_generate(request))
    }
}

fn small_grid(config: &mut PipelineConfig) {
    config.grid.orientations = vec![OrientationClass::Front, OrientationClass::Left, OrientationClass::Back];
    config.grid.viewpoints = vec![ViewpointClass::Horizontal];
    config.grid.shots = vec![ShotClass::MediumShot];
}

#[tokio::test]
async fn failed_sample_is_logged_then_resumed() {
    let (_dir, mut config) = setup(1);
    small_grid(&mut config);
    config.concurrency.samples = 1;
    let catalog = load_catalog(&config.paths.catalog).unwrap();
    let services = Services {
        llm: mock_llm(),
        backend: Arc::new(FlakyBackend {
            calls: AtomicUsize::new(0),
            fail_at: 1,
        }),
    };
    let s = generate_dataset(&config, &catalog, services).await.unwrap();
    assert_eq!((s.planned, s.written, s.failed), (3, 2, 1));
    let lines = progress_lines(&config);
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1]["status"], "failed");
    assert!(lines[1]["error"].as_str().unwrap().contains("overloaded"));
    let missing = lines[1]["sample_id"].as_str().unwrap().to_string();
    assert!(!manifest(&config).contains(&missing));

    let s = generate_dataset(&config, &catalog, Services::mock()).await.unwrap();
    assert_eq!((s.skipped, s.written, s.failed), (2, 1, 0));
    assert!(manifest(&config).contains(&missing));
    assert_eq!(progress_lines(&config).len(), 4);
}

fn counting_llm(descriptions: Arc<AtomicUsize>, qa_reply: String) -> Arc<FnChatClient> {
    Arc::new(FnChatClient::new(move |req: &ChatRequest| {
        if req.system_text() == Some(VQA_GENERATION_SYSTEM_PROMPT) {
            return Ok(qa_reply.clone());
        }
        assert_eq!(req.system_text(), Some(IMAGE_DESCRIPTION_SYSTEM_PROMPT));
        descriptions.fetch_add(1, Ordering::SeqCst);
        let noun = req
            .last_user_text()
            .and_then(|t| t.strip_prefix("Please generate the visual prompt of "))
            .unwrap()
            .trim_end_matches('.')
            .to_string();
        Ok(format!("A {noun} on a lawn. The {noun} is lit by the evening sun."))
    }))
}

#[tokio::test]
async fn per_category_descriptions() {
    let (_dir, mut config) = setup(2);
    small_grid(&mut config);
    config.prompt.mode = DescriptionMode::PerCategory;
    let calls = Arc::new(AtomicUsize::new(0));
    let services = Services {
        llm: counting_llm(calls.clone(), String::new()),
        backend: Arc::new(ultima_core::diffusion::MockBackend),
    };
    let catalog = load_catalog(&config.paths.catalog).unwrap();
    let s = generate_dataset(&config, &catalog, services).await.unwrap();
    assert_eq!(s.written, 6);
    assert_eq!(calls.load(Ordering::SeqCst), 2);
    let m = manifest(&config);
    for asset in ["asset0", "asset1"] {
        let mut positives: Vec<_> = m
            .records()
            .iter()
            .filter(|r| r.asset_id == asset)
            .map(|r| {
                let p = r.prompt.as_ref().unwrap();
                p.positive.replace(&p.relation_clause, "")
            })
            .collect();
        positives.dedup();
        assert_eq!(positives.len(), 1, "{asset} shares one description");
    }
}

#[tokio::test]
async fn per_image_descriptions() {
    let (_dir, mut config) = setup(1);
    small_grid(&mut config);
    let calls = Arc::new(AtomicUsize::new(0));
    let services = Services {
        llm: counting_llm(calls.clone(), String::new()),
        backend: Arc::new(ultima_core::diffusion::MockBackend),
    };
    let catalog = load_catalog(&config.paths.catalog).unwrap();
    generate_dataset(&config, &catalog, services).await.unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn llm_questions_are_appended() {
    let (_dir, mut config) = setup(1);
    config.grid.orientations = vec![OrientationClass::Front];
    config.grid.viewpoints = vec![ViewpointClass::Horizontal];
    config.grid.shots = vec![ShotClass::MediumShot];
    config.vqa.mode = VqaMode::TemplateAndLlm;
    let block = "Question:\nWhich direction is the chicken facing in the image? Options: (1) Back (2) Front\n===\n\
                 Answer:\n(2) Front\n===\n\
                 Question:\nWhat is the elevation viewpoint of the image? Options: (1) Top (2) Horizontal (3) Bottom\n===\n\
                 Answer:\n(1) Top\n===\n\
                 Question:\nWhich camera shots is the image? Options: (1) Close-up (2) Medium-shot (3) Long-shot\n===\n\
                 Answer:\n(2) Medium-shot\n";
    let services = Services {
        llm: counting_llm(Arc::new(AtomicUsize::new(0)), block.into()),
        backend: Arc::new(ultima_core::diffusion::MockBackend),
    };
    let catalog = load_catalog(&config.paths.catalog).unwrap();
    let s = generate_dataset(&config, &catalog, services).await.unwrap();
    assert_eq!(s.written, 1);
    let m = manifest(&config);
    let r = &m.records()[0];
    r.validate().unwrap();
    // the contradicting viewpoint item is dropped
    assert_eq!(r.qas.len(), 5);
    assert_eq!(r.qas[3].task, RelationAxis::Orientation);
    assert_eq!(r.qas[3].options, ["Back", "Front"]);
    assert_eq!(r.qas[3].answer_index, Some(1));
    assert_eq!(r.qas[4].task, RelationAxis::Shot);
}

#[tokio::test]
async fn asset_cannot_change_split() {
    let (_dir, mut config) = setup(1);
    small_grid(&mut config);
    let catalog = load_catalog(&config.paths.catalog).unwrap();
    generate_dataset(&config, &catalog, Services::mock()).await.unwrap();

    config.grid.shots = vec![ShotClass::CloseUp];
    config.split.benchmark_assets = vec!["asset0".into()];
    let s = generate_dataset(&config, &catalog, Services::mock()).await.unwrap();
    assert_eq!((s.written, s.failed), (0, 3));
    let last = progress_lines(&config).pop().unwrap();
    let expected = DatasetError::SplitOverlap {
        asset_id: "asset0".into(),
        existing: Split::Train,
    }
    .to_string();
    assert_eq!(last["error"].as_str().unwrap(), expected);
    assert!(manifest(&config).records().iter().all(|r| r.split == Split::Train));
}

#[test]
fn priors_only() {
    let (_dir, mut config) = setup(1);
    small_grid(&mut config);
    let catalog = load_catalog(&config.paths.catalog).unwrap();
    assert_eq!(render_all_priors(&config, &catalog).unwrap(), 3);
    let files = common::files_under(&config.paths.output.join("priors"));
    assert_eq!(files.len(), 12);
    assert!(files.iter().all(|p| p.starts_with(Path::new("asset0"))));
}
