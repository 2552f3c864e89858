//! Benchmark runs, grading and reports over a generated benchmark split.

mod common;

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use proptest::prelude::*;
use ultima_core::dataset::{Manifest, ReviewFilter};
use ultima_core::eval::{
    benchmark_items, compute_report, grade_with_llm, grade_with_matcher, run_benchmark, BenchmarkItem, ChatVisionModel,
    ConstantResponder, GradeNote, Grader, GroundTruthResponder, RunOptions, VisionModel, GRADING_SYSTEM_PROMPT,
};
use ultima_core::geometry::{OrientationClass, RelationAxis, ShotClass, ViewpointClass};
use ultima_core::llm::{ChatRequest, FnChatClient, LlmError, Role, ScriptedChatClient};
use ultima_core::{generate_dataset, load_catalog, ModelResponse, ReviewStatus, Services, Split, VqaItem};

struct Bench {
    _dir: tempfile::TempDir,
    items: Vec<BenchmarkItem>,
}

/// One benchmark asset over four relations, every sample accepted.
async fn bench() -> Bench {
    let dir = tempfile::tempdir().unwrap();
    let catalog = common::write_catalog(&dir.path().join("assets"), 2);
    let out = dir.path().join("out");
    let mut config = common::mock_config(&catalog, &out, 64);
    config.grid.orientations = vec![OrientationClass::Front, OrientationClass::BackLeft];
    config.grid.viewpoints = vec![ViewpointClass::Horizontal, ViewpointClass::Top];
    config.grid.shots = vec![ShotClass::LongShot];
    config.split.benchmark_assets = vec!["asset1".into()];
    generate_dataset(&config, &load_catalog(&catalog).unwrap(), Services::mock())
        .await
        .unwrap();
    let mut manifest = Manifest::load(&config.paths.manifest()).unwrap();
    let ids: Vec<String> = manifest.records().iter().map(|r| r.sample_id.clone()).collect();
    for id in &ids {
        manifest.set_review(id, ReviewStatus::Accepted).unwrap();
    }
    let items = benchmark_items(&manifest, Split::Benchmark, ReviewFilter::AcceptedOnly, &out);
    assert_eq!(items.len(), 12);
    assert!(items.iter().all(|i| i.image_path.is_file()));
    Bench { _dir: dir, items }
}

/// Fails for one sample id, answers correctly otherwise.
struct DownFor {
    sample_id: String,
    calls: AtomicUsize,
}

#[async_trait]
impl VisionModel for DownFor {
    async fn respond(&self, item: &BenchmarkItem) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if item.sample_id == self.sample_id {
            return Err(LlmError::Transport("connection refused".into()));
        }
        GroundTruthResponder.respond(item).await
    }
}

#[tokio::test]
async fn limited_run_with_outage_and_resume() {
    let b = bench().await;
    let log = b._dir.path().join("eval/responses.jsonl");
    let options = RunOptions {
        concurrency: 4,
        limit: Some(10),
        log_path: Some(log.clone()),
    };
    let down = b.items[3].sample_id.clone();
    let model = DownFor {
        sample_id: down.clone(),
        calls: AtomicUsize::new(0),
    };
    let responses = run_benchmark(&model, &b.items, &options).await.unwrap();
    assert_eq!(responses.len(), 10);
    assert_eq!(model.calls.load(Ordering::SeqCst), 10);
    for (r, item) in responses.iter().zip(&b.items) {
        assert_eq!((&r.sample_id, r.qa_index), (&item.sample_id, item.qa_index));
        assert_eq!(r.raw_text.is_none(), r.sample_id == down);
    }
    let failed = responses.iter().filter(|r| r.error.is_some()).count();
    assert_eq!(failed, 3);

    let verdicts: Vec<_> = responses
        .iter()
        .zip(&b.items)
        .map(|(r, i)| grade_with_matcher(r, &i.item))
        .collect();
    let report = compute_report("down-for-one", &b.items, &verdicts);
    assert_eq!(report.responses, 10);
    let mut graded = 0;
    let mut ungraded = 0;
    for t in &report.tasks {
        assert_eq!(
            t.both.graded + t.both.ungraded,
            t.synthetic.graded + t.synthetic.ungraded
        );
        assert_eq!(t.real.graded + t.real.ungraded, 0);
        assert_eq!(t.both.correct, t.both.graded);
        graded += t.both.graded;
        ungraded += t.both.ungraded;
    }
    assert_eq!((graded, ungraded), (7, 3));
    assert!(
        verdicts
            .iter()
            .filter(|v| v.note == Some(GradeNote::ModelError))
            .count()
            == 3
    );

    // a resumed run only asks for what is missing from the log
    let again = DownFor {
        sample_id: String::new(),
        calls: AtomicUsize::new(0),
    };
    let options = RunOptions { limit: None, ..options };
    let all = run_benchmark(&again, &b.items, &options).await.unwrap();
    assert_eq!(again.calls.load(Ordering::SeqCst), 2);
    assert_eq!(all.len(), 12);
    assert_eq!(&all[..10], &responses[..]);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 12);
}

#[tokio::test]
async fn torn_log_line_is_retried() {
    let b = bench().await;
    let log = b._dir.path().join("responses.jsonl");
    let first = run_benchmark(
        &GroundTruthResponder,
        &b.items[..2],
        &RunOptions {
            log_path: Some(log.clone()),
            ..RunOptions::default()
        },
    )
    .await
    .unwrap();
    let mut text = std::fs::read_to_string(&log).unwrap();
    text.push_str("{\"sample_id\":\"");
    std::fs::write(&log, text).unwrap();
    let model = DownFor {
        sample_id: String::new(),
        calls: AtomicUsize::new(0),
    };
    let all = run_benchmark(
        &model,
        &b.items[..3],
        &RunOptions {
            log_path: Some(log),
            ..RunOptions::default()
        },
    )
    .await
    .unwrap();
    assert_eq!(model.calls.load(Ordering::SeqCst), 1);
    assert_eq!(&all[..2], &first[..]);
}

#[tokio::test]
async fn vision_model_attaches_image() {
    let b = bench().await;
    let client = Arc::new(ScriptedChatClient::new(["(2) Front"]));
    let model = ChatVisionModel::new(client.clone(), 0.0);
    let item = &b.items[0];
    assert_eq!(model.respond(item).await.unwrap(), "(2) Front");
    let req = &client.requests()[0];
    assert_eq!(req.messages.len(), 1);
    let msg = &req.messages[0];
    assert_eq!(msg.role, Role::User);
    assert_eq!(msg.text, item.item.render_prompt());
    assert_eq!(msg.images, vec![std::fs::read(&item.image_path).unwrap()]);
    assert_eq!(req.temperature, 0.0);
    let wire = req.to_wire("gpt-4o");
    let url = wire["messages"][0]["content"][1]["image_url"]["url"].as_str().unwrap();
    assert!(url.starts_with("data:image/png;base64,"));
}

fn response(text: Option<&str>) -> ModelResponse {
    ModelResponse {
        sample_id: "s".into(),
        qa_index: 0,
        raw_text: text.map(str::to_string),
        error: text.is_none().then(|| "down".to_string()),
        latency_ms: 0,
    }
}

fn front_item() -> VqaItem {
    VqaItem {
        task: RelationAxis::Orientation,
        question: "Which direction is the chicken facing?".into(),
        options: ["Back", "Front", "Left", "Right"].map(String::from).to_vec(),
        answer_index: Some(1),
        answer: "Front".into(),
        image_ref: "s".into(),
    }
}

#[tokio::test]
async fn llm_judge_outcomes() {
    let item = front_item();
    let said = response(Some("It is facing the front."));

    let judge = ScriptedChatClient::new(["Yes, the answer matches."]);
    let v = grade_with_llm(&judge, &item, &said, 3).await;
    assert_eq!((v.correct, v.grader, v.note), (Some(true), Grader::Llm, None));
    let req = &judge.requests()[0];
    assert_eq!(req.system_text(), Some(GRADING_SYSTEM_PROMPT));
    assert_eq!(req.temperature, 0.0);

    let judge = ScriptedChatClient::new(["No."]);
    assert_eq!(grade_with_llm(&judge, &item, &said, 3).await.correct, Some(false));

    let judge = ScriptedChatClient::new(["maybe", "perhaps", "unsure", "yes"]);
    let v = grade_with_llm(&judge, &item, &said, 3).await;
    assert_eq!((v.correct, v.note), (None, Some(GradeNote::GraderFailed)));
    assert_eq!(judge.requests().len(), 3);

    let judge = ScriptedChatClient::from_results([Err(LlmError::Transport("refused".into())), Ok("yes".into())]);
    let v = grade_with_llm(&judge, &item, &said, 3).await;
    assert_eq!((v.correct, v.note), (None, Some(GradeNote::GraderFailed)));
    assert_eq!(judge.requests().len(), 1);

    let judge = ScriptedChatClient::new(["yes"]);
    let v = grade_with_llm(&judge, &item, &response(None), 3).await;
    assert_eq!((v.correct, v.note), (None, Some(GradeNote::ModelError)));
    assert!(judge.requests().is_empty());
}

#[tokio::test]
async fn llm_graded_report_has_no_confusion_counts() {
    let b = bench().await;
    let responses = run_benchmark(&ConstantResponder("(1)".into()), &b.items, &RunOptions::default())
        .await
        .unwrap();
    let judge = FnChatClient::new(|req: &ChatRequest| {
        let user = req.last_user_text().unwrap_or_default();
        Ok(if user.contains("Answer: (1)") { "no" } else { "yes" }.into())
    });
    let mut verdicts = Vec::new();
    for (r, i) in responses.iter().zip(&b.items) {
        verdicts.push(grade_with_llm(&judge, &i.item, r, 2).await);
    }
    let report = compute_report("constant", &b.items, &verdicts);
    for t in &report.tasks {
        assert_eq!(t.both.correct, 0);
        assert!(t.confusion.iter().flatten().all(|&c| c == 0));
    }
    assert_eq!(report.tasks.iter().map(|t| t.both.graded).sum::<usize>(), 12);
}

#[tokio::test]
async fn constant_reply_confusion_column() {
    let b = bench().await;
    let responses = run_benchmark(&ConstantResponder("Front".into()), &b.items, &RunOptions::default())
        .await
        .unwrap();
    let verdicts: Vec<_> = responses
        .iter()
        .zip(&b.items)
        .map(|(r, i)| grade_with_matcher(r, &i.item))
        .collect();
    let report = compute_report("front", &b.items, &verdicts);
    let o = report.task(RelationAxis::Orientation);
    let front = o.columns.iter().position(|c| c == "Front").unwrap();
    let total: usize = o.confusion.iter().map(|row| row[front]).sum();
    assert_eq!(total, o.both.graded);
    assert_eq!(o.both.correct, 2);
    // "Front" names no viewpoint or shot option
    let v = report.task(RelationAxis::Viewpoint);
    assert_eq!(v.both.correct, 0);
    let unparsed = v.columns.len() - 1;
    assert_eq!(v.confusion.iter().map(|row| row[unparsed]).sum::<usize>(), 4);
}

fn permuted(item: &VqaItem, order: &[usize]) -> VqaItem {
    let options: Vec<String> = order.iter().map(|&i| item.options[i].clone()).collect();
    let answer_index = options.iter().position(|o| *o == item.answer);
    VqaItem {
        options,
        answer_index,
        ..item.clone()
    }
}

proptest! {
    #[test]
    fn grading_ignores_option_order(order in Just((0..8usize).collect::<Vec<_>>()).prop_shuffle(), pick in 0usize..8) {
        let names = RelationAxis::Orientation.class_names();
        let base = VqaItem {
            task: RelationAxis::Orientation,
            question: "Which direction is the teapot facing?".into(),
            options: names.iter().map(|s| s.to_string()).collect(),
            answer_index: Some(2),
            answer: names[2].to_string(),
            image_ref: "s".into(),
        };
        let item = permuted(&base, &order);
        let said = names[pick];
        let by_text = grade_with_matcher(&response(Some(&format!("The teapot faces {said}."))), &item);
        let by_base = grade_with_matcher(&response(Some(&format!("The teapot faces {said}."))), &base);
        prop_assert_eq!(by_text.correct, by_base.correct);

        let idx = item.options.iter().position(|o| o == said).unwrap();
        let by_index = grade_with_matcher(&response(Some(&format!("({})", idx + 1))), &item);
        prop_assert_eq!(by_index.correct, Some(pick == 2));
        prop_assert_eq!(by_index.matched_option, Some(idx));
    }

    #[test]
    fn ground_truth_always_correct(order in Just((0..3usize).collect::<Vec<_>>()).prop_shuffle()) {
        let base = VqaItem {
            task: RelationAxis::Shot,
            question: "What shot is it?".into(),
            options: ["Close-up", "Medium-shot", "Long-shot"].map(String::from).to_vec(),
            answer_index: Some(0),
            answer: "Close-up".into(),
            image_ref: "s".into(),
        };
        let item = permuted(&base, &order);
        let bi = BenchmarkItem {
            sample_id: "s".into(),
            qa_index: 0,
            item: item.clone(),
            image_path: "x.png".into(),
            source: ultima_core::SampleSource::Synthetic,
        };
        let text = futures::executor::block_on(GroundTruthResponder.respond(&bi)).unwrap();
        let v = grade_with_matcher(&response(Some(&text)), &item);
        prop_assert_eq!(v.correct, Some(true));
    }
}

#[test]
fn item_keys_are_unique() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let b = rt.block_on(bench());
    let keys: HashSet<_> = b.items.iter().map(|i| i.key()).collect();
    assert_eq!(keys.len(), b.items.len());
}
