//! Human review of generated images: task leasing across reviewers, verdict
//! log, success statistics and the HTTP API serving them.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{info, warn};

use crate::dataset::{DatasetError, Manifest, ManifestWriter, ReviewStatus};

/// Distinct reviewers per task.
pub const REVIEWERS_PER_TASK: usize = 3;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("reviewer id must be non-empty")]
    EmptyReviewer,
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("reviewer {reviewer} already judged task {task_id}")]
    Duplicate { task_id: String, reviewer: String },
    #[error("task {0} already has {REVIEWERS_PER_TASK} reviewers")]
    TaskFull(String),
    #[error("task {0} was decided outside this review session")]
    Closed(String),
    #[error("sample {sample_id} image missing: {path}")]
    MissingImage { sample_id: String, path: PathBuf },
    #[error("verdict log {path} line {line}: {message}")]
    Log {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// A prior render and the image generated from it, shown side by side.
/// Image paths are relative to the service's image root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewTask {
    pub task_id: String,
    pub sample_id: String,
    pub left_image: String,
    pub right_image: String,
}

/// One review task per record carrying an RGB prior, decided or not, so
/// that a verdict log replays against the same task list. Both images must
/// exist under `image_root`.
pub fn tasks_from_manifest(manifest: &Manifest, image_root: &Path) -> Result<Vec<ReviewTask>, CurationError> {
    let mut tasks = Vec::new();
    for r in manifest.records() {
        let Some(rgb) = r.prior_paths.get("rgb") else {
            continue;
        };
        for p in [rgb, &r.image_path] {
            let full = image_root.join(p);
            if !full.is_file() {
                return Err(CurationError::MissingImage {
                    sample_id: r.sample_id.clone(),
                    path: full,
                });
            }
        }
        tasks.push(ReviewTask {
            task_id: r.sample_id.clone(),
            sample_id: r.sample_id.clone(),
            left_image: rgb.clone(),
            right_image: r.image_path.clone(),
        });
    }
    Ok(tasks)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub task_id: String,
    pub reviewer: String,
    pub success: bool,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewStats {
    pub tasks: usize,
    pub verdicts: usize,
    /// Tasks with all three verdicts.
    pub completed_tasks: usize,
    /// Majority-success share of completed tasks; `None` when none completed.
    pub success_rate: Option<f64>,
    /// Share of completed tasks whose verdicts all agree.
    pub agreement_rate: Option<f64>,
    /// Share of completed tasks judged a success by every reviewer.
    pub unanimous_success_rate: Option<f64>,
}

/// Verdicts of a JSONL log in order. A torn final line is ignored.
pub fn read_verdict_log(path: &Path) -> Result<Vec<Verdict>, CurationError> {
    let text = std::fs::read_to_string(path).map_err(|source| CurationError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let count = text.lines().count();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Verdict>(line) {
            Ok(v) => out.push(v),
            Err(_) if n + 1 == count => warn!(line = n + 1, "ignoring torn verdict log line"),
            Err(e) => {
                return Err(CurationError::Log {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Statistics over a verdict log. Verdicts past the third for a task, or
/// repeated by one reviewer, are ignored as the service never accepts them.
pub fn compute_stats(task_count: usize, verdicts: &[Verdict]) -> ReviewStats {
    let mut per_task: HashMap<&str, Vec<(&str, bool)>> = HashMap::new();
    let mut accepted = 0;
    for v in verdicts {
        let list = per_task.entry(&v.task_id).or_default();
        if list.len() < REVIEWERS_PER_TASK && !list.iter().any(|(r, _)| *r == v.reviewer) {
            list.push((&v.reviewer, v.success));
            accepted += 1;
        }
    }
    let (mut completed, mut majority, mut agree, mut all_yes) = (0usize, 0usize, 0usize, 0usize);
    for list in per_task.values().filter(|l| l.len() == REVIEWERS_PER_TASK) {
        completed += 1;
        let yes = list.iter().filter(|(_, s)| *s).count();
        majority += (2 * yes > REVIEWERS_PER_TASK) as usize;
        agree += (yes == 0 || yes == REVIEWERS_PER_TASK) as usize;
        all_yes += (yes == REVIEWERS_PER_TASK) as usize;
    }
    let rate = |n: usize| (completed > 0).then(|| n as f64 / completed as f64);
    ReviewStats {
        tasks: task_count,
        verdicts: accepted,
        completed_tasks: completed,
        success_rate: rate(majority),
        agreement_rate: rate(agree),
        unanimous_success_rate: rate(all_yes),
    }
}

/// Outcome of three verdicts: accepted on a success majority.
pub fn majority_status(successes: &[bool]) -> ReviewStatus {
    let yes = successes.iter().filter(|s| **s).count();
    if 2 * yes > successes.len() {
        ReviewStatus::Accepted
    } else {
        ReviewStatus::Rejected
    }
}

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Clock advanced by hand.
#[derive(Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(AtomicU64::new(start_ms))
    }

    pub fn advance(&self, by: Duration) {
        self.0.fetch_add(by.as_millis() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

impl<T: Clock + ?Sized> Clock for Arc<T> {
    fn now_ms(&self) -> u64 {
        (**self).now_ms()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AssignmentOrder {
    /// Task list order.
    Sequential,
    /// A fixed shuffle per reviewer, derived from the seed and reviewer id.
    Random { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct CurationConfig {
    pub lease: Duration,
    pub order: AssignmentOrder,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            lease: Duration::from_secs(600),
            order: AssignmentOrder::Random { seed: 0 },
        }
    }
}

#[derive(Default)]
struct TaskState {
    verdicts: Vec<(String, bool)>,
    /// Reviewer → lease expiry in ms.
    leases: HashMap<String, u64>,
    closed: bool,
}

impl TaskState {
    fn judged_by(&self, reviewer: &str) -> bool {
        self.verdicts.iter().any(|(r, _)| r == reviewer)
    }

    /// Reviewers with a verdict or a live lease.
    fn occupants(&self, now: u64) -> usize {
        let mut who: HashSet<&str> = self.verdicts.iter().map(|(r, _)| r.as_str()).collect();
        who.extend(
            self.leases
                .iter()
                .filter(|(_, &exp)| exp > now)
                .map(|(r, _)| r.as_str()),
        );
        who.len()
    }
}

struct Inner {
    states: Vec<TaskState>,
    log: Vec<Verdict>,
    log_file: Option<(PathBuf, File)>,
    manifest: Option<ManifestWriter>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub task_id: String,
    pub verdicts: usize,
    /// Set once the third verdict decides the sample.
    pub review: Option<ReviewStatus>,
}

/// Review session over a fixed task list. All mutations go through one
/// lock and are appended to the verdict log before being acknowledged.
pub struct ReviewService {
    tasks: Vec<ReviewTask>,
    index: HashMap<String, usize>,
    config: CurationConfig,
    clock: Box<dyn Clock>,
    inner: Mutex<Inner>,
}

impl ReviewService {
    pub fn new(tasks: Vec<ReviewTask>, config: CurationConfig) -> Self {
        Self::with_clock(tasks, config, Box::new(SystemClock))
    }

    pub fn with_clock(tasks: Vec<ReviewTask>, config: CurationConfig, clock: Box<dyn Clock>) -> Self {
        let index = tasks.iter().enumerate().map(|(i, t)| (t.task_id.clone(), i)).collect();
        let states = tasks.iter().map(|_| TaskState::default()).collect();
        Self {
            tasks,
            index,
            config,
            clock,
            inner: Mutex::new(Inner {
                states,
                log: Vec::new(),
                log_file: None,
                manifest: None,
            }),
        }
    }

    /// Persist verdicts to the JSONL file at `path`, first replaying any
    /// verdicts it already holds.
    pub fn with_log(self, path: &Path) -> Result<Self, CurationError> {
        let io = |source| CurationError::Io {
            path: path.to_path_buf(),
            source,
        };
        if path.exists() {
            for v in read_verdict_log(path)? {
                self.apply_replayed(v)?;
            }
        } else if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        self.inner.lock().log_file = Some((path.to_path_buf(), file));
        Ok(self)
    }

    /// Record decided samples in `writer`. Tasks already decided by the
    /// replayed log are written through if still pending there; tasks the
    /// manifest settled without three logged verdicts are closed.
    pub fn with_manifest(self, mut writer: ManifestWriter) -> Result<Self, CurationError> {
        {
            let mut inner = self.inner.lock();
            for (task, state) in self.tasks.iter().zip(inner.states.iter_mut()) {
                let pending = writer
                    .manifest()
                    .get(&task.sample_id)
                    .is_some_and(|r| r.review == ReviewStatus::Pending);
                if state.verdicts.len() == REVIEWERS_PER_TASK {
                    if pending {
                        let s: Vec<bool> = state.verdicts.iter().map(|(_, s)| *s).collect();
                        writer.set_review(&task.sample_id, majority_status(&s))?;
                    }
                } else if !pending {
                    state.closed = true;
                }
            }
            inner.manifest = Some(writer);
        }
        Ok(self)
    }

    fn apply_replayed(&self, v: Verdict) -> Result<(), CurationError> {
        let &i = self
            .index
            .get(&v.task_id)
            .ok_or_else(|| CurationError::UnknownTask(v.task_id.clone()))?;
        let mut inner = self.inner.lock();
        let state = &mut inner.states[i];
        if state.judged_by(&v.reviewer) || state.verdicts.len() >= REVIEWERS_PER_TASK {
            warn!(task = %v.task_id, reviewer = %v.reviewer, "skipping inadmissible logged verdict");
            return Ok(());
        }
        state.verdicts.push((v.reviewer.clone(), v.success));
        inner.log.push(v);
        Ok(())
    }

    pub fn tasks(&self) -> &[ReviewTask] {
        &self.tasks
    }

    pub fn task(&self, task_id: &str) -> Option<&ReviewTask> {
        self.index.get(task_id).map(|&i| &self.tasks[i])
    }

    fn order_for(&self, reviewer: &str) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.tasks.len()).collect();
        if let AssignmentOrder::Random { seed } = self.config.order {
            let d = Sha256::digest(reviewer.as_bytes());
            let mix = u64::from_be_bytes(d[..8].try_into().expect("32-byte digest"));
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ mix));
        }
        order
    }

    /// A task this reviewer has not judged and that still has room, leased
    /// to them. A reviewer holding a live lease gets that task back.
    pub fn next_task(&self, reviewer: &str) -> Result<Option<ReviewTask>, CurationError> {
        if reviewer.trim().is_empty() {
            return Err(CurationError::EmptyReviewer);
        }
        let now = self.clock.now_ms();
        let expiry = now + self.config.lease.as_millis() as u64;
        let order = self.order_for(reviewer);
        let mut inner = self.inner.lock();
        for state in inner.states.iter_mut() {
            state.leases.retain(|_, &mut exp| exp > now);
        }
        if let Some(&i) = order.iter().find(|&&i| inner.states[i].leases.contains_key(reviewer)) {
            inner.states[i].leases.insert(reviewer.to_string(), expiry);
            return Ok(Some(self.tasks[i].clone()));
        }
        for i in order {
            let state = &mut inner.states[i];
            if state.closed || state.judged_by(reviewer) || state.occupants(now) >= REVIEWERS_PER_TASK {
                continue;
            }
            state.leases.insert(reviewer.to_string(), expiry);
            return Ok(Some(self.tasks[i].clone()));
        }
        Ok(None)
    }

    pub fn submit_verdict(&self, task_id: &str, reviewer: &str, success: bool) -> Result<SubmitOutcome, CurationError> {
        if reviewer.trim().is_empty() {
            return Err(CurationError::EmptyReviewer);
        }
        let &i = self
            .index
            .get(task_id)
            .ok_or_else(|| CurationError::UnknownTask(task_id.to_string()))?;
        let now = self.clock.now_ms();
        let mut inner = self.inner.lock();
        let inner = &mut *inner;
        let state = &mut inner.states[i];
        if state.judged_by(reviewer) {
            return Err(CurationError::Duplicate {
                task_id: task_id.to_string(),
                reviewer: reviewer.to_string(),
            });
        }
        if state.closed {
            return Err(CurationError::Closed(task_id.to_string()));
        }
        let holds_lease = state.leases.get(reviewer).is_some_and(|&exp| exp > now);
        if state.verdicts.len() >= REVIEWERS_PER_TASK || (!holds_lease && state.occupants(now) >= REVIEWERS_PER_TASK) {
            return Err(CurationError::TaskFull(task_id.to_string()));
        }
        let sample_id = &self.tasks[i].sample_id;
        let decision = (state.verdicts.len() + 1 == REVIEWERS_PER_TASK).then(|| {
            let mut s: Vec<bool> = state.verdicts.iter().map(|(_, s)| *s).collect();
            s.push(success);
            majority_status(&s)
        });
        if let (Some(status), Some(w)) = (decision, &inner.manifest) {
            w.manifest().check_review(sample_id, status)?;
        }
        let verdict = Verdict {
            task_id: task_id.to_string(),
            reviewer: reviewer.to_string(),
            success,
            timestamp: now,
        };
        if let Some((path, file)) = &mut inner.log_file {
            let mut line = serde_json::to_string(&verdict).expect("verdicts serialize");
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .and_then(|_| file.sync_data())
                .map_err(|source| CurationError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        state.verdicts.push((reviewer.to_string(), success));
        state.leases.remove(reviewer);
        let count = state.verdicts.len();
        inner.log.push(verdict);
        if let (Some(status), Some(w)) = (decision, &mut inner.manifest) {
            w.set_review(sample_id, status)?;
            info!(sample = %sample_id, ?status, "sample review decided");
        }
        Ok(SubmitOutcome {
            task_id: task_id.to_string(),
            verdicts: count,
            review: decision,
        })
    }

    pub fn verdicts(&self) -> Vec<Verdict> {
        self.inner.lock().log.clone()
    }

    pub fn stats(&self) -> ReviewStats {
        let log = self.verdicts();
        compute_stats(self.tasks.len(), &log)
    }

    /// Number of verdicts recorded for a task.
    pub fn verdict_count(&self, task_id: &str) -> Option<usize> {
        let &i = self.index.get(task_id)?;
        Some(self.inner.lock().states[i].verdicts.len())
    }
}

/// Filesystem roots served alongside the API.
#[derive(Debug, Clone)]
pub struct ServeRoots {
    pub images: PathBuf,
    pub ui: Option<PathBuf>,
}

#[derive(Clone)]
struct AppState {
    service: Arc<ReviewService>,
    roots: Arc<ServeRoots>,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<CurationError> for ApiError {
    fn from(e: CurationError) -> Self {
        let status = match &e {
            CurationError::EmptyReviewer => StatusCode::BAD_REQUEST,
            CurationError::UnknownTask(_) => StatusCode::NOT_FOUND,
            CurationError::Duplicate { .. } | CurationError::TaskFull(_) | CurationError::Closed(_) => {
                StatusCode::CONFLICT
            }
            CurationError::Dataset(DatasetError::ReviewTransition { .. }) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

#[derive(Deserialize)]
struct NextQuery {
    reviewer: Option<String>,
}

/// Body of `GET /api/review/next`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextResponse {
    pub task: Option<TaskView>,
}

/// A task as sent to reviewers: ids and image URLs only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub left_url: String,
    pub right_url: String,
}

/// Body of `POST /api/review/verdict`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRequest {
    pub task_id: String,
    pub reviewer: String,
    pub success: bool,
}

fn image_url(rel: &str) -> String {
    format!("/api/images/{}", rel.replace('\\', "/"))
}

async fn next_handler(State(app): State<AppState>, Query(q): Query<NextQuery>) -> Result<Json<NextResponse>, ApiError> {
    let reviewer = q.reviewer.unwrap_or_default();
    let task = app.service.next_task(&reviewer)?;
    Ok(Json(NextResponse {
        task: task.map(|t| TaskView {
            left_url: image_url(&t.left_image),
            right_url: image_url(&t.right_image),
            task_id: t.task_id,
        }),
    }))
}

async fn verdict_handler(
    State(app): State<AppState>,
    Json(body): Json<VerdictRequest>,
) -> Result<Json<SubmitOutcome>, ApiError> {
    Ok(Json(app.service.submit_verdict(
        &body.task_id,
        &body.reviewer,
        body.success,
    )?))
}

async fn stats_handler(State(app): State<AppState>) -> Json<ReviewStats> {
    Json(app.service.stats())
}

/// Join a URL path onto `root`, refusing anything that could escape it.
pub fn safe_join(root: &Path, rel: &str) -> Option<PathBuf> {
    let rel = Path::new(rel);
    let mut out = root.to_path_buf();
    for c in rel.components() {
        match c {
            Component::Normal(part) => out.push(part),
            Component::CurDir => {}
            _ => return None,
        }
    }
    Some(out)
}

fn content_type(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("html") => "text/html; charset=utf-8",
        Some("js") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn serve_file(root: &Path, rel: &str) -> Result<Response, ApiError> {
    let path = safe_join(root, rel).ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, "invalid path".into()))?;
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response()),
        Err(_) => Err(ApiError(StatusCode::NOT_FOUND, format!("not found: {rel}"))),
    }
}

async fn image_handler(State(app): State<AppState>, UrlPath(rel): UrlPath<String>) -> Result<Response, ApiError> {
    serve_file(&app.roots.images, &rel).await
}

async fn ui_handler(State(app): State<AppState>, uri: axum::http::Uri) -> Result<Response, ApiError> {
    let Some(ui) = &app.roots.ui else {
        return Err(ApiError(StatusCode::NOT_FOUND, "not found".into()));
    };
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    serve_file(ui, rel).await
}

/// The review API, plus static UI files when `roots.ui` is set.
pub fn router(service: Arc<ReviewService>, roots: ServeRoots) -> Router {
    Router::new()
        .route("/api/review/next", get(next_handler))
        .route("/api/review/verdict", post(verdict_handler))
        .route("/api/review/stats", get(stats_handler))
        .route("/api/images/{*path}", get(image_handler))
        .fallback(ui_handler)
        .with_state(AppState {
            service,
            roots: Arc::new(roots),
        })
}

/// Serve until the listener fails or `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    service: Arc<ReviewService>,
    roots: ServeRoots,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service, roots))
        .with_graceful_shutdown(shutdown)
        .await
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tasks(n: usize) -> Vec<ReviewTask> {
        (0..n)
            .map(|i| ReviewTask {
                task_id: format!("t{i}"),
                sample_id: format!("t{i}"),
                left_image: format!("priors/{i}_rgb.png"),
                right_image: format!("images/{i}.png"),
            })
            .collect()
    }

    fn sequential() -> CurationConfig {
        CurationConfig {
            order: AssignmentOrder::Sequential,
            ..CurationConfig::default()
        }
    }

    fn v(task: &str, reviewer: &str, success: bool) -> Verdict {
        Verdict {
            task_id: task.into(),
            reviewer: reviewer.into(),
            success,
            timestamp: 0,
        }
    }

    #[test]
    fn first_task_then_exhaustion() {
        let s = ReviewService::new(tasks(2), sequential());
        assert_eq!(s.next_task("a").unwrap().unwrap().task_id, "t0");
        // same lease comes back until judged
        assert_eq!(s.next_task("a").unwrap().unwrap().task_id, "t0");
        s.submit_verdict("t0", "a", true).unwrap();
        assert_eq!(s.next_task("a").unwrap().unwrap().task_id, "t1");
        s.submit_verdict("t1", "a", true).unwrap();
        assert_eq!(s.next_task("a").unwrap(), None);
        assert!(matches!(s.next_task(" "), Err(CurationError::EmptyReviewer)));
    }

    #[test]
    fn cap_counts_leases() {
        let s = ReviewService::new(tasks(1), sequential());
        for r in ["a", "b", "c"] {
            assert!(s.next_task(r).unwrap().is_some());
        }
        assert_eq!(s.next_task("d").unwrap(), None);
        assert!(matches!(
            s.submit_verdict("t0", "d", true),
            Err(CurationError::TaskFull(_))
        ));
    }

    #[test]
    fn leases_expire() {
        let clock = Arc::new(ManualClock::new(1_000));
        let s = ReviewService::with_clock(tasks(1), sequential(), Box::new(clock.clone()));
        for r in ["a", "b", "c"] {
            s.next_task(r).unwrap();
        }
        assert_eq!(s.next_task("d").unwrap(), None);
        clock.advance(Duration::from_secs(601));
        assert!(s.next_task("d").unwrap().is_some());
    }

    #[test]
    fn duplicate_and_unknown() {
        let s = ReviewService::new(tasks(1), sequential());
        s.submit_verdict("t0", "a", true).unwrap();
        assert!(matches!(
            s.submit_verdict("t0", "a", false),
            Err(CurationError::Duplicate { .. })
        ));
        assert!(matches!(
            s.submit_verdict("zz", "a", false),
            Err(CurationError::UnknownTask(_))
        ));
    }

    #[test]
    fn majority() {
        assert_eq!(majority_status(&[true, true, false]), ReviewStatus::Accepted);
        assert_eq!(majority_status(&[false, false, true]), ReviewStatus::Rejected);
        let s = ReviewService::new(tasks(1), sequential());
        assert_eq!(s.submit_verdict("t0", "a", true).unwrap().review, None);
        assert_eq!(s.submit_verdict("t0", "b", true).unwrap().review, None);
        assert_eq!(
            s.submit_verdict("t0", "c", false).unwrap().review,
            Some(ReviewStatus::Accepted)
        );
    }

    #[test]
    fn stats_counting() {
        assert_eq!(compute_stats(5, &[]).success_rate, None);
        let mut log = Vec::new();
        for (i, pattern) in [[true, true, true], [true, true, false], [false, false, false]]
            .iter()
            .enumerate()
        {
            for (j, &ok) in pattern.iter().enumerate() {
                log.push(v(&format!("t{i}"), &format!("r{j}"), ok));
            }
        }
        log.push(v("t3", "r0", true));
        let st = compute_stats(4, &log);
        assert_eq!(st.completed_tasks, 3);
        assert_eq!(st.success_rate, Some(2.0 / 3.0));
        assert_eq!(st.agreement_rate, Some(2.0 / 3.0));
        assert_eq!(st.unanimous_success_rate, Some(1.0 / 3.0));
    }

    #[test]
    fn random_order_differs_by_reviewer() {
        let s = ReviewService::new(tasks(50), CurationConfig::default());
        let a = s.order_for("alice");
        let b = s.order_for("bob");
        assert_ne!(a, b);
        assert_eq!(a, s.order_for("alice"));
    }

    #[test]
    fn path_guard() {
        let root = Path::new("/data");
        assert_eq!(safe_join(root, "a/b.png"), Some(PathBuf::from("/data/a/b.png")));
        assert_eq!(safe_join(root, "../etc/passwd"), None);
        assert_eq!(safe_join(root, "a/../../x"), None);
        assert_eq!(safe_join(root, "/etc/passwd"), None);
    }
}
