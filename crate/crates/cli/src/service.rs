//! HTTP annotation service driving human-in-the-loop active learning.
//!
//! Each project lives in its own directory under the store:
//!
//! * `project.json`: configuration, scheme and evaluation samples
//! * `snapshot.json`: status, labeled and unlabeled sets, round history,
//!   pending queries and the labels received so far
//! * `events.jsonl`: append-only log of every mutation
//! * `learner/`, `pending/`: trainer checkpoints
//!
//! Every mutation is appended to the log and the snapshot rewritten before
//! the request is acknowledged. On startup annotations logged after the
//! last snapshot are replayed and interrupted training is restarted.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use avtag::active::{ALConfig, ActiveLearningState, PoolSample, Query, RoundRecord, Selection};
use avtag::attention::AttentionMatrix;
use avtag::corpus::{load_corpus, ProductProfile, SplitSide, TaggedSequence};
use avtag::model::{ModelConfig, Trainer};
use avtag::tags::{Prf, TagScheme};
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{scheme_for, tag_all};
use crate::error::{CliError, CliResult};

pub const API_VERSION: &str = "avtag.api/1";
pub const PROJECT_FORMAT: &str = "avtag.project/1";
pub const SNAPSHOT_FORMAT: &str = "avtag.snapshot/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Idle,
    Training,
    AwaitingLabels,
    Done,
}

#[derive(Debug, Deserialize)]
pub struct CreateProject {
    /// Corpus file readable by the server.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// Inline corpus records, used when `corpus` is absent.
    #[serde(default)]
    pub records: Option<Vec<ProductProfile>>,
    #[serde(default)]
    pub model_config: ModelConfig,
    #[serde(default)]
    pub al_config: ALConfig,
    #[serde(default)]
    pub attributes: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
pub struct Annotation {
    pub sample_id: String,
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ProjectFile {
    version: String,
    id: String,
    model_config: ModelConfig,
    al_config: ALConfig,
    scheme: TagScheme,
    eval: Vec<TaggedSequence>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PendingFile {
    round: usize,
    queries: Vec<Query>,
    metrics: Option<Prf>,
    validation_loss: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SnapshotFile {
    version: String,
    seq: u64,
    status: Status,
    labeled: Vec<TaggedSequence>,
    unlabeled: Vec<PoolSample>,
    history: Vec<RoundRecord>,
    pending: Option<PendingFile>,
    received: BTreeMap<String, Vec<usize>>,
    last_error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Created,
    RoundStarted { round: usize },
    QueriesReady { round: usize, queried_ids: Vec<String> },
    RoundFailed { round: usize, error: String },
    Annotation { sample_id: String, tags: Vec<usize> },
    RoundCommitted { round: usize },
    Finished,
}

#[derive(Serialize, Deserialize)]
struct EventLine {
    version: String,
    seq: u64,
    #[serde(flatten)]
    event: Event,
}

struct Project {
    dir: PathBuf,
    meta: ProjectFile,
    state: ActiveLearningState,
    status: Status,
    pending: Option<Selection>,
    received: BTreeMap<String, Vec<usize>>,
    last_error: Option<String>,
    seq: u64,
}

type Shared = Arc<Mutex<Project>>;

fn lock(p: &Shared) -> MutexGuard<'_, Project> {
    p.lock().unwrap_or_else(|e| e.into_inner())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

/// Writes through a temporary file and a rename so readers never see a
/// partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn save_trainer(dir: &Path, trainer: Option<&Trainer>) -> CliResult<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    if let Some(t) = trainer {
        let tmp = dir.with_extension("tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
        }
        t.save(&tmp)?;
        fs::rename(&tmp, dir).map_err(io_err(dir))?;
    }
    Ok(())
}

impl Project {
    fn log(&mut self, event: Event) -> CliResult<()> {
        self.seq += 1;
        let line = serde_json::to_string(&EventLine {
            version: API_VERSION.into(),
            seq: self.seq,
            event,
        })?;
        let path = self.dir.join("events.jsonl");
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        writeln!(f, "{line}").map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))
    }

    fn snapshot(&self) -> CliResult<()> {
        let snap = SnapshotFile {
            version: SNAPSHOT_FORMAT.into(),
            seq: self.seq,
            status: self.status,
            labeled: self.state.labeled.clone(),
            unlabeled: self.state.unlabeled.clone(),
            history: self.state.history.clone(),
            pending: self.pending.as_ref().map(|s| PendingFile {
                round: s.round,
                queries: s.queries.clone(),
                metrics: s.metrics,
                validation_loss: s.validation_loss,
            }),
            received: self.received.clone(),
            last_error: self.last_error.clone(),
        };
        write_atomic(&self.dir.join("snapshot.json"), &serde_json::to_vec(&snap)?)
    }

    /// Logs `event`, then persists the snapshot (and checkpoints when
    /// `learners` is set).
    fn persist(&mut self, event: Event, learners: bool) -> CliResult<()> {
        self.log(event)?;
        if learners {
            save_trainer(&self.dir.join("learner"), self.state.learner())?;
            save_trainer(&self.dir.join("pending"), self.pending.as_ref().map(|s| &s.learner))?;
        }
        self.snapshot()
    }

    fn create(dir: PathBuf, id: String, req: CreateProject) -> CliResult<Project> {
        let records = match (req.corpus, req.records) {
            (Some(path), _) => load_corpus(&path)?,
            (None, Some(records)) => records,
            (None, None) => return Err(CliError::Invalid("give either corpus or records".into())),
        };
        for r in &records {
            r.validate()?;
        }
        req.al_config.validate()?;
        let scheme = scheme_for(&records, req.model_config.scheme, req.attributes)?;
        let (test, pool): (Vec<ProductProfile>, Vec<ProductProfile>) =
            records.into_iter().partition(|r| r.split == Some(SplitSide::Test));
        if pool.is_empty() {
            return Err(CliError::Invalid("no records outside the test side to label".into()));
        }
        let pool = tag_all(&pool, &scheme)?;
        let eval = tag_all(&test, &scheme)?;
        let state = ActiveLearningState::from_pool(&pool, &req.al_config, req.model_config.clone(), scheme.clone())?;
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let meta = ProjectFile {
            version: PROJECT_FORMAT.into(),
            id,
            model_config: req.model_config,
            al_config: req.al_config,
            scheme,
            eval,
        };
        write_atomic(&dir.join("project.json"), &serde_json::to_vec(&meta)?)?;
        let mut p = Project {
            dir,
            meta,
            state,
            status: Status::Idle,
            pending: None,
            received: BTreeMap::new(),
            last_error: None,
            seq: 0,
        };
        p.persist(Event::Created, false)?;
        Ok(p)
    }

    fn open(dir: PathBuf) -> CliResult<Project> {
        let read = |name: &str| -> CliResult<Vec<u8>> {
            let path = dir.join(name);
            fs::read(&path).map_err(io_err(&path))
        };
        let meta: ProjectFile = serde_json::from_slice(&read("project.json")?)?;
        let snap: SnapshotFile = serde_json::from_slice(&read("snapshot.json")?)?;
        let mut state = ActiveLearningState::new(snap.labeled, snap.unlabeled, meta.model_config.clone(), meta.scheme.clone())?;
        state.history = snap.history;
        let learner_dir = dir.join("learner");
        if learner_dir.exists() {
            state.set_learner(Some(Trainer::load(&learner_dir)?));
        }
        let mut status = snap.status;
        let pending_dir = dir.join("pending");
        let pending = match snap.pending {
            Some(p) if status == Status::AwaitingLabels && pending_dir.exists() => Some(Selection {
                round: p.round,
                queries: p.queries,
                flip_records: Vec::new(),
                metrics: p.metrics,
                validation_loss: p.validation_loss,
                learner: Trainer::load(&pending_dir)?,
            }),
            _ => None,
        };
        if status == Status::AwaitingLabels && pending.is_none() {
            status = Status::Training;
        }
        let mut p = Project {
            dir,
            meta,
            state,
            status,
            pending,
            received: snap.received,
            last_error: snap.last_error,
            seq: snap.seq,
        };
        p.replay()?;
        Ok(p)
    }

    /// Applies annotations that reached the log after the last snapshot.
    fn replay(&mut self) -> CliResult<()> {
        let path = self.dir.join("events.jsonl");
        let text = fs::read_to_string(&path).unwrap_or_default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let Ok(e) = serde_json::from_str::<EventLine>(line) else {
                // a torn final line from a crash mid-append
                continue;
            };
            if e.seq <= self.seq {
                continue;
            }
            self.seq = e.seq;
            if let Event::Annotation { sample_id, tags } = e.event {
                if self.status == Status::AwaitingLabels {
                    self.received.insert(sample_id, tags);
                }
            }
        }
        self.snapshot()
    }

    fn eval(&self) -> Option<&[TaggedSequence]> {
        Some(self.meta.eval.as_slice()).filter(|e| !e.is_empty())
    }

    fn all_received(&self) -> bool {
        self.pending
            .as_ref()
            .is_some_and(|s| s.queries.iter().all(|q| self.received.contains_key(&q.sample_id)))
    }

    /// Commits a fully answered round. Returns true when another round
    /// should train.
    fn commit_round(&mut self) -> CliResult<bool> {
        let selection = self.pending.take().expect("caller checked for a pending round");
        let round = selection.round;
        let received = std::mem::take(&mut self.received);
        self.state.commit(selection, self.meta.al_config.strategy, &received)?;
        let cfg = &self.meta.al_config;
        let finished = self.state.history.len() >= cfg.rounds || self.state.unlabeled.is_empty() || self.state.converged(cfg);
        self.status = if finished { Status::Done } else { Status::Training };
        self.persist(Event::RoundCommitted { round }, true)?;
        if finished {
            self.persist(Event::Finished, false)?;
        } else {
            self.persist(Event::RoundStarted { round: self.state.round() }, false)?;
        }
        Ok(!finished)
    }

    fn sample_tokens(&self, id: &str) -> Option<&[String]> {
        self.state
            .labeled
            .iter()
            .chain(&self.meta.eval)
            .find(|s| s.id == id)
            .map(|s| s.tokens.as_slice())
            .or_else(|| self.state.unlabeled.iter().find(|s| s.id == id).map(|s| s.tokens.as_slice()))
    }

    fn current_model(&self) -> Option<&avtag::model::Model> {
        self.pending
            .as_ref()
            .map(|s| &s.learner.model)
            .or_else(|| self.state.learner().map(|t| &t.model))
    }
}

/// Trains one round's committee off the request path, then publishes
/// the queries.
fn spawn_training(project: Shared) {
    std::thread::spawn(move || {
        let (state, cfg, eval) = {
            let p = lock(&project);
            (p.state.clone(), p.meta.al_config.clone(), p.eval().map(<[_]>::to_vec))
        };
        let result = state.select_queries(&cfg, eval.as_deref());
        let mut p = lock(&project);
        let round = state.round();
        let outcome = match result {
            Ok(selection) => {
                let ids = selection.queries.iter().map(|q| q.sample_id.clone()).collect();
                p.pending = Some(selection);
                p.received.clear();
                p.status = Status::AwaitingLabels;
                p.last_error = None;
                p.persist(Event::QueriesReady { round, queried_ids: ids }, true)
            }
            Err(e) => {
                log::error!("round {round} failed: {e}");
                p.status = Status::Idle;
                p.last_error = Some(e.to_string());
                p.persist(Event::RoundFailed { round, error: e.to_string() }, false)
            }
        };
        if let Err(e) = outcome {
            log::error!("persisting round {round}: {e}");
        }
    });
}

#[derive(Clone)]
pub struct AppState {
    store: PathBuf,
    projects: Arc<Mutex<BTreeMap<String, Shared>>>,
}

impl AppState {
    /// Opens every project under `store`, restarting interrupted training
    /// and committing rounds whose labels were all logged.
    pub fn open(store: &Path) -> CliResult<Self> {
        fs::create_dir_all(store).map_err(io_err(store))?;
        let mut projects = BTreeMap::new();
        let entries = fs::read_dir(store).map_err(io_err(store))?;
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("project.json").exists() && p.join("snapshot.json").exists())
            .collect();
        dirs.sort();
        for dir in dirs {
            let mut p = Project::open(dir)?;
            let mut train = p.status == Status::Training;
            if p.status == Status::AwaitingLabels && p.all_received() {
                train = p.commit_round()?;
            }
            let id = p.meta.id.clone();
            let shared = Arc::new(Mutex::new(p));
            if train {
                spawn_training(shared.clone());
            }
            projects.insert(id, shared);
        }
        Ok(AppState {
            store: store.to_path_buf(),
            projects: Arc::new(Mutex::new(projects)),
        })
    }

    fn project(&self, id: &str) -> Result<Shared, ApiError> {
        self.projects
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown project {id:?}")))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/projects", post(create_project))
        .route("/projects/{id}", get(project_status))
        .route("/projects/{id}/rounds", post(start_round))
        .route("/projects/{id}/queries", get(queries))
        .route("/projects/{id}/annotations", post(annotate))
        .route("/projects/{id}/metrics", get(metrics))
        .route("/projects/{id}/attention/{sample_id}", get(attention))
        .with_state(state)
}

pub fn serve(host: &str, port: u16, store: &Path) -> CliResult<()> {
    let state = AppState::open(store)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::io(store, e))?;
    let addr = format!("{host}:{port}");
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| CliError::io(&addr, e))?;
        log::info!("listening on {addr}");
        axum::serve(listener, router(state)).await.map_err(|e| CliError::io(&addr, e))
    })
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: json!({ "version": API_VERSION, "error": message.into() }),
        }
    }

    fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.body[key] = json!(value);
        self
    }

    fn conflict(message: impl Into<String>, status: Status) -> Self {
        ApiError::new(StatusCode::CONFLICT, message).with("status", status)
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        let status = match &e {
            CliError::Core(avtag::Error::Io { .. }) | CliError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<avtag::Error> for ApiError {
    fn from(e: avtag::Error) -> Self {
        CliError::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult = Result<(StatusCode, Json<Value>), ApiError>;

fn ok(status: StatusCode, body: Value) -> ApiResult {
    Ok((status, Json(body)))
}

async fn create_project(State(app): State<AppState>, Json(req): Json<CreateProject>) -> ApiResult {
    let app2 = app.clone();
    let (id, status) = tokio::task::spawn_blocking(move || -> Result<(String, Status), ApiError> {
        let mut projects = app2.projects.lock().unwrap_or_else(|e| e.into_inner());
        let mut n = projects.len() + 1;
        let id = loop {
            let id = format!("p{n:04}");
            if !projects.contains_key(&id) && !app2.store.join(&id).exists() {
                break id;
            }
            n += 1;
        };
        let p = Project::create(app2.store.join(&id), id.clone(), req)?;
        let status = p.status;
        projects.insert(id.clone(), Arc::new(Mutex::new(p)));
        Ok((id, status))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    ok(
        StatusCode::CREATED,
        json!({ "version": API_VERSION, "project_id": id, "status": status }),
    )
}

fn summary(id: &str, p: &Project) -> Value {
    json!({
        "version": API_VERSION,
        "project_id": id,
        "status": p.status,
        "round": p.state.round(),
        "labeled": p.state.labeled.len(),
        "unlabeled": p.state.unlabeled.len(),
        "last_error": p.last_error,
    })
}

async fn project_status(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let shared = app.project(&id)?;
    let p = lock(&shared);
    ok(StatusCode::OK, summary(&id, &p))
}

async fn start_round(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let shared = app.project(&id)?;
    {
        let mut p = lock(&shared);
        if p.status != Status::Idle {
            return Err(ApiError::conflict(format!("a round can only start from IDLE, project is {:?}", p.status), p.status));
        }
        if p.state.unlabeled.is_empty() {
            return Err(ApiError::conflict("the unlabeled pool is empty", p.status));
        }
        p.status = Status::Training;
        let round = p.state.round();
        p.persist(Event::RoundStarted { round }, false)?;
    }
    spawn_training(shared.clone());
    let p = lock(&shared);
    ok(StatusCode::ACCEPTED, summary(&id, &p))
}

async fn queries(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let shared = app.project(&id)?;
    let p = lock(&shared);
    let Some(sel) = p.pending.as_ref().filter(|_| p.status == Status::AwaitingLabels) else {
        return Err(ApiError::conflict(format!("no queries while {:?}", p.status), p.status));
    };
    let model = &sel.learner.model;
    let mut out = Vec::new();
    for q in &sel.queries {
        let attention = model.predict_tokens(&q.tokens)?.attention;
        out.push(json!({
            "sample_id": q.sample_id,
            "tokens": q.tokens,
            "strategy_score": q.strategy_score,
            "prior_prediction_tags": q.prior_prediction_tags.iter().map(|&t| p.meta.scheme.tag_name(t)).collect::<Vec<_>>(),
            "attention_matrix": attention.map(|a| a.matrix),
            "labeled": p.received.contains_key(&q.sample_id),
        }));
    }
    ok(
        StatusCode::OK,
        json!({
            "version": API_VERSION,
            "project_id": id,
            "status": p.status,
            "round": sel.round,
            "tag_set": p.meta.scheme.tag_names(),
            "queries": out,
        }),
    )
}

async fn annotate(State(app): State<AppState>, UrlPath(id): UrlPath<String>, Json(a): Json<Annotation>) -> ApiResult {
    let shared = app.project(&id)?;
    let train_next = {
        let mut p = lock(&shared);
        if p.state.labeled.iter().any(|s| s.id == a.sample_id) || p.received.contains_key(&a.sample_id) {
            return Err(ApiError::conflict(format!("{:?} is already labeled", a.sample_id), p.status));
        }
        let status = p.status;
        let Some(sel) = p.pending.as_ref().filter(|_| status == Status::AwaitingLabels) else {
            return Err(ApiError::conflict(format!("not accepting labels while {status:?}"), status));
        };
        let Some(query) = sel.queries.iter().find(|q| q.sample_id == a.sample_id) else {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                format!("{:?} is not in the current query batch", a.sample_id),
            ));
        };
        let tags = p.meta.scheme.parse_tags(&a.tags).map_err(|i| {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid tag {:?}", a.tags[i]))
                .with("position", i)
                .with("tag", &a.tags[i])
        })?;
        if tags.len() != query.tokens.len() {
            let position = tags.len().min(query.tokens.len());
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("{} tags for {} tokens", tags.len(), query.tokens.len()),
            )
            .with("position", position));
        }
        p.received.insert(a.sample_id.clone(), tags.clone());
        p.persist(
            Event::Annotation {
                sample_id: a.sample_id.clone(),
                tags,
            },
            false,
        )?;
        if p.all_received() {
            p.commit_round()?
        } else {
            false
        }
    };
    if train_next {
        spawn_training(shared.clone());
    }
    let p = lock(&shared);
    let remaining = p
        .pending
        .as_ref()
        .map_or(0, |s| s.queries.iter().filter(|q| !p.received.contains_key(&q.sample_id)).count());
    let mut body = summary(&id, &p);
    body["sample_id"] = json!(a.sample_id);
    body["remaining"] = json!(remaining);
    ok(StatusCode::OK, body)
}

async fn metrics(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let shared = app.project(&id)?;
    let p = lock(&shared);
    let mut body = summary(&id, &p);
    body["history"] = json!(p.state.history);
    ok(StatusCode::OK, body)
}

async fn attention(State(app): State<AppState>, UrlPath((id, sample_id)): UrlPath<(String, String)>) -> ApiResult {
    let shared = app.project(&id)?;
    let p = lock(&shared);
    let tokens = p
        .sample_tokens(&sample_id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown sample {sample_id:?}")))?
        .to_vec();
    let model = p
        .current_model()
        .ok_or_else(|| ApiError::conflict("no trained model yet", p.status))?;
    let matrix: AttentionMatrix = model
        .predict_tokens(&tokens)?
        .attention
        .ok_or_else(|| ApiError::conflict(format!("a {} model has no attention layer", model.variant()), p.status))?;
    ok(
        StatusCode::OK,
        json!({
            "version": API_VERSION,
            "sample_id": sample_id,
            "tokens": matrix.tokens,
            "matrix": matrix.matrix,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::body::{to_bytes, Body};
    use axum::http::Request;
    use tower::ServiceExt;

    fn request() -> CreateProject {
        let records: Vec<ProductProfile> = (0..6)
            .map(|i| {
                serde_json::from_value(json!({
                    "id": format!("s{i}"),
                    "text": "acme duck food",
                    "annotations": {"flavor": [{"value": "duck", "start": 5, "end": 9}]},
                }))
                .unwrap()
            })
            .collect();
        CreateProject {
            corpus: None,
            records: Some(records),
            model_config: ModelConfig::default(),
            al_config: ALConfig {
                initial_labeled: 2,
                ..ALConfig::default()
            },
            attributes: None,
        }
    }

    #[tokio::test]
    async fn queries_during_training_conflict_with_status_body() {
        let store = tempfile::tempdir().unwrap();
        let mut p = Project::create(store.path().join("p0001"), "p0001".into(), request()).unwrap();
        p.status = Status::Training;
        let state = AppState {
            store: store.path().to_path_buf(),
            projects: Arc::new(Mutex::new(BTreeMap::from([("p0001".to_string(), Arc::new(Mutex::new(p)))]))),
        };
        let resp = router(state)
            .oneshot(Request::get("/projects/p0001/queries").body(Body::empty()).unwrap())
            .await
            .unwrap();
        assert_eq!(resp.status(), StatusCode::CONFLICT);
        let body: Value = serde_json::from_slice(&to_bytes(resp.into_body(), usize::MAX).await.unwrap()).unwrap();
        assert_eq!(body["status"], "TRAINING");
        assert_eq!(body["version"], API_VERSION);
    }

    #[test]
    fn torn_log_line_is_skipped_on_replay() {
        let store = tempfile::tempdir().unwrap();
        let dir = store.path().join("p0001");
        let p = Project::create(dir.clone(), "p0001".into(), request()).unwrap();
        drop(p);
        let log = dir.join("events.jsonl");
        let mut text = fs::read_to_string(&log).unwrap();
        text.push_str("{\"version\":\"avtag.api/1\",\"seq\":2,\"ev");
        fs::write(&log, text).unwrap();
        let p = Project::open(dir).unwrap();
        assert_eq!(p.status, Status::Idle);
        assert_eq!(p.state.labeled.len(), 2);
    }
}
