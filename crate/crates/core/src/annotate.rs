//! HTTP service for human annotation.
//!
//! A benchmark directory holds `items.jsonl` (a dataset of records; only
//! `id`, `prompt`, `image` and, for prefill, `extraction` are read). State
//! lives under `annotations/`: `events.jsonl` is the append-only log and
//! `state.json` the materialized view, rewritten atomically after each
//! event. On start the view is loaded and any newer events are replayed.
//!
//! Endpoints (JSON unless noted, all under `/v1`):
//!
//! | method | path | |
//! |---|---|---|
//! | GET  | `/v1` | api version, item count |
//! | POST | `/v1/sessions` | `{annotator_id, seed?}` → session |
//! | GET  | `/v1/sessions/{sid}/next` | next unfinished item and its step |
//! | POST | `/v1/sessions/{sid}/items/{item}/submit` | `{expected_revision, step, …}` |
//! | GET  | `/v1/sessions/{sid}/progress` | per-step counts |
//! | GET  | `/v1/items/{item}/image` | image bytes |
//! | GET  | `/v1/export/{annotator}` | finished records, JSON lines |
//!
//! Validation failures are 422 with `violations: [{path, message}]`; stale
//! revisions and out-of-order steps are 409.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::{Mutex, RwLock};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tower_http::cors::{Any, CorsLayer};

use crate::images::{self, ImageSource};
use crate::metaeval::AnnotatorScores;
use crate::record::{
    read_dataset, serialize_record, validate_extraction, validate_record, Caption,
    DimensionSummary, EvaluationRecord, ExtractionResult, QuestionKind, QuestionVerdict,
    StageAnswer, TextPrompt, Variant, Violation, MAX_SCORE,
};

pub const API_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationStep {
    Extraction,
    Answers,
    Scoring,
    Done,
}

impl AnnotationStep {
    fn next(self) -> Self {
        match self {
            AnnotationStep::Extraction => AnnotationStep::Answers,
            AnnotationStep::Answers => AnnotationStep::Scoring,
            AnnotationStep::Scoring | AnnotationStep::Done => AnnotationStep::Done,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub annotator_id: String,
    pub seed: u64,
    pub order: Vec<String>,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemState {
    pub step: AnnotationStep,
    pub revision: u64,
    pub record: EvaluationRecord,
    pub updated_at: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationState {
    pub last_seq: u64,
    pub sessions: BTreeMap<String, Session>,
    /// annotator → item → state
    pub items: BTreeMap<String, BTreeMap<String, ItemState>>,
}

/// Body of one step submission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum StepPayload {
    Extraction {
        extraction: ExtractionResult,
    },
    Answers {
        #[serde(default)]
        captions: Vec<Caption>,
        answers: Vec<StageAnswer>,
    },
    Scoring {
        verdicts: Vec<QuestionVerdict>,
        summaries: Vec<DimensionSummary>,
    },
}

impl StepPayload {
    pub fn step(&self) -> AnnotationStep {
        match self {
            StepPayload::Extraction { .. } => AnnotationStep::Extraction,
            StepPayload::Answers { .. } => AnnotationStep::Answers,
            StepPayload::Scoring { .. } => AnnotationStep::Scoring,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub expected_revision: u64,
    #[serde(flatten)]
    pub payload: StepPayload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventBody {
    SessionCreated { session: Session },
    StepSubmitted { annotator_id: String, item_id: String, request: SubmitRequest },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub at: String,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("validation failed")]
    Invalid(Vec<Violation>),
    #[error("conflict: item is at step {step:?}, revision {revision}")]
    Conflict { step: AnnotationStep, revision: u64 },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("unauthorized")]
    Unauthorized,
    #[error("storage: {0}")]
    Storage(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match &self {
            ApiError::UnknownSession(_) | ApiError::UnknownItem(_) => {
                (StatusCode::NOT_FOUND, json!({"error": "not_found", "message": self.to_string()}))
            }
            ApiError::Invalid(v) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({"error": "invalid", "message": self.to_string(), "violations": v}),
            ),
            ApiError::Conflict { step, revision } => (
                StatusCode::CONFLICT,
                json!({"error": "conflict", "message": self.to_string(), "step": step, "revision": revision}),
            ),
            ApiError::BadRequest(_) => (StatusCode::BAD_REQUEST, json!({"error": "bad_request", "message": self.to_string()})),
            ApiError::Unauthorized => (StatusCode::UNAUTHORIZED, json!({"error": "unauthorized", "message": self.to_string()})),
            ApiError::Storage(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, json!({"error": "storage", "message": self.to_string()}))
            }
        };
        (status, Json(body)).into_response()
    }
}

fn storage(path: &Path) -> impl Fn(std::io::Error) -> ApiError + '_ {
    move |e| ApiError::Storage(format!("{}: {e}", path.display()))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn seed_for(annotator_id: &str) -> u64 {
    // FNV-1a
    annotator_id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn v(path: impl Into<String>, message: impl Into<String>) -> Violation {
    Violation { path: path.into(), message: message.into() }
}

fn validate_answers(record: &EvaluationRecord, answers: &[StageAnswer]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    for (i, a) in answers.iter().enumerate() {
        let path = format!("answers[{i}]");
        let Some(q) = record.question(&a.qid) else {
            out.push(v(&path, format!("answer for unknown question `{}`", a.qid)));
            continue;
        };
        if seen.insert(a.qid.as_str(), i).is_some() {
            out.push(v(&path, format!("question `{}` answered twice", a.qid)));
        }
        if q.kind == QuestionKind::Appearance {
            match a.score {
                None => out.push(v(&path, "appearance answer needs a score")),
                Some(s) if s > MAX_SCORE => out.push(v(&path, format!("score out of range: {s}"))),
                Some(_) => {}
            }
            if a.explanation.as_deref().is_none_or(|e| e.trim().is_empty()) {
                out.push(v(&path, "appearance answer needs an explanation"));
            }
        } else if a.answer.trim().is_empty() {
            out.push(v(&path, format!("question `{}` has an empty answer", a.qid)));
        }
    }
    for q in record.questions() {
        if !seen.contains_key(q.qid.as_str()) {
            out.push(v("answers", format!("no answer for question `{}`", q.qid)));
        }
    }
    out
}

/// Validates `payload` against the item and returns the updated record.
fn apply_step(current: &EvaluationRecord, payload: &StepPayload) -> Result<EvaluationRecord, Vec<Violation>> {
    let mut r = current.clone();
    match payload {
        StepPayload::Extraction { extraction } => {
            let mut x = extraction.clone();
            x.canonicalize();
            let errs = validate_extraction(&x);
            if !errs.is_empty() {
                return Err(errs);
            }
            r.extraction = Some(x);
        }
        StepPayload::Answers { captions, answers } => {
            let errs = validate_answers(&r, answers);
            if !errs.is_empty() {
                return Err(errs);
            }
            r.captions = captions.clone();
            r.answers = answers.clone();
        }
        StepPayload::Scoring { verdicts, summaries } => {
            let mut verdicts = verdicts.clone();
            let mut errs = Vec::new();
            for (i, vd) in verdicts.iter_mut().enumerate() {
                if vd.explanation.trim().is_empty() {
                    errs.push(v(format!("verdicts[{i}]"), "explanation is empty"));
                }
                if vd.answer.trim().is_empty() {
                    if let Some(a) = r.answer(&vd.qid) {
                        vd.answer = a.answer.clone();
                    }
                }
            }
            r.verdicts = verdicts;
            r.summaries = summaries.clone();
            if r.summaries.is_empty() {
                errs.push(v("summaries", "summaries are required"));
            }
            errs.extend(validate_record(&r));
            if !errs.is_empty() {
                return Err(errs);
            }
        }
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextItem {
    pub item_id: String,
    pub position: usize,
    pub total: usize,
    pub step: AnnotationStep,
    pub revision: u64,
    pub prompt: TextPrompt,
    pub image_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill: Option<ExtractionResult>,
    /// The annotator's own submissions so far.
    pub record: EvaluationRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextResponse {
    pub done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item: Option<NextItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub annotator_id: String,
    pub total: usize,
    pub done: usize,
    pub by_step: BTreeMap<AnnotationStep, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub step: AnnotationStep,
    pub revision: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StoreOptions {
    pub prefill: bool,
    /// Shared bearer token; none disables the check.
    pub token: Option<String>,
}

/// File-backed annotation state for one benchmark directory.
pub struct AnnotationStore {
    items: BTreeMap<String, EvaluationRecord>,
    options: StoreOptions,
    state: RwLock<AnnotationState>,
    log: Mutex<File>,
    events_path: PathBuf,
    state_path: PathBuf,
}

impl AnnotationStore {
    pub fn open(dir: &Path, options: StoreOptions) -> Result<Self, ApiError> {
        let items_path = dir.join("items.jsonl");
        let text = std::fs::read_to_string(&items_path).map_err(storage(&items_path))?;
        let records = read_dataset(&text).map_err(|e| ApiError::Storage(format!("{}: {e}", items_path.display())))?;
        let mut items = BTreeMap::new();
        for r in records {
            let id = r.id.clone();
            if items.insert(id.clone(), r).is_some() {
                return Err(ApiError::Storage(format!("duplicate item `{id}`")));
            }
        }
        let ann = dir.join("annotations");
        std::fs::create_dir_all(&ann).map_err(storage(&ann))?;
        let events_path = ann.join("events.jsonl");
        let state_path = ann.join("state.json");
        let mut state: AnnotationState = match std::fs::read_to_string(&state_path) {
            Ok(t) => serde_json::from_str(&t).map_err(|e| ApiError::Storage(format!("{}: {e}", state_path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => AnnotationState::default(),
            Err(e) => return Err(storage(&state_path)(e)),
        };
        if let Ok(t) = std::fs::read_to_string(&events_path) {
            let keep = t.rfind('\n').map_or(0, |i| i + 1);
            for line in t[..keep].lines().filter(|l| !l.trim().is_empty()) {
                let ev: Event = serde_json::from_str(line)
                    .map_err(|e| ApiError::Storage(format!("{}: {e}", events_path.display())))?;
                if ev.seq > state.last_seq {
                    apply_event(&mut state, &items, &ev).map_err(|e| ApiError::Storage(format!("replay of event {}: {e}", ev.seq)))?;
                }
            }
            if keep < t.len() {
                let f = OpenOptions::new().write(true).open(&events_path).map_err(storage(&events_path))?;
                f.set_len(keep as u64).map_err(storage(&events_path))?;
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&events_path).map_err(storage(&events_path))?;
        let store = Self { items, options, state: RwLock::new(state), log: Mutex::new(log), events_path, state_path };
        store.write_snapshot(&store.state.read())?;
        Ok(store)
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    pub fn snapshot(&self) -> AnnotationState {
        self.state.read().clone()
    }

    fn write_snapshot(&self, state: &AnnotationState) -> Result<(), ApiError> {
        let tmp = self.state_path.with_extension("json.tmp");
        let body = serde_json::to_vec_pretty(state).map_err(|e| ApiError::Storage(e.to_string()))?;
        let mut f = File::create(&tmp).map_err(storage(&tmp))?;
        f.write_all(&body).map_err(storage(&tmp))?;
        f.sync_all().map_err(storage(&tmp))?;
        std::fs::rename(&tmp, &self.state_path).map_err(storage(&self.state_path))
    }

    /// Validates and applies an event, then logs it and refreshes the
    /// snapshot. Writers are serialized by the state lock.
    fn commit(&self, body: EventBody) -> Result<AnnotationState, ApiError> {
        let mut state = self.state.write();
        let ev = Event { seq: state.last_seq + 1, at: now(), body };
        let mut next = state.clone();
        apply_event(&mut next, &self.items, &ev)?;
        {
            let mut log = self.log.lock();
            let line = serde_json::to_string(&ev).map_err(|e| ApiError::Storage(e.to_string()))?;
            log.write_all(line.as_bytes()).map_err(storage(&self.events_path))?;
            log.write_all(b"\n").map_err(storage(&self.events_path))?;
            log.sync_data().map_err(storage(&self.events_path))?;
        }
        self.write_snapshot(&next)?;
        *state = next;
        Ok(state.clone())
    }

    /// Opens (or reopens) the annotator's session. Every annotator sees
    /// every item, in an order shuffled by `seed`.
    pub fn create_session(&self, annotator_id: &str, seed: Option<u64>) -> Result<Session, ApiError> {
        let id = annotator_id.trim();
        if id.is_empty() || id.contains('/') {
            return Err(ApiError::BadRequest("annotator_id must be non-empty and contain no `/`".into()));
        }
        if let Some(s) = self.state.read().sessions.get(id) {
            return Ok(s.clone());
        }
        let seed = seed.unwrap_or_else(|| seed_for(id));
        let mut order: Vec<String> = self.items.keys().cloned().collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let session = Session { session_id: id.to_string(), annotator_id: id.to_string(), seed, order, created_at: now() };
        let state = self.commit(EventBody::SessionCreated { session })?;
        Ok(state.sessions[id].clone())
    }

    fn session(&self, sid: &str) -> Result<Session, ApiError> {
        self.state.read().sessions.get(sid).cloned().ok_or_else(|| ApiError::UnknownSession(sid.to_string()))
    }

    pub fn next_item(&self, sid: &str) -> Result<NextResponse, ApiError> {
        let session = self.session(sid)?;
        let state = self.state.read();
        let mine = state.items.get(&session.annotator_id);
        for (position, item_id) in session.order.iter().enumerate() {
            let st = mine.and_then(|m| m.get(item_id));
            if st.is_some_and(|s| s.step == AnnotationStep::Done) {
                continue;
            }
            let source = &self.items[item_id];
            let record = st.map(|s| s.record.clone()).unwrap_or_else(|| blank_record(source, &session.annotator_id));
            return Ok(NextResponse {
                done: false,
                item: Some(NextItem {
                    item_id: item_id.clone(),
                    position,
                    total: session.order.len(),
                    step: st.map_or(AnnotationStep::Extraction, |s| s.step),
                    revision: st.map_or(0, |s| s.revision),
                    prompt: source.prompt.clone(),
                    image_url: format!("/v1/items/{item_id}/image"),
                    prefill: if self.options.prefill { source.extraction.clone() } else { None },
                    record,
                }),
            });
        }
        Ok(NextResponse { done: true, item: None })
    }

    pub fn submit(&self, sid: &str, item_id: &str, request: SubmitRequest) -> Result<SubmitResponse, ApiError> {
        let session = self.session(sid)?;
        let state = self.commit(EventBody::StepSubmitted {
            annotator_id: session.annotator_id.clone(),
            item_id: item_id.to_string(),
            request,
        })?;
        let st = &state.items[&session.annotator_id][item_id];
        Ok(SubmitResponse { step: st.step, revision: st.revision })
    }

    pub fn progress(&self, sid: &str) -> Result<Progress, ApiError> {
        let session = self.session(sid)?;
        let state = self.state.read();
        let mut by_step: BTreeMap<AnnotationStep, usize> = BTreeMap::new();
        for item in &session.order {
            let step = state
                .items
                .get(&session.annotator_id)
                .and_then(|m| m.get(item))
                .map_or(AnnotationStep::Extraction, |s| s.step);
            *by_step.entry(step).or_default() += 1;
        }
        Ok(Progress {
            annotator_id: session.annotator_id,
            total: session.order.len(),
            done: by_step.get(&AnnotationStep::Done).copied().unwrap_or(0),
            by_step,
        })
    }

    /// Finished records of one annotator, ordered by item id.
    pub fn export_records(&self, annotator_id: &str) -> Vec<EvaluationRecord> {
        let state = self.state.read();
        state
            .items
            .get(annotator_id)
            .map(|m| m.values().filter(|s| s.step == AnnotationStep::Done).map(|s| s.record.clone()).collect())
            .unwrap_or_default()
    }

    /// [`Self::export_records`] in the dataset file format.
    pub fn export_benchmark(&self, annotator_id: &str) -> String {
        self.export_records(annotator_id).iter().map(|r| serialize_record(r) + "\n").collect()
    }

    fn image(&self, item_id: &str) -> Result<(Vec<u8>, &'static str), ApiError> {
        let r = self.items.get(item_id).ok_or_else(|| ApiError::UnknownItem(item_id.to_string()))?;
        let ImageSource::Local(path) = images::source_of(&r.image) else {
            return Err(ApiError::UnknownItem(format!("{item_id} (remote image)")));
        };
        let bytes = std::fs::read(&path).map_err(storage(&path))?;
        let mime = image::guess_format(&bytes).map(|f| f.to_mime_type()).unwrap_or("application/octet-stream");
        Ok((bytes, mime))
    }
}

fn blank_record(source: &EvaluationRecord, annotator_id: &str) -> EvaluationRecord {
    let mut r = EvaluationRecord::new(source.id.clone(), source.prompt.clone(), source.image.clone());
    r.provenance.evaluator = format!("human:{annotator_id}");
    r.provenance.variant = Variant::Full;
    r
}

fn apply_event(
    state: &mut AnnotationState,
    items: &BTreeMap<String, EvaluationRecord>,
    ev: &Event,
) -> Result<(), ApiError> {
    match &ev.body {
        EventBody::SessionCreated { session } => {
            state.sessions.entry(session.session_id.clone()).or_insert_with(|| session.clone());
        }
        EventBody::StepSubmitted { annotator_id, item_id, request } => {
            let source = items.get(item_id).ok_or_else(|| ApiError::UnknownItem(item_id.clone()))?;
            let mine = state.items.entry(annotator_id.clone()).or_default();
            let current = mine.get(item_id).cloned().unwrap_or_else(|| ItemState {
                step: AnnotationStep::Extraction,
                revision: 0,
                record: blank_record(source, annotator_id),
                updated_at: String::new(),
            });
            if request.payload.step() != current.step || request.expected_revision != current.revision {
                return Err(ApiError::Conflict { step: current.step, revision: current.revision });
            }
            let record = apply_step(&current.record, &request.payload).map_err(ApiError::Invalid)?;
            mine.insert(
                item_id.clone(),
                ItemState { step: current.step.next(), revision: current.revision + 1, record, updated_at: ev.at.clone() },
            );
        }
    }
    state.last_seq = ev.seq;
    Ok(())
}

/// Overall scores of one annotator's export, for correlation reports.
pub fn annotator_scores(annotator_id: &str, records: &[EvaluationRecord]) -> AnnotatorScores {
    AnnotatorScores {
        annotator_id: annotator_id.to_string(),
        scores: records.iter().filter_map(|r| r.overall_score().map(|s| (r.id.clone(), s))).collect(),
    }
}

// ---------------------------------------------------------------------------
// HTTP

type Shared = Arc<AnnotationStore>;

#[derive(Deserialize)]
struct CreateSession {
    annotator_id: String,
    #[serde(default)]
    seed: Option<u64>,
}

async fn root(State(s): State<Shared>) -> Json<serde_json::Value> {
    Json(json!({"api_version": API_VERSION, "items": s.item_count()}))
}

async fn create(State(s): State<Shared>, Json(body): Json<CreateSession>) -> Result<Json<Session>, ApiError> {
    s.create_session(&body.annotator_id, body.seed).map(Json)
}

async fn next(State(s): State<Shared>, UrlPath(sid): UrlPath<String>) -> Result<Json<NextResponse>, ApiError> {
    s.next_item(&sid).map(Json)
}

async fn submit(
    State(s): State<Shared>,
    UrlPath((sid, item)): UrlPath<(String, String)>,
    body: String,
) -> Result<Json<SubmitResponse>, ApiError> {
    let request: SubmitRequest = serde_json::from_str(&body).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    s.submit(&sid, &item, request).map(Json)
}

async fn progress(State(s): State<Shared>, UrlPath(sid): UrlPath<String>) -> Result<Json<Progress>, ApiError> {
    s.progress(&sid).map(Json)
}

async fn image_bytes(State(s): State<Shared>, UrlPath(item): UrlPath<String>) -> Result<Response, ApiError> {
    let (bytes, mime) = s.image(&item)?;
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn export(State(s): State<Shared>, UrlPath(annotator): UrlPath<String>) -> Response {
    ([(header::CONTENT_TYPE, "application/jsonl")], s.export_benchmark(&annotator)).into_response()
}

async fn check_token(State(s): State<Shared>, headers: HeaderMap, req: Request, next: Next) -> Result<Response, ApiError> {
    if let Some(token) = &s.options.token {
        let given = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return Err(ApiError::Unauthorized);
        }
    }
    Ok(next.run(req).await)
}

pub fn router(store: Shared) -> Router {
    Router::new()
        .route("/v1", get(root))
        .route("/v1/sessions", post(create))
        .route("/v1/sessions/{sid}/next", get(next))
        .route("/v1/sessions/{sid}/items/{item}/submit", post(submit))
        .route("/v1/sessions/{sid}/progress", get(progress))
        .route("/v1/items/{item}/image", get(image_bytes))
        .route("/v1/export/{annotator}", get(export))
        .route_layer(middleware::from_fn_with_state(store.clone(), check_token))
        .layer(CorsLayer::new().allow_origin(Any).allow_methods(Any).allow_headers(Any))
        .with_state(store)
}

/// Binds and serves in the background.
pub async fn spawn(store: Shared, addr: SocketAddr) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = router(store);
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!("annotator api stopped: {e}");
        }
    });
    Ok((local, handle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::fixtures::{running_example_extraction, running_example_record};
    use crate::record::write_dataset;

    fn bench(dir: &Path, n: usize) {
        let base = running_example_record();
        let img = dir.join("img.png");
        std::fs::write(&img, images::placeholder_png()).unwrap();
        let items: Vec<EvaluationRecord> = (0..n)
            .map(|i| {
                let mut r = EvaluationRecord::new(format!("item{i}"), base.prompt.clone(), base.image.clone());
                r.image.uri = img.display().to_string();
                r.extraction = Some(running_example_extraction());
                r
            })
            .collect();
        std::fs::write(dir.join("items.jsonl"), write_dataset(&items)).unwrap();
    }

    fn walk(store: &AnnotationStore, sid: &str, item: &str) {
        let r = running_example_record();
        let steps = [
            StepPayload::Extraction { extraction: r.extraction.clone().unwrap() },
            StepPayload::Answers { captions: r.captions.clone(), answers: r.answers.clone() },
            StepPayload::Scoring { verdicts: r.verdicts.clone(), summaries: r.summaries.clone() },
        ];
        for (rev, payload) in steps.into_iter().enumerate() {
            store.submit(sid, item, SubmitRequest { expected_revision: rev as u64, payload }).unwrap();
        }
    }

    #[test]
    fn walkthrough_exports_valid_records() {
        let dir = tempfile::tempdir().unwrap();
        bench(dir.path(), 2);
        let store = AnnotationStore::open(dir.path(), StoreOptions::default()).unwrap();
        let s = store.create_session("ann1", Some(3)).unwrap();
        for item in s.order.clone() {
            let next = store.next_item("ann1").unwrap();
            assert_eq!(next.item.as_ref().unwrap().item_id, item);
            assert!(next.item.unwrap().prefill.is_none());
            walk(&store, "ann1", &item);
        }
        assert!(store.next_item("ann1").unwrap().done);
        let export = store.export_benchmark("ann1");
        let records = read_dataset(&export).unwrap();
        assert_eq!(records.len(), 2);
        for r in &records {
            assert!(validate_record(r).is_empty());
        }

        // reopening replays to the same state and the same export
        drop(store);
        let again = AnnotationStore::open(dir.path(), StoreOptions::default()).unwrap();
        assert_eq!(again.export_benchmark("ann1"), export);
    }

    #[test]
    fn entity_without_questions_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        bench(dir.path(), 1);
        let store = AnnotationStore::open(dir.path(), StoreOptions::default()).unwrap();
        store.create_session("a", None).unwrap();
        let mut x = running_example_extraction();
        x.questions.retain(|q| !q.subject_entities.contains(&"cat".to_string()) || q.kind == QuestionKind::Relationship);
        let err = store
            .submit("a", "item0", SubmitRequest { expected_revision: 0, payload: StepPayload::Extraction { extraction: x } })
            .unwrap_err();
        let ApiError::Invalid(v) = err else { panic!("{err}") };
        assert!(v.iter().any(|v| v.message.contains("cat")), "{v:?}");
    }

    #[test]
    fn double_submit_conflicts() {
        let dir = tempfile::tempdir().unwrap();
        bench(dir.path(), 1);
        let store = AnnotationStore::open(dir.path(), StoreOptions::default()).unwrap();
        store.create_session("a", None).unwrap();
        let req = SubmitRequest {
            expected_revision: 0,
            payload: StepPayload::Extraction { extraction: running_example_extraction() },
        };
        store.submit("a", "item0", req.clone()).unwrap();
        assert!(matches!(store.submit("a", "item0", req), Err(ApiError::Conflict { revision: 1, .. })));
    }

    #[test]
    fn disjoint_annotators_do_not_interfere() {
        let dir = tempfile::tempdir().unwrap();
        bench(dir.path(), 2);
        let store = AnnotationStore::open(dir.path(), StoreOptions { prefill: true, token: None }).unwrap();
        store.create_session("a", None).unwrap();
        store.create_session("b", None).unwrap();
        assert!(store.next_item("a").unwrap().item.unwrap().prefill.is_some());
        walk(&store, "a", "item0");
        walk(&store, "b", "item1");
        let a = read_dataset(&store.export_benchmark("a")).unwrap();
        let b = read_dataset(&store.export_benchmark("b")).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert_ne!(a[0].id, b[0].id);
        assert_eq!(store.progress("a").unwrap().done, 1);
    }
}
