//! Per-pair orchestration of the three stages and resumable batch runs.
//!
//! Checkpoint file: one JSON object per line, `{"id": …, "status": …}`, with
//! `status` one of `ok`, `zero_score`, `refusal`, `content_absence`,
//! `repetition`, `malformed`, `input`. Transport failures are not
//! checkpointed, so a resumed run retries them.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ChatBackend, ChatMessage, ClientError, UsageSnapshot};
use crate::images;
use crate::parser::{self, CagOptions, EsOptions, OutputFailure, ParseOutcome};
use crate::prompts::{RenderError, TemplateSet};
use crate::record::{
    serialize_record, Dimension, DimensionSummary, EvaluationRecord, FailureKind, ImageRef,
    QuestionKind, QuestionVerdict, RecordFailure, Stage, TextPrompt, Variant,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    #[default]
    SkipRecord,
    ZeroScore,
    Halt,
}

impl std::str::FromStr for FailurePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "skip_record" | "skip" => Ok(FailurePolicy::SkipRecord),
            "zero_score" => Ok(FailurePolicy::ZeroScore),
            "halt" => Ok(FailurePolicy::Halt),
            other => Err(format!("unknown failure policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub retry_on_parse_failure: u32,
    pub failure_policy: FailurePolicy,
    /// Written to `provenance.evaluator`.
    pub evaluator: String,
    /// Off by default so that reruns produce identical files.
    pub record_timestamps: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            retry_on_parse_failure: 2,
            failure_policy: FailurePolicy::SkipRecord,
            evaluator: "model".into(),
            record_timestamps: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum StageErrorKind {
    #[error("{0}")]
    Parse(OutputFailure),
    #[error(transparent)]
    Transport(ClientError),
    #[error("{0}")]
    Input(String),
}

#[derive(Debug, Error)]
#[error("{stage} stage: {kind}")]
pub struct StageError {
    pub stage: Stage,
    pub kind: StageErrorKind,
}

impl StageError {
    pub fn status(&self) -> RecordStatus {
        match &self.kind {
            StageErrorKind::Parse(f) => RecordStatus::from(f.kind),
            StageErrorKind::Transport(_) => RecordStatus::Transport,
            StageErrorKind::Input(_) => RecordStatus::Input,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no pairs to evaluate")]
    NoPairs,
    #[error("duplicate pair id `{0}`")]
    DuplicatePair(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    ZeroScore,
    Refusal,
    ContentAbsence,
    Repetition,
    Malformed,
    Transport,
    Input,
}

impl From<FailureKind> for RecordStatus {
    fn from(k: FailureKind) -> Self {
        match k {
            FailureKind::Refusal => RecordStatus::Refusal,
            FailureKind::ContentAbsence => RecordStatus::ContentAbsence,
            FailureKind::Repetition => RecordStatus::Repetition,
            FailureKind::Malformed => RecordStatus::Malformed,
            FailureKind::Transport => RecordStatus::Transport,
        }
    }
}

/// Runs the stages of one variant against a chat backend.
#[derive(Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub templates: Arc<TemplateSet>,
    pub backend: Arc<dyn ChatBackend>,
}

fn render_err(stage: Stage) -> impl Fn(RenderError) -> StageError {
    move |e| StageError { stage, kind: StageErrorKind::Input(e.to_string()) }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl Pipeline {
    pub fn new(config: PipelineConfig, templates: TemplateSet, backend: Arc<dyn ChatBackend>) -> Self {
        Self { config, templates: Arc::new(templates), backend }
    }

    /// One stage call, re-issued on parse failure. The last raw transcript is
    /// kept in `raw` whether or not it parsed.
    async fn call<T>(
        &self,
        stage: Stage,
        message: ChatMessage,
        raw: &mut Option<String>,
        parse: impl Fn(&str) -> ParseOutcome<T>,
    ) -> Result<T, StageError> {
        let messages = [message];
        let mut last = None;
        for _ in 0..=self.config.retry_on_parse_failure {
            let text = self
                .backend
                .chat(&messages)
                .await
                .map_err(|e| StageError { stage, kind: StageErrorKind::Transport(e) })?;
            let outcome = parse(&text);
            *raw = Some(text);
            match outcome.into_result() {
                Ok(v) => return Ok(v),
                Err(f) => {
                    tracing::debug!(%stage, kind = f.kind.as_str(), "parse failure");
                    last = Some(f);
                }
            }
        }
        Err(StageError { stage, kind: StageErrorKind::Parse(last.expect("at least one attempt")) })
    }

    async fn run_stages(&self, r: &mut EvaluationRecord) -> Result<(), StageError> {
        let t = &self.templates;
        let variant = self.config.variant;

        // stage one
        if variant == Variant::NoExtraction {
            let text = t.render_ece_direct(&r.prompt).map_err(render_err(Stage::Extraction))?;
            r.direct_questions = self
                .call(Stage::Extraction, ChatMessage::user(text), &mut r.raw_transcripts.extraction, parser::parse_questions)
                .await?;
        } else {
            let text = t.render_ece(&r.prompt).map_err(render_err(Stage::Extraction))?;
            r.extraction = Some(
                self.call(Stage::Extraction, ChatMessage::user(text), &mut r.raw_transcripts.extraction, parser::parse_extraction)
                    .await?,
            );
        }
        let questions = r.questions().to_vec();
        let questions_doc = parser::render_questions_doc(&questions);
        let structure_doc = match &r.extraction {
            Some(x) => Some(parser::render_extraction_doc(x).map_err(|v| StageError {
                stage: Stage::Extraction,
                kind: StageErrorKind::Input(format!("extraction does not render: {v:?}")),
            })?),
            None => None,
        };

        // single-pass variants
        if matches!(variant, Variant::NoAnswering | Variant::MergedCagEs) {
            let structure = structure_doc.as_deref().unwrap_or_default();
            let rendered = if variant == Variant::NoAnswering {
                t.render_score_direct(&questions_doc, structure, &r.image)
            } else {
                t.render_merged(&questions_doc, structure, &r.image)
            }
            .map_err(render_err(Stage::Scoring))?;
            let opts = EsOptions {
                require_explanations: variant == Variant::MergedCagEs,
                require_captions: variant == Variant::MergedCagEs,
            };
            let out = self
                .call(
                    Stage::Scoring,
                    ChatMessage::user_with_images(rendered.text, rendered.attachments),
                    &mut r.raw_transcripts.scoring,
                    |raw| parser::parse_es(raw, &questions, opts),
                )
                .await?;
            r.captions = out.captions;
            r.verdicts = out.verdicts;
            r.summaries = out.summaries;
            return Ok(());
        }

        // stage two: questions and image only
        let rendered = if variant == Variant::NoCaptioning {
            t.render_cag_no_caption(&questions_doc, &r.image, None)
        } else {
            t.render_cag(&questions_doc, &r.image, None)
        }
        .map_err(render_err(Stage::Answering))?;
        let opts = CagOptions { require_captions: variant != Variant::NoCaptioning };
        let cag = self
            .call(
                Stage::Answering,
                ChatMessage::user_with_images(rendered.text, rendered.attachments),
                &mut r.raw_transcripts.answers,
                |raw| parser::parse_cag(raw, &questions, opts),
            )
            .await?;
        r.captions = cag.captions;
        r.answers = cag.answers;

        // stage three: text only
        let answers_doc = parser::render_answers_doc(&questions, &r.answers);
        let text = match &structure_doc {
            Some(s) => t.render_es(&answers_doc, s),
            None => t.render_es_direct(&answers_doc, &r.prompt),
        }
        .map_err(render_err(Stage::Scoring))?;
        let out = self
            .call(Stage::Scoring, ChatMessage::user(text), &mut r.raw_transcripts.scoring, |raw| {
                parser::parse_es(raw, &questions, EsOptions::default())
            })
            .await?;
        r.verdicts = out.verdicts;
        r.summaries = out.summaries;
        Ok(())
    }

    /// Evaluates one pair. Parse failures become a zero-score record under
    /// [`FailurePolicy::ZeroScore`]; every other failure is returned.
    pub async fn evaluate_pair(
        &self,
        id: &str,
        prompt: TextPrompt,
        image: ImageRef,
    ) -> Result<EvaluationRecord, StageError> {
        let mut r = EvaluationRecord::new(id, prompt, image);
        r.provenance.evaluator = self.config.evaluator.clone();
        r.provenance.variant = self.config.variant;
        if self.config.record_timestamps {
            r.provenance.started_at = Some(now());
        }
        if let Err(e) = images::check_resolvable(&r.image) {
            return Err(StageError { stage: Stage::Extraction, kind: StageErrorKind::Input(e.to_string()) });
        }
        let result = self.run_stages(&mut r).await;
        if self.config.record_timestamps {
            r.provenance.finished_at = Some(now());
        }
        match result {
            Ok(()) => Ok(r),
            Err(StageError { stage, kind: StageErrorKind::Parse(f) })
                if self.config.failure_policy == FailurePolicy::ZeroScore =>
            {
                zero_out(&mut r, stage, &f);
                Ok(r)
            }
            Err(e) => Err(e),
        }
    }
}

/// Marks a record as failed with every score 0.
fn zero_out(r: &mut EvaluationRecord, stage: Stage, f: &OutputFailure) {
    let detail = f.to_string();
    r.failure = Some(RecordFailure { stage, kind: f.kind, detail: detail.clone() });
    r.verdicts = r
        .questions()
        .iter()
        .map(|q| QuestionVerdict {
            qid: q.qid.clone(),
            answer: if q.kind == QuestionKind::Appearance { String::new() } else { "unanswered".into() },
            explanation: format!("not scored: {detail}"),
            score: 0,
        })
        .collect();
    r.summaries = Dimension::ALL
        .into_iter()
        .map(|dimension| DimensionSummary { dimension, explanation: format!("not scored: {detail}"), score: 0 })
        .collect();
}

// ---------------------------------------------------------------------------
// Batch

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub id: String,
    pub status: RecordStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub total: usize,
    /// Pairs already settled by a previous run.
    pub resumed: usize,
    pub ok: usize,
    pub zero_score: usize,
    pub refusal: usize,
    pub content_absence: usize,
    pub repetition: usize,
    pub malformed: usize,
    pub transport: usize,
    pub input: usize,
    pub halted: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<UsageSnapshot>,
}

impl RunReport {
    fn count(&mut self, s: RecordStatus) {
        match s {
            RecordStatus::Ok => self.ok += 1,
            RecordStatus::ZeroScore => self.zero_score += 1,
            RecordStatus::Refusal => self.refusal += 1,
            RecordStatus::ContentAbsence => self.content_absence += 1,
            RecordStatus::Repetition => self.repetition += 1,
            RecordStatus::Malformed => self.malformed += 1,
            RecordStatus::Transport => self.transport += 1,
            RecordStatus::Input => self.input += 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchPaths {
    pub output: PathBuf,
    pub checkpoint: PathBuf,
}

impl BatchPaths {
    /// Checkpoint next to the output: `<output>.checkpoint`.
    pub fn beside(output: impl Into<PathBuf>) -> Self {
        let output = output.into();
        let mut c = output.clone().into_os_string();
        c.push(".checkpoint");
        Self { output, checkpoint: c.into() }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Drops a trailing partial line left by an interrupted write and returns
/// the complete lines.
fn complete_lines(path: &Path) -> Result<Vec<String>, PipelineError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let keep = text.rfind('\n').map_or(0, |i| i + 1);
    if keep < text.len() {
        let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        f.set_len(keep as u64).map_err(io_err(path))?;
    }
    Ok(text[..keep].lines().filter(|l| !l.trim().is_empty()).map(String::from).collect())
}

/// Ids already settled in `paths`, from both the checkpoint and the output.
pub fn settled_ids(paths: &BatchPaths) -> Result<BTreeSet<String>, PipelineError> {
    let mut ids = BTreeSet::new();
    for line in complete_lines(&paths.checkpoint)? {
        let e: CheckpointEntry = serde_json::from_str(&line)
            .map_err(|e| PipelineError::Checkpoint { path: paths.checkpoint.clone(), message: e.to_string() })?;
        ids.insert(e.id);
    }
    for line in complete_lines(&paths.output)? {
        #[derive(Deserialize)]
        struct IdOnly {
            id: String,
        }
        let r: IdOnly = serde_json::from_str(&line)
            .map_err(|e| PipelineError::Checkpoint { path: paths.output.clone(), message: e.to_string() })?;
        ids.insert(r.id);
    }
    Ok(ids)
}

fn append(file: &mut File, path: &Path, line: &str) -> Result<(), PipelineError> {
    file.write_all(line.as_bytes()).map_err(io_err(path))?;
    file.write_all(b"\n").map_err(io_err(path))?;
    file.flush().map_err(io_err(path))
}

impl Pipeline {
    /// Evaluates `pairs` (records whose stage fields are ignored) with at most
    /// `parallelism` pairs in flight. Records are appended to the output in
    /// input order; pairs settled by an earlier run are skipped.
    pub async fn evaluate_batch(
        &self,
        pairs: &[EvaluationRecord],
        parallelism: usize,
        paths: &BatchPaths,
    ) -> Result<RunReport, PipelineError> {
        if pairs.is_empty() {
            return Err(PipelineError::NoPairs);
        }
        let mut seen = BTreeSet::new();
        for p in pairs {
            if !seen.insert(p.id.as_str()) {
                return Err(PipelineError::DuplicatePair(p.id.clone()));
            }
        }
        let settled = settled_ids(paths)?;
        let open = |p: &Path| OpenOptions::new().create(true).append(true).open(p).map_err(io_err(p));
        let mut out = open(&paths.output)?;
        let mut checkpoint = open(&paths.checkpoint)?;

        let mut report = RunReport { total: pairs.len(), ..Default::default() };
        let todo: Vec<&EvaluationRecord> = pairs.iter().filter(|p| !settled.contains(&p.id)).collect();
        report.resumed = pairs.len() - todo.len();

        let mut results = stream::iter(todo)
            .map(|p| async move {
                let r = self.evaluate_pair(&p.id, p.prompt.clone(), p.image.clone()).await;
                (p.id.clone(), r)
            })
            .buffered(parallelism.max(1));

        while let Some((id, result)) = results.next().await {
            let status = match result {
                Ok(record) => {
                    append(&mut out, &paths.output, &serialize_record(&record))?;
                    if record.failure.is_some() { RecordStatus::ZeroScore } else { RecordStatus::Ok }
                }
                Err(e) => {
                    tracing::warn!(%id, "{e}");
                    report.errors.push(format!("{id}: {e}"));
                    e.status()
                }
            };
            report.count(status);
            if status != RecordStatus::Transport {
                let entry = CheckpointEntry { id: id.clone(), status };
                append(&mut checkpoint, &paths.checkpoint, &serde_json::to_string(&entry).expect("entries serialize"))?;
            }
            if self.config.failure_policy == FailurePolicy::Halt && !matches!(status, RecordStatus::Ok) {
                report.halted = true;
                break;
            }
        }
        Ok(report)
    }
}
