//! Evaluation record schema shared by every stage of the toolkit.
//!
//! A record is built up stage by stage: the extraction (entities, attributes,
//! questions), the stage-two answers and captions, and finally per-question
//! verdicts plus four dimension summaries. Records are plain values; the
//! canonical on-disk form is JSON with a fixed field order and sorted map
//! keys, one record per line for datasets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;
pub const MAX_SCORE: u8 = 10;

/// Attribute types that describe placement rather than the entity itself.
pub const POSITIONAL_ATTRIBUTE_TYPES: &[&str] =
    &["position", "orientation", "distance", "location"];

pub const EXISTENCE: &str = "existence";
pub const QUANTITY: &str = "quantity";

/// Case-insensitive, whitespace-collapsed key used when cross-referencing
/// entity names.
pub fn name_key(name: &str) -> String {
    name.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    Coco,
    LlmGenerated,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPrompt {
    pub id: String,
    pub text: String,
    pub source: PromptSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Sd15,
    Sdxl,
    Sd3,
    Other,
    Unknown,
}

impl Generator {
    pub fn as_str(self) -> &'static str {
        match self {
            Generator::Sd15 => "sd15",
            Generator::Sdxl => "sdxl",
            Generator::Sd3 => "sd3",
            Generator::Other => "other",
            Generator::Unknown => "unknown",
        }
    }
}

impl std::str::FromStr for Generator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "sd15" | "sd1.5" => Ok(Generator::Sd15),
            "sdxl" => Ok(Generator::Sdxl),
            "sd3" => Ok(Generator::Sd3),
            "other" => Ok(Generator::Other),
            "unknown" => Ok(Generator::Unknown),
            other => Err(format!("unknown generator `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    /// Local path, `file://` URI, or `http(s)://` URL.
    pub uri: String,
    pub generator: Generator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributePair {
    pub attr_type: String,
    pub value: String,
}

impl AttributePair {
    pub fn new(attr_type: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            attr_type: attr_type.into(),
            value: value.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub attributes: Vec<AttributePair>,
}

impl Entity {
    pub fn attribute(&self, attr_type: &str) -> Option<&AttributePair> {
        self.attributes
            .iter()
            .find(|a| a.attr_type.eq_ignore_ascii_case(attr_type))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relationship {
    pub rel_type: String,
    pub entities_involved: Vec<String>,
    pub value: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Appearance,
    Intrinsic,
    Relationship,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 3] = [
        QuestionKind::Appearance,
        QuestionKind::Intrinsic,
        QuestionKind::Relationship,
    ];

    /// Prefix of canonical question ids (`a1`, `i3`, `r2`).
    pub fn qid_prefix(self) -> char {
        match self {
            QuestionKind::Appearance => 'a',
            QuestionKind::Intrinsic => 'i',
            QuestionKind::Relationship => 'r',
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionKind::Appearance => "appearance",
            QuestionKind::Intrinsic => "intrinsic",
            QuestionKind::Relationship => "relationship",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub qid: String,
    pub kind: QuestionKind,
    pub text: String,
    pub subject_entities: Vec<String>,
}

/// Stage-one output: what the image must be checked for.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub entities: Vec<Entity>,
    pub relationships: Vec<Relationship>,
    pub questions: Vec<Question>,
}

impl ExtractionResult {
    pub fn questions_of(&self, kind: QuestionKind) -> impl Iterator<Item = &Question> {
        self.questions.iter().filter(move |q| q.kind == kind)
    }

    pub fn entity(&self, name: &str) -> Option<&Entity> {
        let key = name_key(name);
        self.entities.iter().find(|e| name_key(&e.name) == key)
    }

    /// Reorders questions into canonical order (appearance by entity,
    /// intrinsic grouped by entity, relationships) and renumbers qids.
    pub fn canonicalize(&mut self) {
        let order: BTreeMap<String, usize> = self
            .entities
            .iter()
            .enumerate()
            .map(|(i, e)| (name_key(&e.name), i))
            .collect();
        let entity_rank = |q: &Question| {
            q.subject_entities
                .first()
                .and_then(|n| order.get(&name_key(n)).copied())
                .unwrap_or(usize::MAX)
        };
        let mut indexed: Vec<(usize, Question)> =
            self.questions.drain(..).enumerate().collect();
        indexed.sort_by_key(|(pos, q)| {
            let kind_rank = q.kind as usize;
            let group = if q.kind == QuestionKind::Relationship {
                0
            } else {
                entity_rank(q)
            };
            (kind_rank, group, *pos)
        });
        let mut counters = [0usize; 3];
        for (_, mut q) in indexed {
            let slot = &mut counters[q.kind as usize];
            *slot += 1;
            q.qid = format!("{}{}", q.kind.qid_prefix(), slot);
            self.questions.push(q);
        }
    }

    pub fn is_canonical(&self) -> bool {
        let mut copy = self.clone();
        copy.canonicalize();
        copy == *self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub entity: String,
    pub caption: String,
}

/// Stage-two output for one question. Appearance questions carry an
/// explanation and score; the others carry a free-text answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageAnswer {
    pub qid: String,
    #[serde(default)]
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionVerdict {
    pub qid: String,
    pub answer: String,
    pub explanation: String,
    pub score: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Appearance,
    Intrinsic,
    Relationship,
    Overall,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::Appearance,
        Dimension::Intrinsic,
        Dimension::Relationship,
        Dimension::Overall,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Appearance => "appearance",
            Dimension::Intrinsic => "intrinsic",
            Dimension::Relationship => "relationship",
            Dimension::Overall => "overall",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionSummary {
    pub dimension: Dimension,
    pub explanation: String,
    pub score: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTranscripts {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scoring: Option<String>,
}

/// Which framework configuration produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoExtraction,
    NoCaptioning,
    NoAnswering,
    MergedCagEs,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoExtraction,
        Variant::NoCaptioning,
        Variant::NoAnswering,
        Variant::MergedCagEs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoExtraction => "no_extraction",
            Variant::NoCaptioning => "no_captioning",
            Variant::NoAnswering => "no_answering",
            Variant::MergedCagEs => "merged_cag_es",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.trim().replace('-', "_"))
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Refusal,
    ContentAbsence,
    Repetition,
    Malformed,
    Transport,
}

impl FailureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureKind::Refusal => "refusal",
            FailureKind::ContentAbsence => "content_absence",
            FailureKind::Repetition => "repetition",
            FailureKind::Malformed => "malformed",
            FailureKind::Transport => "transport",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Extraction,
    Answering,
    Scoring,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Extraction => "extraction",
            Stage::Answering => "answering",
            Stage::Scoring => "scoring",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A stage failure kept on a record written under the zero-score policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub stage: Stage,
    pub kind: FailureKind,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub evaluator: String,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub schema_version: u32,
    pub id: String,
    pub prompt: TextPrompt,
    pub image: ImageRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction: Option<ExtractionResult>,
    /// Questions proposed without an extraction (the `no_extraction` variant).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub direct_questions: Vec<Question>,
    #[serde(default)]
    pub captions: Vec<Caption>,
    #[serde(default)]
    pub answers: Vec<StageAnswer>,
    #[serde(default)]
    pub verdicts: Vec<QuestionVerdict>,
    #[serde(default)]
    pub summaries: Vec<DimensionSummary>,
    #[serde(default)]
    pub raw_transcripts: RawTranscripts,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<RecordFailure>,
}

impl EvaluationRecord {
    pub fn new(id: impl Into<String>, prompt: TextPrompt, image: ImageRef) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            id: id.into(),
            prompt,
            image,
            extraction: None,
            direct_questions: Vec::new(),
            captions: Vec::new(),
            answers: Vec::new(),
            verdicts: Vec::new(),
            summaries: Vec::new(),
            raw_transcripts: RawTranscripts::default(),
            provenance: Provenance::default(),
            failure: None,
        }
    }

    /// Questions the record is evaluated on, whichever stage produced them.
    pub fn questions(&self) -> &[Question] {
        match &self.extraction {
            Some(x) => &x.questions,
            None => &self.direct_questions,
        }
    }

    pub fn question(&self, qid: &str) -> Option<&Question> {
        self.questions().iter().find(|q| q.qid == qid)
    }

    pub fn verdict(&self, qid: &str) -> Option<&QuestionVerdict> {
        self.verdicts.iter().find(|v| v.qid == qid)
    }

    pub fn answer(&self, qid: &str) -> Option<&StageAnswer> {
        self.answers.iter().find(|a| a.qid == qid)
    }

    pub fn summary(&self, dimension: Dimension) -> Option<&DimensionSummary> {
        self.summaries.iter().find(|s| s.dimension == dimension)
    }

    pub fn overall_score(&self) -> Option<u8> {
        self.summary(Dimension::Overall).map(|s| s.score)
    }

    /// Scoring is done once summaries exist.
    pub fn is_complete(&self) -> bool {
        !self.summaries.is_empty()
    }
}

/// One invariant violation, located by a dotted path into the record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Checks every invariant of an extraction result.
pub fn validate_extraction(x: &ExtractionResult) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut names = BTreeSet::new();
    for (i, e) in x.entities.iter().enumerate() {
        let path = format!("extraction.entities[{i}]");
        if e.name.trim().is_empty() {
            out.push(Violation::new(&path, "entity name is empty"));
            continue;
        }
        if !names.insert(name_key(&e.name)) {
            out.push(Violation::new(&path, format!("duplicate entity `{}`", e.name)));
        }
        let mut types = BTreeSet::new();
        for (j, a) in e.attributes.iter().enumerate() {
            let apath = format!("{path}.attributes[{j}]");
            if a.attr_type.trim().is_empty() || a.value.trim().is_empty() {
                out.push(Violation::new(&apath, "attribute type and value must be non-empty"));
            }
            let key = a.attr_type.trim().to_lowercase();
            if !types.insert(key.clone()) {
                out.push(Violation::new(
                    &apath,
                    format!("duplicate attribute type `{}` on entity `{}`", a.attr_type, e.name),
                ));
            }
            if POSITIONAL_ATTRIBUTE_TYPES.contains(&key.as_str()) {
                out.push(Violation::new(
                    &apath,
                    format!("positional attribute `{}` is not an intrinsic attribute", a.attr_type),
                ));
            }
        }
        match e.attribute(EXISTENCE) {
            Some(a) if a.value.trim().eq_ignore_ascii_case("yes") => {}
            Some(_) => out.push(Violation::new(
                &path,
                format!("entity `{}` existence attribute must be `yes`", e.name),
            )),
            None => out.push(Violation::new(
                &path,
                format!("entity `{}` lacks an existence attribute", e.name),
            )),
        }
        if e.attribute(QUANTITY).is_none() {
            out.push(Violation::new(
                &path,
                format!("entity `{}` lacks a quantity attribute", e.name),
            ));
        }
    }

    for (i, r) in x.relationships.iter().enumerate() {
        let path = format!("extraction.relationships[{i}]");
        if r.rel_type.trim().is_empty() || r.value.trim().is_empty() {
            out.push(Violation::new(&path, "relationship type and value must be non-empty"));
        }
        if r.entities_involved.len() < 2 {
            out.push(Violation::new(&path, "relationship must involve at least two entities"));
        }
        for n in &r.entities_involved {
            if !names.contains(&name_key(n)) {
                out.push(Violation::new(&path, format!("unknown entity `{n}` in relationship")));
            }
        }
    }

    out.extend(validate_questions(&x.questions, Some(&names), "extraction.questions"));

    for e in &x.entities {
        let key = name_key(&e.name);
        let about = |kind: QuestionKind| {
            x.questions_of(kind)
                .filter(|q| q.subject_entities.first().map(|n| name_key(n)) == Some(key.clone()))
                .count()
        };
        let appearance = about(QuestionKind::Appearance);
        if appearance != 1 {
            out.push(Violation::new(
                "extraction.questions",
                format!(
                    "entity `{}` has {appearance} appearance questions, expected exactly 1",
                    e.name
                ),
            ));
        }
        let intrinsic = about(QuestionKind::Intrinsic);
        if intrinsic != e.attributes.len() {
            out.push(Violation::new(
                "extraction.questions",
                format!(
                    "entity `{}` has {intrinsic} intrinsic questions but {} attribute pairs",
                    e.name,
                    e.attributes.len()
                ),
            ));
        }
    }
    let rel_questions = x.questions_of(QuestionKind::Relationship).count();
    if rel_questions != x.relationships.len() {
        out.push(Violation::new(
            "extraction.questions",
            format!(
                "{rel_questions} relationship questions but {} relationships",
                x.relationships.len()
            ),
        ));
    }
    out
}

/// Per-question checks shared by extraction and direct-question records.
pub fn validate_questions(
    questions: &[Question],
    entity_names: Option<&BTreeSet<String>>,
    base: &str,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut qids = BTreeSet::new();
    for (i, q) in questions.iter().enumerate() {
        let path = format!("{base}[{i}]");
        if q.qid.trim().is_empty() {
            out.push(Violation::new(&path, "question id is empty"));
        } else if !qids.insert(q.qid.as_str()) {
            out.push(Violation::new(&path, format!("duplicate question id `{}`", q.qid)));
        }
        if q.text.trim().is_empty() {
            out.push(Violation::new(&path, "question text is empty"));
        }
        let n = q.subject_entities.len();
        match q.kind {
            QuestionKind::Appearance | QuestionKind::Intrinsic if n != 1 => out.push(
                Violation::new(&path, format!("{} question must reference exactly one entity", q.kind.as_str())),
            ),
            QuestionKind::Relationship if n < 2 => out.push(Violation::new(
                &path,
                "relationship question must reference at least two entities",
            )),
            _ => {}
        }
        if let Some(names) = entity_names {
            for s in &q.subject_entities {
                if !names.contains(&name_key(s)) {
                    out.push(Violation::new(&path, format!("unknown entity `{s}` in question")));
                }
            }
        }
    }
    out
}

/// Returns every violated invariant for the stages the record has completed.
/// An empty report means the record is consistent.
pub fn validate_record(r: &EvaluationRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    if r.schema_version != SCHEMA_VERSION {
        out.push(Violation::new(
            "schema_version",
            format!("unsupported schema version {}", r.schema_version),
        ));
    }
    if r.id.trim().is_empty() {
        out.push(Violation::new("id", "record id is empty"));
    }
    if r.prompt.text.trim().is_empty() {
        out.push(Violation::new("prompt.text", "prompt text is empty"));
    }
    if r.image.uri.trim().is_empty() {
        out.push(Violation::new("image.uri", "image uri is empty"));
    }
    match &r.extraction {
        Some(x) => {
            out.extend(validate_extraction(x));
            if !r.direct_questions.is_empty() {
                out.push(Violation::new(
                    "direct_questions",
                    "direct questions are only used when there is no extraction",
                ));
            }
        }
        None => out.extend(validate_questions(&r.direct_questions, None, "direct_questions")),
    }

    let questions: BTreeMap<&str, &Question> =
        r.questions().iter().map(|q| (q.qid.as_str(), q)).collect();

    for (i, a) in r.answers.iter().enumerate() {
        let path = format!("answers[{i}]");
        if !questions.contains_key(a.qid.as_str()) {
            out.push(Violation::new(&path, format!("answer for unknown question `{}`", a.qid)));
        }
        if let Some(s) = a.score {
            if s > MAX_SCORE {
                out.push(Violation::new(&path, format!("score out of range: {s}")));
            }
        }
    }

    let mut seen = BTreeSet::new();
    let answers_optional = r.provenance.variant == Variant::NoAnswering;
    for (i, v) in r.verdicts.iter().enumerate() {
        let path = format!("verdicts[{i}]");
        if v.score > MAX_SCORE {
            out.push(Violation::new(&path, format!("score out of range: {}", v.score)));
        }
        if !seen.insert(v.qid.as_str()) {
            out.push(Violation::new(&path, format!("duplicate verdict for `{}`", v.qid)));
        }
        match questions.get(v.qid.as_str()) {
            None => out.push(Violation::new(&path, format!("verdict for unknown question `{}`", v.qid))),
            Some(q) => {
                if q.kind != QuestionKind::Appearance && v.answer.trim().is_empty() && !answers_optional {
                    out.push(Violation::new(
                        &path,
                        format!("{} question `{}` has an empty answer", q.kind.as_str(), q.qid),
                    ));
                }
            }
        }
    }

    let mut dims = BTreeSet::new();
    for (i, s) in r.summaries.iter().enumerate() {
        let path = format!("summaries[{i}]");
        if s.score > MAX_SCORE {
            out.push(Violation::new(&path, format!("score out of range: {}", s.score)));
        }
        if !dims.insert(s.dimension) {
            out.push(Violation::new(
                &path,
                format!("duplicate {} summary", s.dimension.as_str()),
            ));
        }
    }

    if r.is_complete() {
        for d in Dimension::ALL {
            if !dims.contains(&d) {
                out.push(Violation::new("summaries", format!("missing {} summary", d.as_str())));
            }
        }
        for q in r.questions() {
            if !seen.contains(q.qid.as_str()) {
                out.push(Violation::new("verdicts", format!("no verdict for question `{}`", q.qid)));
            }
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: unsupported schema_version {found}")]
    Version { line: usize, found: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RecordError {
    fn at(line: usize, source: serde_json::Error) -> Self {
        RecordError::Parse { line, source }
    }
}

fn check_version(line: usize, value: &serde_json::Value) -> Result<(), RecordError> {
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0);
    if found != u64::from(SCHEMA_VERSION) {
        return Err(RecordError::Version { line, found });
    }
    Ok(())
}

/// Single-line canonical form, as stored in dataset files.
pub fn serialize_record(r: &EvaluationRecord) -> String {
    serde_json::to_string(r).expect("records always serialize")
}

/// Multi-line canonical form for single-record files.
pub fn serialize_record_pretty(r: &EvaluationRecord) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("records always serialize");
    s.push('\n');
    s
}

/// Parses either canonical form. Errors carry the 1-based line and column.
pub fn deserialize_record(doc: &str) -> Result<EvaluationRecord, RecordError> {
    let value: serde_json::Value = serde_json::from_str(doc).map_err(|e| RecordError::at(e.line(), e))?;
    check_version(1, &value)?;
    serde_json::from_value(value).map_err(|e| RecordError::at(1, e))
}

/// Parses a line-delimited dataset. Blank lines are skipped.
pub fn read_dataset(text: &str) -> Result<Vec<EvaluationRecord>, RecordError> {
    read_lines(text)
}

pub fn write_dataset(records: &[EvaluationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serialize_record(r));
        out.push('\n');
    }
    out
}

/// Generic line-delimited reader for any versioned type.
pub fn read_lines<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, RecordError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| RecordError::at(i + 1, e))?;
        check_version(i + 1, &value)?;
        out.push(serde_json::from_value(value).map_err(|e| RecordError::at(i + 1, e))?);
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn consistent_record_has_empty_report() {
        assert_eq!(validate_record(&running_example_record()), vec![]);
    }

    #[test]
    fn missing_appearance_question_names_the_entity() {
        let mut r = running_example_record();
        let x = r.extraction.as_mut().unwrap();
        x.questions.retain(|q| q.qid != "a1");
        r.verdicts.retain(|v| v.qid != "a1");
        r.answers.retain(|a| a.qid != "a1");
        let report = validate_record(&r);
        assert_eq!(report.len(), 1, "{report:?}");
        assert!(report[0].message.contains("`cat`"));
        assert!(report[0].message.contains("appearance"));
    }

    #[test]
    fn out_of_range_score_is_reported() {
        let mut r = running_example_record();
        r.verdicts[0].score = 11;
        let report = validate_record(&r);
        assert_eq!(report.len(), 1);
        assert!(report[0].message.contains("score out of range"));
    }

    #[test]
    fn missing_verdict_breaks_coverage() {
        let mut r = running_example_record();
        r.verdicts.pop();
        let report = validate_record(&r);
        assert!(report.iter().any(|v| v.message.contains("no verdict for question `r1`")));
    }

    #[test]
    fn entity_names_match_case_insensitively() {
        let mut r = running_example_record();
        let x = r.extraction.as_mut().unwrap();
        x.questions[0].subject_entities = vec!["  CAT ".into()];
        assert_eq!(validate_record(&r), vec![]);
    }

    #[test]
    fn positional_attributes_are_rejected() {
        let mut x = running_example_extraction();
        x.entities[0].attributes.push(AttributePair::new("position", "left"));
        let report = validate_extraction(&x);
        assert!(report.iter().any(|v| v.message.contains("positional")));
    }

    #[test]
    fn empty_stage_record_round_trips() {
        let r = EvaluationRecord::new(
            "x",
            TextPrompt { id: "p".into(), text: "a dog".into(), source: PromptSource::Other },
            ImageRef { id: "i".into(), uri: "a.png".into(), generator: Generator::Unknown },
        );
        assert_eq!(deserialize_record(&serialize_record(&r)).unwrap(), r);
        assert_eq!(deserialize_record(&serialize_record_pretty(&r)).unwrap(), r);
    }

    #[test]
    fn full_record_round_trips_byte_stable() {
        let r = running_example_record();
        let line = serialize_record(&r);
        let back = deserialize_record(&line).unwrap();
        assert_eq!(back, r);
        assert_eq!(serialize_record(&back), line);
    }

    #[test]
    fn truncated_document_is_a_parse_error() {
        let line = serialize_record(&running_example_record());
        let err = deserialize_record(&line[..line.len() / 2]).unwrap_err();
        assert!(matches!(err, RecordError::Parse { .. }));
    }

    #[test]
    fn dataset_errors_report_the_line() {
        let good = serialize_record(&running_example_record());
        let text = format!("{good}\n\n{{\"schema_version\":1,\"id\":3}}\n");
        match read_dataset(&text).unwrap_err() {
            RecordError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn canonicalize_groups_and_renumbers() {
        let mut x = running_example_extraction();
        x.questions.rotate_left(2);
        assert!(!x.is_canonical());
        x.canonicalize();
        assert_eq!(x, running_example_extraction());
        assert!(x.is_canonical());
    }
}
