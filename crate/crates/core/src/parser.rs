//! Parsing of the markdown-templated judge outputs, and the inverse
//! renderers used to feed one stage's results into the next.
//!
//! Every parser is total: any input yields either a value or a classified
//! [`OutputFailure`]. Transcripts are first read into a heading outline with
//! nested bullet items, then sections are located by title (falling back to
//! a search anywhere in the document) and matched against the expected
//! questions by section and ordinal position.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::record::{
    name_key, validate_extraction, validate_questions, Caption, Dimension, DimensionSummary,
    Entity, ExtractionResult, FailureKind, Question, QuestionKind, QuestionVerdict,
    Relationship, StageAnswer, Violation, AttributePair, MAX_SCORE,
};

/// Consecutive identical lines that count as a loop.
pub const REPEAT_RUN: usize = 3;
/// Duplicate-line ratio above which a long transcript counts as looping.
pub const DUPLICATE_RATIO: f64 = 0.5;
pub const DUPLICATE_MIN_LINES: usize = 20;

const REFUSAL_LEXICON: &[&str] = &[
    "i'm sorry",
    "i am sorry",
    "sorry, but",
    "i cannot",
    "i can't",
    "i can not",
    "i'm unable",
    "i am unable",
    "i'm not able",
    "i am not able",
    "unable to assist",
    "unable to help",
    "i won't",
    "i will not",
    "i must decline",
    "i apologize",
    "as an ai",
    "cannot comply",
    "can't comply",
    "cannot fulfill",
    "not able to provide",
    "not comfortable",
];

const STRUCTURE: &[&str] = &["structure information"];
const INTRINSIC_ATTRS: &[&str] = &["intrinsic attributes", "intrinsic attribute"];
const RELATION_ATTRS: &[&str] = &["relationship attributes", "relationship attribute", "relation attributes"];
const QUESTIONS: &[&str] = &["questions"];
const CAPTIONS: &[&str] = &["image caption", "image captions", "captions"];
const ANSWERS: &[&str] = &["answers"];
const EVALUATION: &[&str] = &["evaluation"];
const OVERALL: &[&str] = &["overall evaluation"];
const APPEARANCE_SEC: &[&str] = &[
    "appearance quality questions",
    "appearance quality answers",
    "appearance quality",
];
const INTRINSIC_SEC: &[&str] = &[
    "intrinsic attribute consistency questions",
    "intrinsic attribute consistency answers",
    "intrinsic attribute consistency",
];
const RELATION_SEC: &[&str] = &[
    "relationship attribute consistency questions",
    "relationship attribute consistency answers",
    "relationship attribute consistency",
];

const TEMPLATE_TITLES: &[&[&str]] = &[
    STRUCTURE,
    INTRINSIC_ATTRS,
    RELATION_ATTRS,
    QUESTIONS,
    CAPTIONS,
    ANSWERS,
    EVALUATION,
    OVERALL,
    APPEARANCE_SEC,
    INTRINSIC_SEC,
    RELATION_SEC,
];

/// Template placeholder lines a model sometimes copies through.
const FILLER: &[&str] = &["...", "…", "next question", "next entity", "next question ..."];

fn section_for(kind: QuestionKind) -> &'static [&'static str] {
    match kind {
        QuestionKind::Appearance => APPEARANCE_SEC,
        QuestionKind::Intrinsic => INTRINSIC_SEC,
        QuestionKind::Relationship => RELATION_SEC,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFailure {
    pub kind: FailureKind,
    pub evidence: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing_qids: Vec<String>,
}

impl OutputFailure {
    pub fn new(kind: FailureKind, evidence: Vec<String>) -> Self {
        Self { kind, evidence, missing_qids: Vec::new() }
    }
}

impl fmt::Display for OutputFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind.as_str())?;
        if !self.missing_qids.is_empty() {
            write!(f, " (missing {})", self.missing_qids.join(", "))?;
        }
        if let Some(first) = self.evidence.first() {
            write!(f, ": {first}")?;
            if self.evidence.len() > 1 {
                write!(f, " (+{} more)", self.evidence.len() - 1)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseOutcome<T> {
    pub status: ParseStatus,
    pub value: Option<T>,
    pub failure: Option<OutputFailure>,
    pub warnings: Vec<String>,
}

impl<T> ParseOutcome<T> {
    fn ok(value: T, warnings: Vec<String>) -> Self {
        Self { status: ParseStatus::Ok, value: Some(value), failure: None, warnings }
    }

    fn failed(failure: OutputFailure, warnings: Vec<String>) -> Self {
        Self { status: ParseStatus::Failed, value: None, failure: Some(failure), warnings }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ParseStatus::Ok
    }

    pub fn failure_kind(&self) -> Option<FailureKind> {
        self.failure.as_ref().map(|f| f.kind)
    }

    pub fn into_result(self) -> Result<T, OutputFailure> {
        match (self.value, self.failure) {
            (Some(v), _) => Ok(v),
            (None, Some(f)) => Err(f),
            (None, None) => Err(OutputFailure::new(FailureKind::Malformed, vec![])),
        }
    }
}

// ---------------------------------------------------------------------------
// Failure detection

fn normalize_line(line: &str) -> String {
    line.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
        .replace(['\u{2019}', '\u{2018}'], "'")
}

fn content_lines(raw: &str) -> impl Iterator<Item = &str> {
    raw.lines().filter(|l| {
        let t = l.trim();
        !t.is_empty() && !t.starts_with("//")
    })
}

fn repetition(raw: &str) -> Option<OutputFailure> {
    let lines: Vec<String> = content_lines(raw)
        .map(normalize_line)
        .filter(|l| l.chars().any(char::is_alphanumeric))
        .collect();
    let mut run = 1;
    for i in 1..lines.len() {
        if lines[i] == lines[i - 1] {
            run += 1;
            if run >= REPEAT_RUN {
                return Some(OutputFailure::new(
                    FailureKind::Repetition,
                    vec![format!("line repeated {run} times in a row: {}", lines[i])],
                ));
            }
        } else {
            run = 1;
        }
    }
    if lines.len() >= DUPLICATE_MIN_LINES {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for l in &lines {
            *counts.entry(l).or_default() += 1;
        }
        let duplicates = lines.len() - counts.len();
        let ratio = duplicates as f64 / lines.len() as f64;
        if ratio > DUPLICATE_RATIO {
            let (top, n) = counts.iter().max_by_key(|(_, n)| **n).expect("non-empty");
            return Some(OutputFailure::new(
                FailureKind::Repetition,
                vec![format!(
                    "{duplicates} of {} lines are duplicates; most frequent ({n}x): {top}",
                    lines.len()
                )],
            ));
        }
    }
    None
}

fn has_template_header(raw: &str) -> bool {
    content_lines(raw).any(|l| {
        heading(l.trim()).is_some_and(|(_, title)| {
            let key = title_key(&title);
            TEMPLATE_TITLES.iter().any(|aliases| title_matches(&key, aliases))
        })
    })
}

fn refusal(raw: &str) -> Option<OutputFailure> {
    if has_template_header(raw) {
        return None;
    }
    content_lines(raw).find_map(|l| {
        let n = normalize_line(l);
        REFUSAL_LEXICON
            .iter()
            .any(|p| n.contains(p))
            .then(|| OutputFailure::new(FailureKind::Refusal, vec![l.trim().to_string()]))
    })
}

/// Checks for the two failure patterns visible without knowing the stage:
/// looping output and refusals. Missing content is left to the stage parsers.
pub fn detect_failure(raw: &str) -> Option<OutputFailure> {
    repetition(raw).or_else(|| refusal(raw))
}

// ---------------------------------------------------------------------------
// Outline

#[derive(Debug, Clone, Default)]
struct Item {
    line: usize,
    indent: usize,
    label: Option<String>,
    value: String,
    children: Vec<Item>,
}

#[derive(Debug, Clone, Default)]
struct Section {
    level: usize,
    title: String,
    key: String,
    items: Vec<Item>,
    children: Vec<Section>,
}

fn title_key(title: &str) -> String {
    let cleaned: String = title
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '&' { c } else { ' ' })
        .collect();
    normalize_line(&cleaned)
}

fn title_matches(key: &str, aliases: &[&str]) -> bool {
    aliases.contains(&key)
}

fn heading(line: &str) -> Option<(usize, String)> {
    let hashes = line.chars().take_while(|c| *c == '#').count();
    if hashes == 0 || hashes > 6 {
        return None;
    }
    let rest = &line[hashes..];
    if !rest.is_empty() && !rest.starts_with(char::is_whitespace) {
        return None;
    }
    let title = rest.trim().trim_end_matches(':').trim();
    Some((hashes, title.to_string()))
}

fn bullet(line: &str) -> Option<&str> {
    for marker in ["- ", "* ", "+ ", "• "] {
        if let Some(rest) = line.strip_prefix(marker) {
            return Some(rest);
        }
    }
    None
}

fn label_key(label: &str) -> String {
    let cleaned: String = label
        .chars()
        .map(|c| if c.is_alphabetic() { c } else { ' ' })
        .collect();
    normalize_line(&cleaned)
}

fn split_label(text: &str) -> (Option<String>, String) {
    if let Some(pos) = text.find(':') {
        let label = text[..pos].trim();
        if !label.is_empty() && label.chars().count() <= 60 {
            return (Some(label.to_string()), text[pos + 1..].trim().to_string());
        }
    }
    (None, text.trim().to_string())
}

fn indent_width(line: &str) -> usize {
    line.chars()
        .take_while(|c| c.is_whitespace())
        .map(|c| if c == '\t' { 4 } else { 1 })
        .sum()
}

fn push_item(items: &mut Vec<Item>, item: Item) {
    match items.last_mut() {
        Some(last) if item.indent > last.indent => push_item(&mut last.children, item),
        _ => items.push(item),
    }
}

fn last_item(items: &mut [Item]) -> Option<&mut Item> {
    let last = items.last_mut()?;
    if last.children.is_empty() {
        Some(last)
    } else {
        last_item(&mut last.children)
    }
}

fn outline(raw: &str, warnings: &mut Vec<String>) -> Section {
    let mut stack = vec![Section::default()];
    for (i, line) in raw.lines().enumerate() {
        let line = line.replace("**", "").replace('`', "");
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with("//") {
            warnings.push(format!("line {}: skipped comment", i + 1));
            continue;
        }
        if let Some((level, title)) = heading(trimmed) {
            while stack.len() > 1 && stack.last().is_some_and(|s| s.level >= level) {
                let done = stack.pop().expect("len > 1");
                stack.last_mut().expect("root").children.push(done);
            }
            stack.push(Section { level, key: title_key(&title), title, ..Section::default() });
            continue;
        }
        let section = stack.last_mut().expect("root");
        if let Some(rest) = bullet(trimmed) {
            let (label, value) = split_label(rest);
            push_item(
                &mut section.items,
                Item { line: i + 1, indent: indent_width(&line), label, value, children: Vec::new() },
            );
        } else if let Some(last) = last_item(&mut section.items) {
            if !last.value.is_empty() {
                last.value.push(' ');
            }
            last.value.push_str(trimmed);
        }
    }
    while stack.len() > 1 {
        let done = stack.pop().expect("len > 1");
        stack.last_mut().expect("root").children.push(done);
    }
    stack.pop().expect("root")
}

impl Section {
    /// First descendant (pre-order) whose title matches.
    fn find(&self, aliases: &[&str]) -> Option<&Section> {
        for c in &self.children {
            if title_matches(&c.key, aliases) {
                return Some(c);
            }
            if let Some(s) = c.find(aliases) {
                return Some(s);
            }
        }
        None
    }

    /// Looks under `scope` first, then anywhere in the document.
    fn locate<'a>(root: &'a Section, scope: Option<&'a Section>, aliases: &[&str]) -> Option<&'a Section> {
        scope.and_then(|s| s.find(aliases)).or_else(|| root.find(aliases))
    }

    fn all_items(&self, out: &mut Vec<Item>) {
        out.extend(self.items.iter().cloned());
        for c in &self.children {
            c.all_items(out);
        }
    }
}

// ---------------------------------------------------------------------------
// Question blocks

const FIELD_KEYS: &[&str] = &["answer", "explanation", "score", "entities", "entities involved"];

/// One `- question: ...` item with its sub-fields.
#[derive(Debug, Clone, Default)]
struct QItem {
    line: usize,
    text: String,
    fields: BTreeMap<String, String>,
}

impl QItem {
    fn field(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }
}

fn is_filler(item: &Item) -> bool {
    let v = normalize_line(&item.value);
    item.label.is_none() && (FILLER.contains(&v.as_str()) || !v.chars().any(char::is_alphanumeric))
}

fn field_key(label: &str) -> Option<String> {
    let key = label_key(label);
    let key = match key.as_str() {
        "answer from the image" | "answers" => "answer".to_string(),
        "entity" | "entities" => "entities".to_string(),
        "entities involved" => "entities".to_string(),
        _ => key,
    };
    FIELD_KEYS.contains(&key.as_str()).then_some(key)
}

fn question_items(items: &[Item], warnings: &mut Vec<String>) -> Vec<QItem> {
    let mut out: Vec<QItem> = Vec::new();
    for item in items {
        if is_filler(item) {
            continue;
        }
        let as_field = item.label.as_deref().and_then(field_key);
        if let (Some(key), Some(prev)) = (as_field.clone(), out.last_mut()) {
            warnings.push(format!("line {}: `{key}` not indented under its question", item.line));
            prev.fields.entry(key).or_insert_with(|| item.value.clone());
            continue;
        }
        if as_field.is_some() {
            warnings.push(format!("line {}: field before any question ignored", item.line));
            continue;
        }
        let mut q = QItem { line: item.line, text: item.value.clone(), fields: BTreeMap::new() };
        if !item.label.as_deref().is_some_and(|l| label_key(l).starts_with("question")) {
            if let Some(l) = &item.label {
                q.text = format!("{l}: {}", item.value);
            }
        }
        let mut children = Vec::new();
        flatten_items(&item.children, &mut children);
        for c in children {
            let Some(key) = c.label.as_deref().and_then(field_key) else {
                continue;
            };
            if q.fields.contains_key(&key) {
                warnings.push(format!("line {}: duplicate `{key}` field ignored", c.line));
            } else {
                q.fields.insert(key, c.value.clone());
            }
        }
        out.push(q);
    }
    out
}

fn flatten_items(items: &[Item], out: &mut Vec<Item>) {
    for i in items {
        out.push(Item { children: Vec::new(), ..i.clone() });
        flatten_items(&i.children, out);
    }
}

/// Items of a per-entity section, grouped by entity header. Items placed
/// directly under the section (no header) form a group with no name.
fn entity_groups(sec: &Section, warnings: &mut Vec<String>) -> Vec<(Option<String>, Vec<QItem>)> {
    let mut groups = Vec::new();
    let direct = question_items(&sec.items, warnings);
    if !direct.is_empty() {
        groups.push((None, direct));
    }
    for c in &sec.children {
        let mut items = Vec::new();
        c.all_items(&mut items);
        groups.push((Some(c.title.clone()), question_items(&items, warnings)));
    }
    groups
}

fn flat_items(sec: &Section, warnings: &mut Vec<String>) -> Vec<QItem> {
    let mut items = Vec::new();
    sec.all_items(&mut items);
    question_items(&items, warnings)
}

fn strip_entity_prefix(s: &str) -> String {
    let key = name_key(s);
    for prefix in ["entity", "object"] {
        if let Some(rest) = key.strip_prefix(prefix) {
            let rest = rest.trim_start_matches(|c: char| c.is_ascii_digit() || c == ' ');
            if let Some(rest) = rest.strip_prefix(':') {
                return rest.trim().to_string();
            }
        }
    }
    key
}

fn singular(key: &str) -> &str {
    key.strip_suffix("es")
        .filter(|k| k.ends_with('s') || k.ends_with('x') || k.ends_with("ch") || k.ends_with("sh"))
        .or_else(|| key.strip_suffix('s'))
        .unwrap_or(key)
}

fn without_article(key: &str) -> &str {
    for a in ["the ", "a ", "an "] {
        if let Some(rest) = key.strip_prefix(a) {
            return rest;
        }
    }
    key
}

/// Resolves a header or list entry to one of `names`: exact key, then
/// singular/plural and article-insensitive, then unique whole-word containment.
fn resolve_name(raw: &str, names: &[String]) -> Option<usize> {
    let key = strip_entity_prefix(raw);
    let key = without_article(&key);
    let keys: Vec<String> = names.iter().map(|n| name_key(n)).collect();
    if let Some(i) = keys.iter().position(|k| k == key) {
        return Some(i);
    }
    if let Some(i) = keys.iter().position(|k| singular(k) == singular(key)) {
        return Some(i);
    }
    let words = |s: &str| format!(" {s} ");
    let hits: Vec<usize> = keys
        .iter()
        .enumerate()
        .filter(|(_, k)| {
            !k.is_empty()
                && (words(key).contains(&words(k)) || words(k).contains(&words(key)))
        })
        .map(|(i, _)| i)
        .collect();
    (hits.len() == 1).then(|| hits[0])
}

/// Splits an entity list such as `cat, car`, `cat and car` or `cat car`.
fn parse_entity_list(s: &str, names: &[String]) -> Vec<String> {
    let normalized = s.replace(';', ",").replace(" and ", ",").replace('&', ",");
    let parts: Vec<&str> = normalized
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .collect();
    let resolve = |p: &str| match resolve_name(p, names) {
        Some(i) => names[i].clone(),
        None => p.to_string(),
    };
    if parts.len() >= 2 {
        return parts.into_iter().map(resolve).collect();
    }
    let Some(single) = parts.first() else {
        return Vec::new();
    };
    if resolve_name(single, names).is_some() && name_key(single).split(' ').count() == 1 {
        return vec![resolve(single)];
    }
    // Space separated: greedy longest match against known names.
    let tokens: Vec<String> = name_key(single).split(' ').map(str::to_string).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut matched = None;
        for j in (i + 1..=tokens.len()).rev() {
            let candidate = tokens[i..j].join(" ");
            if let Some(k) = names.iter().position(|n| name_key(n) == candidate) {
                matched = Some((j, names[k].clone()));
                break;
            }
        }
        match matched {
            Some((j, n)) => {
                out.push(n);
                i = j;
            }
            None => {
                if !["the", "a", "an"].contains(&tokens[i].as_str()) {
                    if let Some(k) = resolve_name(&tokens[i], names) {
                        out.push(names[k].clone());
                    } else {
                        out.push(tokens[i].clone());
                    }
                }
                i += 1;
            }
        }
    }
    if out.len() < 2 {
        return vec![resolve(single)];
    }
    out
}

/// Accepts only a bare integer in `0..=10`.
pub fn parse_score(s: &str) -> Result<u8, String> {
    let t = s.trim();
    if !t.is_empty() && t.len() <= 2 && t.bytes().all(|b| b.is_ascii_digit()) {
        if let Ok(v) = t.parse::<u8>() {
            if v <= MAX_SCORE {
                return Ok(v);
            }
        }
    }
    Err(format!("score `{t}` is not an integer from 0 to 10"))
}

// ---------------------------------------------------------------------------
// Issue collection

#[derive(Default)]
struct Issues {
    absent: Vec<String>,
    missing_qids: Vec<String>,
    malformed: Vec<String>,
}

impl Issues {
    fn missing(&mut self, qid: &str, what: String) {
        if !self.missing_qids.iter().any(|q| q == qid) {
            self.missing_qids.push(qid.to_string());
        }
        self.absent.push(what);
    }

    fn into_failure(self) -> Option<OutputFailure> {
        if !self.absent.is_empty() {
            let mut evidence = self.absent;
            evidence.extend(self.malformed);
            return Some(OutputFailure {
                kind: FailureKind::ContentAbsence,
                evidence,
                missing_qids: self.missing_qids,
            });
        }
        if !self.malformed.is_empty() {
            return Some(OutputFailure::new(FailureKind::Malformed, self.malformed));
        }
        None
    }
}

fn finish<T>(value: T, issues: Issues, warnings: Vec<String>) -> ParseOutcome<T> {
    match issues.into_failure() {
        Some(f) => ParseOutcome::failed(f, warnings),
        None => ParseOutcome::ok(value, warnings),
    }
}

// ---------------------------------------------------------------------------
// Stage one

fn parse_attribute(item: &Item) -> Option<AttributePair> {
    let label = item.label.as_deref()?;
    if label_key(label) == "attribute" {
        let (t, v) = split_label(&item.value);
        return Some(AttributePair::new(t?, v));
    }
    Some(AttributePair::new(label.trim(), item.value.trim()))
}

fn collect_questions(
    scope: &Section,
    names: &[String],
    relationships: &[Relationship],
    issues: &mut Issues,
    warnings: &mut Vec<String>,
) -> Vec<Question> {
    let mut out = Vec::new();
    for kind in QuestionKind::ALL {
        let Some(sec) = scope.find(section_for(kind)) else {
            if kind == QuestionKind::Relationship {
                if !relationships.is_empty() {
                    issues.absent.push("relationship questions section is missing".into());
                }
            } else {
                issues.absent.push(format!("{} questions section is missing", kind.as_str()));
            }
            continue;
        };
        match kind {
            QuestionKind::Relationship => {
                for (n, item) in flat_items(sec, warnings).into_iter().enumerate() {
                    let subjects = match item.field("entities") {
                        Some(list) => parse_entity_list(list, names),
                        None => match relationships.get(n) {
                            Some(r) => {
                                warnings.push(format!(
                                    "line {}: relationship question has no entities; taken from relationship {}",
                                    item.line,
                                    n + 1
                                ));
                                r.entities_involved.clone()
                            }
                            None => Vec::new(),
                        },
                    };
                    out.push(Question { qid: String::new(), kind, text: item.text, subject_entities: subjects });
                }
            }
            _ => {
                for (header, items) in entity_groups(sec, warnings) {
                    let Some(header) = header else {
                        issues.malformed.push(format!(
                            "{} questions listed without an entity header",
                            kind.as_str()
                        ));
                        continue;
                    };
                    let subject = match resolve_name(&header, names) {
                        Some(i) => names[i].clone(),
                        None => header.trim().to_string(),
                    };
                    for item in items {
                        out.push(Question {
                            qid: String::new(),
                            kind,
                            text: item.text,
                            subject_entities: vec![subject.clone()],
                        });
                    }
                }
            }
        }
    }
    for q in &out {
        if q.text.trim().is_empty() {
            issues.absent.push(format!("empty {} question text", q.kind.as_str()));
        }
    }
    out
}

fn violations_to_issues(v: Vec<Violation>, issues: &mut Issues) {
    issues.absent.extend(v.into_iter().map(|v| v.to_string()));
}

/// Parses a stage-one transcript into a canonical, validated extraction.
pub fn parse_extraction(raw: &str) -> ParseOutcome<ExtractionResult> {
    if let Some(f) = detect_failure(raw) {
        return ParseOutcome::failed(f, Vec::new());
    }
    let mut warnings = Vec::new();
    let mut issues = Issues::default();
    let root = outline(raw, &mut warnings);
    let structure = root.find(STRUCTURE);
    if structure.is_none() {
        warnings.push("no structure information header".into());
    }

    let mut entities = Vec::new();
    match Section::locate(&root, structure, INTRINSIC_ATTRS) {
        None => issues.absent.push("intrinsic attributes section is missing".into()),
        Some(sec) => {
            if !sec.items.is_empty() {
                issues.malformed.push("attributes listed without an entity header".into());
            }
            for c in &sec.children {
                let mut items = Vec::new();
                c.all_items(&mut items);
                let mut attributes = Vec::new();
                for item in items.iter().filter(|i| !is_filler(i)) {
                    match parse_attribute(item) {
                        Some(a) => attributes.push(a),
                        None => issues
                            .malformed
                            .push(format!("line {}: attribute without a type", item.line)),
                    }
                }
                entities.push(Entity { name: strip_header(&c.title), attributes });
            }
            if entities.is_empty() {
                issues.absent.push("no entities extracted".into());
            }
        }
    }
    let names: Vec<String> = entities.iter().map(|e| e.name.clone()).collect();

    let mut relationships = Vec::new();
    match Section::locate(&root, structure, RELATION_ATTRS) {
        None => warnings.push("relationship attributes section is missing; assuming none".into()),
        Some(sec) => {
            for c in &sec.children {
                let mut items = Vec::new();
                c.all_items(&mut items);
                let mut involved = None;
                let mut value = None;
                for item in &items {
                    match item.label.as_deref().map(label_key).as_deref() {
                        Some("entities involved") | Some("entities") => {
                            involved = Some(parse_entity_list(&item.value, &names))
                        }
                        Some("value") => value = Some(item.value.clone()),
                        _ => {}
                    }
                }
                let rel_type = c.title.trim().to_string();
                if involved.is_none() {
                    issues.absent.push(format!("relationship `{rel_type}` lists no entities"));
                }
                if value.is_none() {
                    issues.absent.push(format!("relationship `{rel_type}` has no value"));
                }
                relationships.push(Relationship {
                    rel_type,
                    entities_involved: involved.unwrap_or_default(),
                    value: value.unwrap_or_default(),
                });
            }
        }
    }

    let questions = match root.find(QUESTIONS) {
        Some(scope) => collect_questions(scope, &names, &relationships, &mut issues, &mut warnings),
        None => {
            issues.absent.push("questions section is missing".into());
            Vec::new()
        }
    };

    let mut x = ExtractionResult { entities, relationships, questions };
    x.canonicalize();
    if issues.absent.is_empty() && issues.malformed.is_empty() {
        violations_to_issues(validate_extraction(&x), &mut issues);
    }
    finish(x, issues, warnings)
}

fn strip_header(title: &str) -> String {
    let t = title.trim();
    let key = name_key(t);
    for prefix in ["entity", "object"] {
        if key.starts_with(prefix) {
            if let Some(pos) = t.find(':') {
                return t[pos + 1..].trim().to_string();
            }
        }
    }
    t.to_string()
}

/// Parses a questions-only transcript (the `no_extraction` variant).
pub fn parse_questions(raw: &str) -> ParseOutcome<Vec<Question>> {
    if let Some(f) = detect_failure(raw) {
        return ParseOutcome::failed(f, Vec::new());
    }
    let mut warnings = Vec::new();
    let mut issues = Issues::default();
    let root = outline(raw, &mut warnings);
    let scope = root.find(QUESTIONS).unwrap_or(&root);

    let mut names: Vec<String> = Vec::new();
    for kind in [QuestionKind::Appearance, QuestionKind::Intrinsic] {
        if let Some(sec) = scope.find(section_for(kind)) {
            for c in &sec.children {
                let n = strip_header(&c.title);
                if resolve_name(&n, &names).is_none() {
                    names.push(n);
                }
            }
        }
    }
    let questions = collect_questions(scope, &names, &[], &mut issues, &mut warnings);
    let mut x = ExtractionResult {
        entities: names.iter().map(|n| Entity { name: n.clone(), attributes: Vec::new() }).collect(),
        relationships: Vec::new(),
        questions,
    };
    x.canonicalize();
    if issues.absent.is_empty() && issues.malformed.is_empty() {
        if x.questions.is_empty() {
            issues.absent.push("no questions".into());
        }
        for n in &names {
            let k = name_key(n);
            if !x
                .questions_of(QuestionKind::Appearance)
                .any(|q| q.subject_entities.iter().any(|s| name_key(s) == k))
            {
                issues.absent.push(format!("entity `{n}` has no appearance question"));
            }
        }
        let known = names.iter().map(|n| name_key(n)).collect();
        violations_to_issues(validate_questions(&x.questions, Some(&known), "questions"), &mut issues);
    }
    finish(x.questions, issues, warnings)
}

// ---------------------------------------------------------------------------
// Matching answers to expected questions

/// Pairs each expected question of one kind with the transcript item at the
/// same ordinal position within its entity group (or overall, for
/// relationship questions).
fn match_kind<'q>(
    sec: Option<&Section>,
    expected: &[&'q Question],
    kind: QuestionKind,
    warnings: &mut Vec<String>,
) -> Vec<(&'q Question, Option<QItem>)> {
    let Some(sec) = sec else {
        return expected.iter().map(|q| (*q, None)).collect();
    };
    if kind == QuestionKind::Relationship {
        let mut items = flat_items(sec, warnings).into_iter();
        let out: Vec<_> = expected.iter().map(|q| (*q, items.next())).collect();
        let extra = items.count();
        if extra > 0 {
            warnings.push(format!("{extra} unexpected relationship items ignored"));
        }
        return out;
    }

    let mut entity_order: Vec<String> = Vec::new();
    for q in expected {
        let n = q.subject_entities.first().cloned().unwrap_or_default();
        if !entity_order.iter().any(|e| name_key(e) == name_key(&n)) {
            entity_order.push(n);
        }
    }
    let groups = entity_groups(sec, warnings);
    let mut assigned: Vec<Vec<QItem>> = vec![Vec::new(); entity_order.len()];
    let mut unmatched: Vec<Vec<QItem>> = Vec::new();
    for (header, items) in groups {
        match header.as_deref().and_then(|h| resolve_name(h, &entity_order)) {
            Some(i) => assigned[i].extend(items),
            None => unmatched.push(items),
        }
    }
    let mut spare = unmatched.into_iter();
    for (i, slot) in assigned.iter_mut().enumerate() {
        if slot.is_empty() {
            if let Some(items) = spare.next() {
                warnings.push(format!(
                    "{} answers for `{}` matched by position",
                    kind.as_str(),
                    entity_order[i]
                ));
                *slot = items;
            }
        }
    }
    let mut cursors = vec![0usize; entity_order.len()];
    expected
        .iter()
        .map(|q| {
            let n = q.subject_entities.first().map(String::as_str).unwrap_or("");
            let g = entity_order.iter().position(|e| name_key(e) == name_key(n)).unwrap_or(0);
            let item = assigned[g].get(cursors[g]).cloned();
            cursors[g] += 1;
            (*q, item)
        })
        .collect()
}

fn captions_from(root: &Section, issues: &mut Issues, required: bool) -> Vec<Caption> {
    let mut out = Vec::new();
    match root.find(CAPTIONS) {
        None => {
            if required {
                issues.absent.push("image caption section is missing".into());
            }
        }
        Some(sec) => {
            for c in &sec.children {
                let mut items = Vec::new();
                c.all_items(&mut items);
                let caption = items
                    .iter()
                    .find(|i| i.label.as_deref().map(label_key).as_deref() == Some("caption"))
                    .or_else(|| items.iter().find(|i| !is_filler(i)))
                    .map(|i| i.value.clone())
                    .unwrap_or_default();
                if caption.trim().is_empty() {
                    issues.malformed.push(format!("caption for `{}` is empty", c.title));
                    continue;
                }
                out.push(Caption { entity: strip_header(&c.title), caption });
            }
            if out.is_empty() && required {
                issues.absent.push("image caption section has no captions".into());
            }
        }
    }
    out
}

fn required_field<'a>(item: &'a QItem, key: &str, q: &Question, issues: &mut Issues) -> Option<&'a str> {
    match item.field(key) {
        Some(v) if !v.trim().is_empty() => Some(v),
        _ => {
            issues.missing(&q.qid, format!("question `{}` has no {key}", q.qid));
            None
        }
    }
}

fn score_field(item: &QItem, q: &Question, issues: &mut Issues) -> Option<u8> {
    let raw = required_field(item, "score", q, issues)?;
    match parse_score(raw) {
        Ok(s) => Some(s),
        Err(e) => {
            issues.malformed.push(format!("question `{}`: {e}", q.qid));
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CagOutput {
    pub captions: Vec<Caption>,
    /// One entry per expected question, in the expected order.
    pub answers: Vec<StageAnswer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CagOptions {
    pub require_captions: bool,
}

impl Default for CagOptions {
    fn default() -> Self {
        Self { require_captions: true }
    }
}

fn by_kind(expected: &[Question], kind: QuestionKind) -> Vec<&Question> {
    expected.iter().filter(|q| q.kind == kind).collect()
}

/// Parses a stage-two transcript against the questions it was asked.
pub fn parse_cag(raw: &str, expected: &[Question], opts: CagOptions) -> ParseOutcome<CagOutput> {
    if let Some(f) = detect_failure(raw) {
        return ParseOutcome::failed(f, Vec::new());
    }
    let mut warnings = Vec::new();
    let mut issues = Issues::default();
    let root = outline(raw, &mut warnings);
    let captions = captions_from(&root, &mut issues, opts.require_captions);
    let scope = root.find(ANSWERS);

    let mut answers: BTreeMap<String, StageAnswer> = BTreeMap::new();
    for kind in QuestionKind::ALL {
        let wanted = by_kind(expected, kind);
        if wanted.is_empty() {
            continue;
        }
        let sec = Section::locate(&root, scope, section_for(kind));
        for (q, item) in match_kind(sec, &wanted, kind, &mut warnings) {
            let Some(item) = item else {
                issues.missing(&q.qid, format!("no {} answer for `{}`", kind.as_str(), q.qid));
                continue;
            };
            let answer = if kind == QuestionKind::Appearance {
                let explanation = required_field(&item, "explanation", q, &mut issues).map(str::to_string);
                let score = score_field(&item, q, &mut issues);
                StageAnswer { qid: q.qid.clone(), answer: String::new(), explanation, score }
            } else {
                let a = required_field(&item, "answer", q, &mut issues).unwrap_or_default();
                StageAnswer { qid: q.qid.clone(), answer: a.to_string(), explanation: None, score: None }
            };
            answers.insert(q.qid.clone(), answer);
        }
    }
    let answers = expected.iter().filter_map(|q| answers.remove(&q.qid)).collect();
    finish(CagOutput { captions, answers }, issues, warnings)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EsOutput {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub captions: Vec<Caption>,
    /// One verdict per expected question, in the expected order.
    pub verdicts: Vec<QuestionVerdict>,
    /// Exactly four, in dimension order.
    pub summaries: Vec<DimensionSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EsOptions {
    pub require_explanations: bool,
    pub require_captions: bool,
}

impl Default for EsOptions {
    fn default() -> Self {
        Self { require_explanations: true, require_captions: false }
    }
}

fn summary_dimension(label: &str) -> Option<Dimension> {
    let k = label_key(label);
    if k.contains("appearance") {
        Some(Dimension::Appearance)
    } else if k.contains("intrinsic") {
        Some(Dimension::Intrinsic)
    } else if k.contains("relationship") || k.contains("relation") {
        Some(Dimension::Relationship)
    } else if k.contains("overall") || k.contains("final") {
        Some(Dimension::Overall)
    } else {
        None
    }
}

fn summaries_from(
    root: &Section,
    scope: Option<&Section>,
    require_explanations: bool,
    issues: &mut Issues,
) -> Vec<DimensionSummary> {
    let Some(sec) = Section::locate(root, scope, OVERALL) else {
        issues.absent.push("overall evaluation section is missing".into());
        return Vec::new();
    };
    let mut found: BTreeMap<Dimension, DimensionSummary> = BTreeMap::new();
    let mut items = Vec::new();
    sec.all_items(&mut items);
    for item in items.iter().filter(|i| i.indent == items[0].indent) {
        let Some(d) = item.label.as_deref().and_then(summary_dimension) else {
            continue;
        };
        if found.contains_key(&d) {
            issues.malformed.push(format!("duplicate {} summary at line {}", d.as_str(), item.line));
            continue;
        }
        let mut fields = Vec::new();
        flatten_items(&item.children, &mut fields);
        let get = |key: &str| {
            fields
                .iter()
                .find(|f| f.label.as_deref().and_then(field_key).as_deref() == Some(key))
                .map(|f| f.value.clone())
        };
        let score_text = get("score").or_else(|| (!item.value.is_empty()).then(|| item.value.clone()));
        let Some(score_text) = score_text else {
            issues.absent.push(format!("{} summary has no score", d.as_str()));
            continue;
        };
        let score = match parse_score(&score_text) {
            Ok(s) => s,
            Err(e) => {
                issues.malformed.push(format!("{} summary: {e}", d.as_str()));
                continue;
            }
        };
        let explanation = get("explanation").unwrap_or_default();
        if require_explanations && explanation.trim().is_empty() {
            issues.absent.push(format!("{} summary has no explanation", d.as_str()));
            continue;
        }
        found.insert(d, DimensionSummary { dimension: d, explanation, score });
    }
    for d in Dimension::ALL {
        if !found.contains_key(&d) && !issues.absent.iter().any(|a| a.starts_with(d.as_str())) {
            issues.absent.push(format!("{} summary is missing", d.as_str()));
        }
    }
    found.into_values().collect()
}

/// Parses a stage-three transcript (also the score-only and merged variants,
/// selected through `opts`).
pub fn parse_es(raw: &str, expected: &[Question], opts: EsOptions) -> ParseOutcome<EsOutput> {
    if let Some(f) = detect_failure(raw) {
        return ParseOutcome::failed(f, Vec::new());
    }
    let mut warnings = Vec::new();
    let mut issues = Issues::default();
    let root = outline(raw, &mut warnings);
    let captions = if opts.require_captions {
        captions_from(&root, &mut issues, true)
    } else {
        Vec::new()
    };
    let scope = root.find(EVALUATION);

    let mut verdicts: BTreeMap<String, QuestionVerdict> = BTreeMap::new();
    for kind in QuestionKind::ALL {
        let wanted = by_kind(expected, kind);
        if wanted.is_empty() {
            continue;
        }
        let sec = Section::locate(&root, scope, section_for(kind));
        for (q, item) in match_kind(sec, &wanted, kind, &mut warnings) {
            let Some(item) = item else {
                issues.missing(&q.qid, format!("no {} verdict for `{}`", kind.as_str(), q.qid));
                continue;
            };
            let explanation = if opts.require_explanations {
                required_field(&item, "explanation", q, &mut issues).unwrap_or_default().to_string()
            } else {
                item.field("explanation").unwrap_or_default().to_string()
            };
            let Some(score) = score_field(&item, q, &mut issues) else {
                continue;
            };
            verdicts.insert(
                q.qid.clone(),
                QuestionVerdict {
                    qid: q.qid.clone(),
                    answer: item.field("answer").unwrap_or_default().to_string(),
                    explanation,
                    score,
                },
            );
        }
    }
    let summaries = summaries_from(&root, scope, opts.require_explanations, &mut issues);
    let verdicts = expected.iter().filter_map(|q| verdicts.remove(&q.qid)).collect();
    finish(EsOutput { captions, verdicts, summaries }, issues, warnings)
}

/// Question block recovered from a rendered answers document, as read by a
/// judge that only sees text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerBlock {
    pub kind: QuestionKind,
    pub subjects: Vec<String>,
    pub question: String,
    pub answer: Option<String>,
    pub explanation: Option<String>,
    pub score: Option<String>,
}

/// Reads every question block of a questions or answers document, in order.
pub fn parse_answer_blocks(doc: &str) -> Vec<AnswerBlock> {
    let mut warnings = Vec::new();
    let root = outline(doc, &mut warnings);
    let mut names: Vec<String> = Vec::new();
    for kind in [QuestionKind::Appearance, QuestionKind::Intrinsic] {
        if let Some(sec) = root.find(section_for(kind)) {
            for c in &sec.children {
                if resolve_name(&c.title, &names).is_none() {
                    names.push(strip_header(&c.title));
                }
            }
        }
    }
    let mut out = Vec::new();
    for kind in QuestionKind::ALL {
        let Some(sec) = root.find(section_for(kind)) else {
            continue;
        };
        let groups = if kind == QuestionKind::Relationship {
            vec![(None, flat_items(sec, &mut warnings))]
        } else {
            entity_groups(sec, &mut warnings)
        };
        for (header, items) in groups {
            for item in items {
                let subjects = match (&header, item.field("entities")) {
                    (_, Some(list)) if kind == QuestionKind::Relationship => parse_entity_list(list, &names),
                    (Some(h), _) => vec![strip_header(h)],
                    _ => Vec::new(),
                };
                let get = |k: &str| item.field(k).map(str::to_string);
                out.push(AnswerBlock {
                    kind,
                    subjects,
                    answer: get("answer"),
                    explanation: get("explanation"),
                    score: get("score"),
                    question: item.text,
                });
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Rendering

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn push_questions(out: &mut String, questions: &[Question], title_suffix: &str, level: usize) {
    let h2 = "#".repeat(level);
    let h3 = "#".repeat(level + 1);
    let titles = [
        "Appearance Quality",
        "Intrinsic Attribute Consistency",
        "Relationship Attribute Consistency",
    ];
    for (kind, title) in QuestionKind::ALL.into_iter().zip(titles) {
        let qs: Vec<&Question> = questions.iter().filter(|q| q.kind == kind).collect();
        let _ = writeln!(out, "{h2} {title} {title_suffix}");
        match kind {
            QuestionKind::Relationship => {
                for (i, q) in qs.iter().enumerate() {
                    let _ = writeln!(out, "- question {}: {}", i + 1, one_line(&q.text));
                    let _ = writeln!(out, "  - entities: {}", q.subject_entities.join(", "));
                }
            }
            _ => {
                let mut current: Option<String> = None;
                let mut n = 0;
                for q in qs {
                    let subject = q.subject_entities.first().cloned().unwrap_or_default();
                    if current.as_deref().map(name_key) != Some(name_key(&subject)) {
                        let _ = writeln!(out, "{h3} {subject}");
                        current = Some(subject);
                        n = 0;
                    }
                    n += 1;
                    if kind == QuestionKind::Appearance {
                        let _ = writeln!(out, "- question: {}", one_line(&q.text));
                    } else {
                        let _ = writeln!(out, "- question {n}: {}", one_line(&q.text));
                    }
                }
            }
        }
        out.push('\n');
    }
}

/// Renders an extraction in the stage-one output format. The inverse of
/// [`parse_extraction`] on valid, canonical extractions.
pub fn render_extraction_doc(x: &ExtractionResult) -> Result<String, Vec<Violation>> {
    let violations = validate_extraction(x);
    if !violations.is_empty() {
        return Err(violations);
    }
    let mut canonical = x.clone();
    canonical.canonicalize();
    let mut out = String::from("# Structure Information\n## Intrinsic Attributes\n");
    for e in &canonical.entities {
        let _ = writeln!(out, "### {}", e.name);
        for (i, a) in e.attributes.iter().enumerate() {
            let _ = writeln!(out, "- attribute {}: {}: {}", i + 1, one_line(&a.attr_type), one_line(&a.value));
        }
    }
    out.push_str("\n## Relationship Attributes\n");
    for r in &canonical.relationships {
        let _ = writeln!(out, "### {}", one_line(&r.rel_type));
        let _ = writeln!(out, "- entities involved: {}", r.entities_involved.join(", "));
        let _ = writeln!(out, "- value: {}", one_line(&r.value));
    }
    out.push_str("\n# Questions\n");
    push_questions(&mut out, &canonical.questions, "Questions", 2);
    Ok(out.trim_end().to_string() + "\n")
}

/// The question block sent to stage two.
pub fn render_questions_doc(questions: &[Question]) -> String {
    let mut out = String::new();
    push_questions(&mut out, questions, "Questions", 2);
    out.trim_end().to_string() + "\n"
}

/// The answers block sent to stage three: stage-two answers laid out under
/// their questions.
pub fn render_answers_doc(questions: &[Question], answers: &[StageAnswer]) -> String {
    let find = |qid: &str| answers.iter().find(|a| a.qid == qid);
    let titles = [
        "Appearance Quality Answers",
        "Intrinsic Attribute Consistency Answers",
        "Relationship Attribute Consistency Answers",
    ];
    let mut out = String::new();
    for (kind, title) in QuestionKind::ALL.into_iter().zip(titles) {
        let _ = writeln!(out, "## {title}");
        let mut current: Option<String> = None;
        let mut n = 0;
        for q in questions.iter().filter(|q| q.kind == kind) {
            let a = find(&q.qid);
            if kind == QuestionKind::Relationship {
                n += 1;
                let _ = writeln!(out, "- question {n}: {}", one_line(&q.text));
                let _ = writeln!(out, "  - entities: {}", q.subject_entities.join(", "));
            } else {
                let subject = q.subject_entities.first().cloned().unwrap_or_default();
                if current.as_deref().map(name_key) != Some(name_key(&subject)) {
                    let _ = writeln!(out, "### {subject}");
                    current = Some(subject);
                    n = 0;
                }
                n += 1;
                if kind == QuestionKind::Appearance {
                    let _ = writeln!(out, "- question: {}", one_line(&q.text));
                } else {
                    let _ = writeln!(out, "- question {n}: {}", one_line(&q.text));
                }
            }
            if kind == QuestionKind::Appearance {
                let explanation = a.and_then(|a| a.explanation.as_deref()).unwrap_or("");
                let score = a.and_then(|a| a.score).map(|s| s.to_string()).unwrap_or_default();
                let _ = writeln!(out, "  - explanation: {}", one_line(explanation));
                let _ = writeln!(out, "  - score: {score}");
            } else {
                let _ = writeln!(out, "  - answer: {}", one_line(a.map(|a| a.answer.as_str()).unwrap_or("")));
            }
        }
        out.push('\n');
    }
    out.trim_end().to_string() + "\n"
}
