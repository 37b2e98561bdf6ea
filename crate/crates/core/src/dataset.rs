//! Fine-tuning data: source sampling, expansion of evaluation records into
//! six conversation kinds, score and sub-task rebalancing, export and
//! statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::Role;
use crate::parser;
use crate::record::{
    validate_record, Dimension, EvaluationRecord, ImageRef, QuestionKind, MAX_SCORE,
};

pub const EXPORT_FORMAT_VERSION: u32 = 1;
pub const BINS: usize = MAX_SCORE as usize + 1;

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("weights are empty")]
    EmptyWeights,
    #[error("weight {0} is negative or not finite")]
    BadWeight(f64),
    #[error("weights sum to {0}, not 1")]
    WeightSum(f64),
    #[error("record `{id}` cannot be expanded: {reason}")]
    Incomplete { id: String, reason: String },
    #[error("every score bin is empty")]
    AllBinsEmpty,
    #[error("sample from `{0}` carries no score bin")]
    MissingBin(String),
    #[error("samples do not match the plan: bin {bin} has {found}, plan expects {expected}")]
    PlanMismatch { bin: usize, found: usize, expected: usize },
    #[error("unsupported export format version {0}")]
    FormatVersion(u32),
}

// ---------------------------------------------------------------------------
// Source sampling

/// Seeded weighted draws, e.g. which generator renders the next prompt.
#[derive(Debug, Clone)]
pub struct WeightedSampler<T> {
    items: Vec<T>,
    index: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl<T: Clone> WeightedSampler<T> {
    pub fn new(seed: u64, weights: &[(T, f64)]) -> Result<Self, DatasetError> {
        if weights.is_empty() {
            return Err(DatasetError::EmptyWeights);
        }
        if let Some(&(_, w)) = weights.iter().find(|(_, w)| !w.is_finite() || *w < 0.0) {
            return Err(DatasetError::BadWeight(w));
        }
        let sum: f64 = weights.iter().map(|(_, w)| w).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::WeightSum(sum));
        }
        let index = WeightedIndex::new(weights.iter().map(|(_, w)| *w)).map_err(|_| DatasetError::WeightSum(sum))?;
        Ok(Self {
            items: weights.iter().map(|(t, _)| t.clone()).collect(),
            index,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn draw(&mut self) -> T {
        self.items[self.index.sample(&mut self.rng)].clone()
    }
}

/// `count` seeded draws.
pub fn sample_generator<T: Clone>(seed: u64, weights: &[(T, f64)], count: usize) -> Result<Vec<T>, DatasetError> {
    let mut s = WeightedSampler::new(seed, weights)?;
    Ok((0..count).map(|_| s.draw()).collect())
}

// ---------------------------------------------------------------------------
// Samples

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubTaskKind {
    Extraction,
    Answer,
    Explanation,
    Scoring,
    SummaryExplanation,
    SummaryScoring,
}

impl SubTaskKind {
    pub const ALL: [SubTaskKind; 6] = [
        SubTaskKind::Extraction,
        SubTaskKind::Answer,
        SubTaskKind::Explanation,
        SubTaskKind::Scoring,
        SubTaskKind::SummaryExplanation,
        SubTaskKind::SummaryScoring,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SubTaskKind::Extraction => "extraction",
            SubTaskKind::Answer => "answer",
            SubTaskKind::Explanation => "explanation",
            SubTaskKind::Scoring => "scoring",
            SubTaskKind::SummaryExplanation => "summary_explanation",
            SubTaskKind::SummaryScoring => "summary_scoring",
        }
    }

    /// Coarse kinds occur once per record.
    pub fn is_coarse(self) -> bool {
        matches!(self, SubTaskKind::Extraction | SubTaskKind::SummaryExplanation | SubTaskKind::SummaryScoring)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
}

impl Turn {
    fn user(content: String) -> Self {
        Self { role: Role::User, content, image: None }
    }

    fn user_with_image(content: String, image: &ImageRef) -> Self {
        Self { role: Role::User, content, image: Some(image.clone()) }
    }

    fn assistant(content: String) -> Self {
        Self { role: Role::Assistant, content, image: None }
    }
}

/// One training conversation. `turns` is the context; `target_text` is the
/// supervised assistant reply that follows it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTaskSample {
    pub kind: SubTaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_kind: Option<QuestionKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qid: Option<String>,
    pub turns: Vec<Turn>,
    pub target_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_bin: Option<u8>,
    pub source_record_id: String,
}

impl SubTaskSample {
    pub fn image_count(&self) -> usize {
        self.turns.iter().filter(|t| t.image.is_some()).count()
    }

    /// Population the sample is score-balanced within.
    pub fn group(&self) -> String {
        match self.question_kind {
            Some(q) => format!("{}/{}", self.kind.as_str(), q.as_str()),
            None => self.kind.as_str().to_string(),
        }
    }
}

const EXTRACTION_INSTRUCTION: &str = "Extract the entities, their intrinsic attributes and the relationships described by the text, write the evaluation questions, and caption every entity visible in the image.";
const ANSWER_INSTRUCTION: &str = "Look at the image and answer the question.";
const APPEARANCE_INSTRUCTION: &str = "Look at the image and judge whether the entity looks realistic and natural. Give an explanation and a score from 0 to 10.";
const EXPLANATION_INSTRUCTION: &str = "Compare the answer with the text prompt and explain whether they are consistent.";
const SCORE_INSTRUCTION: &str = "Give the score for this question as a single integer from 0 to 10.";
const SUMMARY_INSTRUCTION: &str = "Summarize the per-question results into appearance quality, intrinsic attribute consistency, relationship attribute consistency and overall explanations.";
const OVERALL_INSTRUCTION: &str = "Give the overall score for the image as a single integer from 0 to 10.";

fn incomplete(r: &EvaluationRecord, reason: impl Into<String>) -> DatasetError {
    DatasetError::Incomplete { id: r.id.clone(), reason: reason.into() }
}

fn summary_block(r: &EvaluationRecord) -> String {
    let labels = ["Appearance Quality", "Intrinsic Attribute Consistency", "Relationship Attribute Consistency", "Overall"];
    let mut out = String::new();
    for (d, label) in Dimension::ALL.into_iter().zip(labels) {
        if let Some(s) = r.summary(d) {
            let _ = writeln!(out, "{label}: {}", s.explanation);
        }
    }
    out.trim_end().to_string()
}

/// Expands one complete record into `3N + 3` samples, `N` being its
/// question count: one extraction sample, then per question an answer, an
/// explanation and a scoring sample, then the summary explanation and the
/// overall score.
pub fn expand_to_subtasks(r: &EvaluationRecord) -> Result<Vec<SubTaskSample>, DatasetError> {
    if let Some(f) = &r.failure {
        return Err(incomplete(r, format!("record failed at {}", f.stage.as_str())));
    }
    let x = r.extraction.as_ref().ok_or_else(|| incomplete(r, "no extraction"))?;
    if !r.is_complete() {
        return Err(incomplete(r, "no summaries"));
    }
    let violations = validate_record(r);
    if let Some(v) = violations.first() {
        return Err(incomplete(r, format!("{}: {}", v.path, v.message)));
    }
    let mut extraction_target =
        parser::render_extraction_doc(x).map_err(|_| incomplete(r, "extraction does not render"))?;
    if !r.captions.is_empty() {
        extraction_target.push_str("\n# Image Caption\n");
        for c in &r.captions {
            let _ = writeln!(extraction_target, "## {}\n- caption: {}", c.entity, c.caption);
        }
    }

    let sample = |kind, q: Option<&crate::record::Question>, turns, target_text, score_bin| SubTaskSample {
        kind,
        question_kind: q.map(|q| q.kind),
        qid: q.map(|q| q.qid.clone()),
        turns,
        target_text,
        score_bin,
        source_record_id: r.id.clone(),
    };

    let mut out = Vec::with_capacity(3 * x.questions.len() + 3);
    out.push(sample(
        SubTaskKind::Extraction,
        None,
        vec![Turn::user_with_image(format!("{EXTRACTION_INSTRUCTION}\nText: {}", r.prompt.text), &r.image)],
        extraction_target.trim_end().to_string(),
        None,
    ));

    let mut answers = Vec::new();
    let mut explanations = Vec::new();
    let mut scorings = Vec::new();
    let mut results = String::new();
    for q in &x.questions {
        let a = r.answer(&q.qid).ok_or_else(|| incomplete(r, format!("no answer for {}", q.qid)))?;
        let v = r.verdict(&q.qid).ok_or_else(|| incomplete(r, format!("no verdict for {}", q.qid)))?;
        let answer_text = if q.kind == QuestionKind::Appearance {
            let exp = a.explanation.clone().unwrap_or_default();
            let score = a.score.ok_or_else(|| incomplete(r, format!("no appearance score for {}", q.qid)))?;
            answers.push(sample(
                SubTaskKind::Answer,
                Some(q),
                vec![Turn::user_with_image(format!("{APPEARANCE_INSTRUCTION}\nQuestion: {}", q.text), &r.image)],
                format!("explanation: {exp}\nscore: {score}"),
                Some(score),
            ));
            exp
        } else {
            answers.push(sample(
                SubTaskKind::Answer,
                Some(q),
                vec![Turn::user_with_image(format!("{ANSWER_INSTRUCTION}\nQuestion: {}", q.text), &r.image)],
                a.answer.clone(),
                None,
            ));
            a.answer.clone()
        };
        let context = format!(
            "{EXPLANATION_INSTRUCTION}\nText: {}\nQuestion: {}\nAnswer: {answer_text}",
            r.prompt.text, q.text
        );
        explanations.push(sample(
            SubTaskKind::Explanation,
            Some(q),
            vec![Turn::user(context.clone())],
            v.explanation.clone(),
            None,
        ));
        scorings.push(sample(
            SubTaskKind::Scoring,
            Some(q),
            vec![Turn::user(context), Turn::assistant(v.explanation.clone()), Turn::user(SCORE_INSTRUCTION.into())],
            v.score.to_string(),
            Some(v.score),
        ));
        let _ = writeln!(results, "- {}: {}\n  explanation: {}\n  score: {}", q.qid, q.text, v.explanation, v.score);
    }
    out.extend(answers);
    out.extend(explanations);
    out.extend(scorings);

    let overall = r.overall_score().ok_or_else(|| incomplete(r, "no overall summary"))?;
    let summary_context = format!("{SUMMARY_INSTRUCTION}\nResults:\n{}", results.trim_end());
    let summary = summary_block(r);
    out.push(sample(
        SubTaskKind::SummaryExplanation,
        None,
        vec![Turn::user(summary_context.clone())],
        summary.clone(),
        None,
    ));
    out.push(sample(
        SubTaskKind::SummaryScoring,
        None,
        vec![Turn::user(summary_context), Turn::assistant(summary), Turn::user(OVERALL_INSTRUCTION.into())],
        overall.to_string(),
        Some(overall),
    ));
    Ok(out)
}

pub fn expand_all(records: &[EvaluationRecord]) -> Result<Vec<SubTaskSample>, DatasetError> {
    let mut out = Vec::new();
    for r in records {
        out.extend(expand_to_subtasks(r)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Score rebalancing

/// Per-bin action: `replicate` whole copies of the bin, then `sample` more
/// drawn without replacement. Downsampling is `replicate = 0`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinAction {
    pub replicate: usize,
    pub sample: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RebalancePlan {
    pub bin_counts_before: [usize; BINS],
    pub target_per_bin: usize,
    pub actions: [BinAction; BINS],
}

impl RebalancePlan {
    pub fn counts_after(&self) -> [usize; BINS] {
        let mut out = [0; BINS];
        for (i, a) in self.actions.iter().enumerate() {
            out[i] = a.replicate * self.bin_counts_before[i] + a.sample;
        }
        out
    }

    pub fn is_identity(&self) -> bool {
        self.counts_after() == self.bin_counts_before
    }
}

/// Third quartile of the non-empty counts: linear interpolation at zero-based
/// rank 0.75·(n−1), rounded half up. Integer arithmetic throughout.
pub fn q3_target(counts: &[usize]) -> Option<usize> {
    let mut a: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    if a.is_empty() {
        return None;
    }
    a.sort_unstable();
    let pos4 = 3 * (a.len() - 1);
    let (lo, rem) = (pos4 / 4, pos4 % 4);
    let v4 = 4 * a[lo] + if rem > 0 { rem * (a[lo + 1] - a[lo]) } else { 0 };
    Some((v4 + 2) / 4)
}

pub fn plan_from_counts(counts: [usize; BINS]) -> Result<RebalancePlan, DatasetError> {
    let target = q3_target(&counts).ok_or(DatasetError::AllBinsEmpty)?;
    let mut actions = [BinAction::default(); BINS];
    for (a, &c) in actions.iter_mut().zip(&counts) {
        if c > 0 {
            *a = BinAction { replicate: target / c, sample: target % c };
        }
    }
    Ok(RebalancePlan { bin_counts_before: counts, target_per_bin: target, actions })
}

fn bin_counts(samples: &[SubTaskSample]) -> Result<[usize; BINS], DatasetError> {
    let mut counts = [0; BINS];
    for s in samples {
        let b = s.score_bin.ok_or_else(|| DatasetError::MissingBin(s.source_record_id.clone()))?;
        counts[usize::from(b.min(MAX_SCORE))] += 1;
    }
    Ok(counts)
}

pub fn plan_score_rebalance(samples: &[SubTaskSample]) -> Result<RebalancePlan, DatasetError> {
    plan_from_counts(bin_counts(samples)?)
}

/// Applies `plan`. Output is grouped by bin in ascending order; within a bin
/// whole copies come first (input order), then the sampled top-up.
pub fn apply_rebalance(
    samples: &[SubTaskSample],
    plan: &RebalancePlan,
    seed: u64,
) -> Result<Vec<SubTaskSample>, DatasetError> {
    let counts = bin_counts(samples)?;
    for b in 0..BINS {
        if counts[b] != plan.bin_counts_before[b] {
            return Err(DatasetError::PlanMismatch { bin: b, found: counts[b], expected: plan.bin_counts_before[b] });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_bin: Vec<Vec<&SubTaskSample>> = vec![Vec::new(); BINS];
    for s in samples {
        by_bin[usize::from(s.score_bin.unwrap_or(0).min(MAX_SCORE))].push(s);
    }
    let mut out = Vec::with_capacity(plan.counts_after().iter().sum());
    for (bin, action) in by_bin.iter().zip(&plan.actions) {
        for _ in 0..action.replicate {
            out.extend(bin.iter().map(|s| (*s).clone()));
        }
        let mut picked = rand::seq::index::sample(&mut rng, bin.len(), action.sample).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| bin[i].clone()));
    }
    Ok(out)
}

/// Replication factor for coarse kinds: mean questions per record, rounded
/// half up. Computed from the explanation samples, which are never
/// score-rebalanced.
pub fn subtask_factor(samples: &[SubTaskSample]) -> usize {
    let records: BTreeSet<&str> = samples.iter().map(|s| s.source_record_id.as_str()).collect();
    let fine = samples.iter().filter(|s| s.kind == SubTaskKind::Explanation).count();
    if records.is_empty() {
        return 1;
    }
    ((2 * fine + records.len()) / (2 * records.len())).max(1)
}

/// Repeats coarse-kind samples so their volume matches the per-question kinds.
pub fn rebalance_subtasks(samples: &[SubTaskSample]) -> Vec<SubTaskSample> {
    let r = subtask_factor(samples);
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let n = if s.kind.is_coarse() { r } else { 1 };
        out.extend(std::iter::repeat_n(s, n).cloned());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RebalanceReport {
    pub score_plans: BTreeMap<String, RebalancePlan>,
    pub subtask_factor: usize,
}

/// Score rebalancing within every scored group, then sub-task replication.
/// Unscored samples keep their relative order ahead of the rebalanced groups.
pub fn rebalance_dataset(
    samples: &[SubTaskSample],
    seed: u64,
) -> Result<(Vec<SubTaskSample>, RebalanceReport), DatasetError> {
    let mut groups: BTreeMap<String, Vec<SubTaskSample>> = BTreeMap::new();
    let mut out = Vec::new();
    for s in samples {
        if s.score_bin.is_some() {
            groups.entry(s.group()).or_default().push(s.clone());
        } else {
            out.push(s.clone());
        }
    }
    let mut plans = BTreeMap::new();
    for (i, (name, group)) in groups.into_iter().enumerate() {
        let plan = plan_score_rebalance(&group)?;
        out.extend(apply_rebalance(&group, &plan, seed.wrapping_add(i as u64))?);
        plans.insert(name, plan);
    }
    let factor = subtask_factor(&out);
    let out = rebalance_subtasks(&out);
    Ok((out, RebalanceReport { score_plans: plans, subtask_factor: factor }))
}

// ---------------------------------------------------------------------------
// Export

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportMessage {
    pub role: Role,
    pub content: String,
}

/// One exported line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationLine {
    pub format_version: u32,
    pub id: String,
    pub kind: SubTaskKind,
    pub source_record_id: String,
    /// Image locations in the order their `<image>` tokens appear.
    pub images: Vec<String>,
    /// Context turns followed by the target as the final assistant message.
    pub messages: Vec<ExportMessage>,
}

/// JSON lines, one conversation each. With a seed the order is shuffled
/// deterministically; ids are line positions.
pub fn export_conversations(
    samples: &[SubTaskSample],
    format_version: u32,
    shuffle_seed: Option<u64>,
) -> Result<String, DatasetError> {
    if format_version != EXPORT_FORMAT_VERSION {
        return Err(DatasetError::FormatVersion(format_version));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut out = String::new();
    for (n, &i) in order.iter().enumerate() {
        let s = &samples[i];
        let mut images = Vec::new();
        let mut messages = Vec::new();
        for t in &s.turns {
            let content = match &t.image {
                Some(img) => {
                    images.push(img.uri.clone());
                    format!("<image>\n{}", t.content)
                }
                None => t.content.clone(),
            };
            messages.push(ExportMessage { role: t.role, content });
        }
        messages.push(ExportMessage { role: Role::Assistant, content: s.target_text.clone() });
        let line = ConversationLine {
            format_version,
            id: format!("{n:07}"),
            kind: s.kind,
            source_record_id: s.source_record_id.clone(),
            images,
            messages,
        };
        out.push_str(&serde_json::to_string(&line).expect("conversation lines serialize"));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_samples(samples: &[SubTaskSample]) -> String {
    samples
        .iter()
        .map(|s| serde_json::to_string(s).expect("samples serialize") + "\n")
        .collect()
}

pub fn read_samples(text: &str) -> Result<Vec<SubTaskSample>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

// ---------------------------------------------------------------------------
// Statistics

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionCounts {
    pub appearance: usize,
    pub intrinsic: usize,
    pub relationship: usize,
}

impl QuestionCounts {
    pub fn total(&self) -> usize {
        self.appearance + self.intrinsic + self.relationship
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub pairs: usize,
    pub entities: usize,
    pub relationships: usize,
    pub questions: QuestionCounts,
    pub samples_by_kind: BTreeMap<String, usize>,
    /// Score histograms keyed by dimension (records) or sample group.
    pub histograms: BTreeMap<String, [usize; BINS]>,
}

fn bump(h: &mut BTreeMap<String, [usize; BINS]>, key: &str, score: u8) {
    h.entry(key.to_string()).or_insert([0; BINS])[usize::from(score.min(MAX_SCORE))] += 1;
}

pub fn record_stats(records: &[EvaluationRecord]) -> DatasetStats {
    let mut s = DatasetStats { pairs: records.len(), ..Default::default() };
    for r in records {
        if let Some(x) = &r.extraction {
            s.entities += x.entities.len();
            s.relationships += x.relationships.len();
        }
        for q in r.questions() {
            match q.kind {
                QuestionKind::Appearance => s.questions.appearance += 1,
                QuestionKind::Intrinsic => s.questions.intrinsic += 1,
                QuestionKind::Relationship => s.questions.relationship += 1,
            }
            if let Some(v) = r.verdict(&q.qid) {
                bump(&mut s.histograms, q.kind.as_str(), v.score);
            }
        }
        if let Some(o) = r.overall_score() {
            bump(&mut s.histograms, Dimension::Overall.as_str(), o);
        }
    }
    s
}

pub fn sample_stats(samples: &[SubTaskSample]) -> DatasetStats {
    let mut s = DatasetStats::default();
    for k in SubTaskKind::ALL {
        s.samples_by_kind.insert(k.as_str().to_string(), 0);
    }
    for x in samples {
        *s.samples_by_kind.entry(x.kind.as_str().to_string()).or_default() += 1;
        if let Some(b) = x.score_bin {
            bump(&mut s.histograms, &x.group(), b);
        }
    }
    s
}

impl DatasetStats {
    /// Plain-text report with a bar per score bin.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "pairs            {}", self.pairs);
        let _ = writeln!(out, "entities         {}", self.entities);
        let _ = writeln!(out, "relationships    {}", self.relationships);
        let _ = writeln!(
            out,
            "questions        {} (appearance {}, intrinsic {}, relationship {})",
            self.questions.total(),
            self.questions.appearance,
            self.questions.intrinsic,
            self.questions.relationship
        );
        if !self.samples_by_kind.is_empty() {
            let total: usize = self.samples_by_kind.values().sum();
            let _ = writeln!(out, "samples          {total}");
            for k in SubTaskKind::ALL {
                let n = self.samples_by_kind.get(k.as_str()).copied().unwrap_or(0);
                let _ = writeln!(out, "  {:<20} {n}", k.as_str());
            }
        }
        for (key, h) in &self.histograms {
            let _ = writeln!(out, "histogram {key}");
            let max = h.iter().copied().max().unwrap_or(0).max(1);
            for (bin, &n) in h.iter().enumerate() {
                let bar = "#".repeat((n * 40).div_ceil(max).min(40));
                let _ = writeln!(out, "  {bin:>2} {n:>8} {bar}");
            }
        }
        out
    }
}
