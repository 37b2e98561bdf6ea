//! Meta-evaluation: rank correlations against human annotators, the
//! annotator-comparison report, and reference-guided subjective scoring of
//! generated explanations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use futures::{stream, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ChatBackend, ChatMessage, ClientError};
use crate::prompts::{RenderError, SubjectiveKind, TemplateSet};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorrelationError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 items, got {0}")]
    TooShort(usize),
    #[error("correlation undefined: one series is constant")]
    Constant,
    #[error("series contains a non-finite value")]
    NonFinite,
}

fn check(xs: &[f64], ys: &[f64]) -> Result<(), CorrelationError> {
    if xs.len() != ys.len() {
        return Err(CorrelationError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(CorrelationError::TooShort(xs.len()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(CorrelationError::NonFinite);
    }
    Ok(())
}

/// Twice the 1-based midrank of every element, so ties stay integral.
fn doubled_midranks(xs: &[f64]) -> Vec<i64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0i64; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // positions i..=j share rank ((i+1) + (j+1)) / 2
        let doubled = (i + j + 2) as i64;
        for &k in &idx[i..=j] {
            out[k] = doubled;
        }
        i = j + 1;
    }
    out
}

/// Spearman's ρ: Pearson correlation of midranks. Sums are accumulated in
/// integers, so identical or exactly reversed rankings give exactly ±1.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, CorrelationError> {
    check(xs, ys)?;
    let a = doubled_midranks(xs);
    let b = doubled_midranks(ys);
    let n = a.len() as i128;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0i128, 0i128, 0i128, 0i128, 0i128);
    for (&x, &y) in a.iter().zip(&b) {
        let (x, y) = (x as i128, y as i128);
        sa += x;
        sb += y;
        saa += x * x;
        sbb += y * y;
        sab += x * y;
    }
    let sxx = n * saa - sa * sa;
    let syy = n * sbb - sb * sb;
    let sxy = n * sab - sa * sb;
    if sxx == 0 || syy == 0 {
        return Err(CorrelationError::Constant);
    }
    let rho = sxy as f64 / ((sxx as f64) * (syy as f64)).sqrt();
    Ok(rho.clamp(-1.0, 1.0))
}

fn tied_pairs_sorted<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for i in 1..sorted.len() {
        if sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Stable merge sort on `v`, returning the number of inversions removed.
fn sort_counting_swaps(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_counting_swaps(&mut v[..mid], &mut buf[..mid]);
    swaps += sort_counting_swaps(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall's τ-b with tie corrections, in O(n log n).
pub fn kendall(xs: &[f64], ys: &[f64]) -> Result<f64, CorrelationError> {
    check(xs, ys)?;
    let n = xs.len() as u64;
    let mut pairs: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let xs_sorted: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let tied_x = tied_pairs_sorted(&xs_sorted);
    let tied_xy = tied_pairs_sorted(&pairs);
    let mut ys_sorted: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; ys_sorted.len()];
    let swaps = sort_counting_swaps(&mut ys_sorted, &mut buf);
    let tied_y = tied_pairs_sorted(&ys_sorted);

    let n0 = n * (n - 1) / 2;
    if tied_x == n0 || tied_y == n0 {
        return Err(CorrelationError::Constant);
    }
    // concordant - discordant
    let num = n0 as i128 - tied_x as i128 - tied_y as i128 + tied_xy as i128 - 2 * swaps as i128;
    let den = ((n0 - tied_x) as f64) * ((n0 - tied_y) as f64);
    Ok((num as f64 / den.sqrt()).clamp(-1.0, 1.0))
}

/// Tie structure of one score series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TieInfo {
    pub distinct_values: usize,
    pub tied_pairs: u64,
}

pub fn tie_info(xs: &[f64]) -> TieInfo {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mut distinct = v.clone();
    distinct.dedup();
    TieInfo { distinct_values: distinct.len(), tied_pairs: tied_pairs_sorted(&v) }
}

/// One annotator's overall scores, keyed by record id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorScores {
    pub annotator_id: String,
    pub scores: BTreeMap<String, u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrPair {
    /// `None` when the correlation is undefined (a constant series).
    pub spearman: Option<f64>,
    pub kendall: Option<f64>,
}

impl CorrPair {
    fn of(xs: &[f64], ys: &[f64]) -> Self {
        Self { spearman: spearman(xs, ys).ok(), kendall: kendall(xs, ys).ok() }
    }

    fn mean(pairs: &[CorrPair]) -> Self {
        let avg = |get: fn(&CorrPair) -> Option<f64>| -> Option<f64> {
            let vals: Option<Vec<f64>> = pairs.iter().map(get).collect();
            vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self { spearman: avg(|p| p.spearman), kendall: avg(|p| p.kendall) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AverageMode {
    /// Correlate against the per-item mean of all annotators.
    #[default]
    MeanThenCorrelate,
    /// Average the per-annotator correlations.
    MeanOfCorrelations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorColumn {
    pub annotator_id: String,
    #[serde(flatten)]
    pub corr: CorrPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub n_items: usize,
    /// Items present in some but not all score sources.
    pub dropped_items: usize,
    pub average_mode: AverageMode,
    /// Each annotator is compared with the mean of the others instead of a model.
    pub upper_bound: bool,
    pub per_annotator: Vec<AnnotatorColumn>,
    pub manual_avg: CorrPair,
    pub ties: BTreeMap<String, TieInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReportError {
    #[error("no annotators given")]
    NoAnnotators,
    #[error("upper-bound mode needs at least two annotators")]
    UpperBoundNeedsTwo,
    #[error("duplicate annotator id `{0}`")]
    DuplicateAnnotator(String),
    #[error("no item is scored by every source")]
    EmptyJoin,
}

fn joined_ids(
    model: Option<&BTreeMap<String, f64>>,
    annotators: &[AnnotatorScores],
) -> (Vec<String>, usize) {
    let mut all: BTreeSet<&String> = BTreeSet::new();
    let mut sets: Vec<BTreeSet<&String>> = annotators.iter().map(|a| a.scores.keys().collect()).collect();
    if let Some(m) = model {
        sets.push(m.keys().collect());
    }
    for s in &sets {
        all.extend(s.iter().copied());
    }
    let joined: Vec<String> = all
        .iter()
        .filter(|id| sets.iter().all(|s| s.contains(*id)))
        .map(|s| s.to_string())
        .collect();
    let dropped = all.len() - joined.len();
    (joined, dropped)
}

fn series(a: &AnnotatorScores, ids: &[String]) -> Vec<f64> {
    ids.iter().map(|id| f64::from(a.scores[id])).collect()
}

fn mean_series(cols: &[Vec<f64>]) -> Vec<f64> {
    let n = cols.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| cols.iter().map(|c| c[i]).sum::<f64>() / cols.len() as f64)
        .collect()
}

fn check_annotators(annotators: &[AnnotatorScores]) -> Result<(), ReportError> {
    if annotators.is_empty() {
        return Err(ReportError::NoAnnotators);
    }
    let mut seen = BTreeSet::new();
    for a in annotators {
        if !seen.insert(&a.annotator_id) {
            return Err(ReportError::DuplicateAnnotator(a.annotator_id.clone()));
        }
    }
    Ok(())
}

/// Correlates model scores with each annotator and with the annotator
/// average, over the items every source has scored.
pub fn correlation_report(
    model_scores: &BTreeMap<String, f64>,
    annotators: &[AnnotatorScores],
    mode: AverageMode,
) -> Result<CorrelationReport, ReportError> {
    check_annotators(annotators)?;
    let (ids, dropped_items) = joined_ids(Some(model_scores), annotators);
    if ids.is_empty() {
        return Err(ReportError::EmptyJoin);
    }
    let model: Vec<f64> = ids.iter().map(|id| model_scores[id]).collect();
    let cols: Vec<Vec<f64>> = annotators.iter().map(|a| series(a, &ids)).collect();
    let per_annotator: Vec<AnnotatorColumn> = annotators
        .iter()
        .zip(&cols)
        .map(|(a, c)| AnnotatorColumn { annotator_id: a.annotator_id.clone(), corr: CorrPair::of(&model, c) })
        .collect();
    let manual_avg = match mode {
        AverageMode::MeanThenCorrelate => CorrPair::of(&model, &mean_series(&cols)),
        AverageMode::MeanOfCorrelations => {
            CorrPair::mean(&per_annotator.iter().map(|c| c.corr).collect::<Vec<_>>())
        }
    };
    let mut ties = BTreeMap::new();
    ties.insert("model".to_string(), tie_info(&model));
    for (a, c) in annotators.iter().zip(&cols) {
        ties.insert(a.annotator_id.clone(), tie_info(c));
    }
    Ok(CorrelationReport {
        n_items: ids.len(),
        dropped_items,
        average_mode: mode,
        upper_bound: false,
        per_annotator,
        manual_avg,
        ties,
    })
}

/// Human agreement ceiling: each annotator against the mean of the others.
/// The average column is the mean of those correlations.
pub fn upper_bound_report(annotators: &[AnnotatorScores]) -> Result<CorrelationReport, ReportError> {
    check_annotators(annotators)?;
    if annotators.len() < 2 {
        return Err(ReportError::UpperBoundNeedsTwo);
    }
    let (ids, dropped_items) = joined_ids(None, annotators);
    if ids.is_empty() {
        return Err(ReportError::EmptyJoin);
    }
    let cols: Vec<Vec<f64>> = annotators.iter().map(|a| series(a, &ids)).collect();
    let per_annotator: Vec<AnnotatorColumn> = annotators
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let others: Vec<Vec<f64>> =
                cols.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, c)| c.clone()).collect();
            AnnotatorColumn { annotator_id: a.annotator_id.clone(), corr: CorrPair::of(&cols[i], &mean_series(&others)) }
        })
        .collect();
    let manual_avg = CorrPair::mean(&per_annotator.iter().map(|c| c.corr).collect::<Vec<_>>());
    let ties = annotators.iter().zip(&cols).map(|(a, c)| (a.annotator_id.clone(), tie_info(c))).collect();
    Ok(CorrelationReport {
        n_items: ids.len(),
        dropped_items,
        average_mode: AverageMode::MeanOfCorrelations,
        upper_bound: true,
        per_annotator,
        manual_avg,
        ties,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

/// Text table with one row per method and a ρ/τ column pair per annotator
/// plus the average. Rows must share the annotator set.
pub fn format_table(rows: &[(String, CorrelationReport)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let mut header = vec!["Method".to_string()];
    for (i, _) in first.per_annotator.iter().enumerate() {
        header.push(format!("Manual-{} ρ", i + 1));
        header.push(format!("Manual-{} τ", i + 1));
    }
    header.push("Manual-Avg. ρ".into());
    header.push("Manual-Avg. τ".into());
    let mut body: Vec<Vec<String>> = Vec::new();
    for (name, r) in rows {
        let mut line = vec![name.clone()];
        for c in &r.per_annotator {
            line.push(cell(c.corr.spearman));
            line.push(cell(c.corr.kendall));
        }
        line.push(cell(r.manual_avg.spearman));
        line.push(cell(r.manual_avg.kendall));
        body.push(line);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            std::iter::once(&header)
                .chain(&body)
                .map(|r| r.get(i).map_or(0, |c| c.chars().count()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let fmt_row = |r: &[String]| {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<width$}", width = *w))
            .collect();
        format!("| {} |", cells.join(" | "))
    };
    let mut out = String::new();
    let _ = writeln!(out, "{}", fmt_row(&header));
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
    for r in &body {
        let _ = writeln!(out, "{}", fmt_row(r));
    }
    let _ = writeln!(out, "n_items = {}, dropped = {}", first.n_items, first.dropped_items);
    out
}

// ---------------------------------------------------------------------------
// Subjective evaluation

pub const SUBJECTIVE_MAX: u8 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectiveItem {
    #[serde(default)]
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    pub reference_explanation: String,
    pub generated_explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectiveReport {
    /// Per item; `None` when the judge never produced a valid score.
    pub scores: Vec<Option<u8>>,
    /// Mean over valid scores.
    pub mean: Option<f64>,
    pub failures: usize,
}

#[derive(Debug, Error)]
pub enum SubjectiveError {
    #[error("no items to score")]
    Empty,
    #[error("item {index}: {source}")]
    Render {
        index: usize,
        #[source]
        source: RenderError,
    },
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// A judge reply must be a bare integer from 0 to 5.
pub fn parse_subjective_score(reply: &str) -> Option<u8> {
    let t = reply.trim();
    (t.len() == 1 && t.as_bytes()[0].is_ascii_digit())
        .then(|| t.as_bytes()[0] - b'0')
        .filter(|v| *v <= SUBJECTIVE_MAX)
}

/// Scores generated explanations against references with one judge call per
/// item, re-asking up to `retries` times when the reply is not a bare score.
pub async fn subjective_eval(
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
    items: &[SubjectiveItem],
    kind: SubjectiveKind,
    retries: u32,
    concurrency: usize,
) -> Result<SubjectiveReport, SubjectiveError> {
    if items.is_empty() {
        return Err(SubjectiveError::Empty);
    }
    let prompts: Vec<String> = items
        .iter()
        .enumerate()
        .map(|(index, it)| {
            let question = match kind {
                SubjectiveKind::Fine => it.question.as_deref(),
                SubjectiveKind::Coarse => None,
            };
            templates
                .render_subjective(kind, question, &it.reference_explanation, &it.generated_explanation)
                .map_err(|source| SubjectiveError::Render { index, source })
        })
        .collect::<Result<_, _>>()?;
    let scores: Vec<Option<u8>> = stream::iter(prompts)
        .map(|p| async move {
            for _ in 0..=retries {
                let reply = backend.chat(&[ChatMessage::user(p.clone())]).await?;
                if let Some(s) = parse_subjective_score(&reply) {
                    return Ok::<_, ClientError>(Some(s));
                }
            }
            Ok(None)
        })
        .buffered(concurrency.max(1))
        .try_collect()
        .await?;
    let valid: Vec<u8> = scores.iter().flatten().copied().collect();
    let mean = (!valid.is_empty())
        .then(|| valid.iter().map(|&v| f64::from(v)).sum::<f64>() / valid.len() as f64);
    Ok(SubjectiveReport { failures: scores.len() - valid.len(), scores, mean })
}
