//! Independent reference implementations and generators shared by the
//! integration tests.
#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore};
use tdeval::record::{AttributePair, Entity, ExtractionResult, Question, QuestionKind, Relationship};

/// Average ranks (1-based) with ties sharing the mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let below = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Spearman as Pearson over average ranks; `None` when undefined.
pub fn spearman_oracle(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    pearson(&ranks(xs), &ranks(ys))
}

/// Kendall tau-b by exhaustive pair counting.
pub fn kendall_oracle(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = (xs[i] - xs[j]).signum() as i64 * (xs[i] != xs[j]) as i64;
            let dy = (ys[i] - ys[j]).signum() as i64 * (ys[i] != ys[j]) as i64;
            match (dx, dy) {
                (0, 0) => {}
                (0, _) => tx += 1,
                (_, 0) => ty += 1,
                _ if dx == dy => c += 1,
                _ => d += 1,
            }
        }
    }
    let denom = (((c + d + tx) * (c + d + ty)) as f64).sqrt();
    (denom > 0.0).then(|| (c - d) as f64 / denom)
}

/// Third quartile by sorting and linear interpolation, rounded half up.
pub fn q3_oracle(counts: &[usize]) -> Option<usize> {
    let mut a: Vec<f64> = counts.iter().filter(|&&c| c > 0).map(|&c| c as f64).collect();
    if a.is_empty() {
        return None;
    }
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let pos = 0.75 * (a.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let v = if lo + 1 < a.len() { a[lo] + (pos - lo as f64) * (a[lo + 1] - a[lo]) } else { a[lo] };
    Some((v + 0.5).floor() as usize)
}

const NAMES: &[&str] = &[
    "cat", "dog", "teddy bear", "traffic light", "umbrella", "boy", "girl", "fire hydrant", "kite",
    "apple", "mug", "laptop", "horse", "bicycle", "sailboat", "owl", "piano", "lamp post",
];
const TYPES: &[&str] = &["color", "size", "material", "shape", "texture", "pattern", "state", "age"];
const VALUES: &[&str] = &[
    "red", "light blue", "wooden", "round", "fluffy", "striped", "broken", "old", "tiny", "shiny metal",
    "green", "tall", "glass", "square", "smooth", "dotted", "open", "young",
];
const RELS: &[&str] = &["next to", "on top of", "holding", "behind", "chasing", "under", "riding"];

/// A random valid extraction in canonical order.
pub fn random_extraction(rng: &mut impl RngCore) -> ExtractionResult {
    let n = rng.random_range(1..=4usize);
    let names: Vec<&str> = NAMES.choose_multiple(rng, n).copied().collect();
    let mut entities = Vec::new();
    for name in &names {
        let mut attributes = vec![
            AttributePair::new("existence", "yes"),
            AttributePair::new("quantity", *["one", "two", "unspecified", "several"].choose(rng).unwrap()),
        ];
        let k = rng.random_range(0..=3usize);
        for t in TYPES.choose_multiple(rng, k) {
            attributes.push(AttributePair::new(*t, *VALUES.choose(rng).unwrap()));
        }
        entities.push(Entity { name: name.to_string(), attributes });
    }
    let mut relationships = Vec::new();
    if n >= 2 {
        for _ in 0..rng.random_range(0..=2usize) {
            let k = if n >= 3 && rng.random_bool(0.2) { 3 } else { 2 };
            let involved: Vec<String> = names.choose_multiple(rng, k).map(|s| s.to_string()).collect();
            let rel = *RELS.choose(rng).unwrap();
            let value = format!("the {} is {rel} the {}", involved[0], involved[1..].join(" and the "));
            relationships.push(Relationship { rel_type: rel.to_string(), entities_involved: involved, value });
        }
    }
    let mut questions = Vec::new();
    let q = |kind, text: String, subjects: Vec<String>| Question { qid: String::new(), kind, text, subject_entities: subjects };
    for e in &entities {
        questions.push(q(QuestionKind::Appearance, format!("Does the {} look realistic and natural?", e.name), vec![e.name.clone()]));
    }
    for e in &entities {
        for a in &e.attributes {
            let text = match a.attr_type.as_str() {
                "existence" => format!("Is there a {} in the image?", e.name),
                "quantity" => format!("How many {}s are there?", e.name),
                t => format!("What is the {t} of the {}?", e.name),
            };
            questions.push(q(QuestionKind::Intrinsic, text, vec![e.name.clone()]));
        }
    }
    for r in &relationships {
        questions.push(q(
            QuestionKind::Relationship,
            format!("Is the {} {} the {}?", r.entities_involved[0], r.rel_type, r.entities_involved[1]),
            r.entities_involved.clone(),
        ));
    }
    let mut x = ExtractionResult { entities, relationships, questions };
    x.canonicalize();
    x
}

/// Stage-independent failure classification of an extraction transcript.
pub fn classify(raw: &str) -> Option<tdeval::record::FailureKind> {
    tdeval::parser::detect_failure(raw)
        .map(|f| f.kind)
        .or_else(|| tdeval::parser::parse_extraction(raw).failure_kind())
}

/// Every `.md` file under `tests/fixtures/<name>`, sorted by file name.
pub fn corpus(name: &str) -> Vec<(String, String)> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    let mut out: Vec<(String, String)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "md"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read_to_string(&p).unwrap()))
        .collect();
    out.sort();
    out
}
