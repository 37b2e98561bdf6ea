//! Deterministic offline judge.
//!
//! A [`SceneSpec`] describes what an "image" really contains: entities with
//! their true attributes, relationships, per-entity appearance quality and a
//! corruption list (what the image got wrong). Scenes render to prompt text
//! in a small grammar and travel inside 1×1 placeholder PNGs as a metadata
//! chunk, so the judge can read the truth from the image alone.
//!
//! The judge answers every framework prompt with a template-conformant
//! transcript:
//!
//! * extraction parses the prompt text back through the grammar;
//! * answering reads the scene from the attached image;
//! * scoring compares answers with the structure text: an exact expected
//!   answer scores 10, a "does not exist" answer 0, anything else 2.
//!
//! Overall scores follow [`ground_truth_score`], so a correct pipeline run
//! reproduces the ground truth exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use async_trait::async_trait;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use parking_lot::Mutex;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::client::{ChatBackend, ChatMessage, ClientError};
use crate::images::{self, ImageError};
use crate::parser::{self, AnswerBlock};
use crate::prompts::{unescape_braces, TemplateId};
use crate::record::{
    name_key, AttributePair, Entity, EvaluationRecord, ExtractionResult, Generator, ImageRef,
    PromptSource, Question, QuestionKind, Relationship, TextPrompt, EXISTENCE, QUANTITY,
};

pub const NOUNS: &[&str] = &[
    "cat", "dog", "car", "ball", "cup", "book", "chair", "lamp", "bird", "horse", "apple", "clock",
    "kite", "vase", "bottle", "umbrella", "hat", "boat", "bench", "guitar",
];
pub const COLORS: &[&str] = &[
    "red", "blue", "green", "black", "white", "yellow", "brown", "purple", "orange", "gray",
];
pub const SIZES: &[&str] = &["small", "large", "tiny", "huge"];
pub const MATERIALS: &[&str] = &["wooden", "metal", "plastic", "glass", "stone", "paper"];
pub const RELATIONS: &[&str] = &[
    "next to", "on top of", "under", "behind", "in front of", "to the left of", "to the right of",
    "above",
];
pub const QUANTITIES: &[&str] = &["one", "two", "three"];

/// Metadata key of the scene chunk inside placeholder images.
pub const SCENE_KEY: &str = "tdeval-scene";

const ABSENT: &str = "does not exist in the image";

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("prompt does not match any known template")]
    UnknownTemplate,
    #[error("could not locate `{0}` in the prompt")]
    Section(&'static str),
    #[error("prompt text is outside the scene grammar: {0}")]
    Grammar(String),
    #[error("the answering stage needs an image attachment")]
    MissingImage,
    #[error("image carries no scene: {0}")]
    Scene(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("structure information does not parse: {0}")]
    Structure(String),
    #[error("payload is not a {0:?} prompt")]
    StageMismatch(TemplateId),
    #[error("invalid scene parameters: {0}")]
    Params(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneEntity {
    pub name: String,
    pub quantity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<String>,
    pub color: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub material: Option<String>,
    /// How good the entity looks when rendered, 0 to 10.
    pub appearance: u8,
}

impl SceneEntity {
    /// Intrinsic attributes in extraction order.
    pub fn attributes(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![(EXISTENCE, "yes".to_string()), (QUANTITY, self.quantity.clone())];
        if let Some(s) = &self.size {
            out.push(("size", s.clone()));
        }
        out.push(("color", self.color.clone()));
        if let Some(m) = &self.material {
            out.push(("material", m.clone()));
        }
        out
    }

    fn attribute(&self, attr_type: &str) -> Option<String> {
        self.attributes().into_iter().find(|(t, _)| *t == attr_type).map(|(_, v)| v)
    }

    fn set_attribute(&mut self, attr_type: &str, value: &str) {
        match attr_type {
            QUANTITY => self.quantity = value.to_string(),
            "size" => self.size = Some(value.to_string()),
            "color" => self.color = value.to_string(),
            "material" => self.material = Some(value.to_string()),
            _ => {}
        }
    }

    fn phrase(&self) -> String {
        let plural = self.quantity != "one";
        let mut words: Vec<String> = Vec::new();
        words.extend(self.size.clone());
        words.push(self.color.clone());
        words.extend(self.material.clone());
        words.push(if plural { format!("{}s", self.name) } else { self.name.clone() });
        let det = match self.quantity.as_str() {
            "one" if words[0].starts_with(['a', 'e', 'i', 'o', 'u']) => "an".to_string(),
            "one" => "a".to_string(),
            q => q.to_string(),
        };
        format!("{det} {}", words.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRelation {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeCorruption {
    pub entity: String,
    pub attr_type: String,
    pub wrong_value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationCorruption {
    pub index: usize,
    pub wrong_relation: String,
}

/// What the image got wrong relative to the prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corruption {
    #[serde(default)]
    pub absent: Vec<String>,
    #[serde(default)]
    pub attributes: Vec<AttributeCorruption>,
    #[serde(default)]
    pub relations: Vec<RelationCorruption>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub entities: Vec<SceneEntity>,
    pub relations: Vec<SceneRelation>,
    #[serde(default)]
    pub corruption: Corruption,
}

impl SceneSpec {
    fn entity(&self, name: &str) -> Option<&SceneEntity> {
        let k = name_key(name);
        self.entities.iter().find(|e| name_key(&e.name) == k)
    }

    pub fn is_absent(&self, name: &str) -> bool {
        let k = name_key(name);
        self.corruption.absent.iter().any(|a| name_key(a) == k)
    }

    /// Every invariant a scene must satisfy; empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut names = Vec::new();
        for e in &self.entities {
            if e.appearance > 10 {
                out.push(format!("appearance of `{}` above 10", e.name));
            }
            if names.contains(&e.name) {
                out.push(format!("duplicate entity `{}`", e.name));
            }
            names.push(e.name.clone());
        }
        if self.entities.is_empty() {
            out.push("scene has no entities".into());
        }
        for r in &self.relations {
            if self.entity(&r.subject).is_none() || self.entity(&r.object).is_none() {
                out.push(format!("relation `{} {} {}` names an unknown entity", r.subject, r.relation, r.object));
            }
            if r.subject == r.object {
                out.push(format!("relation of `{}` with itself", r.subject));
            }
        }
        for a in &self.corruption.absent {
            if self.entity(a).is_none() {
                out.push(format!("absent entity `{a}` is not in the scene"));
            }
        }
        for c in &self.corruption.attributes {
            match self.entity(&c.entity) {
                None => out.push(format!("corruption names unknown entity `{}`", c.entity)),
                Some(e) => match e.attribute(&c.attr_type) {
                    None => out.push(format!("`{}` has no `{}` attribute to corrupt", c.entity, c.attr_type)),
                    Some(v) if v == c.wrong_value => {
                        out.push(format!("corruption of `{}` {} keeps the true value", c.entity, c.attr_type))
                    }
                    Some(_) if c.attr_type == EXISTENCE => {
                        out.push("existence is corrupted through `absent`".into())
                    }
                    Some(_) => {}
                },
            }
            if self.is_absent(&c.entity) {
                out.push(format!("attribute corruption on absent entity `{}`", c.entity));
            }
        }
        for c in &self.corruption.relations {
            match self.relations.get(c.index) {
                None => out.push(format!("relation corruption index {} out of range", c.index)),
                Some(r) if r.relation == c.wrong_relation => {
                    out.push(format!("relation corruption {} keeps the true relation", c.index))
                }
                Some(_) => {}
            }
        }
        out
    }

    /// The prompt describing the scene as intended.
    pub fn prompt_text(&self) -> String {
        let phrases: Vec<String> = self.entities.iter().map(SceneEntity::phrase).collect();
        let mut text = match phrases.len() {
            0 => String::new(),
            1 => phrases[0].clone(),
            n => format!("{} and {}", phrases[..n - 1].join(", "), phrases[n - 1]),
        };
        for r in &self.relations {
            let _ = write!(text, "; the {} is {} the {}", r.subject, r.relation, r.object);
        }
        text
    }

    /// What the image actually shows.
    pub fn observed(&self) -> Observed {
        let mut entities = self.entities.clone();
        for c in &self.corruption.attributes {
            if let Some(e) = entities.iter_mut().find(|e| name_key(&e.name) == name_key(&c.entity)) {
                e.set_attribute(&c.attr_type, &c.wrong_value);
            }
        }
        let mut relations = self.relations.clone();
        for c in &self.corruption.relations {
            if let Some(r) = relations.get_mut(c.index) {
                r.relation = c.wrong_relation.clone();
            }
        }
        let present = self.entities.iter().map(|e| !self.is_absent(&e.name)).collect();
        Observed { entities, present, relations }
    }

    /// Placeholder image carrying this scene.
    pub fn to_png(&self) -> Result<Vec<u8>, ImageError> {
        let json = serde_json::to_string(self).expect("scenes serialize");
        images::placeholder_png_with_text(SCENE_KEY, &json)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, OracleError> {
        let text = images::png_text(bytes, SCENE_KEY)?
            .ok_or_else(|| OracleError::Scene("no scene chunk".into()))?;
        serde_json::from_str(&text).map_err(|e| OracleError::Scene(e.to_string()))
    }
}

/// The scene as rendered in the image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observed {
    pub entities: Vec<SceneEntity>,
    pub present: Vec<bool>,
    pub relations: Vec<SceneRelation>,
}

impl Observed {
    fn find(&self, name: &str) -> Option<(&SceneEntity, bool)> {
        let k = name_key(name);
        self.entities
            .iter()
            .zip(&self.present)
            .find(|(e, _)| name_key(&e.name) == k)
            .map(|(e, p)| (e, *p))
    }

    fn relation(&self, a: &str, b: &str) -> Option<&SceneRelation> {
        let (a, b) = (name_key(a), name_key(b));
        self.relations.iter().find(|r| {
            let (s, o) = (name_key(&r.subject), name_key(&r.object));
            (s == a && o == b) || (s == b && o == a)
        })
    }
}

/// Knobs for [`generate_scene`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub entities: usize,
    pub relationships: usize,
    pub p_absent: f64,
    pub p_attribute: f64,
    pub p_relation: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self { entities: 2, relationships: 1, p_absent: 0.15, p_attribute: 0.2, p_relation: 0.2 }
    }
}

fn pick_other<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str], not: &str) -> &'a str {
    let options: Vec<&str> = pool.iter().copied().filter(|v| *v != not).collect();
    options.choose(rng).copied().expect("pools have at least two values")
}

/// Random scene; identical for identical seed and parameters.
pub fn generate_scene(seed: u64, params: SceneParams) -> Result<SceneSpec, OracleError> {
    let n = params.entities;
    if n == 0 || n > NOUNS.len() {
        return Err(OracleError::Params(format!("entities must be between 1 and {}", NOUNS.len())));
    }
    if params.relationships > n * (n - 1) / 2 {
        return Err(OracleError::Params(format!(
            "{} relationships need more than {n} entities",
            params.relationships
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nouns = NOUNS.to_vec();
    nouns.shuffle(&mut rng);
    let entities: Vec<SceneEntity> = nouns[..n]
        .iter()
        .map(|noun| SceneEntity {
            name: noun.to_string(),
            quantity: QUANTITIES.choose(&mut rng).expect("non-empty").to_string(),
            size: rng.random_bool(0.4).then(|| SIZES.choose(&mut rng).expect("non-empty").to_string()),
            color: COLORS.choose(&mut rng).expect("non-empty").to_string(),
            material: rng.random_bool(0.4).then(|| MATERIALS.choose(&mut rng).expect("non-empty").to_string()),
            appearance: rng.random_range(0..=10),
        })
        .collect();
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    pairs.shuffle(&mut rng);
    let relations: Vec<SceneRelation> = pairs[..params.relationships]
        .iter()
        .map(|&(i, j)| {
            let (s, o) = if rng.random_bool(0.5) { (i, j) } else { (j, i) };
            SceneRelation {
                subject: entities[s].name.clone(),
                relation: RELATIONS.choose(&mut rng).expect("non-empty").to_string(),
                object: entities[o].name.clone(),
            }
        })
        .collect();

    let mut corruption = Corruption::default();
    for e in &entities {
        if rng.random_bool(params.p_absent) {
            corruption.absent.push(e.name.clone());
            continue;
        }
        for (t, v) in e.attributes().into_iter().skip(1) {
            if rng.random_bool(params.p_attribute) {
                let pool = match t {
                    QUANTITY => QUANTITIES,
                    "size" => SIZES,
                    "color" => COLORS,
                    _ => MATERIALS,
                };
                corruption.attributes.push(AttributeCorruption {
                    entity: e.name.clone(),
                    attr_type: t.to_string(),
                    wrong_value: pick_other(&mut rng, pool, &v).to_string(),
                });
            }
        }
    }
    for (index, r) in relations.iter().enumerate() {
        if rng.random_bool(params.p_relation) {
            corruption.relations.push(RelationCorruption {
                index,
                wrong_relation: pick_other(&mut rng, RELATIONS, &r.relation).to_string(),
            });
        }
    }
    Ok(SceneSpec { entities, relations, corruption })
}

fn round_half_up_div(p: u64, q: u64) -> u64 {
    (2 * p + q) / (2 * q)
}

/// Expected overall score: start at 10, subtract 3 per failed check (a
/// question about an absent entity, a wrong attribute, a wrong or unsupported
/// relationship), floor at 0, average with the mean appearance (0 for absent
/// entities), round half up.
pub fn ground_truth_score(scene: &SceneSpec) -> u8 {
    let mut failed = 0u64;
    for e in &scene.entities {
        if scene.is_absent(&e.name) {
            failed += e.attributes().len() as u64;
        } else {
            failed += scene
                .corruption
                .attributes
                .iter()
                .filter(|c| name_key(&c.entity) == name_key(&e.name))
                .count() as u64;
        }
    }
    for (i, r) in scene.relations.iter().enumerate() {
        let corrupted = scene.corruption.relations.iter().any(|c| c.index == i);
        if corrupted || scene.is_absent(&r.subject) || scene.is_absent(&r.object) {
            failed += 1;
        }
    }
    let n = scene.entities.len() as u64;
    let appearance: u64 = scene
        .entities
        .iter()
        .map(|e| if scene.is_absent(&e.name) { 0 } else { u64::from(e.appearance) })
        .sum();
    let base = 10u64.saturating_sub(3 * failed);
    round_half_up_div(base * n + appearance, 2 * n) as u8
}

// ---------------------------------------------------------------------------
// Grammar

/// Reads prompt text produced by [`SceneSpec::prompt_text`] back into a
/// corruption-free scene (appearance unknown, set to 0).
pub fn parse_prompt(text: &str) -> Result<SceneSpec, OracleError> {
    let err = |m: String| OracleError::Grammar(m);
    let mut clauses = text.trim().split("; ");
    let list = clauses.next().unwrap_or_default();
    let mut phrases: Vec<&str> = Vec::new();
    match list.rsplit_once(" and ") {
        Some((head, last)) => {
            phrases.extend(head.split(", "));
            phrases.push(last);
        }
        None => phrases.push(list),
    }
    let mut entities = Vec::new();
    for p in phrases {
        let words: Vec<&str> = p.split_whitespace().collect();
        if words.len() < 3 {
            return Err(err(format!("entity phrase `{p}` is too short")));
        }
        let quantity = match words[0] {
            "a" | "an" => "one",
            q if QUANTITIES.contains(&q) && q != "one" => q,
            other => return Err(err(format!("unknown determiner `{other}`"))),
        };
        let mut rest = &words[1..];
        let size = SIZES.contains(&rest[0]).then(|| rest[0].to_string());
        if size.is_some() {
            rest = &rest[1..];
        }
        let Some((&color, tail)) = rest.split_first().filter(|(c, _)| COLORS.contains(c)) else {
            return Err(err(format!("entity phrase `{p}` has no color")));
        };
        rest = tail;
        let material = rest.first().filter(|m| MATERIALS.contains(m)).map(|m| m.to_string());
        if material.is_some() {
            rest = &rest[1..];
        }
        let [noun] = rest else {
            return Err(err(format!("entity phrase `{p}` does not end in a single noun")));
        };
        let name = if quantity == "one" { noun.to_string() } else { noun.strip_suffix('s').unwrap_or(noun).to_string() };
        if !NOUNS.contains(&name.as_str()) {
            return Err(err(format!("unknown noun `{noun}`")));
        }
        entities.push(SceneEntity {
            name,
            quantity: quantity.to_string(),
            size,
            color: color.to_string(),
            material,
            appearance: 0,
        });
    }
    let mut relations = Vec::new();
    for c in clauses {
        let body = c.strip_prefix("the ").ok_or_else(|| err(format!("clause `{c}`")))?;
        let (subject, rest) = body.split_once(" is ").ok_or_else(|| err(format!("clause `{c}`")))?;
        let (relation, object) = rest.rsplit_once(" the ").ok_or_else(|| err(format!("clause `{c}`")))?;
        if !RELATIONS.contains(&relation) {
            return Err(err(format!("unknown relation `{relation}`")));
        }
        relations.push(SceneRelation {
            subject: subject.to_string(),
            relation: relation.to_string(),
            object: object.to_string(),
        });
    }
    let scene = SceneSpec { entities, relations, corruption: Corruption::default() };
    let v = scene.violations();
    if !v.is_empty() {
        return Err(err(v.join("; ")));
    }
    Ok(scene)
}

fn appearance_question(name: &str) -> String {
    format!("Does the {name} look realistic and natural?")
}

fn attribute_question(name: &str, attr_type: &str) -> String {
    match attr_type {
        EXISTENCE => format!("Does the {name} exist in the image?"),
        QUANTITY => format!("How many {name}s are there in the image?"),
        t => format!("What is the {t} of the {name}?"),
    }
}

fn relation_question(a: &str, b: &str) -> String {
    format!("What is the relationship between the {a} and the {b}?")
}

fn question_attribute(text: &str) -> Option<String> {
    if text.starts_with("Does the ") && text.ends_with(" exist in the image?") {
        return Some(EXISTENCE.into());
    }
    if text.starts_with("How many ") {
        return Some(QUANTITY.into());
    }
    let rest = text.strip_prefix("What is the ")?;
    rest.split_once(" of the ").map(|(t, _)| t.to_string())
}

fn relation_value(r: &SceneRelation) -> String {
    format!("the {} is {} the {}", r.subject, r.relation, r.object)
}

/// The extraction a perfect stage-one judge produces for a scene's prompt.
pub fn extraction_for(scene: &SceneSpec) -> ExtractionResult {
    let entities: Vec<Entity> = scene
        .entities
        .iter()
        .map(|e| Entity {
            name: e.name.clone(),
            attributes: e.attributes().into_iter().map(|(t, v)| AttributePair::new(t, v)).collect(),
        })
        .collect();
    let relationships: Vec<Relationship> = scene
        .relations
        .iter()
        .map(|r| Relationship {
            rel_type: r.relation.clone(),
            entities_involved: vec![r.subject.clone(), r.object.clone()],
            value: relation_value(r),
        })
        .collect();
    let mut questions = Vec::new();
    for e in &entities {
        questions.push(Question {
            qid: String::new(),
            kind: QuestionKind::Appearance,
            text: appearance_question(&e.name),
            subject_entities: vec![e.name.clone()],
        });
    }
    for e in &entities {
        for a in &e.attributes {
            questions.push(Question {
                qid: String::new(),
                kind: QuestionKind::Intrinsic,
                text: attribute_question(&e.name, &a.attr_type),
                subject_entities: vec![e.name.clone()],
            });
        }
    }
    for r in &scene.relations {
        questions.push(Question {
            qid: String::new(),
            kind: QuestionKind::Relationship,
            text: relation_question(&r.subject, &r.object),
            subject_entities: vec![r.subject.clone(), r.object.clone()],
        });
    }
    let mut x = ExtractionResult { entities, relationships, questions };
    x.canonicalize();
    x
}

// ---------------------------------------------------------------------------
// Judge

fn absent_answer(name: &str) -> String {
    format!("The {name} {ABSENT}.")
}

fn attribute_answer(name: &str, attr_type: &str, value: &str) -> String {
    if attr_type == EXISTENCE {
        format!("The {name} exists in the image.")
    } else {
        format!("The {attr_type} of the {name} is {value}.")
    }
}

fn relation_answer(r: &SceneRelation) -> String {
    format!("The {} is {} the {}.", r.subject, r.relation, r.object)
}

/// Stage-two reading of the image for one question block.
fn observe(block: &AnswerBlock, seen: &Observed) -> (String, Option<String>, Option<u8>) {
    match block.kind {
        QuestionKind::Appearance => {
            let name = block.subjects.first().map(String::as_str).unwrap_or("");
            match seen.find(name) {
                Some((e, true)) => (
                    String::new(),
                    Some(format!(
                        "The {} is rendered with appearance quality {} out of 10.",
                        e.name, e.appearance
                    )),
                    Some(e.appearance),
                ),
                _ => (String::new(), Some(format!("The {name} does not appear in the image.")), Some(0)),
            }
        }
        QuestionKind::Intrinsic => {
            let name = block.subjects.first().map(String::as_str).unwrap_or("");
            let answer = match (seen.find(name), question_attribute(&block.question)) {
                (Some((_, false)), _) | (None, _) => absent_answer(name),
                (Some((e, true)), Some(t)) => match e.attribute(&t) {
                    Some(v) => attribute_answer(&e.name, &t, &v),
                    None => format!("The image shows no particular {t} for the {}.", e.name),
                },
                (Some((e, true)), None) => format!("The image does not make this clear for the {}.", e.name),
            };
            (answer, None, None)
        }
        QuestionKind::Relationship => {
            let (a, b) = match block.subjects.as_slice() {
                [a, b, ..] => (a.as_str(), b.as_str()),
                _ => ("", ""),
            };
            let answer = if let Some(missing) = [a, b].into_iter().find(|n| !matches!(seen.find(n), Some((_, true)))) {
                absent_answer(missing)
            } else {
                match seen.relation(a, b) {
                    Some(r) => relation_answer(r),
                    None => format!("The {a} and the {b} are not related in any visible way."),
                }
            };
            (answer, None, None)
        }
    }
}

fn captions(seen: &Observed) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (e, present) in seen.entities.iter().zip(&seen.present) {
        if !present {
            continue;
        }
        let mut c = e.phrase();
        for r in &seen.relations {
            let object_present = matches!(seen.find(&r.object), Some((_, true)));
            if name_key(&r.subject) == name_key(&e.name) && object_present {
                let _ = write!(c, ", {} the {}", r.relation, r.object);
            }
        }
        out.push((e.name.clone(), c));
    }
    if out.is_empty() {
        out.push(("scene".into(), "an empty scene without any of the requested objects".into()));
    }
    out
}

/// Ground truth as read from text: entity attributes and relationships.
struct Truth {
    entities: Vec<Entity>,
    relationships: Vec<Relationship>,
}

impl Truth {
    fn from_extraction(x: ExtractionResult) -> Self {
        Self { entities: x.entities, relationships: x.relationships }
    }

    fn from_scene(s: &SceneSpec) -> Self {
        Self::from_extraction(extraction_for(s))
    }

    fn expected(&self, block: &AnswerBlock) -> Option<String> {
        match block.kind {
            QuestionKind::Appearance => None,
            QuestionKind::Intrinsic => {
                let name = block.subjects.first()?;
                let e = self.entities.iter().find(|e| name_key(&e.name) == name_key(name))?;
                let t = question_attribute(&block.question)?;
                let a = e.attribute(&t)?;
                Some(attribute_answer(&e.name, &a.attr_type, &a.value))
            }
            QuestionKind::Relationship => {
                let [a, b, ..] = block.subjects.as_slice() else {
                    return None;
                };
                let (a, b) = (name_key(a), name_key(b));
                let r = self.relationships.iter().find(|r| {
                    let names: Vec<String> = r.entities_involved.iter().map(|n| name_key(n)).collect();
                    names.contains(&a) && names.contains(&b)
                })?;
                let (s, o) = (r.entities_involved.first()?, r.entities_involved.get(1)?);
                Some(relation_answer(&SceneRelation {
                    subject: s.clone(),
                    relation: r.rel_type.clone(),
                    object: o.clone(),
                }))
            }
        }
    }
}

/// Stage-three judgement of one answered block: (explanation, score).
fn judge(block: &AnswerBlock, truth: &Truth) -> (String, u8) {
    let who = block.subjects.join(" and the ");
    if block.kind == QuestionKind::Appearance {
        let score = block.score.as_deref().and_then(|s| parser::parse_score(s).ok()).unwrap_or(0);
        return (format!("Appearance of the {who} was rated {score} out of 10 from the image."), score);
    }
    let answer = block.answer.as_deref().unwrap_or("").trim();
    let expected = truth.expected(block);
    if answer.contains(ABSENT) {
        return (format!("The {who} is missing from the image, so this check fails: {}", block.question), 0);
    }
    match expected {
        Some(exp) if exp == answer => (format!("The answer agrees with the ground truth: {exp}"), 10),
        Some(exp) => (format!("The answer `{answer}` disagrees with the ground truth `{exp}`."), 2),
        None => (format!("The ground truth has nothing that supports `{answer}`."), 2),
    }
}

struct Judged {
    block: AnswerBlock,
    explanation: String,
    score: u8,
}

fn mean_round(scores: &[u8]) -> u8 {
    if scores.is_empty() {
        return 10;
    }
    let sum: u64 = scores.iter().map(|&s| u64::from(s)).sum();
    round_half_up_div(sum, scores.len() as u64) as u8
}

fn summaries(judged: &[Judged]) -> [(String, u8); 4] {
    let of = |k: QuestionKind| -> Vec<u8> { judged.iter().filter(|j| j.block.kind == k).map(|j| j.score).collect() };
    let appearance = of(QuestionKind::Appearance);
    let intrinsic = of(QuestionKind::Intrinsic);
    let relation = of(QuestionKind::Relationship);
    let failed = intrinsic.iter().chain(&relation).filter(|&&s| s < 10).count() as u64;
    let n = appearance.len().max(1) as u64;
    let base = 10u64.saturating_sub(3 * failed);
    let app_sum: u64 = appearance.iter().map(|&s| u64::from(s)).sum();
    let overall = round_half_up_div(base * n + app_sum, 2 * n) as u8;
    [
        (format!("Mean appearance over {} entities.", appearance.len()), mean_round(&appearance)),
        (
            format!("{} of {} intrinsic checks passed.", intrinsic.iter().filter(|&&s| s == 10).count(), intrinsic.len()),
            mean_round(&intrinsic),
        ),
        (
            format!("{} of {} relationship checks passed.", relation.iter().filter(|&&s| s == 10).count(), relation.len()),
            mean_round(&relation),
        ),
        (format!("{failed} failed checks give a base of {base}, averaged with appearance."), overall),
    ]
}

fn render_evaluation(out: &mut String, judged: &[Judged], with_text: bool) {
    out.push_str("# Evaluation\n");
    let titles = [
        "Appearance Quality Answers",
        "Intrinsic Attribute Consistency Answers",
        "Relationship Attribute Consistency Answers",
    ];
    for (kind, title) in QuestionKind::ALL.into_iter().zip(titles) {
        let _ = writeln!(out, "## {title}");
        let mut header: Option<String> = None;
        let mut n = 0;
        for j in judged.iter().filter(|j| j.block.kind == kind) {
            if kind != QuestionKind::Relationship {
                let subject = j.block.subjects.first().cloned().unwrap_or_default();
                if header.as_deref() != Some(subject.as_str()) {
                    let _ = writeln!(out, "### {subject}");
                    header = Some(subject);
                    n = 0;
                }
            }
            n += 1;
            if kind == QuestionKind::Appearance {
                let _ = writeln!(out, "- question: {}", j.block.question);
            } else {
                let _ = writeln!(out, "- question {n}: {}", j.block.question);
            }
            if kind == QuestionKind::Relationship {
                let _ = writeln!(out, "  - entities: {}", j.block.subjects.join(", "));
            }
            if with_text {
                if kind != QuestionKind::Appearance {
                    let _ = writeln!(out, "  - answer: {}", j.block.answer.as_deref().unwrap_or(""));
                }
                let _ = writeln!(out, "  - explanation: {}", j.explanation);
            }
            let _ = writeln!(out, "  - score: {}", j.score);
        }
        out.push('\n');
    }
    out.push_str("## Overall Evaluation\n");
    let labels = [
        "Appearance Quality Summary",
        "Intrinsic Attribute Consistency Summary",
        "Relationship Attribute Consistency Summary",
        "Overall Score",
    ];
    for (label, (explanation, score)) in labels.into_iter().zip(summaries(judged)) {
        let _ = writeln!(out, "- {label}:");
        if with_text {
            let _ = writeln!(out, "  - explanation: {explanation}");
        }
        let _ = writeln!(out, "  - score: {score}");
    }
}

fn render_captions(out: &mut String, seen: &Observed) {
    out.push_str("# Image Caption\n");
    for (name, caption) in captions(seen) {
        let _ = writeln!(out, "## {name}\n- caption: {caption}");
    }
    out.push('\n');
}

fn render_answers(out: &mut String, blocks: &[AnswerBlock], seen: &Observed) {
    out.push_str("# Answers\n");
    let titles = [
        "Appearance Quality Questions",
        "Intrinsic Attribute Consistency Questions",
        "Relationship Attribute Consistency Questions",
    ];
    for (kind, title) in QuestionKind::ALL.into_iter().zip(titles) {
        let _ = writeln!(out, "## {title}");
        let mut header: Option<String> = None;
        let mut n = 0;
        for b in blocks.iter().filter(|b| b.kind == kind) {
            if kind != QuestionKind::Relationship {
                let subject = b.subjects.first().cloned().unwrap_or_default();
                if header.as_deref() != Some(subject.as_str()) {
                    let _ = writeln!(out, "### {subject}");
                    header = Some(subject);
                    n = 0;
                }
            }
            n += 1;
            let (answer, explanation, score) = observe(b, seen);
            match kind {
                QuestionKind::Appearance => {
                    let _ = writeln!(out, "- question: {}", b.question);
                    let _ = writeln!(out, "  - explanation: {}", explanation.unwrap_or_default());
                    let _ = writeln!(out, "  - score: {}", score.unwrap_or(0));
                }
                QuestionKind::Intrinsic => {
                    let _ = writeln!(out, "- question {n}: {}", b.question);
                    let _ = writeln!(out, "  - answer: {answer}");
                }
                QuestionKind::Relationship => {
                    let _ = writeln!(out, "- question {n}: {}", b.question);
                    let _ = writeln!(out, "  - entities: {}", b.subjects.join(", "));
                    let _ = writeln!(out, "  - answer: {answer}");
                }
            }
        }
        out.push('\n');
    }
}

/// Text between `start` and the earliest of `ends`, braces unescaped.
fn slot<'a>(text: &'a str, start: &str, ends: &[&str], what: &'static str) -> Result<String, OracleError> {
    let from = text.find(start).ok_or(OracleError::Section(what))? + start.len();
    let rest: &'a str = &text[from..];
    let to = ends.iter().filter_map(|e| rest.find(e)).min().ok_or(OracleError::Section(what))?;
    Ok(unescape_braces(rest[..to].trim()))
}

fn text_prompt_slot(prompt: &str, id: TemplateId) -> Result<String, OracleError> {
    match id {
        TemplateId::Ece | TemplateId::EceDirect => {
            slot(prompt, "The text is: ", &["\n\n# Extraction Pipeline", "\n\n# Question Pipeline"], "text prompt")
        }
        _ => slot(prompt, "The text prompt is the sole ground truth: ", &["\n\n# Scoring Strategy"], "text prompt"),
    }
}

fn questions_slot(prompt: &str) -> Result<Vec<AnswerBlock>, OracleError> {
    let doc = slot(prompt, "The questions are: ", &["\n2. Target Image"], "questions")?;
    Ok(parser::parse_answer_blocks(&doc))
}

fn structure_slot(prompt: &str) -> Result<Truth, OracleError> {
    let doc = slot(
        prompt,
        "The structured information is the sole ground truth: ",
        &["\n\n# Scoring Strategy", "\n\n# Pipeline"],
        "structure information",
    )?;
    parser::parse_extraction(&doc)
        .into_result()
        .map(Truth::from_extraction)
        .map_err(|f| OracleError::Structure(f.to_string()))
}

fn scene_from(images: &[Vec<u8>]) -> Result<SceneSpec, OracleError> {
    let first = images.first().ok_or(OracleError::MissingImage)?;
    SceneSpec::from_png(first)
}

fn judge_all(blocks: Vec<AnswerBlock>, truth: &Truth) -> Vec<Judged> {
    blocks
        .into_iter()
        .map(|block| {
            let (explanation, score) = judge(&block, truth);
            Judged { block, explanation, score }
        })
        .collect()
}

/// Answers blocks from the image, as stage two would, for single-pass variants.
fn answered(blocks: Vec<AnswerBlock>, seen: &Observed) -> Vec<AnswerBlock> {
    blocks
        .into_iter()
        .map(|mut b| {
            let (answer, _, score) = observe(&b, seen);
            b.answer = Some(answer);
            b.score = score.map(|s| s.to_string());
            b
        })
        .collect()
}

/// Produces the transcript for one rendered prompt. `images` are the raw
/// bytes of the attachments, target first.
pub fn respond(prompt: &str, images: &[Vec<u8>]) -> Result<String, OracleError> {
    let id = TemplateId::detect(prompt).ok_or(OracleError::UnknownTemplate)?;
    let mut out = String::new();
    match id {
        TemplateId::Ece => {
            let scene = parse_prompt(&text_prompt_slot(prompt, id)?)?;
            out = parser::render_extraction_doc(&extraction_for(&scene))
                .map_err(|v| OracleError::Grammar(format!("{v:?}")))?;
        }
        TemplateId::EceDirect => {
            let scene = parse_prompt(&text_prompt_slot(prompt, id)?)?;
            out.push_str("# Questions\n");
            out.push_str(&parser::render_questions_doc(&extraction_for(&scene).questions));
        }
        TemplateId::Cag | TemplateId::CagNoCaption => {
            let seen = scene_from(images)?.observed();
            let blocks = questions_slot(prompt)?;
            if id == TemplateId::Cag {
                render_captions(&mut out, &seen);
            }
            render_answers(&mut out, &blocks, &seen);
        }
        TemplateId::Es | TemplateId::EsDirect => {
            let doc = slot(prompt, "The provided answer is: ", &["\n\n2. Ground Truth"], "answers")?;
            let truth = if id == TemplateId::Es {
                structure_slot(prompt)?
            } else {
                Truth::from_scene(&parse_prompt(&text_prompt_slot(prompt, id)?)?)
            };
            render_evaluation(&mut out, &judge_all(parser::parse_answer_blocks(&doc), &truth), true);
        }
        TemplateId::ScoreDirect | TemplateId::Merged => {
            let seen = scene_from(images)?.observed();
            let truth = structure_slot(prompt)?;
            let blocks = answered(questions_slot(prompt)?, &seen);
            if id == TemplateId::Merged {
                render_captions(&mut out, &seen);
            }
            render_evaluation(&mut out, &judge_all(blocks, &truth), id == TemplateId::Merged);
        }
        TemplateId::SubjectiveFine | TemplateId::SubjectiveCoarse => {
            let ends = ["\n\n# Reference Explanation", "\n\n# Output Instructions"];
            let gen = slot(prompt, "# Explanation to be Evaluated\n", &ends, "generated")?;
            let reference = if id == TemplateId::SubjectiveFine {
                slot(prompt, "# Reference Explanation\n", &ends[1..], "reference")?
            } else {
                slot(prompt, "# Questions and Reference Explanation\n", &["\n\n# Explanation to be Evaluated"], "reference")?
            };
            out = if name_key(&gen) == name_key(&reference) { "5" } else { "3" }.to_string();
        }
    }
    Ok(out.trim_end().to_string() + "\n")
}

/// Like [`respond`], with the stage stated up front and the scene passed
/// directly instead of inside an image.
pub fn oracle_judge(stage: TemplateId, payload: &str, scene: Option<&SceneSpec>) -> Result<String, OracleError> {
    if TemplateId::detect(payload) != Some(stage) {
        return Err(OracleError::StageMismatch(stage));
    }
    let images = match scene {
        Some(s) => vec![s.to_png()?],
        None => Vec::new(),
    };
    respond(payload, &images)
}

/// The oracle as an in-process chat backend. Image attachments are read
/// from disk.
#[derive(Debug, Default, Clone)]
pub struct OracleJudge;

#[async_trait]
impl ChatBackend for OracleJudge {
    async fn chat(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        let last = messages.last().ok_or_else(|| ClientError::Protocol("no messages".into()))?;
        let mut bytes = Vec::new();
        for img in &last.images {
            let url = images::encode_image(img)?;
            bytes.push(images::decode_data_url(&url)?);
        }
        respond(&last.text, &bytes).map_err(|e| ClientError::Rejected { status: 400, body: e.to_string() })
    }
}

// ---------------------------------------------------------------------------
// Stub HTTP endpoint

/// One request as seen by the stub endpoint, kept for payload inspection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedRequest {
    pub template: Option<TemplateId>,
    pub text: String,
    pub image_count: usize,
    /// The full request body as received.
    pub body: String,
}

#[derive(Clone, Default)]
pub struct OracleServer {
    pub log: Arc<Mutex<Vec<RecordedRequest>>>,
}

fn openai_reply(content: &str, prompt_chars: usize) -> Value {
    json!({
        "id": "oracle",
        "object": "chat.completion",
        "model": "oracle",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
        "usage": {
            "prompt_tokens": prompt_chars.div_ceil(4),
            "completion_tokens": content.len().div_ceil(4),
            "total_tokens": prompt_chars.div_ceil(4) + content.len().div_ceil(4),
        }
    })
}

fn collect_message(body: &Value) -> Result<(String, Vec<String>), String> {
    let messages = body.get("messages").and_then(Value::as_array).ok_or("no messages")?;
    let last = messages.iter().rev().find(|m| m.get("role").and_then(Value::as_str) == Some("user")).ok_or("no user message")?;
    let mut text = String::new();
    let mut urls = Vec::new();
    match last.get("content") {
        Some(Value::String(s)) => text.push_str(s),
        Some(Value::Array(parts)) => {
            for p in parts {
                match p.get("type").and_then(Value::as_str) {
                    Some("text") => text.push_str(p.get("text").and_then(Value::as_str).unwrap_or("")),
                    Some("image_url") => urls.push(
                        p.pointer("/image_url/url").and_then(Value::as_str).unwrap_or("").to_string(),
                    ),
                    _ => {}
                }
            }
        }
        _ => return Err("message has no content".into()),
    }
    Ok((text, urls))
}

async fn chat_handler(State(server): State<OracleServer>, body: String) -> Response {
    let parsed: Value = match serde_json::from_str(&body) {
        Ok(v) => v,
        Err(e) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    };
    let (text, urls) = match collect_message(&parsed) {
        Ok(x) => x,
        Err(e) => return (StatusCode::BAD_REQUEST, e).into_response(),
    };
    server.log.lock().push(RecordedRequest {
        template: TemplateId::detect(&text),
        text: text.clone(),
        image_count: urls.len(),
        body: body.clone(),
    });
    let mut bytes = Vec::new();
    for u in &urls {
        match images::decode_data_url(u) {
            Ok(b) => bytes.push(b),
            Err(e) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
        }
    }
    match respond(&text, &bytes) {
        Ok(content) => Json(openai_reply(&content, text.len())).into_response(),
        Err(e) => (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    }
}

impl OracleServer {
    pub fn router(&self) -> Router {
        Router::new()
            .route("/chat/completions", post(chat_handler))
            .route("/v1/chat/completions", post(chat_handler))
            .with_state(self.clone())
    }

    /// Binds to `addr` (port 0 for any) and serves in the background.
    pub async fn spawn(&self, addr: SocketAddr) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        let local = listener.local_addr()?;
        let app = self.router();
        let handle = tokio::spawn(async move {
            if let Err(e) = axum::serve(listener, app).await {
                tracing::error!("oracle server stopped: {e}");
            }
        });
        Ok((local, handle))
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.log.lock().clone()
    }
}

/// A synthetic benchmark: scenes, their placeholder images on disk and the
/// empty-stage records that form a pairs file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePair {
    pub schema_version: u32,
    pub id: String,
    pub scene: SceneSpec,
    pub ground_truth: u8,
}

/// Writes `count` scenes as images under `image_dir` and returns the pair
/// records with their scenes. Entity and relationship counts vary per scene.
pub fn synthetic_pairs(
    seed: u64,
    count: usize,
    image_dir: &Path,
) -> Result<Vec<(EvaluationRecord, ScenePair)>, OracleError> {
    std::fs::create_dir_all(image_dir).map_err(|e| OracleError::Image(ImageError::Read { id: "dir".into(), source: e }))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let generators = [Generator::Sd15, Generator::Sdxl, Generator::Sd3];
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let entities = rng.random_range(1..=4usize);
        let relationships = rng.random_range(0..=(entities * (entities - 1) / 2).min(3));
        let scene = generate_scene(rng.random(), SceneParams { entities, relationships, ..SceneParams::default() })?;
        let id = format!("pair-{i:05}");
        let path = image_dir.join(format!("{id}.png"));
        std::fs::write(&path, scene.to_png()?)
            .map_err(|e| OracleError::Image(ImageError::Read { id: id.clone(), source: e }))?;
        let record = EvaluationRecord::new(
            id.clone(),
            TextPrompt { id: format!("prompt-{i:05}"), text: scene.prompt_text(), source: PromptSource::LlmGenerated },
            ImageRef { id: format!("image-{i:05}"), uri: path.display().to_string(), generator: generators[i % 3] },
        );
        let pair = ScenePair { schema_version: crate::record::SCHEMA_VERSION, id, ground_truth: ground_truth_score(&scene), scene };
        out.push((record, pair));
    }
    Ok(out)
}

/// Ground truth by record id.
pub fn ground_truth_map(pairs: &[ScenePair]) -> BTreeMap<String, u8> {
    pairs.iter().map(|p| (p.id.clone(), p.ground_truth)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{parse_cag, parse_es, parse_extraction, render_answers_doc, render_questions_doc, CagOptions, EsOptions};
    use crate::prompts::TemplateSet;
    use proptest::prelude::*;

    // Independent restatement of the scoring rule, written against the
    // scene fields directly.
    fn gt_reference(s: &SceneSpec) -> u8 {
        let absent = |n: &str| s.corruption.absent.iter().any(|a| a == n);
        let mut failed = 0i64;
        for e in &s.entities {
            let attrs = 3 + e.size.is_some() as i64 + e.material.is_some() as i64;
            failed += if absent(&e.name) {
                attrs
            } else {
                s.corruption.attributes.iter().filter(|c| c.entity == e.name).count() as i64
            };
        }
        for (i, r) in s.relations.iter().enumerate() {
            if s.corruption.relations.iter().any(|c| c.index == i) || absent(&r.subject) || absent(&r.object) {
                failed += 1;
            }
        }
        let base = (10 - 3 * failed).max(0) as f64;
        let app: f64 = s.entities.iter().map(|e| if absent(&e.name) { 0.0 } else { e.appearance as f64 }).sum::<f64>()
            / s.entities.len() as f64;
        ((base + app) / 2.0 + 0.5).floor() as u8
    }

    fn clean(entities: usize, relationships: usize, seed: u64) -> SceneSpec {
        generate_scene(seed, SceneParams { entities, relationships, p_absent: 0.0, p_attribute: 0.0, p_relation: 0.0 }).unwrap()
    }

    #[test]
    fn generation_is_deterministic_and_sized() {
        let p = SceneParams { entities: 2, relationships: 1, ..Default::default() };
        assert_eq!(generate_scene(7, p).unwrap(), generate_scene(7, p).unwrap());
        let s = generate_scene(7, p).unwrap();
        assert_eq!((s.entities.len(), s.relations.len()), (2, 1));
        assert!(generate_scene(1, SceneParams { entities: 2, relationships: 2, ..Default::default() }).is_err());
        assert!(generate_scene(1, SceneParams { entities: 0, relationships: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn ground_truth_extremes() {
        let mut s = clean(3, 2, 11);
        for e in &mut s.entities {
            e.appearance = 10;
        }
        assert_eq!(ground_truth_score(&s), 10);
        s.corruption.absent = s.entities.iter().map(|e| e.name.clone()).collect();
        assert_eq!(ground_truth_score(&s), 0);
    }

    #[test]
    fn mixed_fixture_matches_reference() {
        // cat: appearance 7, color wrong; dog absent (appearance ignored)
        let s = SceneSpec {
            entities: vec![
                SceneEntity { name: "cat".into(), quantity: "one".into(), size: None, color: "black".into(), material: None, appearance: 7 },
                SceneEntity { name: "dog".into(), quantity: "two".into(), size: Some("small".into()), color: "brown".into(), material: None, appearance: 9 },
            ],
            relations: vec![SceneRelation { subject: "cat".into(), relation: "next to".into(), object: "dog".into() }],
            corruption: Corruption {
                absent: vec!["dog".into()],
                attributes: vec![AttributeCorruption { entity: "cat".into(), attr_type: "color".into(), wrong_value: "white".into() }],
                relations: vec![],
            },
        };
        assert!(s.violations().is_empty());
        // failed = 1 (cat color) + 4 (dog attrs) + 1 (relation) = 6 -> base 0; (0*2 + 7) / 4 = 1.75 -> 2
        assert_eq!(ground_truth_score(&s), 2);
        assert_eq!(gt_reference(&s), 2);
    }

    #[test]
    fn prompt_grammar_round_trips() {
        for seed in 0..200 {
            let s = generate_scene(seed, SceneParams { entities: 1 + (seed as usize % 4), relationships: 0, ..Default::default() }).unwrap();
            let parsed = parse_prompt(&s.prompt_text()).unwrap();
            assert_eq!(parsed.entities.len(), s.entities.len());
            for (a, b) in parsed.entities.iter().zip(&s.entities) {
                assert_eq!((a.name.as_str(), &a.quantity, &a.size, &a.color, &a.material), (b.name.as_str(), &b.quantity, &b.size, &b.color, &b.material));
            }
        }
        let s = clean(3, 3, 5);
        assert_eq!(parse_prompt(&s.prompt_text()).unwrap().relations, s.relations);
    }

    #[test]
    fn scene_survives_png() {
        let s = generate_scene(3, SceneParams::default()).unwrap();
        assert_eq!(SceneSpec::from_png(&s.to_png().unwrap()).unwrap(), s);
    }

    fn run_stages(s: &SceneSpec) -> (ExtractionResult, Vec<crate::record::StageAnswer>, crate::parser::EsOutput) {
        let t = TemplateSet::builtin();
        let prompt = TextPrompt { id: "p".into(), text: s.prompt_text(), source: PromptSource::Other };
        let ece = respond(&t.render_ece(&prompt).unwrap(), &[]).unwrap();
        let x = parse_extraction(&ece).into_result().unwrap();
        let cag_prompt = t.get(TemplateId::Cag).render(&[("questions", &render_questions_doc(&x.questions))]).unwrap();
        let cag = respond(&cag_prompt, &[s.to_png().unwrap()]).unwrap();
        let answers = parse_cag(&cag, &x.questions, CagOptions::default()).into_result().unwrap().answers;
        let es_prompt = t
            .render_es(&render_answers_doc(&x.questions, &answers), &parser::render_extraction_doc(&x).unwrap())
            .unwrap();
        let es = respond(&es_prompt, &[]).unwrap();
        let out = parse_es(&es, &x.questions, EsOptions::default()).into_result().unwrap();
        (x, answers, out)
    }

    #[test]
    fn clean_scene_scores_high() {
        let s = clean(3, 2, 21);
        let (_, _, out) = run_stages(&s);
        assert!(out.verdicts.iter().filter(|v| !v.qid.starts_with('a')).all(|v| v.score >= 8));
        assert_eq!(out.summaries[3].score, ground_truth_score(&s));
    }

    #[test]
    fn absent_entity_questions_score_zero() {
        let mut s = clean(2, 1, 4);
        let cat = s.entities[0].name.clone();
        s.corruption.absent.push(cat.clone());
        let (x, _, out) = run_stages(&s);
        for v in &out.verdicts {
            let q = x.questions.iter().find(|q| q.qid == v.qid).unwrap();
            if q.subject_entities.contains(&cat) {
                assert_eq!(v.score, 0, "{}", q.text);
            }
        }
        assert_eq!(out.summaries[3].score, ground_truth_score(&s));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn generated_scenes_are_valid_and_scored_consistently(seed in any::<u64>(), n in 1usize..5, r in 0usize..4) {
            let r = r.min(n * (n - 1) / 2);
            let s = generate_scene(seed, SceneParams { entities: n, relationships: r, ..Default::default() }).unwrap();
            prop_assert!(s.violations().is_empty(), "{:?}", s.violations());
            prop_assert_eq!(ground_truth_score(&s), gt_reference(&s));
            let (_, _, out) = run_stages(&s);
            prop_assert_eq!(out.summaries[3].score, ground_truth_score(&s));
        }
    }
}
