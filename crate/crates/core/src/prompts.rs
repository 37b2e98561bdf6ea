//! Prompt templates for the three framework stages, their ablation variants,
//! and the two subjective-evaluation judges.
//!
//! Template bodies ship embedded in the crate and can be overridden file by
//! file from a directory (`<template_id>.md`). Placeholders are written
//! `{name}`; doubled braces such as `{{entity}}` are literal text shown to
//! the model. Substituted values have their braces doubled so user text can
//! never be mistaken for a placeholder.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::images::{self, ImageError};
use crate::record::{ImageRef, TextPrompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Ece,
    EceDirect,
    Cag,
    CagNoCaption,
    Es,
    EsDirect,
    ScoreDirect,
    Merged,
    SubjectiveFine,
    SubjectiveCoarse,
}

impl TemplateId {
    pub const ALL: [TemplateId; 10] = [
        TemplateId::Ece,
        TemplateId::EceDirect,
        TemplateId::Cag,
        TemplateId::CagNoCaption,
        TemplateId::Es,
        TemplateId::EsDirect,
        TemplateId::ScoreDirect,
        TemplateId::Merged,
        TemplateId::SubjectiveFine,
        TemplateId::SubjectiveCoarse,
    ];

    pub fn file_stem(self) -> &'static str {
        match self {
            TemplateId::Ece => "ece",
            TemplateId::EceDirect => "ece_direct",
            TemplateId::Cag => "cag",
            TemplateId::CagNoCaption => "cag_no_caption",
            TemplateId::Es => "es",
            TemplateId::EsDirect => "es_direct",
            TemplateId::ScoreDirect => "score_direct",
            TemplateId::Merged => "merged",
            TemplateId::SubjectiveFine => "subjective_fine",
            TemplateId::SubjectiveCoarse => "subjective_coarse",
        }
    }

    pub fn required_placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::Ece | TemplateId::EceDirect => &["text_prompt"],
            TemplateId::Cag | TemplateId::CagNoCaption => &["questions"],
            TemplateId::Es => &["answer", "structure_info"],
            TemplateId::EsDirect => &["answer", "text_prompt"],
            TemplateId::ScoreDirect | TemplateId::Merged => &["questions", "structure_info"],
            TemplateId::SubjectiveFine => &["question", "gt_exp", "ref_exp"],
            TemplateId::SubjectiveCoarse => &["gt_exp", "ref_exp"],
        }
    }

    fn builtin_body(self) -> &'static str {
        match self {
            TemplateId::Ece => include_str!("../templates/ece.md"),
            TemplateId::EceDirect => include_str!("../templates/ece_direct.md"),
            TemplateId::Cag => include_str!("../templates/cag.md"),
            TemplateId::CagNoCaption => include_str!("../templates/cag_no_caption.md"),
            TemplateId::Es => include_str!("../templates/es.md"),
            TemplateId::EsDirect => include_str!("../templates/es_direct.md"),
            TemplateId::ScoreDirect => include_str!("../templates/score_direct.md"),
            TemplateId::Merged => include_str!("../templates/merged.md"),
            TemplateId::SubjectiveFine => include_str!("../templates/subjective_fine.md"),
            TemplateId::SubjectiveCoarse => include_str!("../templates/subjective_coarse.md"),
        }
    }

    /// The role sentence that opens each built-in template.
    fn marker(self) -> &'static str {
        match self {
            TemplateId::Ece => "You are an expert in information extraction.",
            TemplateId::EceDirect => "You are an expert in proposing evaluation questions directly from text.",
            TemplateId::Cag => "specialized in answering questions based on the content of images.",
            TemplateId::CagNoCaption => {
                "specialized in answering questions based on the content of images, without writing image captions."
            }
            TemplateId::Es => "assessing the similarity between answers obtained from images and ground truth obtained from text.",
            TemplateId::EsDirect => "assessing the similarity between answers obtained from images and the original text prompt.",
            TemplateId::ScoreDirect => "You are an expert in directly scoring generated images",
            TemplateId::Merged => "answering questions based on the content of images and then assessing",
            TemplateId::SubjectiveFine => "evaluating explanation texts for questions related to generated images.",
            TemplateId::SubjectiveCoarse => "evaluating explanation texts for the quality of generated images.",
        }
    }

    /// Identifies which built-in template a rendered prompt came from.
    pub fn detect(rendered: &str) -> Option<TemplateId> {
        TemplateId::ALL
            .into_iter()
            .find(|t| rendered.contains(t.marker()))
    }
}

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("placeholder `{0}` was not supplied")]
    Missing(&'static str),
    #[error("value for `{0}` is empty")]
    Empty(&'static str),
    #[error("template `{template}` does not contain placeholder `{{{name}}}`")]
    TemplateLacks { template: &'static str, name: &'static str },
    #[error("rendered prompt still contains placeholder `{{{0}}}`")]
    Residual(String),
    #[error("{0}")]
    Arguments(&'static str),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("reading template override {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub body: String,
}

impl PromptTemplate {
    pub fn new(template_id: TemplateId, body: impl Into<String>) -> Result<Self, RenderError> {
        let body = body.into();
        for name in template_id.required_placeholders() {
            if !placeholder_names(&body).iter().any(|n| n == name) {
                return Err(RenderError::TemplateLacks {
                    template: template_id.file_stem(),
                    name,
                });
            }
        }
        Ok(Self { template_id, body })
    }

    pub fn required_placeholders(&self) -> &'static [&'static str] {
        self.template_id.required_placeholders()
    }

    /// Substitutes every required placeholder in one pass.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, RenderError> {
        let required = self.required_placeholders();
        let mut lookup = BTreeMap::new();
        for name in required {
            let value = values
                .iter()
                .find(|(k, _)| k == name)
                .map(|(_, v)| *v)
                .ok_or(RenderError::Missing(name))?;
            if value.trim().is_empty() {
                return Err(RenderError::Empty(name));
            }
            lookup.insert(*name, escape_braces(value));
        }

        let mut out = String::with_capacity(self.body.len() + 256);
        let mut rest = self.body.as_str();
        while let Some(pos) = rest.find(['{', '}']) {
            out.push_str(&rest[..pos]);
            rest = &rest[pos..];
            if rest.starts_with("{{") || rest.starts_with("}}") {
                out.push_str(&rest[..2]);
                rest = &rest[2..];
                continue;
            }
            if rest.starts_with('{') {
                if let Some(name) = marker_at(rest) {
                    if let Some(v) = lookup.get(name) {
                        out.push_str(v);
                        rest = &rest[name.len() + 2..];
                        continue;
                    }
                }
            }
            out.push_str(&rest[..1]);
            rest = &rest[1..];
        }
        out.push_str(rest);

        if let Some(name) = placeholder_names(&out)
            .into_iter()
            .find(|n| required.contains(&n.as_str()))
        {
            return Err(RenderError::Residual(name));
        }
        Ok(out)
    }
}

/// `{name}` at the start of `s`, where name is `[a-z_]+`.
fn marker_at(s: &str) -> Option<&str> {
    let inner = s.strip_prefix('{')?;
    let end = inner.find('}')?;
    let name = &inner[..end];
    (!name.is_empty() && name.bytes().all(|b| b.is_ascii_lowercase() || b == b'_')).then_some(name)
}

/// Single-brace placeholders in `s`, skipping doubled-brace literals.
fn placeholder_names(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = s;
    while let Some(pos) = rest.find(['{', '}']) {
        rest = &rest[pos..];
        if rest.starts_with("{{") || rest.starts_with("}}") {
            rest = &rest[2..];
            continue;
        }
        if let Some(name) = marker_at(rest) {
            out.push(name.to_string());
            rest = &rest[name.len() + 2..];
        } else {
            rest = &rest[1..];
        }
    }
    out
}

pub fn escape_braces(s: &str) -> String {
    s.replace('{', "{{").replace('}', "}}")
}

pub fn unescape_braces(s: &str) -> String {
    s.replace("{{", "{").replace("}}", "}")
}

/// The full set of templates used by a run: built-ins, optionally overridden
/// from a directory.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = TemplateId::ALL
            .into_iter()
            .map(|id| {
                let t = PromptTemplate::new(id, id.builtin_body()).expect("built-in templates are well formed");
                (id, t)
            })
            .collect();
        Self { templates }
    }

    /// Built-ins with any `<stem>.md` files in `dir` taking precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self, RenderError> {
        let mut set = Self::builtin();
        for id in TemplateId::ALL {
            let path = dir.join(format!("{}.md", id.file_stem()));
            if path.exists() {
                let body = std::fs::read_to_string(&path).map_err(|source| RenderError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                set.templates.insert(id, PromptTemplate::new(id, body)?);
            }
        }
        Ok(set)
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    pub fn render_ece(&self, prompt: &TextPrompt) -> Result<String, RenderError> {
        self.get(TemplateId::Ece).render(&[("text_prompt", &prompt.text)])
    }

    /// Stage one of the `no_extraction` variant: questions only.
    pub fn render_ece_direct(&self, prompt: &TextPrompt) -> Result<String, RenderError> {
        self.get(TemplateId::EceDirect).render(&[("text_prompt", &prompt.text)])
    }

    /// Stage two. The source prompt text is deliberately not an input.
    pub fn render_cag(
        &self,
        questions: &str,
        image: &ImageRef,
        reference_image: Option<&ImageRef>,
    ) -> Result<RenderedPrompt, RenderError> {
        self.render_cag_with(TemplateId::Cag, questions, image, reference_image)
    }

    pub fn render_cag_no_caption(
        &self,
        questions: &str,
        image: &ImageRef,
        reference_image: Option<&ImageRef>,
    ) -> Result<RenderedPrompt, RenderError> {
        self.render_cag_with(TemplateId::CagNoCaption, questions, image, reference_image)
    }

    fn render_cag_with(
        &self,
        id: TemplateId,
        questions: &str,
        image: &ImageRef,
        reference_image: Option<&ImageRef>,
    ) -> Result<RenderedPrompt, RenderError> {
        let text = self.get(id).render(&[("questions", questions)])?;
        let mut attachments = vec![image.clone()];
        images::check_resolvable(image)?;
        if let Some(r) = reference_image {
            images::check_resolvable(r)?;
            attachments.push(r.clone());
        }
        Ok(RenderedPrompt { text, attachments })
    }

    /// Stage three. Text only: no image is attached.
    pub fn render_es(&self, answers_doc: &str, structure_info_doc: &str) -> Result<String, RenderError> {
        self.get(TemplateId::Es)
            .render(&[("answer", answers_doc), ("structure_info", structure_info_doc)])
    }

    pub fn render_es_direct(&self, answers_doc: &str, prompt: &TextPrompt) -> Result<String, RenderError> {
        self.get(TemplateId::EsDirect)
            .render(&[("answer", answers_doc), ("text_prompt", &prompt.text)])
    }

    pub fn render_score_direct(
        &self,
        questions: &str,
        structure_info_doc: &str,
        image: &ImageRef,
    ) -> Result<RenderedPrompt, RenderError> {
        self.render_with_image(TemplateId::ScoreDirect, questions, structure_info_doc, image)
    }

    pub fn render_merged(
        &self,
        questions: &str,
        structure_info_doc: &str,
        image: &ImageRef,
    ) -> Result<RenderedPrompt, RenderError> {
        self.render_with_image(TemplateId::Merged, questions, structure_info_doc, image)
    }

    fn render_with_image(
        &self,
        id: TemplateId,
        questions: &str,
        structure_info_doc: &str,
        image: &ImageRef,
    ) -> Result<RenderedPrompt, RenderError> {
        let text = self
            .get(id)
            .render(&[("questions", questions), ("structure_info", structure_info_doc)])?;
        images::check_resolvable(image)?;
        Ok(RenderedPrompt {
            text,
            attachments: vec![image.clone()],
        })
    }

    /// Judge prompt for reference-guided scoring of a generated explanation.
    /// Fine-grained prompts take the question; coarse ones must not.
    pub fn render_subjective(
        &self,
        kind: SubjectiveKind,
        question: Option<&str>,
        reference_explanation: &str,
        generated_explanation: &str,
    ) -> Result<String, RenderError> {
        match (kind, question) {
            (SubjectiveKind::Fine, Some(q)) => self.get(TemplateId::SubjectiveFine).render(&[
                ("question", q),
                ("gt_exp", generated_explanation),
                ("ref_exp", reference_explanation),
            ]),
            (SubjectiveKind::Fine, None) => {
                Err(RenderError::Arguments("fine-grained subjective prompts need a question"))
            }
            (SubjectiveKind::Coarse, None) => self.get(TemplateId::SubjectiveCoarse).render(&[
                ("gt_exp", generated_explanation),
                ("ref_exp", reference_explanation),
            ]),
            (SubjectiveKind::Coarse, Some(_)) => {
                Err(RenderError::Arguments("coarse subjective prompts take no question"))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectiveKind {
    Fine,
    Coarse,
}

impl std::str::FromStr for SubjectiveKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fine" => Ok(SubjectiveKind::Fine),
            "coarse" => Ok(SubjectiveKind::Coarse),
            other => Err(format!("unknown subjective kind `{other}`")),
        }
    }
}

/// Prompt text plus images in attachment order (target first).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub attachments: Vec<ImageRef>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{Generator, PromptSource};

    fn prompt(text: &str) -> TextPrompt {
        TextPrompt { id: "p".into(), text: text.into(), source: PromptSource::Coco }
    }

    fn image(dir: &tempfile::TempDir, name: &str) -> ImageRef {
        let path = dir.path().join(name);
        std::fs::write(&path, images::placeholder_png()).unwrap();
        ImageRef { id: name.into(), uri: path.display().to_string(), generator: Generator::Sd15 }
    }

    #[test]
    fn ece_contains_prompt_verbatim() {
        let t = TemplateSet::builtin();
        let text = "a black cat standing on the hood of a white car";
        let out = t.render_ece(&prompt(text)).unwrap();
        assert!(out.contains(&format!("The text is: {text}\n")));
        assert!(out.contains("You are an expert in information extraction"));
        assert!(out.contains("### {{entity}}"));
        assert!(!out.contains("{text_prompt}"));
    }

    #[test]
    fn braces_in_user_text_are_escaped() {
        let t = TemplateSet::builtin();
        let out = t.render_ece(&prompt("a sign reading {text_prompt} and }{")).unwrap();
        assert!(out.contains("a sign reading {{text_prompt}} and }}{{"));
        assert!(placeholder_names(&out).is_empty());
    }

    #[test]
    fn rendering_is_deterministic() {
        let t = TemplateSet::builtin();
        let p = prompt("two red apples");
        assert_eq!(t.render_ece(&p).unwrap(), t.render_ece(&p).unwrap());
    }

    #[test]
    fn empty_prompt_is_rejected() {
        let t = TemplateSet::builtin();
        assert!(matches!(t.render_ece(&prompt("  ")), Err(RenderError::Empty("text_prompt"))));
    }

    #[test]
    fn cag_attaches_target_then_reference() {
        let dir = tempfile::tempdir().unwrap();
        let t = TemplateSet::builtin();
        let target = image(&dir, "t.png");
        let reference = image(&dir, "r.png");
        let one = t.render_cag("- question: q?", &target, None).unwrap();
        assert_eq!(one.attachments, vec![target.clone()]);
        assert!(one.text.contains("The questions are: - question: q?"));
        assert!(one.text.contains("8-10: The appearance is very realistic"));
        let two = t.render_cag("- question: q?", &target, Some(&reference)).unwrap();
        assert_eq!(two.attachments, vec![target, reference]);
        assert!(two.text.contains("Use this as a reference for authenticity"));
    }

    #[test]
    fn cag_rejects_empty_questions_and_missing_images() {
        let dir = tempfile::tempdir().unwrap();
        let t = TemplateSet::builtin();
        let target = image(&dir, "t.png");
        assert!(t.render_cag("", &target, None).is_err());
        let missing = ImageRef { id: "m".into(), uri: "/nonexistent/x.png".into(), generator: Generator::Sd3 };
        assert!(matches!(t.render_cag("q", &missing, None), Err(RenderError::Image(_))));
    }

    #[test]
    fn es_arguments_land_in_distinct_slots() {
        let t = TemplateSet::builtin();
        let a = t.render_es("ANSWERS", "STRUCTURE").unwrap();
        let b = t.render_es("STRUCTURE", "ANSWERS").unwrap();
        assert_ne!(a, b);
        assert!(a.contains("The provided answer is: ANSWERS"));
        assert!(a.contains("The structured information is the sole ground truth: STRUCTURE"));
        assert!(t.render_es("ANSWERS", "").is_err());
    }

    #[test]
    fn subjective_argument_rules() {
        let t = TemplateSet::builtin();
        let fine = t.render_subjective(SubjectiveKind::Fine, Some("Q?"), "REF", "GEN").unwrap();
        assert!(fine.contains("# Question\nQ?\n"));
        assert!(fine.contains("# Explanation to be Evaluated\nGEN\n"));
        assert!(fine.contains("# Reference Explanation\nREF\n"));
        assert!(fine.contains("Assign a score from 0 to 5"));
        let coarse = t.render_subjective(SubjectiveKind::Coarse, None, "REF", "GEN").unwrap();
        assert!(coarse.contains("# Questions and Reference Explanation\nREF\n"));
        assert!(t.render_subjective(SubjectiveKind::Fine, None, "R", "G").is_err());
        assert!(t.render_subjective(SubjectiveKind::Coarse, Some("Q"), "R", "G").is_err());
    }

    #[test]
    fn detect_identifies_every_builtin() {
        let t = TemplateSet::builtin();
        for id in TemplateId::ALL {
            let body = &t.get(id).body;
            assert_eq!(TemplateId::detect(body), Some(id), "{id:?}");
        }
    }

    #[test]
    fn overrides_replace_single_templates() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("ece.md"), "Extract from: {text_prompt}\n").unwrap();
        let t = TemplateSet::with_overrides(dir.path()).unwrap();
        assert_eq!(t.render_ece(&prompt("a dog")).unwrap(), "Extract from: a dog\n");
        assert_eq!(t.get(TemplateId::Es), TemplateSet::builtin().get(TemplateId::Es));

        std::fs::write(dir.path().join("es.md"), "no placeholders here").unwrap();
        assert!(matches!(
            TemplateSet::with_overrides(dir.path()),
            Err(RenderError::TemplateLacks { .. })
        ));
    }
}
