//! Plain-text prompt templates with `{placeholder}` substitution.
//!
//! Built-in templates live in `templates/<stage>.txt`; a directory holding
//! files of the same names overrides them one by one. `{{` and `}}` are
//! literal braces.

use std::collections::BTreeSet;
use std::path::Path;

use thiserror::Error;

use crate::llm::{GenerationSettings, LlmRequest};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template}: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template {template}: no value for {{{name}}}")]
    MissingValue { template: String, name: String },
    #[error("template {template}: unbalanced brace")]
    Unbalanced { template: String },
    #[error("template {0}: {1}")]
    Io(String, String),
}

enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    text: String,
}

impl PromptTemplate {
    /// Parses `text`, rejecting placeholders outside `allowed`.
    pub fn new(name: &str, text: &str, allowed: &[&str]) -> Result<Self, TemplateError> {
        let text = text.strip_suffix('\n').unwrap_or(text);
        let t = PromptTemplate {
            name: name.to_string(),
            text: text.to_string(),
        };
        for name in t.placeholders()? {
            if !allowed.contains(&name.as_str()) {
                return Err(TemplateError::UnknownPlaceholder {
                    template: t.name.clone(),
                    name,
                });
            }
        }
        Ok(t)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    fn pieces(&self) -> Result<Vec<Piece>, TemplateError> {
        let unbalanced = || TemplateError::Unbalanced {
            template: self.name.clone(),
        };
        let mut out = Vec::new();
        let mut buf = String::new();
        let mut chars = self.text.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '{' if chars.peek() == Some(&'{') => {
                    chars.next();
                    buf.push('{');
                }
                '}' if chars.peek() == Some(&'}') => {
                    chars.next();
                    buf.push('}');
                }
                '{' => {
                    let mut name = String::new();
                    loop {
                        match chars.next() {
                            Some('}') => break,
                            Some(c) if c.is_ascii_alphanumeric() || c == '_' => name.push(c),
                            _ => return Err(unbalanced()),
                        }
                    }
                    out.push(Piece::Text(std::mem::take(&mut buf)));
                    out.push(Piece::Slot(name));
                }
                '}' => return Err(unbalanced()),
                c => buf.push(c),
            }
        }
        out.push(Piece::Text(buf));
        Ok(out)
    }

    pub fn placeholders(&self) -> Result<BTreeSet<String>, TemplateError> {
        Ok(self
            .pieces()?
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s),
                Piece::Text(_) => None,
            })
            .collect())
    }

    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.text.len());
        for piece in self.pieces()? {
            match piece {
                Piece::Text(t) => out.push_str(&t),
                Piece::Slot(name) => {
                    let v = values
                        .iter()
                        .find(|(k, _)| *k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| TemplateError::MissingValue {
                            template: self.name.clone(),
                            name: name.clone(),
                        })?;
                    out.push_str(v);
                }
            }
        }
        Ok(out)
    }
}

/// Stage tags; also the template file stems.
pub mod tags {
    pub const RE_GENERATIVE: &str = "re_generative";
    pub const RE_PAIRWISE: &str = "re_pairwise";
    pub const EXTRACT_ENTITIES: &str = "extract_entities";
    pub const SELF_RETRIEVE: &str = "self_retrieve";
    pub const DESCRIBE: &str = "describe";
    pub const INFERENCE: &str = "inference";
    pub const JUDGE: &str = "judge";
}

const CONSTRUCTION_SLOTS: &[&str] = &[
    "abstract",
    "entities",
    "head",
    "tail",
    "head_type",
    "tail_type",
    "options",
];

struct Builtin {
    tag: &'static str,
    text: &'static str,
    slots: &'static [&'static str],
}

const BUILTINS: &[Builtin] = &[
    Builtin {
        tag: tags::RE_GENERATIVE,
        text: include_str!("../templates/re_generative.txt"),
        slots: CONSTRUCTION_SLOTS,
    },
    Builtin {
        tag: tags::RE_PAIRWISE,
        text: include_str!("../templates/re_pairwise.txt"),
        slots: CONSTRUCTION_SLOTS,
    },
    Builtin {
        tag: tags::EXTRACT_ENTITIES,
        text: include_str!("../templates/extract_entities.txt"),
        slots: &["question"],
    },
    Builtin {
        tag: tags::SELF_RETRIEVE,
        text: include_str!("../templates/self_retrieve.txt"),
        slots: &["graph", "question", "k", "format"],
    },
    Builtin {
        tag: tags::DESCRIBE,
        text: include_str!("../templates/describe.txt"),
        slots: &["graph", "label"],
    },
    Builtin {
        tag: tags::INFERENCE,
        text: include_str!("../templates/inference.txt"),
        slots: &["question", "options", "evidence"],
    },
    Builtin {
        tag: tags::JUDGE,
        text: include_str!("../templates/judge.txt"),
        slots: &["question", "options"],
    },
];

/// Templates for every stage plus the generation settings stamped on each
/// request built from them.
#[derive(Debug, Clone)]
pub struct Prompting {
    templates: Vec<PromptTemplate>,
    pub settings: GenerationSettings,
}

impl Default for Prompting {
    fn default() -> Self {
        Prompting {
            templates: BUILTINS
                .iter()
                .map(|b| PromptTemplate::new(b.tag, b.text, b.slots).expect("built-in template"))
                .collect(),
            settings: GenerationSettings::default(),
        }
    }
}

impl Prompting {
    pub fn with_settings(settings: GenerationSettings) -> Self {
        Prompting {
            settings,
            ..Default::default()
        }
    }

    /// Replaces built-ins with `<dir>/<tag>.txt` wherever such a file exists.
    pub fn load_overrides(mut self, dir: &Path) -> Result<Self, TemplateError> {
        for (i, b) in BUILTINS.iter().enumerate() {
            let path = dir.join(format!("{}.txt", b.tag));
            if path.exists() {
                let text =
                    std::fs::read_to_string(&path).map_err(|e| TemplateError::Io(b.tag.to_string(), e.to_string()))?;
                self.templates[i] = PromptTemplate::new(b.tag, &text, b.slots)?;
            }
        }
        Ok(self)
    }

    pub fn template(&self, tag: &str) -> &PromptTemplate {
        self.templates
            .iter()
            .find(|t| t.name == tag)
            .unwrap_or_else(|| panic!("no template for stage {tag}"))
    }

    /// Renders the `tag` template into a request carrying these settings.
    pub fn request(&self, tag: &str, values: &[(&str, &str)]) -> Result<LlmRequest, TemplateError> {
        let text = self.template(tag).render(values)?;
        Ok(LlmRequest::new(tag, text).with_settings(&self.settings))
    }
}
