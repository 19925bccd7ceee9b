//! Prompt templates with `<context>`, `<question>`, `<answer>` and `<mask>`
//! placeholders, and the soft-token specification derived from their
//! literal text.
//!
//! Template strings are case-sensitive and kept verbatim: parsing and then
//! printing a template reproduces the original string exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::chunking::TokenizerView;
use crate::data::CharSpan;
use crate::error::{Error, Result};

/// Question generation prompt: the model fills in the question.
pub const QGEN_TEMPLATE: &str = "context: <context> question: <mask> answer: <answer>.";
/// Extractive QA prompt: the model fills in the answer.
pub const MRQA_TEMPLATE: &str = "context: <context> question: <question> answer: <mask>.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Context,
    Question,
    Answer,
    Mask,
}

impl Slot {
    pub fn marker(self) -> &'static str {
        match self {
            Slot::Context => "<context>",
            Slot::Question => "<question>",
            Slot::Answer => "<answer>",
            Slot::Mask => "<mask>",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "context" => Slot::Context,
            "question" => Slot::Question,
            "answer" => Slot::Answer,
            "mask" => Slot::Mask,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Placeholder(Slot),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    segments: Vec<Segment>,
}

impl Template {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn has(&self, slot: Slot) -> bool {
        self.segments
            .iter()
            .any(|s| matches!(s, Segment::Placeholder(p) if *p == slot))
    }

    pub fn literals(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Literal(t) => Some(t.as_str()),
            Segment::Placeholder(_) => None,
        })
    }

    /// Parse and require the slots of a question generation prompt.
    pub fn question_generation(spec: &str) -> Result<Self> {
        let t = parse_template(spec)?;
        t.require(&[Slot::Context, Slot::Mask, Slot::Answer], "question generation")?;
        Ok(t)
    }

    /// Parse and require the slots of an answer prediction prompt.
    pub fn answer_prediction(spec: &str) -> Result<Self> {
        let t = parse_template(spec)?;
        t.require(&[Slot::Context, Slot::Question, Slot::Mask], "answer prediction")?;
        Ok(t)
    }

    fn require(&self, slots: &[Slot], role: &str) -> Result<()> {
        for slot in slots {
            if !self.has(*slot) {
                return Err(Error::Template(format!(
                    "{role} template {self:?} lacks {}",
                    slot.marker()
                )));
            }
        }
        Ok(())
    }

    /// Recover bindings from a prompt produced by [`realize`] with the same
    /// mask token. Repeated placeholders must bind to the same value.
    pub fn extract(&self, prompt: &str, mask_token: &str) -> Option<Bindings> {
        let mut pattern = String::from("(?s)^");
        let mut groups = Vec::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(t) => pattern.push_str(&regex::escape(t)),
                Segment::Placeholder(Slot::Mask) => pattern.push_str(&regex::escape(mask_token)),
                Segment::Placeholder(slot) => {
                    pattern.push_str("(.*)");
                    groups.push(*slot);
                }
            }
        }
        pattern.push('$');
        let re = Regex::new(&pattern).ok()?;
        let caps = re.captures(prompt)?;
        let mut bindings = Bindings::default();
        for (i, slot) in groups.into_iter().enumerate() {
            let value = caps.get(i + 1)?.as_str();
            match bindings.get(slot) {
                Some(prev) if prev != value => return None,
                _ => bindings.set(slot, value),
            }
        }
        Some(bindings)
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for seg in &self.segments {
            match seg {
                Segment::Literal(t) => f.write_str(t)?,
                Segment::Placeholder(slot) => f.write_str(slot.marker())?,
            }
        }
        Ok(())
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_template(s)
    }
}

/// Split a template string into literal and placeholder segments.
///
/// A `<name>` where `name` is an identifier must be one of the four known
/// markers; any other `<` is literal text. At most one `<mask>` is allowed.
pub fn parse_template(spec: &str) -> Result<Template> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut rest = spec;
    let mut masks = 0;
    while let Some(open) = rest.find('<') {
        literal.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let marker = after.find('>').map(|close| &after[..close]).filter(|name| {
            !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        });
        match marker {
            Some(name) => {
                let slot = Slot::from_name(name)
                    .ok_or_else(|| Error::Template(format!("unknown marker <{name}>")))?;
                if slot == Slot::Mask {
                    masks += 1;
                    if masks > 1 {
                        return Err(Error::Template("duplicate <mask> marker".into()));
                    }
                }
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Placeholder(slot));
                rest = &after[name.len() + 1..];
            }
            None => {
                literal.push('<');
                rest = after;
            }
        }
    }
    literal.push_str(rest);
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    Ok(Template { segments })
}

/// Values substituted for non-mask placeholders.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bindings {
    pub context: Option<String>,
    pub question: Option<String>,
    pub answer: Option<String>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn context(mut self, v: impl Into<String>) -> Self {
        self.context = Some(v.into());
        self
    }

    pub fn question(mut self, v: impl Into<String>) -> Self {
        self.question = Some(v.into());
        self
    }

    pub fn answer(mut self, v: impl Into<String>) -> Self {
        self.answer = Some(v.into());
        self
    }

    pub fn get(&self, slot: Slot) -> Option<&str> {
        match slot {
            Slot::Context => self.context.as_deref(),
            Slot::Question => self.question.as_deref(),
            Slot::Answer => self.answer.as_deref(),
            Slot::Mask => None,
        }
    }

    fn set(&mut self, slot: Slot, value: &str) {
        let v = Some(value.to_string());
        match slot {
            Slot::Context => self.context = v,
            Slot::Question => self.question = v,
            Slot::Answer => self.answer = v,
            Slot::Mask => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RealizedPrompt {
    pub text: String,
    pub mask_marker: String,
    /// Character range of every placeholder occurrence, in template order.
    pub placeholder_char_ranges: Vec<(Slot, CharSpan)>,
    /// Character ranges covered by literal template text.
    pub literal_char_ranges: Vec<CharSpan>,
}

impl RealizedPrompt {
    pub fn range(&self, slot: Slot) -> Option<CharSpan> {
        self.placeholder_char_ranges
            .iter()
            .find(|(s, _)| *s == slot)
            .map(|(_, r)| *r)
    }
}

/// Substitute bindings and the mask token into a template.
pub fn realize(template: &Template, bindings: &Bindings, mask_token: &str) -> Result<RealizedPrompt> {
    let mut text = String::new();
    let mut pos = 0;
    let mut placeholders = Vec::new();
    let mut literals = Vec::new();
    for seg in &template.segments {
        let (value, slot) = match seg {
            Segment::Literal(t) => (t.as_str(), None),
            Segment::Placeholder(Slot::Mask) => (mask_token, Some(Slot::Mask)),
            Segment::Placeholder(slot) => {
                let v = bindings.get(*slot).ok_or_else(|| {
                    Error::invalid(format!("missing binding for {}", slot.marker()))
                })?;
                (v, Some(*slot))
            }
        };
        let len = value.chars().count();
        let span = CharSpan::new(pos, pos + len);
        match slot {
            Some(s) => placeholders.push((s, span)),
            None => literals.push(span),
        }
        text.push_str(value);
        pos += len;
    }
    Ok(RealizedPrompt {
        text,
        mask_marker: mask_token.to_string(),
        placeholder_char_ranges: placeholders,
        literal_char_ranges: literals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Trainable rows start as copies of the pretrained embedding rows.
    #[default]
    CopyPretrainedRows,
}

/// Which embedding rows become trainable soft tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftPromptSpec {
    /// Backend token ids of all literal segments, in template order.
    pub literal_token_ids: Vec<u32>,
    pub literal_token_count: usize,
    pub embedding_dim: usize,
    pub init_policy: InitPolicy,
}

impl SoftPromptSpec {
    pub fn weight_count(&self) -> usize {
        self.literal_token_count * self.embedding_dim
    }
}

/// Tokenize every literal segment separately and count the tokens.
pub fn soft_prompt_spec(
    template: &Template,
    tokenizer: &dyn TokenizerView,
    embedding_dim: usize,
) -> SoftPromptSpec {
    let literal_token_ids: Vec<u32> = template
        .literals()
        .flat_map(|lit| tokenizer.tokenize_with_offsets(lit))
        .map(|t| t.id)
        .collect();
    SoftPromptSpec {
        literal_token_count: literal_token_ids.len(),
        literal_token_ids,
        embedding_dim,
        init_policy: InitPolicy::CopyPretrainedRows,
    }
}

/// Per-slot literal tokenization, for documenting how a backend splits a
/// template.
pub fn literal_token_breakdown(
    template: &Template,
    tokenizer: &dyn TokenizerView,
) -> BTreeMap<usize, (String, usize)> {
    template
        .literals()
        .enumerate()
        .map(|(i, lit)| (i, (lit.to_string(), tokenizer.tokenize_with_offsets(lit).len())))
        .collect()
}
