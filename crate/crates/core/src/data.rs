//! Domain types for extractive QA samples, plus validation and few-shot
//! subsampling.
//!
//! All character offsets count Unicode scalar values, not bytes, and spans
//! are half-open `[start, end)`.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Split sizes used by the few-shot benchmark.
pub const FEW_SHOT_SIZES: [usize; 4] = [16, 32, 64, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl CharSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// True if `other` lies entirely inside `self`.
    pub fn contains(&self, other: &CharSpan) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn shift_left(&self, by: usize) -> CharSpan {
        CharSpan::new(self.start - by, self.end - by)
    }
}

impl fmt::Display for CharSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// Number of characters in `text`.
pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Byte offset of the `char_idx`-th character, or `text.len()` when
/// `char_idx` equals the character count.
pub fn byte_offset(text: &str, char_idx: usize) -> Option<usize> {
    if char_idx == 0 {
        return Some(0);
    }
    let mut count = 0;
    for (byte, _) in text.char_indices() {
        if count == char_idx {
            return Some(byte);
        }
        count += 1;
    }
    (count == char_idx).then_some(text.len())
}

/// Slice `text` by a character span. `None` if the span is out of bounds or
/// inverted.
pub fn char_slice<'a>(text: &'a str, span: &CharSpan) -> Option<&'a str> {
    if span.start > span.end {
        return None;
    }
    let start = byte_offset(text, span.start)?;
    let rest = &text[start..];
    let len = byte_offset(rest, span.len())?;
    Some(&rest[..len])
}

/// Converts between byte and char offsets for one string in O(log n).
#[derive(Debug, Clone)]
pub struct CharIndex {
    starts: Vec<usize>,
    byte_len: usize,
}

impl CharIndex {
    pub fn new(text: &str) -> Self {
        Self {
            starts: text.char_indices().map(|(b, _)| b).collect(),
            byte_len: text.len(),
        }
    }

    pub fn char_count(&self) -> usize {
        self.starts.len()
    }

    /// Char index of a byte offset that falls on a char boundary.
    pub fn char_of_byte(&self, byte: usize) -> usize {
        if byte >= self.byte_len {
            return self.starts.len();
        }
        match self.starts.binary_search(&byte) {
            Ok(i) => i,
            Err(i) => i,
        }
    }

    pub fn byte_of_char(&self, ch: usize) -> usize {
        self.starts.get(ch).copied().unwrap_or(self.byte_len)
    }

    pub fn slice<'a>(&self, text: &'a str, span: &CharSpan) -> &'a str {
        &text[self.byte_of_char(span.start)..self.byte_of_char(span.end)]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub span: CharSpan,
}

impl Answer {
    pub fn new(text: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            text: text.into(),
            span: CharSpan::new(start, end),
        }
    }

    /// Build an answer from a span, taking the text from `context`.
    pub fn from_context(context: &str, span: CharSpan) -> Option<Self> {
        char_slice(context, &span).map(|t| Self {
            text: t.to_string(),
            span,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    #[default]
    Gold,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QASample {
    pub id: String,
    pub context: String,
    pub question: String,
    pub answers: Vec<Answer>,
    pub origin: Origin,
}

impl QASample {
    pub fn answer_texts(&self) -> Vec<&str> {
        self.answers.iter().map(|a| a.text.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    #[serde(default)]
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyId,
    NoAnswers,
    EmptyOrInvertedSpan { index: usize, span: CharSpan },
    SpanOutOfBounds { index: usize, span: CharSpan, context_len: usize },
    TextMismatch { index: usize, expected: String, found: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId => write!(f, "empty id"),
            Violation::NoAnswers => write!(f, "no answers"),
            Violation::EmptyOrInvertedSpan { index, span } => {
                write!(f, "empty-or-inverted span (answer {index}, {span})")
            }
            Violation::SpanOutOfBounds {
                index,
                span,
                context_len,
            } => write!(
                f,
                "span out of bounds (answer {index}, {span}, context length {context_len})"
            ),
            Violation::TextMismatch {
                index,
                expected,
                found,
            } => write!(
                f,
                "answer text mismatch (answer {index}: text {expected:?}, context slice {found:?})"
            ),
        }
    }
}

/// Check every invariant of a sample. Violations are returned, never raised.
pub fn validate_sample(sample: &QASample) -> std::result::Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    if sample.id.is_empty() {
        out.push(Violation::EmptyId);
    }
    if sample.answers.is_empty() {
        out.push(Violation::NoAnswers);
    }
    let index = CharIndex::new(&sample.context);
    let context_len = index.char_count();
    for (i, answer) in sample.answers.iter().enumerate() {
        let span = answer.span;
        if span.start >= span.end {
            out.push(Violation::EmptyOrInvertedSpan { index: i, span });
            continue;
        }
        if span.end > context_len {
            out.push(Violation::SpanOutOfBounds {
                index: i,
                span,
                context_len,
            });
            continue;
        }
        let found = index.slice(&sample.context, &span);
        if found != answer.text {
            out.push(Violation::TextMismatch {
                index: i,
                expected: answer.text.clone(),
                found: found.to_string(),
            });
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Validate and convert violations into an [`Error::Validation`].
pub fn ensure_valid(sample: &QASample) -> Result<()> {
    validate_sample(sample).map_err(|v| Error::Validation {
        qid: sample.id.clone(),
        violations: v.iter().map(ToString::to_string).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub size: usize,
    pub seed: u64,
    pub samples: Vec<QASample>,
}

impl FewShotSplit {
    pub fn empty() -> Self {
        Self {
            size: 0,
            seed: 0,
            samples: Vec::new(),
        }
    }

    /// Wrap a provided split file as-is.
    pub fn from_samples(samples: Vec<QASample>) -> Self {
        Self {
            size: samples.len(),
            seed: 0,
            samples,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Draw `size` samples without replacement. Pure in `(dataset, size, seed)`.
pub fn subsample_split(dataset: &[QASample], size: usize, seed: u64) -> Result<FewShotSplit> {
    if size > dataset.len() {
        return Err(Error::invalid(format!(
            "split size {size} exceeds dataset size {}",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, dataset.len(), size);
    Ok(FewShotSplit {
        size,
        seed,
        samples: picked.iter().map(|i| dataset[i].clone()).collect(),
    })
}
