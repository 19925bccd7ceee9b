//! Sliding token windows over long contexts, and re-anchoring of answer
//! spans into those windows.
//!
//! Window `k` starts at token `k * stride` and spans at most
//! `max_context_tokens` tokens. The last window is the first one whose end
//! reaches the final token, so it may be shorter than the others.

use serde::{Deserialize, Serialize};

use crate::data::{Answer, CharIndex, CharSpan};

pub const DEFAULT_MAX_CONTEXT_TOKENS: usize = 450;
pub const DEFAULT_STRIDE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: u32,
    pub span: CharSpan,
}

/// Anything that can split text into tokens with character offsets.
///
/// Offsets must be non-overlapping and strictly increasing.
pub trait TokenizerView {
    fn tokenize_with_offsets(&self, text: &str) -> Vec<Token>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkConfig {
    pub max_context_tokens: usize,
    pub stride: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            max_context_tokens: DEFAULT_MAX_CONTEXT_TOKENS,
            stride: DEFAULT_STRIDE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub parent_doc_id: String,
    /// `[first, last)` token indices into the parent tokenization.
    pub token_range: (usize, usize),
    pub text: String,
    /// Character offset of `text` within the parent.
    pub char_offset: usize,
}

impl ContextWindow {
    pub fn char_range(&self) -> CharSpan {
        CharSpan::new(
            self.char_offset,
            self.char_offset + self.text.chars().count(),
        )
    }

    pub fn token_count(&self) -> usize {
        self.token_range.1 - self.token_range.0
    }
}

/// Token ranges of every window for a sequence of `n_tokens` tokens.
///
/// # Panics
/// If `stride == 0` or `max_context_tokens < stride`.
pub fn window_ranges(n_tokens: usize, max_context_tokens: usize, stride: usize) -> Vec<(usize, usize)> {
    assert!(stride >= 1, "stride must be at least 1");
    assert!(
        max_context_tokens >= stride,
        "max_context_tokens must be >= stride"
    );
    if n_tokens == 0 {
        return Vec::new();
    }
    let count = if n_tokens <= max_context_tokens {
        1
    } else {
        (n_tokens - max_context_tokens).div_ceil(stride) + 1
    };
    (0..count)
        .map(|k| {
            let start = k * stride;
            (start, (start + max_context_tokens).min(n_tokens))
        })
        .collect()
}

/// Chunk `text` into overlapping windows. Empty text yields no windows.
pub fn chunk_context(
    doc_id: &str,
    text: &str,
    tokenizer: &dyn TokenizerView,
    config: &ChunkConfig,
) -> Vec<ContextWindow> {
    let tokens = tokenizer.tokenize_with_offsets(text);
    chunk_tokens(doc_id, text, &tokens, config)
}

/// Same as [`chunk_context`] for an existing tokenization of `text`.
pub fn chunk_tokens(
    doc_id: &str,
    text: &str,
    tokens: &[Token],
    config: &ChunkConfig,
) -> Vec<ContextWindow> {
    let index = CharIndex::new(text);
    window_ranges(tokens.len(), config.max_context_tokens, config.stride)
        .into_iter()
        .map(|(first, last)| {
            let span = CharSpan::new(tokens[first].span.start, tokens[last - 1].span.end);
            ContextWindow {
                parent_doc_id: doc_id.to_string(),
                token_range: (first, last),
                text: index.slice(text, &span).to_string(),
                char_offset: span.start,
            }
        })
        .collect()
}

/// Re-express `answer` relative to `window`, if the whole answer lies inside.
pub fn anchor_answer(window: &ContextWindow, answer: &Answer) -> Option<Answer> {
    window.char_range().contains(&answer.span).then(|| Answer {
        text: answer.text.clone(),
        span: answer.span.shift_left(window.char_offset),
    })
}
