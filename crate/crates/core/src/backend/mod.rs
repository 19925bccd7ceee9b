//! The sequence-to-sequence model contract used for question generation and
//! answer prediction.
//!
//! Any encoder-decoder language model can sit behind [`Seq2SeqBackend`]. Two
//! implementations ship with the crate: [`MockBackend`], a deterministic
//! rule-driven double with controlled logits, and [`ProcessBackend`], which
//! forwards every call to an external worker process over line-delimited JSON.

use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::chunking::TokenizerView;
use crate::data::CharSpan;
use crate::error::{Error, Result};
use crate::template::{RealizedPrompt, SoftPromptSpec};

pub mod decoding;
mod heuristics;
pub mod mock;
pub mod process;

pub use decoding::{beam_decode, StepScorer};
pub use heuristics::{cloze_question, overlap_answer};
pub use mock::{MockBackend, MockConfig};
pub use process::{serve, ProcessBackend};

/// Mask, sentinel and special-token conventions of a backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Markers {
    /// Token substituted for the template's `<mask>` placeholder.
    pub mask_token: String,
    /// Output sentinel `i` is `sentinel_prefix + i + sentinel_suffix`.
    pub sentinel_prefix: String,
    pub sentinel_suffix: String,
    /// Tokens stripped from decoded text (eos, padding, ...).
    pub special_tokens: Vec<String>,
}

impl Markers {
    /// T5-style markers: `<extra_id_N>` sentinels, `</s>` and `<pad>`.
    pub fn t5() -> Self {
        Self {
            mask_token: "<extra_id_0>".into(),
            sentinel_prefix: "<extra_id_".into(),
            sentinel_suffix: ">".into(),
            special_tokens: vec!["</s>".into(), "<pad>".into(), "<unk>".into()],
        }
    }

    pub fn sentinel(&self, index: usize) -> String {
        format!("{}{index}{}", self.sentinel_prefix, self.sentinel_suffix)
    }

    fn sentinel_regex(&self) -> Regex {
        Regex::new(&format!(
            "{}(\\d+){}",
            regex::escape(&self.sentinel_prefix),
            regex::escape(&self.sentinel_suffix)
        ))
        .expect("escaped sentinel pattern")
    }

    fn strip_specials(&self, text: &str) -> String {
        let mut out = text.to_string();
        for special in &self.special_tokens {
            out = out.replace(special.as_str(), " ");
        }
        out.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

/// Split raw decoder output into the text generated for each mask.
///
/// Segment `i` is the text after sentinel `i` up to the next sentinel or the
/// end, with special tokens stripped and whitespace collapsed. Empty
/// segments are omitted; output without any sentinel yields an empty map.
pub fn split_mask_output(raw: &str, markers: &Markers) -> BTreeMap<usize, String> {
    let re = markers.sentinel_regex();
    let found: Vec<_> = re.captures_iter(raw).collect();
    let mut out = BTreeMap::new();
    for (k, caps) in found.iter().enumerate() {
        let whole = caps.get(0).expect("match");
        let Ok(index) = caps[1].parse::<usize>() else {
            continue;
        };
        let end = found
            .get(k + 1)
            .map(|c| c.get(0).expect("match").start())
            .unwrap_or(raw.len());
        let text = markers.strip_specials(&raw[whole.end()..end]);
        if !text.is_empty() {
            out.entry(index).or_insert(text);
        }
    }
    out
}

/// Model input: the realized prompt and which characters are template
/// literals (the positions soft tokens apply to).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInput {
    pub text: String,
    #[serde(default)]
    pub literal_spans: Vec<CharSpan>,
}

impl PromptInput {
    pub fn plain(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            literal_spans: Vec::new(),
        }
    }
}

impl From<RealizedPrompt> for PromptInput {
    fn from(p: RealizedPrompt) -> Self {
        Self {
            text: p.text,
            literal_spans: p.literal_char_ranges,
        }
    }
}

/// One supervised pair. `loss_mask[i]` says whether target token `i` (under
/// the backend's own tokenization of `target`) contributes to the loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub input: PromptInput,
    pub target: String,
    pub loss_mask: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Linear decay from the base rate to zero over `steps`.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adaptive method with factored second-moment estimates.
    #[default]
    Adafactor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub steps: usize,
    pub batch_size: usize,
    pub dropout: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::invalid("optimizer steps must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        // Also rejects NaN.
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }

    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Linear => {
                let frac = 1.0 - step as f64 / self.steps.max(1) as f64;
                self.learning_rate * frac.max(0.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// 0 disables top-k filtering.
    pub top_k: usize,
    /// 1.0 disables nucleus filtering.
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            top_k: 20,
            top_p: 0.95,
            max_new_tokens: 64,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    /// Plain beam search without sampling.
    pub fn beam_only(beam_size: usize, max_new_tokens: usize) -> Self {
        Self {
            beam_size,
            top_k: 0,
            top_p: 1.0,
            max_new_tokens,
            seed: 0,
        }
    }

    pub fn samples(&self) -> bool {
        self.top_k > 0 || self.top_p < 1.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size < 1 {
            return Err(Error::invalid("beam size must be >= 1"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid(format!("top_p {} not in (0, 1]", self.top_p)));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: usize,
    /// Mean loss over loss-active target tokens, before the update.
    pub loss: f64,
    pub learning_rate: f64,
    pub examples: usize,
    pub active_tokens: usize,
}

/// Contract for an encoder-decoder language model.
///
/// Training is single-writer (`&mut self`); decoding and scoring are
/// reentrant. Identical inputs, configs and seeds must decode identically.
pub trait Seq2SeqBackend: TokenizerView + Send + Sync {
    fn name(&self) -> &str;

    fn markers(&self) -> &Markers;

    fn mask_token(&self) -> &str {
        &self.markers().mask_token
    }

    fn embedding_dim(&self) -> usize;

    /// Make the embedding rows named by `spec` trainable copies, initialized
    /// from the pretrained rows, used at template-literal input positions.
    fn enable_soft_prompt(&mut self, spec: &SoftPromptSpec) -> Result<()>;

    /// One optimizer step on `batch`. `step` is 0-based within the schedule.
    fn train_step(
        &mut self,
        batch: &[TrainExample],
        optimizer: &OptimizerConfig,
        step: usize,
    ) -> Result<TrainMetrics>;

    /// Mean masked loss of `batch` without updating anything.
    fn loss(&self, batch: &[TrainExample]) -> Result<f64>;

    /// Raw decoder output, including sentinels.
    fn decode(&self, prompt: &PromptInput, config: &DecodeConfig) -> Result<String>;

    /// Log-likelihood of each target given the prompt.
    fn score(&self, prompt: &PromptInput, targets: &[String]) -> Result<Vec<f64>>;

    fn save(&self, dir: &Path) -> Result<()>;

    fn load(&mut self, dir: &Path) -> Result<()>;
}

/// Boxed constructor for fresh backend instances.
pub type BackendFactory<'a> = dyn Fn() -> Result<Box<dyn Seq2SeqBackend>> + Sync + 'a;

/// Loss mask over `target`'s tokens: true for tokens inside `active`.
pub fn loss_mask_for(tokenizer: &dyn TokenizerView, target: &str, active: CharSpan) -> Vec<bool> {
    tokenizer
        .tokenize_with_offsets(target)
        .iter()
        .map(|t| active.contains(&t.span))
        .collect()
}
