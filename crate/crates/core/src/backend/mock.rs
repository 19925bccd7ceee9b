//! Deterministic test double for [`Seq2SeqBackend`].
//!
//! The mock has no network weights. Its "model" is a controlled-logit stub:
//! for an input it derives a proposal output (from a configured response map,
//! or from rule-based question writing / answer finding when the input
//! matches one of its templates), and at target position `t` the logit of
//! token `v` is
//!
//! ```text
//! bias[v] + boost * [v == proposal[t]]
//! ```
//!
//! Logits depend only on the input and the position, never on other target
//! tokens, so the loss responds exactly to loss-active tokens. Training
//! applies gradient steps to `bias`. Decoding runs the shared beam search
//! over a copy vocabulary (tokens of the input and the proposal).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Mutex, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::decoding::{beam_decode, StepScorer};
use super::heuristics::{cloze_question, overlap_answer};
use super::{DecodeConfig, Markers, OptimizerConfig, PromptInput, Seq2SeqBackend, TrainExample, TrainMetrics};
use crate::chunking::{Token, TokenizerView};
use crate::data::{CharIndex, CharSpan};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::template::{SoftPromptSpec, Template, MRQA_TEMPLATE, QGEN_TEMPLATE};

const PAD: u32 = 0;
const EOS: u32 = 1;
const SENTINEL_BASE: u32 = 2;
const SENTINELS: u32 = 100;
const FIRST_PLAIN: u32 = SENTINEL_BASE + SENTINELS;
const CHECKPOINT_FILE: &str = "mock_backend.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub vocab_size: u32,
    pub embedding_dim: usize,
    /// Logit bonus of the proposal token at each position.
    pub boost: f64,
    /// Exact prompt text → raw decoder output (sentinels included).
    pub responses: BTreeMap<String, String>,
    pub qgen_template: String,
    pub mrqa_template: String,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2048,
            embedding_dim: 16,
            boost: 20.0,
            responses: BTreeMap::new(),
            qgen_template: QGEN_TEMPLATE.into(),
            mrqa_template: MRQA_TEMPLATE.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SoftPromptState {
    spec: SoftPromptSpec,
    rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MockState {
    format_version: u32,
    config: MockConfig,
    bias: Vec<f64>,
    soft_prompt: Option<SoftPromptState>,
    steps_trained: usize,
}

pub struct MockBackend {
    markers: Markers,
    state: MockState,
    qgen: Template,
    mrqa: Template,
    train_calls: usize,
    recorded_masks: Vec<Vec<bool>>,
    proposals: Mutex<HashMap<String, Vec<u32>>>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<s\d+>|</s>|<pad>|[\p{L}\p{N}_]+|[^\s\p{L}\p{N}_]").unwrap())
}

/// `(target token, proposal token, log partition)` at one loss-active position.
type Position = (u32, u32, f64);

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Result<Self> {
        if config.vocab_size <= FIRST_PLAIN {
            return Err(Error::invalid(format!(
                "mock vocab_size must exceed {FIRST_PLAIN}"
            )));
        }
        let qgen = Template::question_generation(&config.qgen_template)?;
        let mrqa = Template::answer_prediction(&config.mrqa_template)?;
        Ok(Self {
            markers: Markers {
                mask_token: "<s0>".into(),
                sentinel_prefix: "<s".into(),
                sentinel_suffix: ">".into(),
                special_tokens: vec!["</s>".into(), "<pad>".into()],
            },
            state: MockState {
                format_version: 1,
                bias: vec![0.0; config.vocab_size as usize],
                config,
                soft_prompt: None,
                steps_trained: 0,
            },
            qgen,
            mrqa,
            train_calls: 0,
            recorded_masks: Vec::new(),
            proposals: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_responses<K: Into<String>, V: Into<String>>(
        responses: impl IntoIterator<Item = (K, V)>,
    ) -> Result<Self> {
        Self::new(MockConfig {
            responses: responses.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
            ..MockConfig::default()
        })
    }

    pub fn config(&self) -> &MockConfig {
        &self.state.config
    }

    /// Number of `train_step` calls on this instance.
    pub fn train_calls(&self) -> usize {
        self.train_calls
    }

    /// Steps trained including those restored from a checkpoint.
    pub fn steps_trained(&self) -> usize {
        self.state.steps_trained
    }

    /// Every loss mask seen by `train_step`, in order.
    pub fn recorded_masks(&self) -> &[Vec<bool>] {
        &self.recorded_masks
    }

    pub fn soft_prompt(&self) -> Option<&SoftPromptSpec> {
        self.state.soft_prompt.as_ref().map(|s| &s.spec)
    }

    /// Trainable soft-token rows (copies of the pretrained rows).
    pub fn soft_prompt_rows(&self) -> Option<&[Vec<f64>]> {
        self.state.soft_prompt.as_ref().map(|s| s.rows.as_slice())
    }

    /// Deterministic "pretrained" embedding row of a token.
    pub fn pretrained_row(&self, id: u32) -> Vec<f64> {
        (0..self.state.config.embedding_dim)
            .map(|j| {
                let h = fnv1a(format!("{id}:{j}").as_bytes());
                (h % 20_001) as f64 / 10_000.0 - 1.0
            })
            .collect()
    }

    fn piece_id(&self, piece: &str) -> u32 {
        match piece {
            "<pad>" => return PAD,
            "</s>" => return EOS,
            _ => {}
        }
        if let Some(n) = piece
            .strip_prefix("<s")
            .and_then(|r| r.strip_suffix('>'))
            .and_then(|n| n.parse::<u32>().ok())
        {
            if n < SENTINELS {
                return SENTINEL_BASE + n;
            }
        }
        let span = self.state.config.vocab_size - FIRST_PLAIN;
        FIRST_PLAIN + (fnv1a(piece.as_bytes()) % u64::from(span)) as u32
    }

    fn is_special(piece: &str) -> bool {
        piece.len() > 1 && piece.starts_with('<')
    }

    /// Tokens with their vocabulary pieces. Non-special pieces carry a `▁`
    /// prefix when preceded by whitespace or at the start of the text.
    fn pieces(&self, text: &str) -> Vec<(Token, String)> {
        let index = CharIndex::new(text);
        token_re()
            .find_iter(text)
            .map(|m| {
                let raw = m.as_str();
                let spaced = text[..m.start()].chars().next_back().is_none_or(char::is_whitespace);
                // Multi-char matches starting with '<' are the special tokens.
                let piece = if raw.len() > 1 && raw.starts_with('<') {
                    raw.to_string()
                } else if spaced {
                    format!("\u{2581}{raw}")
                } else {
                    raw.to_string()
                };
                let span = CharSpan::new(index.char_of_byte(m.start()), index.char_of_byte(m.end()));
                (
                    Token {
                        id: self.piece_id(&piece),
                        span,
                    },
                    piece,
                )
            })
            .collect()
    }

    fn ids(&self, text: &str) -> Vec<u32> {
        self.pieces(text).into_iter().map(|(t, _)| t.id).collect()
    }

    /// Raw output the stub favours for `prompt`.
    fn proposal_text(&self, prompt: &str) -> String {
        let s0 = self.markers.sentinel(0);
        let s1 = self.markers.sentinel(1);
        if let Some(r) = self.state.config.responses.get(prompt) {
            return r.clone();
        }
        let mask = &self.markers.mask_token;
        if let Some(b) = self.qgen.extract(prompt, mask) {
            let q = cloze_question(b.context.as_deref().unwrap_or(""), b.answer.as_deref().unwrap_or(""));
            return format!("{s0} {q} {s1}");
        }
        if let Some(b) = self.mrqa.extract(prompt, mask) {
            let a = overlap_answer(b.context.as_deref().unwrap_or(""), b.question.as_deref().unwrap_or(""))
                .unwrap_or_default();
            return format!("{s0} {a} {s1}");
        }
        format!("{s0} {s1}")
    }

    fn proposal_ids(&self, prompt: &str) -> Vec<u32> {
        let mut cache = self.proposals.lock().expect("proposal cache poisoned");
        if let Some(ids) = cache.get(prompt) {
            return ids.clone();
        }
        let mut ids = self.ids(&self.proposal_text(prompt));
        ids.push(EOS);
        if cache.len() > 100_000 {
            cache.clear();
        }
        cache.insert(prompt.to_string(), ids.clone());
        ids
    }

    fn target_at(proposal: &[u32], t: usize) -> u32 {
        proposal.get(t).copied().unwrap_or(EOS)
    }

    /// Log-partition over the full vocabulary at a position whose proposal
    /// token is `want`, given `sum_exp = Σ_v exp(bias[v])`.
    fn log_z(&self, sum_exp: f64, want: u32) -> f64 {
        let boost = self.state.config.boost;
        let bw = self.state.bias[want as usize];
        // sum_exp + exp(bw) * (e^boost - 1), computed in log space.
        log_sum_exp([sum_exp.ln(), bw + boost + (1.0 - (-boost).exp()).ln()].into_iter())
    }

    fn sum_exp_bias(&self) -> f64 {
        self.state.bias.iter().map(|b| b.exp()).sum()
    }

    fn token_logit(&self, v: u32, want: u32) -> f64 {
        self.state.bias[v as usize] + if v == want { self.state.config.boost } else { 0.0 }
    }

    fn check_example(&self, ex: &TrainExample) -> Result<Vec<u32>> {
        let ids = self.ids(&ex.target);
        if ids.len() != ex.loss_mask.len() {
            return Err(Error::Backend(format!(
                "loss mask has {} entries but target has {} tokens",
                ex.loss_mask.len(),
                ids.len()
            )));
        }
        Ok(ids)
    }

    /// (summed loss, active tokens, per-position detail for gradients)
    fn batch_loss(&self, batch: &[TrainExample]) -> Result<(f64, usize, Vec<Position>)> {
        let sum_exp = self.sum_exp_bias();
        let mut total = 0.0;
        let mut active = 0;
        let mut detail = Vec::new();
        for ex in batch {
            let ids = self.check_example(ex)?;
            let proposal = self.proposal_ids(&ex.input.text);
            for (t, (&y, &on)) in ids.iter().zip(&ex.loss_mask).enumerate() {
                if !on {
                    continue;
                }
                let want = Self::target_at(&proposal, t);
                let lz = self.log_z(sum_exp, want);
                total += lz - self.token_logit(y, want);
                active += 1;
                detail.push((y, want, lz));
            }
        }
        Ok((total, active, detail))
    }
}

impl TokenizerView for MockBackend {
    fn tokenize_with_offsets(&self, text: &str) -> Vec<Token> {
        self.pieces(text).into_iter().map(|(t, _)| t).collect()
    }
}

struct CopyScorer<'a> {
    backend: &'a MockBackend,
    proposal: Vec<u32>,
    allowed: Vec<u32>,
}

impl StepScorer for CopyScorer<'_> {
    fn next_log_probs(&self, prefix: &[u32]) -> Vec<(u32, f64)> {
        let want = MockBackend::target_at(&self.proposal, prefix.len());
        let logits: Vec<f64> = self
            .allowed
            .iter()
            .map(|&v| self.backend.token_logit(v, want))
            .collect();
        let lz = log_sum_exp(logits.iter().copied());
        self.allowed
            .iter()
            .zip(logits)
            .map(|(&v, l)| (v, l - lz))
            .collect()
    }

    fn eos(&self) -> u32 {
        EOS
    }
}

impl Seq2SeqBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn markers(&self) -> &Markers {
        &self.markers
    }

    fn embedding_dim(&self) -> usize {
        self.state.config.embedding_dim
    }

    fn enable_soft_prompt(&mut self, spec: &SoftPromptSpec) -> Result<()> {
        if spec.embedding_dim != self.embedding_dim() {
            return Err(Error::Backend(format!(
                "soft prompt dim {} does not match embedding dim {}",
                spec.embedding_dim,
                self.embedding_dim()
            )));
        }
        let rows = spec
            .literal_token_ids
            .iter()
            .map(|&id| self.pretrained_row(id))
            .collect();
        self.state.soft_prompt = Some(SoftPromptState {
            spec: spec.clone(),
            rows,
        });
        Ok(())
    }

    fn train_step(
        &mut self,
        batch: &[TrainExample],
        optimizer: &OptimizerConfig,
        step: usize,
    ) -> Result<TrainMetrics> {
        let (total, active, detail) = self.batch_loss(batch)?;
        self.train_calls += 1;
        self.state.steps_trained += 1;
        self.recorded_masks.extend(batch.iter().map(|e| e.loss_mask.clone()));
        let lr = optimizer.lr_at(step);
        if active > 0 {
            let boost = self.state.config.boost;
            let n = active as f64;
            let dense: f64 = detail.iter().map(|&(_, _, lz)| (-lz).exp()).sum();
            let mut grad: Vec<f64> = self.state.bias.iter().map(|b| b.exp() * dense).collect();
            for &(y, want, lz) in &detail {
                grad[want as usize] += (self.state.bias[want as usize] - lz).exp() * (boost.exp() - 1.0);
                grad[y as usize] -= 1.0;
            }
            for (b, g) in self.state.bias.iter_mut().zip(grad) {
                *b -= lr * g / n;
            }
        }
        Ok(TrainMetrics {
            step,
            loss: if active > 0 { total / active as f64 } else { 0.0 },
            learning_rate: lr,
            examples: batch.len(),
            active_tokens: active,
        })
    }

    fn loss(&self, batch: &[TrainExample]) -> Result<f64> {
        let (total, active, _) = self.batch_loss(batch)?;
        Ok(if active > 0 { total / active as f64 } else { 0.0 })
    }

    fn decode(&self, prompt: &PromptInput, config: &DecodeConfig) -> Result<String> {
        config.validate()?;
        let proposal_text = self.proposal_text(&prompt.text);
        let mut table: BTreeMap<u32, String> = BTreeMap::new();
        table.insert(EOS, "</s>".into());
        for (tok, piece) in self.pieces(&prompt.text).into_iter().chain(self.pieces(&proposal_text)) {
            table.entry(tok.id).or_insert(piece);
        }
        let mut proposal = self.ids(&proposal_text);
        proposal.push(EOS);
        let scorer = CopyScorer {
            backend: self,
            proposal,
            allowed: table.keys().copied().collect(),
        };
        let ids = beam_decode(&scorer, config);
        let mut out = String::new();
        let mut after_special = false;
        for id in ids {
            let piece = &table[&id];
            if let Some(word) = piece.strip_prefix('\u{2581}') {
                out.push(' ');
                out.push_str(word);
                after_special = false;
            } else if Self::is_special(piece) {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(piece);
                after_special = true;
            } else {
                if after_special {
                    out.push(' ');
                }
                out.push_str(piece);
                after_special = false;
            }
        }
        Ok(out.trim().to_string())
    }

    fn score(&self, prompt: &PromptInput, targets: &[String]) -> Result<Vec<f64>> {
        let proposal = self.proposal_ids(&prompt.text);
        let sum_exp = self.sum_exp_bias();
        Ok(targets
            .iter()
            .map(|target| {
                self.ids(target)
                    .iter()
                    .enumerate()
                    .map(|(t, &y)| {
                        let want = Self::target_at(&proposal, t);
                        self.token_logit(y, want) - self.log_z(sum_exp, want)
                    })
                    .sum()
            })
            .collect())
    }

    fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        jsonl::write_json(&dir.join(CHECKPOINT_FILE), &self.state)
    }

    fn load(&mut self, dir: &Path) -> Result<()> {
        let state: MockState = jsonl::read_json(&dir.join(CHECKPOINT_FILE))?;
        let fresh = MockBackend::new(state.config.clone())?;
        if state.bias.len() != state.config.vocab_size as usize {
            return Err(Error::Backend("checkpoint bias has the wrong length".into()));
        }
        self.markers = fresh.markers;
        self.qgen = fresh.qgen;
        self.mrqa = fresh.mrqa;
        self.state = state;
        self.proposals.lock().expect("proposal cache poisoned").clear();
        Ok(())
    }
}
