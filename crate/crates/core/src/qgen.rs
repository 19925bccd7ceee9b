//! Question generation: few-shot training of the prompt model and decoding
//! questions for sampled answers.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::answers::AnswerCandidate;
use crate::backend::{split_mask_output, BackendFactory, DecodeConfig, OptimizerConfig, OptimizerKind, PromptInput, Schedule, Seq2SeqBackend, TrainExample};
use crate::chunking::{anchor_answer, chunk_context, ChunkConfig, ContextWindow};
use crate::data::{Answer, FewShotSplit, Origin, QASample};
use crate::error::{Error, Result};
use crate::metrics::token_f1;
use crate::seed::derive_seed;
use crate::template::{realize, Bindings, Template};
use crate::training::{enable_template_soft_prompt, masked_example, run_steps, StageSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QGenTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub dropout: f64,
    /// Size of the validation pool, only read by [`tune_qgen_hparams`].
    pub dev_set_size: usize,
}

impl Default for QGenTrainConfig {
    fn default() -> Self {
        Self {
            steps: 130,
            batch_size: 32,
            learning_rate: 1e-4,
            schedule: Schedule::Linear,
            dropout: 0.1,
            dev_set_size: 2048,
        }
    }
}

impl QGenTrainConfig {
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.learning_rate,
            schedule: self.schedule,
            steps: self.steps,
            batch_size: self.batch_size,
            dropout: self.dropout,
            optimizer: OptimizerKind::Adafactor,
        }
    }
}

/// Training example for one (window-sized) gold sample, using its first
/// answer. `Ok(None)` means the answer does not lie in the context and the
/// sample is dropped.
pub fn build_qgen_example(
    sample: &QASample,
    template: &Template,
    backend: &dyn Seq2SeqBackend,
) -> Result<Option<TrainExample>> {
    if sample.question.trim().is_empty() {
        return Err(Error::invalid(format!("sample {}: empty question", sample.id)));
    }
    let Some(answer) = sample.answers.first() else {
        return Ok(None);
    };
    let anchored = Answer::from_context(&sample.context, answer.span);
    if anchored.as_ref().is_none_or(|a| a.text != answer.text) {
        return Ok(None);
    }
    let bindings = Bindings::new()
        .context(&sample.context)
        .answer(&answer.text);
    masked_example(backend, template, &bindings, &sample.question).map(Some)
}

/// Chunk each gold context and build one example per window that still
/// contains the first answer. Windows without it are dropped.
pub fn qgen_examples(
    samples: &[QASample],
    template: &Template,
    backend: &dyn Seq2SeqBackend,
    chunk: &ChunkConfig,
) -> Result<Vec<TrainExample>> {
    let mut out = Vec::new();
    for sample in samples {
        let Some(answer) = sample.answers.first() else {
            continue;
        };
        for window in chunk_context(&sample.id, &sample.context, backend, chunk) {
            let Some(local) = anchor_answer(&window, answer) else {
                continue;
            };
            let windowed = QASample {
                context: window.text.clone(),
                answers: vec![local],
                ..sample.clone()
            };
            out.extend(build_qgen_example(&windowed, template, backend)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QGenTrainReport {
    /// False in zero-shot mode: the pretrained model is used unchanged.
    pub trained: bool,
    pub soft_prompt_weights: usize,
    pub summary: StageSummary,
}

/// Train the question generator for exactly `config.steps` steps. An empty
/// split skips training entirely.
pub fn train_qgen(
    backend: &mut dyn Seq2SeqBackend,
    few_shot: &FewShotSplit,
    template: &Template,
    config: &QGenTrainConfig,
    chunk: &ChunkConfig,
    seed: u64,
) -> Result<QGenTrainReport> {
    if few_shot.is_empty() {
        log::info!("empty few-shot split: question generator left untrained");
        return Ok(QGenTrainReport {
            trained: false,
            soft_prompt_weights: 0,
            summary: StageSummary::default(),
        });
    }
    let examples = qgen_examples(&few_shot.samples, template, &*backend, chunk)?;
    if examples.is_empty() {
        return Err(Error::invalid("no few-shot sample has its answer inside a context window"));
    }
    let weights = enable_template_soft_prompt(backend, template)?;
    let summary = run_steps(backend, &examples, &config.optimizer(), seed, |m| {
        log::debug!("qgen step {} loss {:.4} lr {:.2e}", m.step, m.loss, m.learning_rate);
    })?;
    Ok(QGenTrainReport {
        trained: true,
        soft_prompt_weights: weights,
        summary,
    })
}

/// An answer anchored inside one context window, ready to prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPrompt {
    pub window: ContextWindow,
    /// Span relative to `window.text`.
    pub answer: Answer,
    pub entity_type: String,
}

/// Pair every candidate with every window of its document that fully
/// contains it.
pub fn pair_candidates(windows: &[ContextWindow], candidates: &[AnswerCandidate]) -> Vec<GenerationPrompt> {
    let mut out = Vec::new();
    for c in candidates {
        let answer = Answer {
            text: c.text.clone(),
            span: c.span,
        };
        for w in windows {
            if let Some(local) = anchor_answer(w, &answer) {
                out.push(GenerationPrompt {
                    window: w.clone(),
                    answer: local,
                    entity_type: c.entity_type.clone(),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub id: String,
    pub doc_id: String,
    pub window_char_offset: usize,
    pub entity_type: String,
    pub decode_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub sample: QASample,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GenerationReport {
    pub prompts: usize,
    pub generated: usize,
    pub empty_generation: usize,
    pub decode_failures: usize,
}

fn synthetic_id(p: &GenerationPrompt) -> String {
    format!(
        "syn-{}-{}-{}-{}",
        p.window.parent_doc_id, p.window.char_offset, p.answer.span.start, p.answer.span.end
    )
}

enum Outcome {
    Sample(GeneratedSample),
    Empty,
    Failed,
}

/// Decode one question per prompt. Prompt `i` decodes with a seed derived
/// from `(decode.seed, i)`, so the output does not depend on scheduling.
pub fn generate_questions(
    backend: &dyn Seq2SeqBackend,
    prompts: &[GenerationPrompt],
    template: &Template,
    decode: &DecodeConfig,
) -> Result<(Vec<GeneratedSample>, GenerationReport)> {
    decode.validate()?;
    let markers = backend.markers();
    let outcomes: Vec<Outcome> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let seed = derive_seed(decode.seed, i as u64);
            let bindings = Bindings::new().context(&p.window.text).answer(&p.answer.text);
            let realized = match realize(template, &bindings, &markers.mask_token) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("prompt {i}: {e}");
                    return Outcome::Failed;
                }
            };
            let raw = match backend.decode(&PromptInput::from(realized), &decode.with_seed(seed)) {
                Ok(raw) => raw,
                Err(e) => {
                    log::warn!("prompt {i}: decode failed: {e}");
                    return Outcome::Failed;
                }
            };
            match split_mask_output(&raw, markers).remove(&0) {
                Some(question) => Outcome::Sample(GeneratedSample {
                    provenance: Provenance {
                        id: synthetic_id(p),
                        doc_id: p.window.parent_doc_id.clone(),
                        window_char_offset: p.window.char_offset,
                        entity_type: p.entity_type.clone(),
                        decode_seed: seed,
                    },
                    sample: QASample {
                        id: synthetic_id(p),
                        context: p.window.text.clone(),
                        question,
                        answers: vec![p.answer.clone()],
                        origin: Origin::Synthetic,
                    },
                }),
                None => Outcome::Empty,
            }
        })
        .collect();

    let mut report = GenerationReport {
        prompts: prompts.len(),
        ..Default::default()
    };
    let mut samples = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Sample(s) => {
                report.generated += 1;
                samples.push(s);
            }
            Outcome::Empty => report.empty_generation += 1,
            Outcome::Failed => report.decode_failures += 1,
        }
    }
    Ok((samples, report))
}

/// Index of the grid point with the best mean normalized score.
///
/// `scores[g][s]` is grid point `g` at few-shot size `s`; each column is
/// divided by its best (non-negative) value, rows are averaged, and ties go
/// to the earlier grid point.
pub fn select_normalized_best(scores: &[Vec<f64>]) -> Result<usize> {
    let Some(first) = scores.first() else {
        return Err(Error::invalid("empty hyperparameter grid"));
    };
    let sizes = first.len();
    if sizes == 0 || scores.iter().any(|r| r.len() != sizes) {
        return Err(Error::invalid("every grid point needs one score per few-shot size"));
    }
    let best: Vec<f64> = (0..sizes)
        .map(|s| scores.iter().map(|r| r[s]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let normalized = |row: &Vec<f64>| {
        row.iter()
            .zip(&best)
            .map(|(v, b)| if *b > 0.0 { v / b } else { 1.0 })
            .sum::<f64>()
            / sizes as f64
    };
    let mut winner = 0;
    let mut winner_score = normalized(first);
    for (g, row) in scores.iter().enumerate().skip(1) {
        let n = normalized(row);
        if n > winner_score {
            winner = g;
            winner_score = n;
        }
    }
    Ok(winner)
}

/// Mean token F1 between generated and gold questions on `dev`.
pub fn question_f1(backend: &dyn Seq2SeqBackend, dev: &[QASample], template: &Template) -> Result<f64> {
    if dev.is_empty() {
        return Err(Error::invalid("empty dev pool"));
    }
    let decode = DecodeConfig::beam_only(DecodeConfig::default().beam_size, DecodeConfig::default().max_new_tokens);
    let mut total = 0.0;
    for s in dev {
        let Some(a) = s.answers.first() else { continue };
        let bindings = Bindings::new().context(&s.context).answer(&a.text);
        let prompt = realize(template, &bindings, backend.mask_token())?;
        let raw = backend.decode(&PromptInput::from(prompt), &decode)?;
        let q = split_mask_output(&raw, backend.markers()).remove(&0).unwrap_or_default();
        total += token_f1(&q, &[s.question.as_str()]);
    }
    Ok(total / dev.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningOutcome {
    pub config: QGenTrainConfig,
    /// `scores[g][s]` as passed to [`select_normalized_best`].
    pub scores: Vec<Vec<f64>>,
    pub chosen: usize,
}

/// Grid search over `(learning_rate, steps)`: for each few-shot size draw a
/// split from `train_pool`, train a fresh backend per grid point and score
/// it on the first `base.dev_set_size` samples of `dev_pool`.
#[allow(clippy::too_many_arguments)]
pub fn tune_qgen_hparams(
    factory: &BackendFactory<'_>,
    train_pool: &[QASample],
    dev_pool: &[QASample],
    grid: &[(f64, usize)],
    sizes: &[usize],
    base: &QGenTrainConfig,
    template: &Template,
    chunk: &ChunkConfig,
    seed: u64,
) -> Result<TuningOutcome> {
    if grid.is_empty() {
        return Err(Error::invalid("empty hyperparameter grid"));
    }
    let train_ids: HashSet<&str> = train_pool.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = dev_pool.iter().find(|s| train_ids.contains(s.id.as_str())) {
        return Err(Error::invalid(format!("dev pool overlaps train pool at {}", s.id)));
    }
    let dev = &dev_pool[..base.dev_set_size.min(dev_pool.len())];
    let splits: BTreeMap<usize, FewShotSplit> = sizes
        .iter()
        .map(|&n| Ok((n, crate::data::subsample_split(train_pool, n, derive_seed(seed, n as u64))?)))
        .collect::<Result<_>>()?;
    let mut scores = Vec::with_capacity(grid.len());
    for &(learning_rate, steps) in grid {
        let config = QGenTrainConfig {
            learning_rate,
            steps,
            ..base.clone()
        };
        let mut row = Vec::with_capacity(sizes.len());
        for n in sizes {
            let mut backend = factory()?;
            train_qgen(backend.as_mut(), &splits[n], template, &config, chunk, seed)?;
            row.push(question_f1(backend.as_ref(), dev, template)?);
        }
        log::info!("grid lr={learning_rate:e} steps={steps}: {row:?}");
        scores.push(row);
    }
    let chosen = select_normalized_best(&scores)?;
    Ok(TuningOutcome {
        config: QGenTrainConfig {
            learning_rate: grid[chosen].0,
            steps: grid[chosen].1,
            ..base.clone()
        },
        scores,
        chosen,
    })
}
