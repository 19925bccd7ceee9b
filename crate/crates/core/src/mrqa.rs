//! Prompt-based extractive QA: two-stage training, answer prediction and
//! evaluation with token F1 / exact match.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{split_mask_output, DecodeConfig, OptimizerConfig, OptimizerKind, PromptInput, Schedule, Seq2SeqBackend, TrainExample};
use crate::chunking::{anchor_answer, chunk_context, ChunkConfig};
use crate::data::{char_slice, CharSpan, FewShotSplit, QASample};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::metrics::{exact_match, token_f1};
use crate::template::{realize, Bindings, Template};
use crate::training::{enable_template_soft_prompt, masked_example, run_steps, StageSummary};

/// Stage 1 runs `max(ceil(n / batch) * epochs, min_steps)` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticStage {
    pub epochs: usize,
    pub min_steps: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub dropout: f64,
}

impl Default for SyntheticStage {
    fn default() -> Self {
        Self {
            epochs: 1,
            min_steps: 500,
            learning_rate: 5e-5,
            schedule: Schedule::Constant,
            batch_size: 32,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MRQATrainConfig {
    pub synthetic_stage: SyntheticStage,
    pub finetune_stage: OptimizerConfig,
    /// Train on synthetic data only, even when labeled data exists.
    pub skip_finetune: bool,
}

impl Default for MRQATrainConfig {
    fn default() -> Self {
        Self {
            synthetic_stage: SyntheticStage::default(),
            finetune_stage: OptimizerConfig {
                learning_rate: 5e-5,
                schedule: Schedule::Constant,
                steps: 512,
                batch_size: 32,
                dropout: 0.1,
                optimizer: OptimizerKind::Adafactor,
            },
            skip_finetune: false,
        }
    }
}

/// Stage-1 step count for `n` synthetic examples; 0 when there are none.
pub fn stage1_steps(n: usize, stage: &SyntheticStage) -> usize {
    if n == 0 {
        return 0;
    }
    let per_epoch = n.div_ceil(stage.batch_size.max(1));
    (per_epoch * stage.epochs).max(stage.min_steps)
}

/// Answer-prediction examples: each context is chunked and every window
/// holding the first answer yields one example.
pub fn mrqa_examples(
    samples: &[QASample],
    template: &Template,
    backend: &dyn Seq2SeqBackend,
    chunk: &ChunkConfig,
) -> Result<Vec<TrainExample>> {
    let mut out = Vec::new();
    for s in samples {
        let Some(answer) = s.answers.first() else { continue };
        for window in chunk_context(&s.id, &s.context, backend, chunk) {
            if anchor_answer(&window, answer).is_none() {
                continue;
            }
            let bindings = Bindings::new().context(&window.text).question(&s.question);
            out.push(masked_example(backend, template, &bindings, &answer.text)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MrqaTrainReport {
    pub soft_prompt_weights: usize,
    pub synthetic: Option<StageSummary>,
    pub finetune: Option<StageSummary>,
}

/// Train on synthetic data, then on labeled data. Either input may be
/// empty, not both.
#[allow(clippy::too_many_arguments)]
pub fn train_mrqa(
    backend: &mut dyn Seq2SeqBackend,
    synthetic: &[QASample],
    labeled: &FewShotSplit,
    template: &Template,
    config: &MRQATrainConfig,
    chunk: &ChunkConfig,
    seed: u64,
) -> Result<MrqaTrainReport> {
    let use_labeled = !labeled.is_empty() && !config.skip_finetune;
    if synthetic.is_empty() && !use_labeled {
        return Err(Error::invalid("nothing to train: no synthetic and no labeled samples"));
    }
    let mut report = MrqaTrainReport {
        soft_prompt_weights: enable_template_soft_prompt(backend, template)?,
        ..Default::default()
    };
    if !synthetic.is_empty() {
        let examples = mrqa_examples(synthetic, template, &*backend, chunk)?;
        let stage = &config.synthetic_stage;
        let opt = OptimizerConfig {
            learning_rate: stage.learning_rate,
            schedule: stage.schedule,
            steps: stage1_steps(examples.len(), stage),
            batch_size: stage.batch_size,
            dropout: stage.dropout,
            optimizer: OptimizerKind::Adafactor,
        };
        if !examples.is_empty() {
            report.synthetic = Some(run_steps(backend, &examples, &opt, seed, |_| {})?);
        }
    }
    if use_labeled {
        let examples = mrqa_examples(&labeled.samples, template, &*backend, chunk)?;
        report.finetune = Some(run_steps(
            backend,
            &examples,
            &config.finetune_stage,
            seed.wrapping_add(1),
            |_| {},
        )?);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// Decode freely and read the text after the first sentinel.
    #[default]
    FreeDecode,
    /// Score every context span up to a length cap and pick the best.
    SpanConstrained,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub predicted_text: String,
    pub mode: PredictionMode,
}

/// Longest candidate span, in backend tokens, for span-constrained mode.
pub const MAX_SPAN_TOKENS: usize = 30;

fn prompt_for(backend: &dyn Seq2SeqBackend, template: &Template, context: &str, question: &str) -> Result<PromptInput> {
    let bindings = Bindings::new().context(context).question(question);
    Ok(realize(template, &bindings, backend.mask_token())?.into())
}

/// Predict the answer to `question` over `context`. A decode failure gives
/// an empty prediction.
pub fn predict_answer(
    backend: &dyn Seq2SeqBackend,
    context: &str,
    question: &str,
    template: &Template,
    mode: PredictionMode,
    decode: &DecodeConfig,
) -> Result<String> {
    if context.is_empty() {
        return Err(Error::invalid("empty context"));
    }
    let prompt = prompt_for(backend, template, context, question)?;
    match mode {
        PredictionMode::FreeDecode => match backend.decode(&prompt, decode) {
            Ok(raw) => Ok(split_mask_output(&raw, backend.markers()).remove(&0).unwrap_or_default()),
            Err(e) => {
                log::warn!("answer decode failed: {e}");
                Ok(String::new())
            }
        },
        PredictionMode::SpanConstrained => {
            let spans = candidate_spans(backend, context, MAX_SPAN_TOKENS);
            let markers = backend.markers();
            let targets: Vec<String> = spans
                .iter()
                .map(|s| {
                    let text = char_slice(context, s).unwrap_or_default();
                    format!("{} {text} {}", markers.sentinel(0), markers.sentinel(1))
                })
                .collect();
            let scores = match backend.score(&prompt, &targets) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("span scoring failed: {e}");
                    return Ok(String::new());
                }
            };
            let best = best_index(&scores);
            Ok(best
                .and_then(|i| char_slice(context, &spans[i]))
                .unwrap_or_default()
                .to_string())
        }
    }
}

/// First index of the maximum score, ignoring NaN.
fn best_index(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if !s.is_nan() && best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Character spans of every run of 1..=`max_tokens` consecutive tokens.
pub fn candidate_spans(backend: &dyn Seq2SeqBackend, context: &str, max_tokens: usize) -> Vec<CharSpan> {
    let tokens = backend.tokenize_with_offsets(context);
    let mut out = Vec::new();
    for i in 0..tokens.len() {
        for j in i..tokens.len().min(i + max_tokens) {
            out.push(CharSpan::new(tokens[i].span.start, tokens[j].span.end));
        }
    }
    out
}

/// Anything that answers a question about a context.
pub trait AnswerPredictor: Sync {
    fn predict(&self, context: &str, question: &str) -> Result<String>;
}

/// [`AnswerPredictor`] backed by a prompted model.
pub struct PromptPredictor<'a> {
    pub backend: &'a dyn Seq2SeqBackend,
    pub template: &'a Template,
    pub mode: PredictionMode,
    pub decode: DecodeConfig,
}

impl<'a> PromptPredictor<'a> {
    pub fn new(backend: &'a dyn Seq2SeqBackend, template: &'a Template, mode: PredictionMode) -> Self {
        Self {
            backend,
            template,
            mode,
            decode: DecodeConfig::beam_only(DecodeConfig::default().beam_size, 32),
        }
    }
}

impl AnswerPredictor for PromptPredictor<'_> {
    fn predict(&self, context: &str, question: &str) -> Result<String> {
        predict_answer(self.backend, context, question, self.template, self.mode, &self.decode)
    }
}

/// Predict every sample in parallel; output order follows `samples`.
pub fn predict_all(
    predictor: &PromptPredictor<'_>,
    samples: &[QASample],
) -> Result<Vec<Prediction>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(Prediction {
                sample_id: s.id.clone(),
                predicted_text: predictor.predict(&s.context, &s.question)?,
                mode: predictor.mode,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub f1: f64,
    pub em: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Percent.
    pub f1: f64,
    /// Percent.
    pub exact_match: f64,
    pub per_sample: Vec<SampleScore>,
}

/// Score predictions against gold. Samples without a prediction score 0.
pub fn evaluate(predictions: &[Prediction], gold: &[QASample]) -> Result<EvalResult> {
    let mut by_id: HashMap<&str, &str> = HashMap::new();
    for p in predictions {
        if by_id.insert(&p.sample_id, &p.predicted_text).is_some() {
            return Err(Error::invalid(format!("duplicate prediction id {}", p.sample_id)));
        }
    }
    let gold_ids: HashSet<&str> = gold.iter().map(|g| g.id.as_str()).collect();
    if let Some(p) = predictions.iter().find(|p| !gold_ids.contains(p.sample_id.as_str())) {
        return Err(Error::invalid(format!("prediction for unknown id {}", p.sample_id)));
    }
    let per_sample: Vec<SampleScore> = gold
        .iter()
        .map(|g| {
            let refs = g.answer_texts();
            let (f1, em) = match by_id.get(g.id.as_str()) {
                Some(pred) => (token_f1(pred, &refs), exact_match(pred, &refs)),
                None => (0.0, 0.0),
            };
            SampleScore {
                id: g.id.clone(),
                f1,
                em,
            }
        })
        .collect();
    let n = per_sample.len().max(1) as f64;
    Ok(EvalResult {
        f1: 100.0 * per_sample.iter().map(|s| s.f1).sum::<f64>() / n,
        exact_match: 100.0 * per_sample.iter().map(|s| s.em).sum::<f64>() / n,
        per_sample,
    })
}

pub const STD_CONVENTION: &str = "population";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub mean: f64,
    /// Population standard deviation of the runs' F1.
    pub std: f64,
    pub runs: Vec<EvalResult>,
}

impl fmt::Display for RunAggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1}±{:.1}", self.mean, self.std)
    }
}

pub fn aggregate_runs(results: Vec<EvalResult>) -> Result<RunAggregate> {
    if results.is_empty() {
        return Err(Error::invalid("no runs to aggregate"));
    }
    let n = results.len() as f64;
    let mean = results.iter().map(|r| r.f1).sum::<f64>() / n;
    let var = results.iter().map(|r| (r.f1 - mean).powi(2)).sum::<f64>() / n;
    Ok(RunAggregate {
        mean,
        std: var.sqrt(),
        runs: results,
    })
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub prediction: String,
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let records: Vec<PredictionRecord> = predictions
        .iter()
        .map(|p| PredictionRecord {
            id: p.sample_id.clone(),
            prediction: p.predicted_text.clone(),
        })
        .collect();
    jsonl::write_jsonl(path, &records)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    Ok(jsonl::read_jsonl::<PredictionRecord>(path)?
        .into_iter()
        .map(|r| Prediction {
            sample_id: r.id,
            predicted_text: r.prediction,
            mode: PredictionMode::FreeDecode,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub f1: f64,
    pub exact_match: f64,
}

/// Evaluation report written per pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1: f64,
    pub exact_match: f64,
    pub n: usize,
    pub runs: Vec<RunScore>,
    pub mean: f64,
    pub std: f64,
    pub convention: String,
    pub formatted: String,
}

impl EvalReport {
    pub fn new(aggregate: &RunAggregate) -> Self {
        let k = aggregate.runs.len() as f64;
        Self {
            f1: aggregate.mean,
            exact_match: aggregate.runs.iter().map(|r| r.exact_match).sum::<f64>() / k,
            n: aggregate.runs.first().map_or(0, |r| r.per_sample.len()),
            runs: aggregate
                .runs
                .iter()
                .map(|r| RunScore {
                    f1: r.f1,
                    exact_match: r.exact_match,
                })
                .collect(),
            mean: aggregate.mean,
            std: aggregate.std,
            convention: STD_CONVENTION.into(),
            formatted: aggregate.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockConfig};
    use crate::data::{Answer, Origin};
    use crate::template::MRQA_TEMPLATE;

    fn mrqa() -> Template {
        Template::answer_prediction(MRQA_TEMPLATE).unwrap()
    }

    fn gold(id: &str, answers: &[&str]) -> QASample {
        let context = answers.join(" ");
        let mut pos = 0;
        let answers = answers
            .iter()
            .map(|a| {
                let n = a.chars().count();
                let ans = Answer::new(*a, pos, pos + n);
                pos += n + 1;
                ans
            })
            .collect();
        QASample {
            id: id.into(),
            context,
            question: "q".into(),
            answers,
            origin: Origin::Gold,
        }
    }

    fn pred(id: &str, text: &str) -> Prediction {
        Prediction {
            sample_id: id.into(),
            predicted_text: text.into(),
            mode: PredictionMode::FreeDecode,
        }
    }

    #[test]
    fn stage_one_rule() {
        let s = SyntheticStage::default();
        assert_eq!(stage1_steps(3_200, &s), 500);
        assert_eq!(stage1_steps(32_000, &s), 1000);
        assert_eq!(stage1_steps(32_001, &s), 1001);
        assert_eq!(stage1_steps(0, &s), 0);
    }

    #[test]
    fn evaluation_examples() {
        let g = vec![gold("a", &["cat"]), gold("b", &["dog"])];
        let r = evaluate(&[pred("a", "cat"), pred("b", "dog")], &g).unwrap();
        assert_eq!((r.f1, r.exact_match), (100.0, 100.0));
        let r = evaluate(&[pred("a", "cat"), pred("b", "emu")], &g).unwrap();
        assert_eq!((r.f1, r.exact_match), (50.0, 50.0));
        let r = evaluate(&[pred("a", "cat")], &g).unwrap();
        assert_eq!(r.f1, 50.0);
        assert!(evaluate(&[pred("a", "x"), pred("a", "y")], &g).is_err());
        assert!(evaluate(&[pred("zz", "x")], &g).is_err());
        let multi = vec![gold("m", &["red fox", "fox"])];
        assert_eq!(evaluate(&[pred("m", "fox")], &multi).unwrap().f1, 100.0);
    }

    fn result(f1: f64) -> EvalResult {
        EvalResult {
            f1,
            exact_match: f1,
            per_sample: vec![],
        }
    }

    #[test]
    fn aggregation() {
        let a = aggregate_runs([80.0, 81.0, 82.0, 83.0, 84.0].map(result).to_vec()).unwrap();
        assert_eq!(a.mean, 82.0);
        let a = aggregate_runs(vec![result(70.0)]).unwrap();
        assert_eq!(a.std, 0.0);
        let a = aggregate_runs(vec![result(86.0), result(86.8)]).unwrap();
        assert_eq!(a.to_string(), "86.4±0.4");
        assert!(aggregate_runs(vec![]).is_err());
    }

    #[test]
    fn free_decode_uses_mask_segment() {
        let m = MockBackend::with_responses([(
            "context: Obama was born in Hawaii. question: Where was Obama born? answer: <s0>.",
            "<s0> Hawaii <s1>",
        )])
        .unwrap();
        let p = predict_answer(
            &m,
            "Obama was born in Hawaii.",
            "Where was Obama born?",
            &mrqa(),
            PredictionMode::FreeDecode,
            &DecodeConfig::default(),
        )
        .unwrap();
        assert_eq!(p, "Hawaii");
        assert!(predict_answer(&m, "", "q", &mrqa(), PredictionMode::FreeDecode, &DecodeConfig::default()).is_err());
    }

    #[test]
    fn span_constrained_stays_in_context() {
        let m = MockBackend::with_responses([(
            "context: Obama was born in Hawaii. question: Where? answer: <s0>.",
            "<s0> Honolulu <s1>",
        )])
        .unwrap();
        let ctx = "Obama was born in Hawaii.";
        let p = predict_answer(&m, ctx, "Where?", &mrqa(), PredictionMode::SpanConstrained, &DecodeConfig::default()).unwrap();
        assert!(ctx.contains(&p), "{p:?}");
        assert!(!p.is_empty());
    }

    #[test]
    fn training_counts_and_errors() {
        let mut m = MockBackend::new(MockConfig::default()).unwrap();
        let t = mrqa();
        let c = ChunkConfig::default();
        let cfg = MRQATrainConfig {
            synthetic_stage: SyntheticStage {
                min_steps: 3,
                ..Default::default()
            },
            finetune_stage: OptimizerConfig {
                steps: 4,
                ..MRQATrainConfig::default().finetune_stage
            },
            skip_finetune: false,
        };
        assert!(train_mrqa(&mut m, &[], &FewShotSplit::empty(), &t, &cfg, &c, 0).is_err());
        let syn = vec![gold("s", &["cat"])];
        let r = train_mrqa(&mut m, &syn, &FewShotSplit::empty(), &t, &cfg, &c, 0).unwrap();
        assert_eq!(r.synthetic.unwrap().steps, 3);
        assert!(r.finetune.is_none());
        let r = train_mrqa(&mut m, &syn, &FewShotSplit::from_samples(syn.clone()), &t, &cfg, &c, 0).unwrap();
        assert_eq!(r.finetune.unwrap().steps, 4);
        assert_eq!(r.soft_prompt_weights, 7 * 16);
    }
}
