//! Pieces shared by question-generation and answer-prediction training:
//! masked-target construction, seeded batch cycling and the step loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{loss_mask_for, OptimizerConfig, PromptInput, Seq2SeqBackend, TrainExample, TrainMetrics};
use crate::data::{char_len, CharSpan};
use crate::error::{Error, Result};
use crate::template::{realize, soft_prompt_spec, Bindings, Template};

/// Build `(input, target, loss mask)` for a template whose mask slot should
/// produce `value`. The target is `<sentinel 0> value <sentinel 1>` and only
/// the tokens of `value` are loss-active.
pub fn masked_example(
    backend: &dyn Seq2SeqBackend,
    template: &Template,
    bindings: &Bindings,
    value: &str,
) -> Result<TrainExample> {
    let markers = backend.markers();
    let prompt = realize(template, bindings, &markers.mask_token)?;
    let open = markers.sentinel(0);
    let target = format!("{open} {value} {}", markers.sentinel(1));
    let start = char_len(&open) + 1;
    let active = CharSpan::new(start, start + char_len(value));
    let loss_mask = loss_mask_for(backend, &target, active);
    Ok(TrainExample {
        input: PromptInput::from(prompt),
        target,
        loss_mask,
    })
}

/// Endless stream of batches; each pass over the data uses a fresh seeded
/// shuffle. Batches are always `batch_size` long and may span two passes.
pub struct BatchCycler<'a> {
    examples: &'a [TrainExample],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> BatchCycler<'a> {
    pub fn new(examples: &'a [TrainExample], batch_size: usize, seed: u64) -> Self {
        let mut c = Self {
            examples,
            batch_size: batch_size.max(1),
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        self.order = (0..self.examples.len()).collect();
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self) -> Vec<TrainExample> {
        let mut batch = Vec::with_capacity(self.batch_size);
        if self.examples.is_empty() {
            return batch;
        }
        while batch.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            batch.push(self.examples[self.order[self.pos]].clone());
            self.pos += 1;
        }
        batch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StageSummary {
    pub steps: usize,
    pub examples: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

/// Run exactly `optimizer.steps` steps over cycled batches.
pub fn run_steps(
    backend: &mut dyn Seq2SeqBackend,
    examples: &[TrainExample],
    optimizer: &OptimizerConfig,
    seed: u64,
    mut on_step: impl FnMut(&TrainMetrics),
) -> Result<StageSummary> {
    optimizer.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let mut cycler = BatchCycler::new(examples, optimizer.batch_size, seed);
    let mut summary = StageSummary {
        examples: examples.len(),
        ..Default::default()
    };
    for step in 0..optimizer.steps {
        let batch = cycler.next_batch();
        let metrics = backend
            .train_step(&batch, optimizer, step)
            .map_err(|e| Error::TrainStep {
                step,
                source: Box::new(e),
            })?;
        summary.first_loss.get_or_insert(metrics.loss);
        summary.last_loss = Some(metrics.loss);
        summary.steps += 1;
        on_step(&metrics);
    }
    Ok(summary)
}

/// Turn the template's literal tokens into trainable soft tokens.
pub fn enable_template_soft_prompt(backend: &mut dyn Seq2SeqBackend, template: &Template) -> Result<usize> {
    let spec = soft_prompt_spec(template, &*backend, backend.embedding_dim());
    let weights = spec.weight_count();
    backend.enable_soft_prompt(&spec)?;
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockConfig};
    use crate::template::QGEN_TEMPLATE;

    fn ex(i: usize) -> TrainExample {
        TrainExample {
            input: PromptInput::plain(format!("p{i}")),
            target: String::new(),
            loss_mask: vec![],
        }
    }

    #[test]
    fn cycling_covers_every_example_each_pass() {
        let examples: Vec<_> = (0..5).map(ex).collect();
        let mut c = BatchCycler::new(&examples, 5, 1);
        for _ in 0..3 {
            let mut seen: Vec<_> = c.next_batch().into_iter().map(|e| e.input.text).collect();
            seen.sort();
            assert_eq!(seen, vec!["p0", "p1", "p2", "p3", "p4"]);
        }
    }

    #[test]
    fn small_sets_fill_full_batches() {
        let examples: Vec<_> = (0..3).map(ex).collect();
        let mut c = BatchCycler::new(&examples, 32, 9);
        assert_eq!(c.next_batch().len(), 32);
        let a: Vec<_> = BatchCycler::new(&examples, 4, 9).next_batch();
        let b: Vec<_> = BatchCycler::new(&examples, 4, 9).next_batch();
        assert_eq!(a, b);
    }

    #[test]
    fn masked_example_marks_only_value_tokens() {
        let m = MockBackend::new(MockConfig::default()).unwrap();
        let t = Template::question_generation(QGEN_TEMPLATE).unwrap();
        let e = masked_example(&m, &t, &Bindings::new().context("C").answer("A"), "Q?").unwrap();
        assert_eq!(e.input.text, "context: C question: <s0> answer: A.");
        assert_eq!(e.target, "<s0> Q? <s1>");
        assert_eq!(e.loss_mask, vec![false, true, true, false]);
        assert_eq!(e.input.literal_spans.len(), 4);
    }
}
