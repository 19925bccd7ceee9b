//! Prompt-tune the question generator on a few labeled samples, then
//! generate questions for entity candidates of an unlabeled document.
//!
//!     cargo run --example question_generation

use std::path::Path;

use qagen::answers::{sample_answers, RuleTagger};
use qagen::backend::{DecodeConfig, MockBackend, MockConfig};
use qagen::chunking::{chunk_context, ChunkConfig};
use qagen::mrqa_format::load_mrqa_jsonl;
use qagen::qgen::{generate_questions, pair_candidates, train_qgen, QGenTrainConfig};
use qagen::template::{parse_template, QGEN_TEMPLATE};
use qagen::{Document, FewShotSplit};

fn main() -> qagen::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let few_shot = FewShotSplit::from_samples(load_mrqa_jsonl(&fixtures.join("few_shot.jsonl"), false)?);
    let template = parse_template(QGEN_TEMPLATE)?;
    let chunk = ChunkConfig::default();

    let mut backend = MockBackend::new(MockConfig::default())?;
    let report = train_qgen(&mut backend, &few_shot, &template, &QGenTrainConfig::default(), &chunk, 1)?;
    println!(
        "trained {} steps on {} examples, loss {:.4} -> {:.4}, {} soft weights",
        report.summary.steps,
        report.summary.examples,
        report.summary.first_loss.unwrap_or(f64::NAN),
        report.summary.last_loss.unwrap_or(f64::NAN),
        report.soft_prompt_weights
    );

    let text = std::fs::read_to_string(fixtures.join("corpus/volcano.txt")).map_err(|e| qagen::Error::Config(e.to_string()))?;
    let doc = Document { doc_id: "volcano".into(), text, source: "fixtures".into() };
    let candidates = sample_answers(&doc, &RuleTagger, None)?;
    let windows = chunk_context(&doc.doc_id, &doc.text, &backend, &chunk);
    let prompts = pair_candidates(&windows, &candidates);
    let (samples, gen) = generate_questions(&backend, &prompts, &template, &DecodeConfig::default().with_seed(7))?;
    for g in samples.iter().take(8) {
        println!("[{}] {} -> {}", g.provenance.entity_type, g.sample.answers[0].text, g.sample.question);
    }
    println!("{gen:?}");
    Ok(())
}
