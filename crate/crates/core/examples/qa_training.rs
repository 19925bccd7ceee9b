//! Train the answer-prediction model on labeled samples and evaluate it over
//! several seeded runs.
//!
//!     cargo run --example qa_training

use std::path::Path;

use qagen::backend::{MockBackend, MockConfig};
use qagen::chunking::ChunkConfig;
use qagen::mrqa::{aggregate_runs, evaluate, predict_all, train_mrqa, MRQATrainConfig, PredictionMode, PromptPredictor};
use qagen::mrqa_format::load_mrqa_jsonl;
use qagen::seed::derive_seed;
use qagen::template::{parse_template, MRQA_TEMPLATE};
use qagen::FewShotSplit;

fn main() -> qagen::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let labeled = FewShotSplit::from_samples(load_mrqa_jsonl(&fixtures.join("few_shot.jsonl"), false)?);
    let dev = load_mrqa_jsonl(&fixtures.join("dev.jsonl"), false)?;
    let template = parse_template(MRQA_TEMPLATE)?;

    let untrained = MockBackend::new(MockConfig::default())?;
    let predictor = PromptPredictor::new(&untrained, &template, PredictionMode::FreeDecode);
    let zero = evaluate(&predict_all(&predictor, &dev)?, &dev)?;
    println!("untrained: F1 {:.1} EM {:.1}", zero.f1, zero.exact_match);

    let mut runs = Vec::new();
    for i in 0..3 {
        let mut backend = MockBackend::new(MockConfig::default())?;
        let report = train_mrqa(&mut backend, &[], &labeled, &template, &MRQATrainConfig::default(), &ChunkConfig::default(), derive_seed(13, i))?;
        let predictor = PromptPredictor::new(&backend, &template, PredictionMode::SpanConstrained);
        let result = evaluate(&predict_all(&predictor, &dev)?, &dev)?;
        println!("run {i}: {} steps, F1 {:.1}", report.finetune.map(|s| s.steps).unwrap_or(0), result.f1);
        runs.push(result);
    }
    println!("F1 {}", aggregate_runs(runs)?);
    Ok(())
}
