//! Seeded beam search with top-k / top-p sampling on the mock backend, and
//! splitting the raw output at its sentinels.
//!
//!     cargo run --example mock_decoding

use qagen::backend::{split_mask_output, DecodeConfig, MockBackend, MockConfig, PromptInput, Seq2SeqBackend};
use qagen::template::{parse_template, realize, Bindings, QGEN_TEMPLATE};

fn main() -> qagen::Result<()> {
    let backend = MockBackend::new(MockConfig::default())?;
    let template = parse_template(QGEN_TEMPLATE)?;
    let bindings = Bindings::new()
        .context("The Great Wall of China is more than 21,000 kilometres long.")
        .answer("21,000 kilometres");
    let prompt: PromptInput = realize(&template, &bindings, backend.mask_token())?.into();

    for seed in 0..3 {
        let config = DecodeConfig::default().with_seed(seed);
        let raw = backend.decode(&prompt, &config)?;
        let question = split_mask_output(&raw, backend.markers()).remove(&0).unwrap_or_default();
        println!("seed {seed}: raw {raw:?} -> question {question:?}");
    }
    let greedy = backend.decode(&prompt, &DecodeConfig::beam_only(5, 64))?;
    println!("beam only: {greedy:?}");
    Ok(())
}
