//! Realize the question-generation and answer-prediction prompts and count
//! the soft-prompt weights their literal text contributes.
//!
//!     cargo run --example templates

use qagen::backend::{MockBackend, MockConfig, Seq2SeqBackend};
use qagen::template::{literal_token_breakdown, parse_template, realize, soft_prompt_spec, Bindings, MRQA_TEMPLATE, QGEN_TEMPLATE};

fn main() -> qagen::Result<()> {
    let backend = MockBackend::new(MockConfig::default())?;
    let context = "Barack Obama was born in Hawaii in 1961.";
    let qgen = parse_template(QGEN_TEMPLATE)?;
    let mrqa = parse_template(MRQA_TEMPLATE)?;

    let prompt = realize(&qgen, &Bindings::new().context(context).answer("Hawaii"), backend.mask_token())?;
    println!("qgen: {}", prompt.text);
    let prompt = realize(&mrqa, &Bindings::new().context(context).question("Where was Obama born?"), backend.mask_token())?;
    println!("mrqa: {}", prompt.text);

    for (name, t) in [("qgen", &qgen), ("mrqa", &mrqa)] {
        let spec = soft_prompt_spec(t, &backend, backend.embedding_dim());
        println!(
            "{name}: {} literal tokens x dim {} = {} soft weights {:?}",
            spec.literal_token_count,
            spec.embedding_dim,
            spec.weight_count(),
            literal_token_breakdown(t, &backend)
        );
    }
    Ok(())
}
