//! Split a long context into overlapping token windows and re-anchor an
//! answer span in every window that contains it.
//!
//!     cargo run --example chunking

use qagen::backend::{MockBackend, MockConfig};
use qagen::chunking::{anchor_answer, chunk_context, ChunkConfig};
use qagen::data::CharSpan;
use qagen::Answer;

fn main() -> qagen::Result<()> {
    let tokenizer = MockBackend::new(MockConfig::default())?;
    let text = (0..60)
        .map(|i| match i {
            30 => "The treasure is buried under the old oak tree.".to_string(),
            _ => format!("Sentence number {i} mentions nothing important."),
        })
        .collect::<Vec<_>>()
        .join(" ");
    let config = ChunkConfig { max_context_tokens: 120, stride: 40 };
    let windows = chunk_context("long-doc", &text, &tokenizer, &config);
    let start = text.find("the old oak tree").unwrap();
    let answer = Answer::from_context(&text, CharSpan::new(start, start + 16)).unwrap();
    for w in &windows {
        let anchored = anchor_answer(w, &answer);
        println!(
            "tokens {:>3}..{:<3} chars from {:>4}  answer: {}",
            w.token_range.0,
            w.token_range.1,
            w.char_offset,
            anchored.map(|a| a.span.to_string()).unwrap_or_else(|| "-".into())
        );
    }
    Ok(())
}
