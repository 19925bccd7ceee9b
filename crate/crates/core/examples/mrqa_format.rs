//! Write and read MRQA JSONL. In memory spans are half-open character
//! ranges; on disk the end offset is inclusive.
//!
//!     cargo run --example mrqa_format

use qagen::mrqa_format::{load_mrqa_jsonl, write_mrqa_jsonl};
use qagen::{Answer, Origin, QASample};

fn main() -> qagen::Result<()> {
    let context = "Marie Curie won the Nobel Prize in Physics in 1903.";
    let samples = vec![
        QASample {
            id: "curie-1".into(),
            context: context.into(),
            question: "Who won the Nobel Prize in Physics in 1903?".into(),
            answers: vec![Answer::new("Marie Curie", 0, 11)],
            origin: Origin::Gold,
        },
        QASample {
            id: "curie-2".into(),
            context: context.into(),
            question: "When did Marie Curie win the prize?".into(),
            answers: vec![Answer::new("1903", 46, 50)],
            origin: Origin::Synthetic,
        },
    ];
    let dir = std::env::temp_dir().join("qagen-example-mrqa");
    std::fs::create_dir_all(&dir).map_err(|e| qagen::Error::Config(e.to_string()))?;
    let path = dir.join("sample.jsonl");
    write_mrqa_jsonl(&samples, &path, false)?;
    print!("{}", std::fs::read_to_string(&path).unwrap_or_default());
    let back = load_mrqa_jsonl(&path, false)?;
    assert_eq!(back, samples);
    println!("round trip ok: {} samples", back.len());
    Ok(())
}
