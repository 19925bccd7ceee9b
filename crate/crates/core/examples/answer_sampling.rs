//! Tag named entities in documents and keep them as answer candidates.
//!
//!     cargo run --example answer_sampling

use std::collections::BTreeSet;

use qagen::answers::{candidate_stats, sample_answers, RuleTagger};
use qagen::Document;

fn main() -> qagen::Result<()> {
    let doc = Document {
        doc_id: "moon".into(),
        text: "Neil Armstrong and Buzz Aldrin landed on the Moon on 20 July 1969. \
               The Apollo 11 mission launched from Florida with 3 astronauts."
            .into(),
        source: "inline".into(),
    };
    let all = sample_answers(&doc, &RuleTagger, None)?;
    for c in &all {
        println!("{:<10} {:<20} {}", c.entity_type, c.text, c.span);
    }
    println!("by type: {:?}", candidate_stats(&all));

    let dates: BTreeSet<String> = ["DATE".to_string()].into();
    let only_dates = sample_answers(&doc, &RuleTagger, Some(&dates))?;
    println!("DATE only: {:?}", only_dates.iter().map(|c| &c.text).collect::<Vec<_>>());
    Ok(())
}
