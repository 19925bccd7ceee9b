//! Rule-based and round-trip consistency filtering of synthetic samples,
//! with a report whose counts reconcile.
//!
//!     cargo run --example filtering

use qagen::filter::{apply_rule_filter, consistency_filter, ConsistencyConfig, MeaninglessWords};
use qagen::mrqa::AnswerPredictor;
use qagen::qgen::{GeneratedSample, Provenance};
use qagen::{Answer, Origin, QASample};

/// Stands in for a trained QA model.
struct Lookup;

impl AnswerPredictor for Lookup {
    fn predict(&self, _context: &str, question: &str) -> qagen::Result<String> {
        Ok(if question.contains("Who") { "Ada Lovelace".into() } else { "1843 notes".into() })
    }
}

fn sample(i: usize, question: &str) -> GeneratedSample {
    let context = "Ada Lovelace published the first algorithm in 1843.";
    GeneratedSample {
        sample: QASample {
            id: format!("s{i}"),
            context: context.into(),
            question: question.into(),
            answers: vec![if question.contains("Who") { Answer::new("Ada Lovelace", 0, 12) } else { Answer::new("1843", 46, 50) }],
            origin: Origin::Synthetic,
        },
        provenance: Provenance {
            id: format!("s{i}"),
            doc_id: "ada".into(),
            window_char_offset: 0,
            entity_type: "X".into(),
            decode_seed: 0,
        },
    }
}

fn main() -> qagen::Result<()> {
    let questions = [
        "Who published the first algorithm?",
        "When was the first algorithm published?",
        "Who is Ada Lovelace?",
        "What is it?",
        "",
    ];
    let samples: Vec<_> = questions.iter().enumerate().map(|(i, q)| sample(i, q)).collect();
    let (kept, rules) = apply_rule_filter(samples, &MeaninglessWords::default());
    let (kept, consistency) = consistency_filter(kept, &Lookup, &ConsistencyConfig::default())?;
    let total = rules.then(&consistency)?;
    for g in &kept {
        println!("kept {}: {}", g.sample.id, g.sample.question);
    }
    println!("{total:?} reconciles={}", total.reconciles());
    Ok(())
}
