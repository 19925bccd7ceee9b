//! Token F1 and exact match with SQuAD normalization.
//!
//!     cargo run --example metrics

use qagen::metrics::{exact_match, normalize_answer, token_f1};

fn main() {
    let pairs = [
        ("The Eiffel Tower", vec!["Eiffel Tower"]),
        ("in 1889", vec!["1889", "March 1889"]),
        ("Paris, France", vec!["Paris"]),
        ("", vec![""]),
        ("London", vec!["Paris"]),
    ];
    for (pred, refs) in pairs {
        println!(
            "{pred:?} vs {refs:?}: normalized {:?}, F1 {:.3}, EM {}",
            normalize_answer(pred),
            token_f1(pred, &refs),
            exact_match(pred, &refs)
        );
    }
}
