//! SQuAD-style answer normalization, token F1 and exact match.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;

fn articles() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(a|an|the)\b").unwrap())
}

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse
/// whitespace. Same steps and order as the SQuAD evaluation script.
pub fn normalize_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let no_articles = articles().replace_all(&no_punct, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn tokens(text: &str) -> Vec<String> {
    normalize_answer(text)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn f1_single(prediction: &[String], reference: &[String]) -> f64 {
    match (prediction.is_empty(), reference.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for t in prediction {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    // 2PR / (P + R) with P = c/|pred|, R = c/|ref| reduces to this.
    (2 * common) as f64 / (prediction.len() + reference.len()) as f64
}

/// Best token-overlap F1 of `prediction` against any reference, in [0, 1].
pub fn token_f1<S: AsRef<str>>(prediction: &str, references: &[S]) -> f64 {
    let pred = tokens(prediction);
    references
        .iter()
        .map(|r| f1_single(&pred, &tokens(r.as_ref())))
        .fold(0.0, f64::max)
}

/// 1.0 if the normalized prediction equals any normalized reference.
pub fn exact_match<S: AsRef<str>>(prediction: &str, references: &[S]) -> f64 {
    let pred = normalize_answer(prediction);
    if references.iter().any(|r| normalize_answer(r.as_ref()) == pred) {
        1.0
    } else {
        0.0
    }
}
