//! Filtering of generated samples: pool sampling, rule-based checks and
//! round-trip consistency with a QA model.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::QASample;
use crate::error::{Error, Result};
use crate::metrics::token_f1;
use crate::mrqa::AnswerPredictor;
use crate::qgen::{GeneratedSample, GenerationReport};

pub const DEFAULT_POOL_SIZE: usize = 1_000_000;

const MEANINGLESS_V1: &str = include_str!("../data/meaningless_words_v1.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    AnswerInQuestion,
    EmptyQuestion,
    MeaninglessQuestion,
    LowConsistencyF1,
    EmptyGeneration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Keep,
    Discard(DiscardReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_count: usize,
    pub kept_count: usize,
    pub discarded: BTreeMap<DiscardReason, usize>,
}

impl FilterReport {
    pub fn record(&mut self, verdict: Verdict) {
        self.input_count += 1;
        match verdict {
            Verdict::Keep => self.kept_count += 1,
            Verdict::Discard(r) => *self.discarded.entry(r).or_default() += 1,
        }
    }

    pub fn discarded_total(&self) -> usize {
        self.discarded.values().sum()
    }

    /// `kept + discarded == input`.
    pub fn reconciles(&self) -> bool {
        self.kept_count + self.discarded_total() == self.input_count
    }

    /// Count prompts that produced no question (empty output or decode
    /// failure) as inputs discarded with `empty_generation`.
    pub fn absorb_generation(&mut self, generation: &GenerationReport) {
        let n = generation.empty_generation + generation.decode_failures;
        self.input_count += n;
        if n > 0 {
            *self.discarded.entry(DiscardReason::EmptyGeneration).or_default() += n;
        }
    }

    /// Chain a later stage: its inputs are this stage's kept samples.
    pub fn then(&self, next: &FilterReport) -> Result<FilterReport> {
        if next.input_count != self.kept_count {
            return Err(Error::invalid(format!(
                "stage input {} does not match previous kept count {}",
                next.input_count, self.kept_count
            )));
        }
        let mut out = self.clone();
        out.kept_count = next.kept_count;
        for (r, n) in &next.discarded {
            *out.discarded.entry(*r).or_default() += n;
        }
        Ok(out)
    }
}

/// Uniform sample of `min(n, available)` items (reservoir sampling),
/// returned in stream order. Deterministic per seed.
pub fn sample_pool<T>(items: impl IntoIterator<Item = T>, n: usize, seed: u64) -> Vec<T> {
    if n == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reservoir: Vec<(usize, T)> = Vec::new();
    for (i, item) in items.into_iter().enumerate() {
        if reservoir.len() < n {
            reservoir.push((i, item));
        } else {
            let j = rng.gen_range(0..=i);
            if j < n {
                reservoir[j] = (i, item);
            }
        }
    }
    reservoir.sort_by_key(|(i, _)| *i);
    reservoir.into_iter().map(|(_, t)| t).collect()
}

/// Lowercase, collapse whitespace, trim surrounding punctuation.
pub fn normalize_for_containment(text: &str) -> String {
    text.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

/// Versioned list of words that carry no content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeaninglessWords {
    pub version: String,
    words: HashSet<String>,
}

impl Default for MeaninglessWords {
    fn default() -> Self {
        Self::parse(MEANINGLESS_V1)
    }
}

impl MeaninglessWords {
    /// One word per line; `#` starts a comment; `# version: X` sets the
    /// version.
    pub fn parse(text: &str) -> Self {
        let mut version = String::from("unversioned");
        let mut words = HashSet::new();
        for line in text.lines() {
            let line = line.trim();
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("version:") {
                    version = v.trim().to_string();
                }
                continue;
            }
            if !line.is_empty() {
                words.insert(line.to_lowercase());
            }
        }
        Self { version, words }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)
            .map(|t| Self::parse(&t))
            .map_err(|e| Error::io(path, e))
    }

    pub fn from_words<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        Self {
            version: "custom".into(),
            words: words.into_iter().map(|w| w.as_ref().to_lowercase()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Punctuation-only tokens count as meaningless.
    pub fn is_meaningless(&self, token: &str) -> bool {
        let t = token
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_lowercase();
        t.is_empty() || self.words.contains(&t)
    }
}

/// Rule-based verdict for one sample, using its first answer.
pub fn rule_filter(sample: &QASample, words: &MeaninglessWords) -> Verdict {
    let question = normalize_for_containment(&sample.question);
    if question.is_empty() {
        return Verdict::Discard(DiscardReason::EmptyQuestion);
    }
    let answer = sample
        .answers
        .first()
        .map(|a| normalize_for_containment(&a.text))
        .unwrap_or_default();
    if !answer.is_empty() && question.contains(&answer) {
        return Verdict::Discard(DiscardReason::AnswerInQuestion);
    }
    if question.split_whitespace().all(|t| words.is_meaningless(t)) {
        return Verdict::Discard(DiscardReason::MeaninglessQuestion);
    }
    Verdict::Keep
}

/// Apply [`rule_filter`] to every sample; kept samples keep their order.
pub fn apply_rule_filter(
    samples: Vec<GeneratedSample>,
    words: &MeaninglessWords,
) -> (Vec<GeneratedSample>, FilterReport) {
    let verdicts: Vec<Verdict> = samples.par_iter().map(|s| rule_filter(&s.sample, words)).collect();
    let mut report = FilterReport::default();
    let mut kept = Vec::new();
    for (s, v) in samples.into_iter().zip(verdicts) {
        report.record(v);
        if v == Verdict::Keep {
            kept.push(s);
        }
    }
    (kept, report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyConfig {
    /// Samples whose F1 is strictly below this are discarded.
    pub f1_threshold: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self { f1_threshold: 0.8 }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.f1_threshold) {
            return Err(Error::invalid(format!(
                "f1 threshold {} not in [0, 1]",
                self.f1_threshold
            )));
        }
        Ok(())
    }
}

/// Keep iff `f1 >= threshold`.
pub fn consistency_verdict(f1: f64, config: &ConsistencyConfig) -> Verdict {
    if f1 >= config.f1_threshold {
        Verdict::Keep
    } else {
        Verdict::Discard(DiscardReason::LowConsistencyF1)
    }
}

/// Score each sample's generated answer against the predictor's answer.
/// Predictor failures discard the sample.
pub fn consistency_filter(
    samples: Vec<GeneratedSample>,
    predictor: &dyn AnswerPredictor,
    config: &ConsistencyConfig,
) -> Result<(Vec<GeneratedSample>, FilterReport)> {
    config.validate()?;
    let verdicts: Vec<Verdict> = samples
        .par_iter()
        .map(|g| {
            let s = &g.sample;
            match predictor.predict(&s.context, &s.question) {
                Ok(pred) => consistency_verdict(token_f1(&pred, &s.answer_texts()), config),
                Err(e) => {
                    log::warn!("consistency scorer failed on {}: {e}", s.id);
                    Verdict::Discard(DiscardReason::LowConsistencyF1)
                }
            }
        })
        .collect();
    let mut report = FilterReport::default();
    let mut kept = Vec::new();
    for (s, v) in samples.into_iter().zip(verdicts) {
        report.record(v);
        if v == Verdict::Keep {
            kept.push(s);
        }
    }
    Ok((kept, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Answer, Origin};

    fn qa(question: &str, answer: &str) -> QASample {
        let context = format!("{answer} is here.");
        QASample {
            id: "x".into(),
            question: question.into(),
            answers: vec![Answer::new(answer, 0, answer.chars().count())],
            context,
            origin: Origin::Synthetic,
        }
    }

    #[test]
    fn rules() {
        let w = MeaninglessWords::default();
        assert_eq!(
            rule_filter(&qa("When was Barack Obama born?", "Barack Obama"), &w),
            Verdict::Discard(DiscardReason::AnswerInQuestion)
        );
        assert_eq!(rule_filter(&qa("", "x"), &w), Verdict::Discard(DiscardReason::EmptyQuestion));
        assert_eq!(rule_filter(&qa(" ?! ", "x"), &w), Verdict::Discard(DiscardReason::EmptyQuestion));
        assert_eq!(
            rule_filter(&qa("the of a", "x"), &MeaninglessWords::from_words(["the", "of", "a"])),
            Verdict::Discard(DiscardReason::MeaninglessQuestion)
        );
        assert_eq!(
            rule_filter(&qa("What is it?", "Paris"), &w),
            Verdict::Discard(DiscardReason::MeaninglessQuestion)
        );
        assert_eq!(rule_filter(&qa("Where was Obama born?", "Hawaii"), &w), Verdict::Keep);
        assert_eq!(
            rule_filter(&qa("Who visited PARIS  today?", "paris"), &w),
            Verdict::Discard(DiscardReason::AnswerInQuestion)
        );
    }

    #[test]
    fn shipped_list_is_versioned() {
        let w = MeaninglessWords::default();
        assert_eq!(w.version, "1");
        assert!(w.len() > 50);
        assert!(w.is_meaningless("?"));
        assert!(w.is_meaningless("The"));
        assert!(!w.is_meaningless("Obama"));
    }

    #[test]
    fn pool_sampling() {
        assert_eq!(sample_pool(0..10, DEFAULT_POOL_SIZE, 1), (0..10).collect::<Vec<_>>());
        assert!(sample_pool(0..10, 0, 1).is_empty());
        let a = sample_pool(0..1000, 100, 7);
        assert_eq!(a, sample_pool(0..1000, 100, 7));
        assert_eq!(a.len(), 100);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(a, sample_pool(0..1000, 100, 8));
    }

    #[test]
    fn boundary_keeps_exact_threshold() {
        let c = ConsistencyConfig::default();
        assert_eq!(consistency_verdict(0.8, &c), Verdict::Keep);
        assert_eq!(consistency_verdict(1.0, &c), Verdict::Keep);
        assert_eq!(
            consistency_verdict(0.79999, &c),
            Verdict::Discard(DiscardReason::LowConsistencyF1)
        );
        assert!(ConsistencyConfig { f1_threshold: 1.5 }.validate().is_err());
    }

    #[test]
    fn reports_chain_and_reconcile() {
        let mut a = FilterReport::default();
        a.record(Verdict::Keep);
        a.record(Verdict::Keep);
        a.record(Verdict::Discard(DiscardReason::EmptyQuestion));
        a.absorb_generation(&GenerationReport {
            prompts: 5,
            generated: 3,
            empty_generation: 2,
            decode_failures: 0,
        });
        let mut b = FilterReport::default();
        b.record(Verdict::Keep);
        b.record(Verdict::Discard(DiscardReason::LowConsistencyF1));
        let c = a.then(&b).unwrap();
        assert!(c.reconciles());
        assert_eq!((c.input_count, c.kept_count), (5, 1));
        assert!(b.then(&a).is_err());
        let json = serde_json::to_value(&c).unwrap();
        assert_eq!(json["discarded"]["empty_generation"], 2);
    }
}
