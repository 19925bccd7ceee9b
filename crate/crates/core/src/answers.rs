//! Answer candidate sampling through a pluggable entity tagger.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Mutex, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::data::{CharIndex, CharSpan, Document};
use crate::error::{Error, Result};
use crate::jsonl;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub text: String,
    pub span: CharSpan,
    pub label: String,
}

/// Entity recognizer contract. Returned spans index characters of the input
/// text, their `text` equals the slice, and they come in document order.
pub trait EntityTagger: Send + Sync {
    fn tag(&self, text: &str) -> Result<Vec<Entity>>;

    /// Whether one instance may serve several workers at once.
    fn shareable(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerCandidate {
    pub text: String,
    pub span: CharSpan,
    pub entity_type: String,
}

/// One line of the candidate dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub doc_id: String,
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub entity_type: String,
}

impl CandidateRecord {
    pub fn new(doc_id: &str, c: &AnswerCandidate) -> Self {
        Self {
            doc_id: doc_id.to_string(),
            text: c.text.clone(),
            start: c.span.start,
            end: c.span.end,
            entity_type: c.entity_type.clone(),
        }
    }

    pub fn candidate(&self) -> AnswerCandidate {
        AnswerCandidate {
            text: self.text.clone(),
            span: CharSpan::new(self.start, self.end),
            entity_type: self.entity_type.clone(),
        }
    }
}

pub fn write_candidates(path: &Path, records: &[CandidateRecord]) -> Result<()> {
    jsonl::write_jsonl(path, records)
}

pub fn read_candidates(path: &Path) -> Result<Vec<CandidateRecord>> {
    jsonl::read_jsonl(path)
}

/// Tag a document and turn entities into answer candidates.
///
/// Entities are filtered to `allowed_types` (all pass when `None`), exact
/// duplicate spans are dropped keeping the first, and the result is in
/// document order. Overlapping but distinct spans are all kept.
pub fn sample_answers(
    document: &Document,
    tagger: &dyn EntityTagger,
    allowed_types: Option<&BTreeSet<String>>,
) -> Result<Vec<AnswerCandidate>> {
    let tag_err = |message: String| Error::Tagger {
        doc_id: document.doc_id.clone(),
        message,
    };
    let entities = tagger
        .tag(&document.text)
        .map_err(|e| tag_err(e.to_string()))?;
    let index = CharIndex::new(&document.text);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for e in entities {
        if e.span.start >= e.span.end || e.span.end > index.char_count() {
            return Err(tag_err(format!("span {} out of bounds", e.span)));
        }
        let slice = index.slice(&document.text, &e.span);
        if slice != e.text {
            return Err(tag_err(format!(
                "entity text {:?} does not match slice {slice:?}",
                e.text
            )));
        }
        if e.label.is_empty() {
            return Err(tag_err(format!("entity {:?} has an empty label", e.text)));
        }
        if allowed_types.is_some_and(|allowed| !allowed.contains(&e.label)) {
            continue;
        }
        if seen.insert(e.span) {
            out.push(AnswerCandidate {
                text: e.text,
                span: e.span,
                entity_type: e.label,
            });
        }
    }
    out.sort_by_key(|c| (c.span.start, c.span.end));
    Ok(out)
}

/// Histogram of entity types.
pub fn candidate_stats(candidates: &[AnswerCandidate]) -> BTreeMap<String, usize> {
    let mut stats = BTreeMap::new();
    for c in candidates {
        *stats.entry(c.entity_type.clone()).or_insert(0) += 1;
    }
    stats
}

/// Returns a fixed set of entities, independent of model downloads.
#[derive(Debug, Clone)]
pub enum FixtureTagger {
    /// Always return these spans (texts are sliced from the input).
    Spans(Vec<(CharSpan, String)>),
    /// Tag every occurrence of each surface string.
    Gazetteer(Vec<(String, String)>),
}

impl FixtureTagger {
    pub fn spans<L: Into<String>>(spans: impl IntoIterator<Item = (usize, usize, L)>) -> Self {
        FixtureTagger::Spans(
            spans
                .into_iter()
                .map(|(s, e, l)| (CharSpan::new(s, e), l.into()))
                .collect(),
        )
    }

    pub fn gazetteer<S: Into<String>, L: Into<String>>(
        entries: impl IntoIterator<Item = (S, L)>,
    ) -> Self {
        FixtureTagger::Gazetteer(entries.into_iter().map(|(s, l)| (s.into(), l.into())).collect())
    }
}

impl EntityTagger for FixtureTagger {
    fn tag(&self, text: &str) -> Result<Vec<Entity>> {
        let index = CharIndex::new(text);
        match self {
            FixtureTagger::Spans(spans) => spans
                .iter()
                .map(|(span, label)| {
                    if span.end > index.char_count() || span.start > span.end {
                        return Err(Error::Backend(format!("fixture span {span} out of bounds")));
                    }
                    Ok(Entity {
                        text: index.slice(text, span).to_string(),
                        span: *span,
                        label: label.clone(),
                    })
                })
                .collect(),
            FixtureTagger::Gazetteer(entries) => {
                let mut out = Vec::new();
                for (surface, label) in entries {
                    for (byte, m) in text.match_indices(surface.as_str()) {
                        let start = index.char_of_byte(byte);
                        out.push(Entity {
                            text: m.to_string(),
                            span: CharSpan::new(start, index.char_of_byte(byte + m.len())),
                            label: label.clone(),
                        });
                    }
                }
                out.sort_by_key(|e| (e.span.start, e.span.end));
                Ok(out)
            }
        }
    }
}

/// Deterministic pattern-based tagger for English text.
///
/// Recognizes dates, money, percentages, cardinals and runs of capitalized
/// words. Matches are taken in that priority order and never overlap.
#[derive(Debug, Clone, Default)]
pub struct RuleTagger;

struct Rules {
    date: Regex,
    money: Regex,
    percent: Regex,
    cardinal: Regex,
    name: Regex,
}

fn rules() -> &'static Rules {
    static RULES: OnceLock<Rules> = OnceLock::new();
    RULES.get_or_init(|| {
        let month = "(?:January|February|March|April|May|June|July|August|September|October|November|December)";
        Rules {
            date: Regex::new(&format!(
                r"\b(?:{month}(?:\s+\d{{1,2}}(?:st|nd|rd|th)?)?(?:,?\s+\d{{4}})?|\d{{1,2}}\s+{month}(?:\s+\d{{4}})?|(?:1[0-9]|20)\d{{2}}s?)\b"
            ))
            .unwrap(),
            money: Regex::new(r"\$\s?\d[\d,]*(?:\.\d+)?(?:\s+(?:million|billion|trillion))?").unwrap(),
            percent: Regex::new(r"\b\d+(?:\.\d+)?(?:\s?%|\s+percent\b)").unwrap(),
            cardinal: Regex::new(r"\b\d[\d,]*(?:\.\d+)?\b").unwrap(),
            name: Regex::new(r"\b\p{Lu}[\p{L}'\-]*(?:\s+(?:of|the|de|von|van|and)?\s*\p{Lu}[\p{L}'\-]*)*").unwrap(),
        }
    })
}

const ORG_SUFFIXES: &[&str] = &[
    "University", "Inc", "Company", "Corporation", "Institute", "Association", "Party",
    "Council", "Church", "College", "School", "Agency", "Bank", "Society", "Museum",
];
const PLACE_CUES: &[&str] = &["in", "at", "from", "to", "near"];
const SENTENCE_STARTERS: &[&str] = &[
    "The", "A", "An", "In", "On", "At", "It", "This", "That", "These", "Those", "He", "She",
    "They", "We", "I", "His", "Her", "Its", "Their", "There", "After", "Before", "During",
    "When", "While", "As", "For", "By", "But", "And", "Or", "If", "Although", "However",
    "Since", "From", "To", "With", "Of",
];

impl RuleTagger {
    fn classify_name(text: &str, words: &[&str], start_byte: usize) -> &'static str {
        if words.last().is_some_and(|w| ORG_SUFFIXES.contains(w)) || words.first() == Some(&"University") {
            return "ORG";
        }
        let before = text[..start_byte].trim_end();
        let prev = before.rsplit(|c: char| c.is_whitespace()).next().unwrap_or("");
        if PLACE_CUES.contains(&prev) {
            return "GPE";
        }
        if words.len() >= 2 {
            "PERSON"
        } else {
            "PROPN"
        }
    }
}

impl EntityTagger for RuleTagger {
    fn tag(&self, text: &str) -> Result<Vec<Entity>> {
        let r = rules();
        let mut taken: Vec<(usize, usize, &'static str)> = Vec::new();
        let overlaps = |taken: &[(usize, usize, &str)], s: usize, e: usize| {
            taken.iter().any(|&(ts, te, _)| s < te && ts < e)
        };
        for (re, label) in [
            (&r.date, "DATE"),
            (&r.money, "MONEY"),
            (&r.percent, "PERCENT"),
            (&r.cardinal, "CARDINAL"),
        ] {
            for m in re.find_iter(text) {
                if !overlaps(&taken, m.start(), m.end()) {
                    taken.push((m.start(), m.end(), label));
                }
            }
        }
        for m in r.name.find_iter(text) {
            let mut start = m.start();
            let mut words: Vec<&str> = m.as_str().split_whitespace().collect();
            // Drop a capitalized function word at sentence start.
            if words.len() > 1 && SENTENCE_STARTERS.contains(&words[0]) {
                let skip = m.as_str().find(words[1]).unwrap_or(0);
                start += skip;
                words.remove(0);
            } else if words.len() == 1 && SENTENCE_STARTERS.contains(&words[0]) {
                continue;
            }
            let end = m.end();
            if overlaps(&taken, start, end) {
                continue;
            }
            let label = Self::classify_name(text, &words, start);
            taken.push((start, end, label));
        }
        taken.sort();
        let index = CharIndex::new(text);
        Ok(taken
            .into_iter()
            .map(|(s, e, label)| Entity {
                text: text[s..e].to_string(),
                span: CharSpan::new(index.char_of_byte(s), index.char_of_byte(e)),
                label: label.to_string(),
            })
            .collect())
    }
}

/// Adapter for an external NER process speaking line-delimited JSON.
///
/// Each request is `{"text": ...}`; each response is
/// `{"entities": [{"start", "end", "label"}]}` with character offsets, or
/// `{"error": ...}`. The shipped `scripts/stanza_tagger.py` implements it.
pub struct CommandTagger {
    inner: Mutex<TaggerProcess>,
}

struct TaggerProcess {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

#[derive(Deserialize)]
struct TaggerReply {
    #[serde(default)]
    entities: Vec<TaggerSpan>,
    error: Option<String>,
}

#[derive(Deserialize)]
struct TaggerSpan {
    start: usize,
    end: usize,
    label: String,
}

impl CommandTagger {
    pub fn spawn(command: &[String]) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("empty tagger command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::io(program, e))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            inner: Mutex::new(TaggerProcess {
                child,
                stdin,
                stdout,
            }),
        })
    }
}

impl EntityTagger for CommandTagger {
    fn tag(&self, text: &str) -> Result<Vec<Entity>> {
        let mut p = self.inner.lock().expect("tagger lock poisoned");
        let request = serde_json::json!({ "text": text });
        let io = |e: std::io::Error| Error::Backend(format!("tagger process: {e}"));
        writeln!(p.stdin, "{request}").map_err(io)?;
        p.stdin.flush().map_err(io)?;
        let mut line = String::new();
        if p.stdout.read_line(&mut line).map_err(io)? == 0 {
            return Err(Error::Backend("tagger process closed its output".into()));
        }
        let reply: TaggerReply = serde_json::from_str(&line)
            .map_err(|e| Error::Backend(format!("bad tagger reply: {e}")))?;
        if let Some(err) = reply.error {
            return Err(Error::Backend(err));
        }
        let index = CharIndex::new(text);
        Ok(reply
            .entities
            .into_iter()
            .filter(|s| s.start < s.end && s.end <= index.char_count())
            .map(|s| {
                let span = CharSpan::new(s.start, s.end);
                Entity {
                    text: index.slice(text, &span).to_string(),
                    span,
                    label: s.label,
                }
            })
            .collect())
    }

    fn shareable(&self) -> bool {
        false
    }
}

impl Drop for CommandTagger {
    fn drop(&mut self) {
        if let Ok(p) = self.inner.get_mut() {
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(text: &str) -> Document {
        Document {
            doc_id: "d1".into(),
            text: text.into(),
            source: "test".into(),
        }
    }

    #[test]
    fn fixture_entities_become_candidates() {
        let tagger = FixtureTagger::spans([(0, 12, "PERSON"), (25, 31, "GPE")]);
        let c = sample_answers(&doc("Barack Obama was born in Hawaii."), &tagger, None).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].text, "Barack Obama");
        assert_eq!(c[1].text, "Hawaii");
        assert_eq!(c[1].entity_type, "GPE");
    }

    #[test]
    fn no_entities_no_candidates() {
        let tagger = FixtureTagger::spans(Vec::<(usize, usize, &str)>::new());
        assert!(sample_answers(&doc("nothing here"), &tagger, None).unwrap().is_empty());
    }

    #[test]
    fn duplicate_span_is_kept_once() {
        let tagger = FixtureTagger::spans([(0, 6, "ORG"), (0, 6, "GPE"), (0, 3, "X")]);
        let c = sample_answers(&doc("Google rocks"), &tagger, None).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].span, CharSpan::new(0, 3));
        assert_eq!(c[1].entity_type, "ORG");
    }

    #[test]
    fn allowed_types_filter() {
        let tagger = FixtureTagger::spans([(0, 12, "PERSON"), (25, 31, "GPE")]);
        let allowed: BTreeSet<String> = ["GPE".to_string()].into();
        let c = sample_answers(&doc("Barack Obama was born in Hawaii."), &tagger, Some(&allowed)).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].text, "Hawaii");
    }

    struct Broken;
    impl EntityTagger for Broken {
        fn tag(&self, _: &str) -> Result<Vec<Entity>> {
            Err(Error::Backend("model missing".into()))
        }
    }

    #[test]
    fn tagger_failure_names_document() {
        match sample_answers(&doc("x"), &Broken, None) {
            Err(Error::Tagger { doc_id, message }) => {
                assert_eq!(doc_id, "d1");
                assert!(message.contains("model missing"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stats_histogram() {
        let mk = |t: &str| AnswerCandidate {
            text: "x".into(),
            span: CharSpan::new(0, 1),
            entity_type: t.into(),
        };
        let c = vec![mk("PERSON"), mk("DATE"), mk("PERSON"), mk("PERSON"), mk("DATE")];
        let stats = candidate_stats(&c);
        assert_eq!(stats, BTreeMap::from([("DATE".into(), 2), ("PERSON".into(), 3)]));
        assert!(candidate_stats(&[]).is_empty());
        assert_eq!(candidate_stats(&c[..1]).values().sum::<usize>(), 1);
    }

    #[test]
    fn rule_tagger_finds_common_types() {
        let text = "The Eiffel Tower in Paris was completed on March 31, 1889 for $1.5 million, about 40 percent over budget. Gustave Eiffel led 300 workers.";
        let ents = RuleTagger.tag(text).unwrap();
        let found: Vec<(&str, &str)> = ents.iter().map(|e| (e.text.as_str(), e.label.as_str())).collect();
        assert!(found.contains(&("Eiffel Tower", "PERSON")) || found.contains(&("Eiffel Tower", "PROPN")));
        assert!(found.contains(&("Paris", "GPE")));
        assert!(found.contains(&("March 31, 1889", "DATE")));
        assert!(found.contains(&("$1.5 million", "MONEY")));
        assert!(found.contains(&("40 percent", "PERCENT")));
        assert!(found.contains(&("Gustave Eiffel", "PERSON")));
        assert!(found.contains(&("300", "CARDINAL")));
        let d = doc(text);
        for c in sample_answers(&d, &RuleTagger, None).unwrap() {
            assert_eq!(crate::data::char_slice(text, &c.span), Some(c.text.as_str()));
        }
    }

    #[test]
    fn rule_tagger_offsets_are_chars() {
        let text = "Über alles: Zoë Müller visited München in 2019.";
        for e in RuleTagger.tag(text).unwrap() {
            assert_eq!(crate::data::char_slice(text, &e.span), Some(e.text.as_str()));
        }
    }
}
