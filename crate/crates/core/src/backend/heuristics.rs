//! Rule-based question writing and answer finding used by the mock backend.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;

const FUNCTION_WORDS: &[&str] = &[
    "what", "who", "whom", "whose", "when", "where", "which", "why", "how", "many", "much",
    "year", "the", "a", "an", "of", "in", "on", "at", "to", "for", "by", "with", "from", "and",
    "or", "is", "was", "are", "were", "be", "been", "did", "does", "do", "has", "have", "had",
];

fn word_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[\p{L}\p{N}][\p{L}\p{N}'\-]*").unwrap())
}

/// Byte ranges of the sentences in `text`.
fn sentences(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes: Vec<(usize, char)> = text.char_indices().collect();
    for (i, &(b, c)) in bytes.iter().enumerate() {
        let next_ws = bytes.get(i + 1).is_none_or(|&(_, n)| n.is_whitespace());
        if matches!(c, '.' | '!' | '?') && next_ws {
            let end = b + c.len_utf8();
            out.push((start, end));
            start = end;
        }
    }
    if start < text.len() {
        out.push((start, text.len()));
    }
    out.into_iter()
        .map(|(s, e)| {
            let slice = &text[s..e];
            let lead = slice.len() - slice.trim_start().len();
            let trail = slice.len() - slice.trim_end().len();
            (s + lead, e - trail)
        })
        .filter(|(s, e)| s < e)
        .collect()
}

fn looks_numeric(answer: &str) -> bool {
    answer.chars().any(|c| c.is_ascii_digit())
}

fn looks_like_name(answer: &str) -> bool {
    answer
        .split_whitespace()
        .all(|w| w.chars().next().is_some_and(char::is_uppercase))
}

/// Turn the sentence holding `answer` into a cloze-style question by
/// replacing the answer with a wh-phrase.
pub fn cloze_question(context: &str, answer: &str) -> String {
    let Some(pos) = (!answer.is_empty()).then(|| context.find(answer)).flatten() else {
        return format!("What is {answer}?");
    };
    let (s, e) = sentences(context)
        .into_iter()
        .find(|&(s, e)| s <= pos && pos < e)
        .unwrap_or((0, context.len()));
    let sentence = context[s..e].trim_end_matches(['.', '!', '?', ' ']);
    let local = pos - s;
    let before = sentence[..local.min(sentence.len())].trim_end();
    let after = sentence.get(local + answer.len()..).unwrap_or("").trim_start();
    let wh = if looks_numeric(answer) {
        if answer.len() == 4 && answer.chars().all(|c| c.is_ascii_digit()) {
            "what year"
        } else {
            "how many"
        }
    } else if looks_like_name(answer) && before.is_empty() {
        "who"
    } else {
        "what"
    };
    let mut q = if before.is_empty() {
        let mut chars = wh.chars();
        let head: String = chars.next().map(|c| c.to_uppercase().collect()).unwrap_or_default();
        format!("{head}{} {after}", chars.as_str())
    } else {
        format!("{before} {wh} {after}")
    };
    q = q.trim().trim_end_matches([',', ';', ':']).to_string();
    q.push('?');
    q
}

/// Find the answer to `question` in `context`: the sentence sharing the most
/// content words with the question, then the run of words in it that the
/// question does not mention, closest to where the wh-word sits.
pub fn overlap_answer(context: &str, question: &str) -> Option<String> {
    let q_words: Vec<String> = word_re()
        .find_iter(question)
        .map(|m| m.as_str().to_lowercase())
        .collect();
    let q_set: HashSet<&str> = q_words.iter().map(String::as_str).collect();
    let content: HashSet<&str> = q_set
        .iter()
        .copied()
        .filter(|w| !FUNCTION_WORDS.contains(w))
        .collect();
    let wh_pos = q_words
        .iter()
        .position(|w| matches!(w.as_str(), "what" | "who" | "when" | "where" | "which" | "how"))
        .unwrap_or(0);

    let mut best: Option<(usize, (usize, usize))> = None;
    for (s, e) in sentences(context) {
        let hits = word_re()
            .find_iter(&context[s..e])
            .map(|m| m.as_str().to_lowercase())
            .filter(|w| content.contains(w.as_str()))
            .collect::<HashSet<_>>()
            .len();
        if best.is_none_or(|(h, _)| hits > h) {
            best = Some((hits, (s, e)));
        }
    }
    let (_, (s, e)) = best?;
    let words: Vec<_> = word_re().find_iter(&context[s..e]).collect();
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    for (i, w) in words.iter().enumerate() {
        if q_set.contains(w.as_str().to_lowercase().as_str()) {
            if let Some(r) = current.take() {
                runs.push(r);
            }
        } else {
            current = Some(match current {
                Some((a, _)) => (a, i),
                None => (i, i),
            });
        }
    }
    runs.extend(current);
    let is_function = |i: usize| FUNCTION_WORDS.contains(&words[i].as_str().to_lowercase().as_str());
    let trimmed = runs.into_iter().filter_map(|(mut a, mut b)| {
        while a < b && is_function(a) {
            a += 1;
        }
        while b > a && is_function(b) {
            b -= 1;
        }
        (!is_function(a)).then_some((a, b))
    });
    let (a, b) = trimmed
        .min_by_key(|&(a, b)| (a.abs_diff(wh_pos), usize::MAX - (b - a)))?;
    Some(context[s + words[a].start()..s + words[b].end()].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "Barack Obama was born in Hawaii. He moved to Chicago in 1985.";

    #[test]
    fn cloze_questions() {
        assert_eq!(cloze_question(TEXT, "Hawaii"), "Barack Obama was born in what?");
        assert_eq!(cloze_question(TEXT, "Barack Obama"), "Who was born in Hawaii?");
        assert_eq!(cloze_question(TEXT, "1985"), "He moved to Chicago in what year?");
    }

    #[test]
    fn overlap_answers_invert_cloze() {
        for answer in ["Hawaii", "Barack Obama", "1985", "Chicago"] {
            let q = cloze_question(TEXT, answer);
            assert_eq!(overlap_answer(TEXT, &q).as_deref(), Some(answer), "question {q:?}");
        }
    }

    #[test]
    fn sentence_splitting_keeps_abbreviation_dots_inside_words() {
        let s = sentences("Version 2.5 shipped. Then more");
        assert_eq!(s.len(), 2);
    }
}
