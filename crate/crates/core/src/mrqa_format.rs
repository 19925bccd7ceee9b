//! Reader and writer for MRQA Shared Task JSONL files.
//!
//! Line 1 is `{"header": {...}}`; every following line holds one context and
//! its questions. Character spans on disk use inclusive end offsets; in memory
//! they are half-open. Samples may carry an extra `origin` key that plain
//! MRQA readers ignore.

use std::collections::{HashSet, VecDeque};
use std::io::{BufRead, Lines, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ensure_valid, Answer, CharSpan, Origin, QASample};
use crate::error::{Error, Result};
use crate::jsonl::{open_reader, Output};

#[derive(Debug, Serialize, Deserialize)]
struct ContextRecord {
    context: String,
    qas: Vec<QaRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QaRecord {
    qid: String,
    question: String,
    detected_answers: Vec<DetectedAnswer>,
    #[serde(default, skip_serializing_if = "is_gold")]
    origin: Origin,
}

fn is_gold(o: &Origin) -> bool {
    *o == Origin::Gold
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectedAnswer {
    text: String,
    char_spans: Vec<[usize; 2]>,
}

#[derive(Debug, Deserialize)]
struct HeaderLine {
    #[allow(dead_code)]
    header: serde_json::Value,
}

/// Streaming reader yielding one validated sample at a time.
pub struct MrqaReader {
    path: PathBuf,
    lines: Lines<Box<dyn BufRead + Send>>,
    line_no: usize,
    pending: VecDeque<QASample>,
    failed: bool,
}

impl MrqaReader {
    pub fn open(path: &Path, gzipped: bool) -> Result<Self> {
        let reader = open_reader(path, gzipped)?;
        let mut lines = reader.lines();
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message,
        };
        let first = lines
            .next()
            .ok_or_else(|| parse_err("missing header record".into()))?
            .map_err(|e| Error::io(path, e))?;
        serde_json::from_str::<HeaderLine>(&first)
            .map_err(|e| parse_err(format!("invalid header record: {e}")))?;
        Ok(Self {
            path: path.to_path_buf(),
            lines,
            line_no: 1,
            pending: VecDeque::new(),
            failed: false,
        })
    }

    fn expand(&self, record: ContextRecord) -> Result<Vec<QASample>> {
        let mut out = Vec::with_capacity(record.qas.len());
        for qa in record.qas {
            let mut answers = Vec::new();
            for det in qa.detected_answers {
                for [start, end_inclusive] in det.char_spans {
                    answers.push(Answer {
                        text: det.text.clone(),
                        span: CharSpan::new(start, end_inclusive + 1),
                    });
                }
            }
            let sample = QASample {
                id: qa.qid,
                context: record.context.clone(),
                question: qa.question,
                answers,
                origin: qa.origin,
            };
            ensure_valid(&sample)?;
            out.push(sample);
        }
        Ok(out)
    }
}

impl Iterator for MrqaReader {
    type Item = Result<QASample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(s) = self.pending.pop_front() {
                return Some(Ok(s));
            }
            if self.failed {
                return None;
            }
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(Error::io(&self.path, e)));
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let parsed = serde_json::from_str::<ContextRecord>(&line)
                .map_err(|e| Error::Parse {
                    path: self.path.clone(),
                    line: self.line_no,
                    message: e.to_string(),
                })
                .and_then(|r| self.expand(r));
            match parsed {
                Ok(samples) => self.pending.extend(samples),
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e));
                }
            }
        }
    }
}

/// Load a whole file, rejecting duplicate question ids.
pub fn load_mrqa_jsonl(path: &Path, gzipped: bool) -> Result<Vec<QASample>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for sample in MrqaReader::open(path, gzipped)? {
        let sample = sample?;
        if !seen.insert(sample.id.clone()) {
            return Err(Error::Validation {
                qid: sample.id,
                violations: vec!["duplicate id".into()],
            });
        }
        out.push(sample);
    }
    Ok(out)
}

/// Write samples, grouping consecutive samples that share a context into one
/// record and consecutive equal-text answers into one detected answer.
pub fn write_mrqa_jsonl(samples: &[QASample], path: &Path, gzipped: bool) -> Result<()> {
    for s in samples {
        ensure_valid(s)?;
    }
    let (mut out, path) = Output::create(path, gzipped)?;
    let io = |e: std::io::Error| Error::io(&path, e);
    writeln!(out, r#"{{"header":{{"dataset":"qagen","format":"mrqa"}}}}"#).map_err(io)?;

    let mut i = 0;
    while i < samples.len() {
        let context = &samples[i].context;
        let mut qas = Vec::new();
        while i < samples.len() && samples[i].context == *context {
            qas.push(qa_record(&samples[i]));
            i += 1;
        }
        let record = ContextRecord {
            context: context.clone(),
            qas,
        };
        serde_json::to_writer(&mut out, &record).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.finish().map_err(io)
}

fn qa_record(sample: &QASample) -> QaRecord {
    let mut detected: Vec<DetectedAnswer> = Vec::new();
    for a in &sample.answers {
        let span = [a.span.start, a.span.end - 1];
        match detected.last_mut() {
            Some(d) if d.text == a.text => d.char_spans.push(span),
            _ => detected.push(DetectedAnswer {
                text: a.text.clone(),
                char_spans: vec![span],
            }),
        }
    }
    QaRecord {
        qid: sample.id.clone(),
        question: sample.question.clone(),
        detected_answers: detected,
        origin: sample.origin,
    }
}
