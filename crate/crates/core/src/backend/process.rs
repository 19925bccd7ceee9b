//! Line-delimited JSON protocol for backends that live in another process.
//!
//! Every request is one JSON object with an `op` field; every reply is
//! `{"ok": true, "result": ...}` or `{"ok": false, "error": "..."}`.
//! [`ProcessBackend`] is the client; [`serve`] exposes any in-process backend
//! over the same protocol (the `qagen serve-backend` command uses it), and
//! `scripts/t5_worker.py` implements it for Hugging Face T5 checkpoints.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DecodeConfig, Markers, OptimizerConfig, PromptInput, Seq2SeqBackend, TrainExample, TrainMetrics};
use crate::chunking::{Token, TokenizerView};
use crate::data::CharSpan;
use crate::error::{Error, Result};
use crate::template::SoftPromptSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Info,
    Tokenize { text: String },
    EnableSoftPrompt { spec: SoftPromptSpec },
    TrainStep { batch: Vec<TrainExample>, optimizer: OptimizerConfig, step: usize },
    Loss { batch: Vec<TrainExample> },
    Decode { prompt: PromptInput, config: DecodeConfig },
    Score { prompt: PromptInput, targets: Vec<String> },
    Save { dir: PathBuf },
    Load { dir: PathBuf },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Info {
    pub name: String,
    pub markers: Markers,
    pub embedding_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Reply {
    ok: bool,
    #[serde(default)]
    result: Value,
    #[serde(default)]
    error: Option<String>,
}

struct Channel {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl Channel {
    fn call<T: DeserializeOwned>(&mut self, request: &Request) -> Result<T> {
        let line = serde_json::to_string(request).map_err(|e| Error::Backend(e.to_string()))?;
        let io = |e: std::io::Error| Error::Backend(format!("worker I/O: {e}"));
        writeln!(self.stdin, "{line}").map_err(io)?;
        self.stdin.flush().map_err(io)?;
        let mut reply = String::new();
        if self.stdout.read_line(&mut reply).map_err(io)? == 0 {
            return Err(Error::Backend("worker exited".into()));
        }
        let reply: Reply = serde_json::from_str(&reply)
            .map_err(|e| Error::Backend(format!("malformed worker reply: {e}")))?;
        if !reply.ok {
            return Err(Error::Backend(reply.error.unwrap_or_else(|| "unknown worker error".into())));
        }
        serde_json::from_value(reply.result)
            .map_err(|e| Error::Backend(format!("unexpected worker result: {e}")))
    }
}

/// Client for a backend worker process.
pub struct ProcessBackend {
    info: Info,
    channel: Mutex<Channel>,
}

impl ProcessBackend {
    /// Start `command` and perform the `info` handshake.
    pub fn spawn(command: &[String]) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("empty backend command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::io(program, e))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut channel = Channel {
            child,
            stdin,
            stdout,
        };
        let info: Info = channel.call(&Request::Info)?;
        Ok(Self {
            info,
            channel: Mutex::new(channel),
        })
    }

    pub fn info(&self) -> &Info {
        &self.info
    }

    fn call<T: DeserializeOwned>(&self, request: &Request) -> Result<T> {
        self.channel
            .lock()
            .map_err(|_| Error::Backend("worker channel poisoned".into()))?
            .call(request)
    }
}

impl Drop for ProcessBackend {
    fn drop(&mut self) {
        if let Ok(ch) = self.channel.get_mut() {
            let _ = ch.call::<Value>(&Request::Shutdown);
            let _ = ch.child.wait();
        }
    }
}

impl TokenizerView for ProcessBackend {
    fn tokenize_with_offsets(&self, text: &str) -> Vec<Token> {
        match self.call::<Vec<(u32, usize, usize)>>(&Request::Tokenize { text: text.into() }) {
            Ok(tokens) => tokens
                .into_iter()
                .map(|(id, s, e)| Token {
                    id,
                    span: CharSpan::new(s, e),
                })
                .collect(),
            Err(e) => {
                log::error!("tokenize failed: {e}");
                Vec::new()
            }
        }
    }
}

impl Seq2SeqBackend for ProcessBackend {
    fn name(&self) -> &str {
        &self.info.name
    }

    fn markers(&self) -> &Markers {
        &self.info.markers
    }

    fn embedding_dim(&self) -> usize {
        self.info.embedding_dim
    }

    fn enable_soft_prompt(&mut self, spec: &SoftPromptSpec) -> Result<()> {
        self.call::<Value>(&Request::EnableSoftPrompt { spec: spec.clone() })
            .map(|_| ())
    }

    fn train_step(&mut self, batch: &[TrainExample], optimizer: &OptimizerConfig, step: usize) -> Result<TrainMetrics> {
        self.call(&Request::TrainStep {
            batch: batch.to_vec(),
            optimizer: optimizer.clone(),
            step,
        })
    }

    fn loss(&self, batch: &[TrainExample]) -> Result<f64> {
        self.call(&Request::Loss {
            batch: batch.to_vec(),
        })
    }

    fn decode(&self, prompt: &PromptInput, config: &DecodeConfig) -> Result<String> {
        self.call(&Request::Decode {
            prompt: prompt.clone(),
            config: config.clone(),
        })
    }

    fn score(&self, prompt: &PromptInput, targets: &[String]) -> Result<Vec<f64>> {
        self.call(&Request::Score {
            prompt: prompt.clone(),
            targets: targets.to_vec(),
        })
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let dir = std::path::absolute(dir).map_err(|e| Error::io(dir, e))?;
        self.call::<Value>(&Request::Save { dir }).map(|_| ())
    }

    fn load(&mut self, dir: &Path) -> Result<()> {
        let dir = std::path::absolute(dir).map_err(|e| Error::io(dir, e))?;
        self.call::<Value>(&Request::Load { dir }).map(|_| ())
    }
}

fn handle(backend: &mut dyn Seq2SeqBackend, request: Request) -> Result<Value> {
    let json = |v: Result<Value, serde_json::Error>| v.map_err(|e| Error::Backend(e.to_string()));
    match request {
        Request::Info => json(serde_json::to_value(Info {
            name: backend.name().to_string(),
            markers: backend.markers().clone(),
            embedding_dim: backend.embedding_dim(),
        })),
        Request::Tokenize { text } => {
            let tokens: Vec<(u32, usize, usize)> = backend
                .tokenize_with_offsets(&text)
                .into_iter()
                .map(|t| (t.id, t.span.start, t.span.end))
                .collect();
            json(serde_json::to_value(tokens))
        }
        Request::EnableSoftPrompt { spec } => backend.enable_soft_prompt(&spec).map(|_| Value::Null),
        Request::TrainStep {
            batch,
            optimizer,
            step,
        } => json(serde_json::to_value(backend.train_step(&batch, &optimizer, step)?)),
        Request::Loss { batch } => json(serde_json::to_value(backend.loss(&batch)?)),
        Request::Decode { prompt, config } => json(serde_json::to_value(backend.decode(&prompt, &config)?)),
        Request::Score { prompt, targets } => json(serde_json::to_value(backend.score(&prompt, &targets)?)),
        Request::Save { dir } => backend.save(&dir).map(|_| Value::Null),
        Request::Load { dir } => backend.load(&dir).map(|_| Value::Null),
        Request::Shutdown => Ok(Value::Null),
    }
}

/// Answer protocol requests from `input` until EOF or `shutdown`.
pub fn serve(backend: &mut dyn Seq2SeqBackend, input: impl BufRead, mut output: impl Write) -> Result<()> {
    let io = |e: std::io::Error| Error::Backend(format!("serve I/O: {e}"));
    for line in input.lines() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let (reply, stop) = match serde_json::from_str::<Request>(&line) {
            Ok(request) => {
                let stop = matches!(request, Request::Shutdown);
                let reply = match handle(backend, request) {
                    Ok(result) => Reply {
                        ok: true,
                        result,
                        error: None,
                    },
                    Err(e) => Reply {
                        ok: false,
                        result: Value::Null,
                        error: Some(e.to_string()),
                    },
                };
                (reply, stop)
            }
            Err(e) => (
                Reply {
                    ok: false,
                    result: Value::Null,
                    error: Some(format!("bad request: {e}")),
                },
                false,
            ),
        };
        let text = serde_json::to_string(&reply).map_err(|e| Error::Backend(e.to_string()))?;
        writeln!(output, "{text}").map_err(io)?;
        output.flush().map_err(io)?;
        if stop {
            break;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockConfig};

    fn roundtrip(requests: &[&str]) -> Vec<Value> {
        let mut backend = MockBackend::new(MockConfig::default()).unwrap();
        let input = requests.join("\n");
        let mut out = Vec::new();
        serve(&mut backend, input.as_bytes(), &mut out).unwrap();
        String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn serve_answers_info_and_tokenize() {
        let replies = roundtrip(&[r#"{"op":"info"}"#, r#"{"op":"tokenize","text":"Hi there"}"#]);
        assert_eq!(replies[0]["result"]["name"], "mock");
        assert_eq!(replies[0]["result"]["markers"]["mask_token"], "<s0>");
        assert_eq!(replies[1]["result"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn serve_reports_errors_and_stops_on_shutdown() {
        let replies = roundtrip(&[
            r#"{"op":"nope"}"#,
            r#"{"op":"loss","batch":[{"input":{"text":"x"},"target":"a b","loss_mask":[true]}]}"#,
            r#"{"op":"shutdown"}"#,
            r#"{"op":"info"}"#,
        ]);
        assert_eq!(replies.len(), 3);
        assert_eq!(replies[0]["ok"], false);
        assert_eq!(replies[1]["ok"], false);
        assert_eq!(replies[2]["ok"], true);
    }
}
