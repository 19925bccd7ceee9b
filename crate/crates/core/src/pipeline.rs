//! Run orchestration: configuration, corpus ingestion, the stage sequence,
//! run directories and the manifest that makes runs replayable.
//!
//! A run directory holds
//!
//! ```text
//! manifest.json             config snapshot, seeds, stage records, hashes
//! corpus.jsonl              ingested documents
//! candidates.jsonl          answer candidates
//! few_shot.jsonl            labeled split used for training (MRQA format)
//! qgen_train.json
//! generated.jsonl           synthetic samples (MRQA format)
//! generated.provenance.jsonl
//! generation_report.json
//! filtered.jsonl            samples that survived filtering
//! filtered.provenance.jsonl
//! filter_report.json
//! mrqa_train.json
//! predictions/run-<i>.jsonl
//! eval_report.json
//! checkpoints/{qgen,scorer,mrqa/run-<i>}
//! ```
//!
//! Checkpoints go to `$QAGEN_CHECKPOINT_DIR` instead when it is set.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::answers::{read_candidates, sample_answers, write_candidates, CandidateRecord, CommandTagger, EntityTagger, RuleTagger};
use crate::backend::{DecodeConfig, MockBackend, MockConfig, ProcessBackend, Seq2SeqBackend};
use crate::chunking::{chunk_context, ChunkConfig};
use crate::data::{Document, FewShotSplit, QASample};
use crate::error::{Error, Result};
use crate::filter::{apply_rule_filter, consistency_filter, sample_pool, ConsistencyConfig, FilterReport, MeaninglessWords, DEFAULT_POOL_SIZE};
use crate::jsonl::{self, is_gzip_path};
use crate::mrqa::{aggregate_runs, evaluate, predict_all, train_mrqa, write_predictions, EvalReport, MRQATrainConfig, PredictionMode, PromptPredictor, RunAggregate};
use crate::mrqa_format::{load_mrqa_jsonl, write_mrqa_jsonl};
use crate::qgen::{generate_questions, pair_candidates, train_qgen, GeneratedSample, GenerationReport, Provenance, QGenTrainConfig};
use crate::seed::{derive_seed, stage_seed};
use crate::template::{Template, MRQA_TEMPLATE, QGEN_TEMPLATE};

pub const CONFIG_VERSION: u32 = 1;
pub const CHECKPOINT_DIR_ENV: &str = "QAGEN_CHECKPOINT_DIR";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    /// External worker speaking the JSON-lines protocol.
    Process,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct BackendConfig {
    pub name: BackendKind,
    /// Worker command line for `process`.
    pub command: Vec<String>,
    /// Pretrained checkpoint loaded into every fresh instance.
    pub checkpoint: Option<PathBuf>,
    pub mock: MockConfig,
}

impl BackendConfig {
    /// A fresh backend, with the pretrained checkpoint loaded if configured.
    pub fn instantiate(&self) -> Result<Box<dyn Seq2SeqBackend>> {
        let mut backend: Box<dyn Seq2SeqBackend> = match self.name {
            BackendKind::Mock => Box::new(MockBackend::new(self.mock.clone())?),
            BackendKind::Process => Box::new(ProcessBackend::spawn(&self.command)?),
        };
        if let Some(ckpt) = &self.checkpoint {
            backend.load(ckpt)?;
        }
        Ok(backend)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaggerKind {
    #[default]
    Rule,
    Command,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TaggerConfig {
    pub name: TaggerKind,
    pub command: Vec<String>,
    /// Keep only these entity types; all types when absent.
    pub entity_types: Option<BTreeSet<String>>,
}

impl TaggerConfig {
    pub fn instantiate(&self) -> Result<Box<dyn EntityTagger>> {
        Ok(match self.name {
            TaggerKind::Rule => Box::new(RuleTagger),
            TaggerKind::Command => Box::new(CommandTagger::spawn(&self.command)?),
        })
    }
}

/// Labeled split: a split file, or `size` samples drawn from `pool` with
/// `seed`. Neither means zero-shot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct FewShotConfig {
    pub path: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateConfig {
    pub qgen: String,
    pub mrqa: String,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            qgen: QGEN_TEMPLATE.into(),
            mrqa: MRQA_TEMPLATE.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub version: u32,
    pub seed: u64,
    /// Files or directories of `.txt` / JSONL documents.
    pub corpus: Vec<PathBuf>,
    pub few_shot: FewShotConfig,
    /// Gold evaluation set (MRQA format).
    pub eval: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub backend: BackendConfig,
    pub tagger: TaggerConfig,
    pub templates: TemplateConfig,
    pub chunk: ChunkConfig,
    pub qgen: QGenTrainConfig,
    pub decode: DecodeConfig,
    pub pool_size: usize,
    pub meaningless_words: Option<PathBuf>,
    pub consistency: ConsistencyConfig,
    pub mrqa: MRQATrainConfig,
    pub prediction_mode: PredictionMode,
    pub num_runs: usize,
    pub candidate_cap: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            corpus: Vec::new(),
            few_shot: FewShotConfig::default(),
            eval: None,
            output_dir: PathBuf::from("run"),
            backend: BackendConfig::default(),
            tagger: TaggerConfig::default(),
            templates: TemplateConfig::default(),
            chunk: ChunkConfig::default(),
            qgen: QGenTrainConfig::default(),
            decode: DecodeConfig::default(),
            pool_size: DEFAULT_POOL_SIZE,
            meaningless_words: None,
            consistency: ConsistencyConfig::default(),
            mrqa: MRQATrainConfig::default(),
            prediction_mode: PredictionMode::FreeDecode,
            num_runs: 5,
            candidate_cap: None,
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse a TOML file; relative paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in &mut self.corpus {
            resolve(base, p);
        }
        for p in [
            self.few_shot.path.as_mut(),
            self.few_shot.pool.as_mut(),
            self.eval.as_mut(),
            self.backend.checkpoint.as_mut(),
            self.meaningless_words.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
        resolve(base, &mut self.output_dir);
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn qgen_template(&self) -> Result<Template> {
        Template::question_generation(&self.templates.qgen)
    }

    pub fn mrqa_template(&self) -> Result<Template> {
        Template::answer_prediction(&self.templates.mrqa)
    }

    /// Launch-time checks: referenced paths exist, templates parse and
    /// numeric settings are in range.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let referenced = self
            .corpus
            .iter()
            .chain(&self.few_shot.path)
            .chain(&self.few_shot.pool)
            .chain(&self.eval)
            .chain(&self.backend.checkpoint)
            .chain(&self.meaningless_words);
        for p in referenced {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        if self.few_shot.path.is_some() && self.few_shot.pool.is_some() {
            return Err(Error::Config("few_shot: give either path or pool, not both".into()));
        }
        self.qgen_template()?;
        self.mrqa_template()?;
        if self.chunk.stride == 0 || self.chunk.max_context_tokens < self.chunk.stride {
            return Err(Error::Config("chunk: need 1 <= stride <= max_context_tokens".into()));
        }
        if self.num_runs == 0 {
            return Err(Error::Config("num_runs must be >= 1".into()));
        }
        if self.backend.name == BackendKind::Process && self.backend.command.is_empty() {
            return Err(Error::Config("backend.command is required for the process backend".into()));
        }
        self.decode.validate()?;
        self.consistency.validate()?;
        self.qgen.optimizer().validate()?;
        self.mrqa.finetune_stage.validate()?;
        Ok(())
    }

    pub fn few_shot_split(&self) -> Result<FewShotSplit> {
        if let Some(path) = &self.few_shot.path {
            return Ok(FewShotSplit::from_samples(load_mrqa_jsonl(path, is_gzip_path(path))?));
        }
        match &self.few_shot.pool {
            Some(pool) if self.few_shot.size > 0 => {
                let samples = load_mrqa_jsonl(pool, is_gzip_path(pool))?;
                crate::data::subsample_split(&samples, self.few_shot.size, self.few_shot.seed)
            }
            _ => Ok(FewShotSplit::empty()),
        }
    }

    pub fn meaningless_words(&self) -> Result<MeaninglessWords> {
        match &self.meaningless_words {
            Some(p) => MeaninglessWords::from_file(p),
            None => Ok(MeaninglessWords::default()),
        }
    }
}

#[derive(Deserialize)]
struct DocumentLine {
    doc_id: String,
    text: String,
}

fn is_jsonl(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.ends_with(".jsonl") || name.ends_with(".jsonl.gz")
}

fn ingest_file(path: &Path, out: &mut Vec<Document>) -> Result<()> {
    if is_jsonl(path) {
        let reader = jsonl::open_reader(path, is_gzip_path(path))?;
        for (i, line) in std::io::BufRead::lines(reader).enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let d: DocumentLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            out.push(Document {
                doc_id: d.doc_id,
                text: d.text,
                source: path.display().to_string(),
            });
        }
    } else {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Ingest(format!("no file name in {}", path.display())))?;
        out.push(Document {
            doc_id: doc_id.to_string(),
            text,
            source: path.display().to_string(),
        });
    }
    Ok(())
}

/// Read documents from `.txt` files (id = file stem) and JSONL files of
/// `{doc_id, text}`. Directories are read non-recursively in name order.
pub fn ingest_corpus(paths: &[PathBuf]) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for path in paths {
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.is_file() && (is_jsonl(p) || p.extension().is_some_and(|x| x == "txt"))
                })
                .collect();
            entries.sort();
            if entries.is_empty() {
                log::warn!("no documents in {}", path.display());
            }
            for e in entries {
                ingest_file(&e, &mut docs)?;
            }
        } else {
            ingest_file(path, &mut docs)?;
        }
    }
    let mut seen = HashSet::new();
    for d in &docs {
        if !seen.insert(d.doc_id.as_str()) {
            return Err(Error::Ingest(format!("duplicate doc_id {:?}", d.doc_id)));
        }
    }
    Ok(docs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    SampleAnswers,
    TrainQgen,
    Generate,
    Filter,
    TrainMrqa,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::SampleAnswers,
        Stage::TrainQgen,
        Stage::Generate,
        Stage::Filter,
        Stage::TrainMrqa,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::SampleAnswers => "sample-answers",
            Stage::TrainQgen => "train-qgen",
            Stage::Generate => "generate",
            Stage::Filter => "filter",
            Stage::TrainMrqa => "train-mrqa",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub started_ms: u128,
    pub finished_ms: u128,
    /// Artifact paths (relative to the run directory when inside it).
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<StageRecord>,
    /// Artifact path to SHA-256 hex digest.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(config: PipelineConfig) -> Self {
        Self {
            config,
            seeds: BTreeMap::new(),
            stages: Vec::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().rev().find(|r| r.stage == stage)
    }
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn files_under(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for e in entries {
            files_under(&e, out)?;
        }
    } else if path.is_file() {
        out.push(path.to_path_buf());
    }
    Ok(())
}

fn checkpoint_root(run_dir: &Path) -> PathBuf {
    std::env::var_os(CHECKPOINT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| run_dir.join("checkpoints"))
}

/// Synthetic samples joined with their provenance sidecar.
fn read_generated(samples_path: &Path, provenance_path: &Path) -> Result<Vec<GeneratedSample>> {
    let samples = load_mrqa_jsonl(samples_path, false)?;
    let mut prov: HashMap<String, Provenance> = jsonl::read_jsonl::<Provenance>(provenance_path)?
        .into_iter()
        .map(|p| (p.id.clone(), p))
        .collect();
    samples
        .into_iter()
        .map(|sample| {
            let provenance = prov
                .remove(&sample.id)
                .ok_or_else(|| Error::invalid(format!("no provenance for {}", sample.id)))?;
            Ok(GeneratedSample { sample, provenance })
        })
        .collect()
}

fn write_generated(samples: &[GeneratedSample], samples_path: &Path, provenance_path: &Path) -> Result<()> {
    let plain: Vec<QASample> = samples.iter().map(|g| g.sample.clone()).collect();
    write_mrqa_jsonl(&plain, samples_path, false)?;
    jsonl::write_jsonl(provenance_path, samples.iter().map(|g| &g.provenance))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub available: usize,
    pub selected: usize,
    pub requested: usize,
}

/// Contents of `filter_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStageReport {
    pub pool: PoolSummary,
    pub meaningless_words_version: String,
    pub f1_threshold: f64,
    pub rule: FilterReport,
    pub consistency: FilterReport,
    /// Generation, rule and consistency counts combined.
    pub total: FilterReport,
}

/// One pipeline run bound to its output directory.
pub struct Run {
    pub config: PipelineConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl Run {
    /// Open `config.output_dir`, reusing an existing manifest's stage
    /// records when its config snapshot matches.
    pub fn open(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let dir = config.output_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let mut manifest = RunManifest::new(config.clone());
        if manifest_path.exists() {
            let mut old: RunManifest = jsonl::read_json(&manifest_path)?;
            // The directory may have been moved; only the settings matter.
            old.config.output_dir = config.output_dir.clone();
            if old.config == config {
                manifest = old;
            } else {
                log::info!("config changed; previous stage records discarded");
            }
        }
        let seed = config.seed;
        manifest.seeds.insert("master".into(), seed);
        for name in ["sample-answers", "train-qgen", "generate", "pool", "scorer"] {
            manifest.seeds.insert(name.into(), stage_seed(seed, name));
        }
        for i in 0..config.num_runs {
            manifest.seeds.insert(format!("mrqa-run-{i}"), derive_seed(seed, i as u64));
        }
        Ok(Self { config, dir, manifest })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        checkpoint_root(&self.dir).join(name)
    }

    fn seed(&self, name: &str) -> u64 {
        self.manifest.seeds[name]
    }

    fn artifact_key(&self, path: &Path) -> String {
        path.strip_prefix(&self.dir)
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .unwrap_or_else(|_| path.display().to_string())
    }

    fn key_path(&self, key: &str) -> PathBuf {
        let p = Path::new(key);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    fn finish_stage(&mut self, stage: Stage, started_ms: u128, outputs: &[PathBuf]) -> Result<()> {
        let mut files = Vec::new();
        for o in outputs {
            files_under(o, &mut files)?;
        }
        let mut artifacts = Vec::new();
        for f in files {
            let key = self.artifact_key(&f);
            self.manifest.artifacts.insert(key.clone(), sha256_file(&f)?);
            artifacts.push(key);
        }
        self.manifest.stages.retain(|r| r.stage != stage);
        self.manifest.stages.push(StageRecord {
            stage,
            started_ms,
            finished_ms: now_ms(),
            artifacts,
        });
        self.manifest.stages.sort_by_key(|r| r.stage);
        jsonl::write_json(&self.path(MANIFEST_FILE), &self.manifest)
    }

    /// Whether `stage` has a record whose artifacts all exist unchanged.
    pub fn stage_is_current(&self, stage: Stage) -> bool {
        let Some(record) = self.manifest.record(stage) else {
            return false;
        };
        !record.artifacts.is_empty()
            && record.artifacts.iter().all(|key| {
                let expected = self.manifest.artifacts.get(key);
                let actual = sha256_file(&self.key_path(key)).ok();
                expected.is_some() && expected == actual.as_ref()
            })
    }

    fn documents(&self) -> Result<Vec<Document>> {
        jsonl::read_jsonl(&self.path("corpus.jsonl"))
    }

    pub fn ingest(&mut self) -> Result<Vec<Document>> {
        let t = now_ms();
        let docs = ingest_corpus(&self.config.corpus)?;
        let out = self.path("corpus.jsonl");
        jsonl::write_jsonl(&out, &docs)?;
        self.finish_stage(Stage::Ingest, t, &[out])?;
        log::info!("ingested {} documents", docs.len());
        Ok(docs)
    }

    pub fn sample_answers(&mut self) -> Result<Vec<CandidateRecord>> {
        let t = now_ms();
        let docs = self.documents()?;
        let tagger = self.config.tagger.instantiate()?;
        let types = self.config.tagger.entity_types.as_ref();
        let tag = |d: &Document| sample_answers(d, tagger.as_ref(), types);
        let per_doc: Vec<_> = if tagger.shareable() {
            docs.par_iter().map(tag).collect::<Result<_>>()?
        } else {
            docs.iter().map(tag).collect::<Result<_>>()?
        };
        let seed = self.seed("sample-answers");
        let mut records = Vec::new();
        for (i, (doc, cands)) in docs.iter().zip(per_doc).enumerate() {
            let cands = match self.config.candidate_cap {
                Some(cap) => sample_pool(cands, cap, derive_seed(seed, i as u64)),
                None => cands,
            };
            records.extend(cands.iter().map(|c| CandidateRecord::new(&doc.doc_id, c)));
        }
        let out = self.path("candidates.jsonl");
        write_candidates(&out, &records)?;
        self.finish_stage(Stage::SampleAnswers, t, &[out])?;
        log::info!("sampled {} answer candidates", records.len());
        Ok(records)
    }

    pub fn train_qgen(&mut self) -> Result<()> {
        let t = now_ms();
        let split = self.config.few_shot_split()?;
        let split_path = self.path("few_shot.jsonl");
        write_mrqa_jsonl(&split.samples, &split_path, false)?;
        let mut backend = self.config.backend.instantiate()?;
        let report = train_qgen(
            backend.as_mut(),
            &split,
            &self.config.qgen_template()?,
            &self.config.qgen,
            &self.config.chunk,
            self.seed("train-qgen"),
        )?;
        let ckpt = self.checkpoint("qgen");
        backend.save(&ckpt)?;
        let report_path = self.path("qgen_train.json");
        jsonl::write_json(&report_path, &report)?;
        self.finish_stage(Stage::TrainQgen, t, &[split_path, report_path, ckpt])
    }

    pub fn generate(&mut self) -> Result<GenerationReport> {
        let t = now_ms();
        let docs = self.documents()?;
        let mut by_doc: HashMap<String, Vec<_>> = HashMap::new();
        for r in read_candidates(&self.path("candidates.jsonl"))? {
            by_doc.entry(r.doc_id.clone()).or_default().push(r.candidate());
        }
        let mut backend = self.config.backend.instantiate()?;
        backend.load(&self.checkpoint("qgen"))?;
        let mut prompts = Vec::new();
        for d in &docs {
            let Some(cands) = by_doc.get(&d.doc_id) else { continue };
            let windows = chunk_context(&d.doc_id, &d.text, backend.as_ref(), &self.config.chunk);
            prompts.extend(pair_candidates(&windows, cands));
        }
        let decode = self
            .config
            .decode
            .with_seed(derive_seed(self.seed("generate"), self.config.decode.seed));
        let (samples, report) =
            generate_questions(backend.as_ref(), &prompts, &self.config.qgen_template()?, &decode)?;
        let out = self.path("generated.jsonl");
        let prov = self.path("generated.provenance.jsonl");
        write_generated(&samples, &out, &prov)?;
        let report_path = self.path("generation_report.json");
        jsonl::write_json(&report_path, &report)?;
        self.finish_stage(Stage::Generate, t, &[out, prov, report_path])?;
        log::info!("generated {} of {} prompts", report.generated, report.prompts);
        Ok(report)
    }

    pub fn filter(&mut self) -> Result<FilterStageReport> {
        let t = now_ms();
        let generated = read_generated(&self.path("generated.jsonl"), &self.path("generated.provenance.jsonl"))?;
        let generation: GenerationReport = jsonl::read_json(&self.path("generation_report.json"))?;
        let available = generated.len();
        let pooled = sample_pool(generated, self.config.pool_size, self.seed("pool"));
        let pool = PoolSummary {
            available,
            selected: pooled.len(),
            requested: self.config.pool_size,
        };
        let words = self.config.meaningless_words()?;
        let (after_rules, rule_report) = apply_rule_filter(pooled, &words);

        let mrqa_template = self.config.mrqa_template()?;
        let split = self.config.few_shot_split()?;
        let mut scorer = self.config.backend.instantiate()?;
        if !split.is_empty() {
            train_mrqa(
                scorer.as_mut(),
                &[],
                &split,
                &mrqa_template,
                &self.config.mrqa,
                &self.config.chunk,
                self.seed("scorer"),
            )?;
        }
        let scorer_ckpt = self.checkpoint("scorer");
        scorer.save(&scorer_ckpt)?;
        let predictor = PromptPredictor::new(scorer.as_ref(), &mrqa_template, self.config.prediction_mode);
        let (kept, consistency) = consistency_filter(after_rules, &predictor, &self.config.consistency)?;

        let mut rule_with_gen = rule_report.clone();
        rule_with_gen.absorb_generation(&generation);
        let total = rule_with_gen.then(&consistency)?;

        let out = self.path("filtered.jsonl");
        let prov = self.path("filtered.provenance.jsonl");
        write_generated(&kept, &out, &prov)?;
        let report = FilterStageReport {
            pool,
            meaningless_words_version: words.version.clone(),
            f1_threshold: self.config.consistency.f1_threshold,
            rule: rule_report,
            consistency,
            total,
        };
        let report_path = self.path("filter_report.json");
        jsonl::write_json(&report_path, &report)?;
        self.finish_stage(Stage::Filter, t, &[out, prov, report_path, scorer_ckpt])?;
        log::info!("kept {} synthetic samples", report.total.kept_count);
        Ok(report)
    }

    pub fn train_mrqa(&mut self) -> Result<()> {
        let t = now_ms();
        let synthetic = load_mrqa_jsonl(&self.path("filtered.jsonl"), false)?;
        let split = self.config.few_shot_split()?;
        let template = self.config.mrqa_template()?;
        let mut reports = Vec::new();
        let mut outputs = Vec::new();
        for i in 0..self.config.num_runs {
            let mut backend = self.config.backend.instantiate()?;
            let report = train_mrqa(
                backend.as_mut(),
                &synthetic,
                &split,
                &template,
                &self.config.mrqa,
                &self.config.chunk,
                self.seed(&format!("mrqa-run-{i}")),
            )?;
            let ckpt = self.checkpoint(&format!("mrqa/run-{i}"));
            backend.save(&ckpt)?;
            outputs.push(ckpt);
            reports.push(report);
            log::info!("trained MRQA run {i}");
        }
        let report_path = self.path("mrqa_train.json");
        jsonl::write_json(&report_path, &reports)?;
        outputs.push(report_path);
        self.finish_stage(Stage::TrainMrqa, t, &outputs)
    }

    pub fn evaluate(&mut self) -> Result<RunAggregate> {
        let t = now_ms();
        let eval_path = self
            .config
            .eval
            .clone()
            .ok_or_else(|| Error::Config("no evaluation set configured (eval)".into()))?;
        let gold = load_mrqa_jsonl(&eval_path, is_gzip_path(&eval_path))?;
        let template = self.config.mrqa_template()?;
        let mut results = Vec::new();
        let mut outputs = Vec::new();
        for i in 0..self.config.num_runs {
            let mut backend = self.config.backend.instantiate()?;
            backend.load(&self.checkpoint(&format!("mrqa/run-{i}")))?;
            let predictor = PromptPredictor::new(backend.as_ref(), &template, self.config.prediction_mode);
            let predictions = predict_all(&predictor, &gold)?;
            let path = self.path(&format!("predictions/run-{i}.jsonl"));
            write_predictions(&path, &predictions)?;
            outputs.push(path);
            results.push(evaluate(&predictions, &gold)?);
        }
        let aggregate = aggregate_runs(results)?;
        let report_path = self.path("eval_report.json");
        jsonl::write_json(&report_path, &EvalReport::new(&aggregate))?;
        outputs.push(report_path);
        self.finish_stage(Stage::Evaluate, t, &outputs)?;
        log::info!("F1 {aggregate}");
        Ok(aggregate)
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        let r = match stage {
            Stage::Ingest => self.ingest().map(drop),
            Stage::SampleAnswers => self.sample_answers().map(drop),
            Stage::TrainQgen => self.train_qgen(),
            Stage::Generate => self.generate().map(drop),
            Stage::Filter => self.filter().map(drop),
            Stage::TrainMrqa => self.train_mrqa(),
            Stage::Evaluate => self.evaluate().map(drop),
        };
        r.map_err(|e| Error::Stage {
            stage: stage.name().into(),
            source: Box::new(e),
        })
    }

    /// Every stage in order. With `resume`, leading stages whose artifacts
    /// are unchanged are skipped; everything after the first re-run stage
    /// runs again.
    pub fn run_all(&mut self, resume: bool) -> Result<RunAggregate> {
        let mut rerun = !resume;
        for stage in Stage::ALL {
            if !rerun && self.stage_is_current(stage) {
                log::info!("{}: up to date, skipped", stage.name());
                continue;
            }
            rerun = true;
            self.run_stage(stage)?;
        }
        self.load_aggregate()
    }

    /// Rebuild the aggregate from the prediction files on disk.
    pub fn load_aggregate(&self) -> Result<RunAggregate> {
        let eval_path = self
            .config
            .eval
            .clone()
            .ok_or_else(|| Error::Config("no evaluation set configured (eval)".into()))?;
        let gold = load_mrqa_jsonl(&eval_path, is_gzip_path(&eval_path))?;
        let mut results = Vec::new();
        for i in 0..self.config.num_runs {
            let preds = crate::mrqa::read_predictions(&self.path(&format!("predictions/run-{i}.jsonl")))?;
            results.push(evaluate(&preds, &gold)?);
        }
        aggregate_runs(results)
    }
}

/// Run the whole pipeline once: question generation is trained a single
/// time, the QA model `config.num_runs` times with derived seeds.
pub fn run_experiment(config: PipelineConfig) -> Result<RunAggregate> {
    Run::open(config)?.run_all(false)
}

/// Human-readable summary of a run directory.
pub fn report(dir: &Path) -> Result<String> {
    let manifest: RunManifest = jsonl::read_json(&dir.join(MANIFEST_FILE))?;
    let mut out = String::new();
    let _ = writeln!(out, "run directory: {}", dir.display());
    let _ = writeln!(out, "master seed: {}", manifest.config.seed);
    for r in &manifest.stages {
        let _ = writeln!(
            out,
            "  {:<15} {:>7} ms  {} artifacts",
            r.stage.name(),
            r.finished_ms.saturating_sub(r.started_ms),
            r.artifacts.len()
        );
    }
    let gen_path = dir.join("generation_report.json");
    if gen_path.exists() {
        let g: GenerationReport = jsonl::read_json(&gen_path)?;
        let _ = writeln!(out, "generation: {} prompts, {} questions, {} empty, {} failed", g.prompts, g.generated, g.empty_generation, g.decode_failures);
    }
    let filter_path = dir.join("filter_report.json");
    if filter_path.exists() {
        let f: FilterStageReport = jsonl::read_json(&filter_path)?;
        let _ = writeln!(
            out,
            "filtering: pool {}/{} -> kept {} of {} inputs",
            f.pool.selected, f.pool.available, f.total.kept_count, f.total.input_count
        );
        for (reason, n) in &f.total.discarded {
            let _ = writeln!(out, "  {:<22} {n}", serde_json::to_value(reason).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default());
        }
    }
    let eval_path = dir.join("eval_report.json");
    if eval_path.exists() {
        let e: EvalReport = jsonl::read_json(&eval_path)?;
        let _ = writeln!(out, "F1 {} ({} runs, {} std), EM {:.1}, n = {}", e.formatted, e.runs.len(), e.convention, e.exact_match, e.n);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ingest_txt_directory_and_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        for (name, text) in [("b.txt", "two"), ("a.txt", "one"), ("c.txt", "three"), ("skip.md", "x")] {
            std::fs::write(dir.path().join(name), text).unwrap();
        }
        let docs = ingest_corpus(&[dir.path().to_path_buf()]).unwrap();
        assert_eq!(docs.iter().map(|d| d.doc_id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);

        let j = dir.path().join("docs.jsonl");
        std::fs::write(&j, "{\"doc_id\":\"x\",\"text\":\"t\"}\n{\"doc_id\":\"x\",\"text\":\"u\"}\n").unwrap();
        let err = ingest_corpus(&[j]).unwrap_err().to_string();
        assert!(err.contains("\"x\""), "{err}");

        let empty = tempfile::tempdir().unwrap();
        assert!(ingest_corpus(&[empty.path().to_path_buf()]).unwrap().is_empty());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
        let partial = PipelineConfig::from_toml("seed = 3\nnum_runs = 2\n[qgen]\nsteps = 10\n").unwrap();
        assert_eq!(partial.qgen.steps, 10);
        assert_eq!(partial.qgen.batch_size, 32);
        assert_eq!(partial.pool_size, 1_000_000);
        assert!(PipelineConfig::from_toml("nonsense = [").is_err());
    }

    #[test]
    fn defaults_match_documented_values() {
        let c = PipelineConfig::default();
        assert_eq!((c.qgen.steps, c.qgen.batch_size, c.qgen.learning_rate), (130, 32, 1e-4));
        assert_eq!((c.decode.beam_size, c.decode.top_k, c.decode.top_p), (5, 20, 0.95));
        assert_eq!((c.chunk.max_context_tokens, c.chunk.stride), (450, 100));
        assert_eq!(c.consistency.f1_threshold, 0.8);
        assert_eq!(c.mrqa.finetune_stage.steps, 512);
        assert_eq!(c.num_runs, 5);
    }

    #[test]
    fn validation_catches_missing_paths() {
        let cfg = PipelineConfig {
            corpus: vec![PathBuf::from("/definitely/not/here")],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = PipelineConfig {
            num_runs: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
