use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigError, ExperimentConfig};
use crate::distmath::{softmax_t, Temperature};
use crate::evalmetrics::{corpus_scores, retention, rouge_scores, MetricsError, RetentionReport, RougeScores};
use crate::longdoc::{summarize_long, LongDocError, MapReduceTrace, Route};
use crate::losses::CpdpAnchor;
use crate::teachercache::{read_cache, write_cache, CacheError, CacheFile, PseudoLabelRecord, TopKRecord};
use crate::toytrain::{
    derive_seed, detokenize, gate_trace, generate, tokenize, train, Checkpoint, Corpus, DecodeMode, Example,
    GenerateConfig, LossMode, Supervision, TeacherSource, TopKIndex, ToyError, ToyModel, TrainConfig, EOS,
};

pub const OUTPUT_VERSION: u32 = 1;
const TEACHERS: [&str; 2] = ["t1", "t2"];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    LongDoc(#[from] LongDocError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("missing {what}: {path} (run `{hint}` first)")]
    Missing {
        what: String,
        path: PathBuf,
        hint: &'static str,
    },
    #[error("{0}")]
    Mismatch(String),
    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

/// File names inside the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub out: PathBuf,
    /// Teacher checkpoints and caches; may be shared between runs.
    pub artifacts: PathBuf,
}

impl Layout {
    pub fn new(out: &Path) -> Self {
        Self {
            out: out.to_path_buf(),
            artifacts: out.to_path_buf(),
        }
    }

    pub fn with_artifacts(out: &Path, artifacts: &Path) -> Self {
        Self {
            out: out.to_path_buf(),
            artifacts: artifacts.to_path_buf(),
        }
    }
    pub fn teacher_checkpoint(&self, i: usize) -> PathBuf {
        self.artifacts.join(format!("teacher{i}.ckpt.json"))
    }
    pub fn teacher_metrics(&self, i: usize) -> PathBuf {
        self.artifacts.join(format!("teacher{i}.metrics.jsonl"))
    }
    pub fn topk(&self, i: usize) -> PathBuf {
        self.artifacts.join(format!("teacher{i}.topk.jsonl"))
    }
    pub fn pseudo_topk(&self, i: usize) -> PathBuf {
        self.artifacts.join(format!("teacher{i}.pseudo_topk.jsonl"))
    }
    pub fn pseudo(&self) -> PathBuf {
        self.artifacts.join("pseudo.jsonl")
    }
    pub fn student_checkpoint(&self) -> PathBuf {
        self.out.join("student.ckpt.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.out.join("metrics.jsonl")
    }
    pub fn eval(&self) -> PathBuf {
        self.out.join("eval.json")
    }
    pub fn mapreduce(&self) -> PathBuf {
        self.out.join("mapreduce.json")
    }
    pub fn mapreduce_trace(&self) -> PathBuf {
        self.out.join("mapreduce_trace.json")
    }
    pub fn gate_trace(&self) -> PathBuf {
        self.out.join("gate_trace.jsonl")
    }
}

#[derive(Serialize)]
struct Versioned<'a, T: Serialize> {
    version: u32,
    #[serde(flatten)]
    inner: &'a T,
}

fn versioned_json<T: Serialize>(inner: &T) -> String {
    serde_json::to_string(&Versioned {
        version: OUTPUT_VERSION,
        inner,
    })
    .expect("output serializes")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = String::new();
    for item in items {
        text.push_str(&versioned_json(item));
        text.push('\n');
    }
    write_file(path, &text)
}

fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_file(path, &(ck.to_json() + "\n"))
}

fn require(path: &Path, what: &str, hint: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing {
            what: what.to_string(),
            path: path.to_path_buf(),
            hint,
        })
    }
}

fn load_checkpoint(path: &Path, what: &str, hint: &'static str) -> Result<Checkpoint> {
    require(path, what, hint)?;
    Ok(Checkpoint::load(path)?)
}

fn corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    Ok(Corpus::generate(&cfg.corpus, derive_seed(cfg.seed, "corpus"))?)
}

fn with_eos(tokens: &[u32]) -> Vec<u32> {
    let mut t = tokens.to_vec();
    t.push(EOS);
    t
}

fn check_vocab(model: &ToyModel, cfg: &ExperimentConfig, what: &str) -> Result<()> {
    if model.vocab_size != cfg.corpus.vocab_size {
        return Err(CliError::Mismatch(format!(
            "{what} has vocabulary {}, corpus has {}",
            model.vocab_size, cfg.corpus.vocab_size
        )));
    }
    Ok(())
}

fn teacher_train_config(cfg: &ExperimentConfig, i: usize) -> TrainConfig {
    let spec = if i == 1 { cfg.teachers.t1 } else { cfg.teachers.t2 };
    TrainConfig {
        hidden_dim: spec.hidden_dim,
        epochs: spec.epochs,
        learning_rate: spec.learning_rate,
        seed: derive_seed(cfg.seed, &format!("teacher{i}")),
        batch_size: cfg.train.batch_size,
        max_summary_len: cfg.teachers.max_summary_len,
        context_limit: cfg.train.context_limit,
        ..TrainConfig::preset(LossMode::Ce)
    }
}

/// Trains both teachers with plain cross-entropy.
pub fn cmd_train_teachers(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let corpus = corpus(cfg)?;
    let sup = Supervision::default();
    let (c1, c2) = (teacher_train_config(cfg, 1), teacher_train_config(cfg, 2));
    let (r1, r2) = rayon::join(|| train(&c1, &corpus, &sup), || train(&c2, &corpus, &sup));
    for (i, outcome) in [(1, r1?), (2, r2?)] {
        save_checkpoint(&layout.teacher_checkpoint(i), &outcome.checkpoint())?;
        write_jsonl(&layout.teacher_metrics(i), &outcome.metrics)?;
    }
    Ok(())
}

fn topk_records(model: &ToyModel, items: &[(String, &[u32], Vec<u32>)], k: usize) -> Result<Vec<TopKRecord>> {
    items
        .par_iter()
        .map(|(key, doc, target)| {
            let pass = model.forward(doc, target)?;
            let dists: Vec<_> = pass.logits.iter().map(|z| softmax_t(z, Temperature::ONE)).collect();
            Ok(TopKRecord::from_dists(key.clone(), &dists, k))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSummary {
    pub topk_records: usize,
    pub pseudo_records: usize,
}

/// Writes, for each teacher, a top-k cache over gold targets and over every
/// pseudo-label target, plus one pseudo-label file for both teachers.
pub fn cmd_cache_teacher(cfg: &ExperimentConfig, layout: &Layout) -> Result<CacheSummary> {
    let hint = "relkd train-teachers";
    let teachers: Vec<ToyModel> = (1..=2)
        .map(|i| {
            let ck = load_checkpoint(&layout.teacher_checkpoint(i), &format!("teacher {i} checkpoint"), hint)?;
            check_vocab(&ck.params.model, cfg, "teacher checkpoint")?;
            Ok(ck.params.model)
        })
        .collect::<Result<_>>()?;
    let corpus = corpus(cfg)?;
    let vocab_size = cfg.corpus.vocab_size;
    let gen = GenerateConfig {
        mode: DecodeMode::Beam(cfg.teachers.beam_width),
        max_len: cfg.teachers.max_summary_len,
        eos: Some(EOS),
    };
    let mut pseudo = Vec::new();
    for (model, name) in teachers.iter().zip(TEACHERS) {
        let records: Vec<Option<PseudoLabelRecord>> = corpus
            .train
            .par_iter()
            .map(|ex| {
                let tokens = generate(model, &ex.document, &gen);
                (!tokens.is_empty()).then(|| PseudoLabelRecord {
                    id: ex.id.clone(),
                    teacher: name.to_string(),
                    beam: cfg.teachers.beam_width as u32,
                    text: detokenize(&tokens),
                    tokens,
                })
            })
            .collect();
        pseudo.extend(records.into_iter().flatten());
    }
    let gold: Vec<(String, &[u32], Vec<u32>)> = corpus
        .train
        .iter()
        .map(|e| (e.id.clone(), e.document.as_slice(), with_eos(&e.summary)))
        .collect();
    let docs: std::collections::BTreeMap<&str, &Example> = corpus.train.iter().map(|e| (e.id.as_str(), e)).collect();
    let pseudo_targets: Vec<(String, &[u32], Vec<u32>)> = pseudo
        .iter()
        .map(|r| {
            (
                format!("{}#{}", r.id, r.teacher),
                docs[r.id.as_str()].document.as_slice(),
                with_eos(&r.tokens),
            )
        })
        .collect();
    let k = cfg.teachers.top_k;
    let mut files = Vec::new();
    for (i, model) in teachers.iter().enumerate() {
        files.push((
            layout.topk(i + 1),
            CacheFile::TopK {
                vocab_size,
                k,
                records: topk_records(model, &gold, k)?,
            },
        ));
        files.push((
            layout.pseudo_topk(i + 1),
            CacheFile::TopK {
                vocab_size,
                k,
                records: topk_records(model, &pseudo_targets, k)?,
            },
        ));
    }
    let pseudo_count = pseudo.len();
    files.push((
        layout.pseudo(),
        CacheFile::Pseudo {
            vocab_size,
            records: pseudo,
        },
    ));
    for (_, f) in &files {
        f.validate()?;
    }
    std::fs::create_dir_all(&layout.artifacts).map_err(|e| CliError::Io(layout.artifacts.clone(), e))?;
    for (path, f) in &files {
        write_cache(f, path)?;
    }
    Ok(CacheSummary {
        topk_records: corpus.train.len(),
        pseudo_records: pseudo_count,
    })
}

fn load_topk(paths: &[PathBuf], cfg: &ExperimentConfig) -> Result<TopKIndex> {
    let mut index = TopKIndex {
        vocab_size: cfg.corpus.vocab_size,
        ..Default::default()
    };
    for path in paths {
        require(path, "top-k teacher cache", "relkd cache-teacher")?;
        let part = TopKIndex::from_cache(read_cache(path)?)?;
        if part.vocab_size != cfg.corpus.vocab_size {
            return Err(CliError::Mismatch(format!(
                "{} has vocabulary {}, corpus has {}",
                path.display(),
                part.vocab_size,
                cfg.corpus.vocab_size
            )));
        }
        index.records.extend(part.records);
    }
    Ok(index)
}

fn teacher_source(cfg: &ExperimentConfig, layout: &Layout, i: usize, pseudo_targets: bool) -> Result<TeacherSource> {
    let mut paths = vec![layout.topk(i)];
    if pseudo_targets {
        paths.push(layout.pseudo_topk(i));
    }
    Ok(TeacherSource::from_cache(TEACHERS[i - 1], load_topk(&paths, cfg)?))
}

fn supervision(cfg: &ExperimentConfig, layout: &Layout) -> Result<Supervision> {
    let mode = cfg.train.loss_mode;
    let mut sup = Supervision::default();
    let pseudo = mode.uses_pseudo() && cfg.train.mixing.p_pseudo > 0.0;
    if mode.needs_teacher2() {
        sup.teacher1 = Some(teacher_source(cfg, layout, 1, false)?);
        sup.teacher2 = Some(teacher_source(cfg, layout, 2, false)?);
    } else if mode.needs_teacher1() {
        let i = cfg.preset.kd_teacher();
        let mut t = teacher_source(cfg, layout, i, pseudo)?;
        if mode.uses_inter() {
            let ck = load_checkpoint(
                &layout.teacher_checkpoint(i),
                "teacher checkpoint",
                "relkd train-teachers",
            )?;
            check_vocab(&ck.params.model, cfg, "teacher checkpoint")?;
            t.model = Some(ck.params.model);
        }
        sup.teacher1 = Some(t);
    }
    if pseudo {
        let path = layout.pseudo();
        require(&path, "pseudo-label cache", "relkd cache-teacher")?;
        match read_cache(&path)? {
            CacheFile::Pseudo { vocab_size, records } if vocab_size == cfg.corpus.vocab_size => sup.add_pseudo(records),
            _ => {
                return Err(CliError::Mismatch(format!(
                    "{} is not a matching pseudo-label cache",
                    path.display()
                )))
            }
        }
    }
    Ok(sup)
}

/// Trains the student for the configured arm.
pub fn cmd_distill(cfg: &ExperimentConfig, layout: &Layout) -> Result<Checkpoint> {
    let sup = supervision(cfg, layout)?;
    let corpus = corpus(cfg)?;
    let outcome = train(&cfg.train, &corpus, &sup)?;
    let ck = outcome.checkpoint();
    save_checkpoint(&layout.student_checkpoint(), &ck)?;
    write_jsonl(&layout.metrics(), &outcome.metrics)?;
    Ok(ck)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub examples: usize,
    pub student: RougeScores,
    pub teacher: Option<RougeScores>,
    pub retention: Option<RetentionReport>,
}

fn score(model: &ToyModel, examples: &[Example], max_len: usize) -> Result<RougeScores> {
    let gen = GenerateConfig {
        max_len,
        ..Default::default()
    };
    let per: Vec<RougeScores> = examples
        .par_iter()
        .map(|e| rouge_scores(&generate(model, &e.document, &gen), &e.summary))
        .collect();
    Ok(corpus_scores(&per)?)
}

/// Greedy decoding over the test split.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    layout: &Layout,
    checkpoint: Option<&Path>,
    teacher: Option<&Path>,
) -> Result<EvalReport> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| layout.student_checkpoint());
    let student = load_checkpoint(&path, "checkpoint", "relkd distill")?.params.model;
    check_vocab(&student, cfg, "checkpoint")?;
    let teacher = teacher
        .map(|p| load_checkpoint(p, "teacher checkpoint", "relkd train-teachers").map(|c| c.params.model))
        .transpose()?;
    let corpus = corpus(cfg)?;
    if corpus.test.is_empty() {
        return Err(MetricsError::Empty.into());
    }
    let max_len = cfg.train.max_summary_len;
    let s = score(&student, &corpus.test, max_len)?;
    let t = teacher.map(|m| score(&m, &corpus.test, max_len)).transpose()?;
    let report = EvalReport {
        version: OUTPUT_VERSION,
        examples: corpus.test.len(),
        student: s,
        teacher: t,
        retention: t.map(|t| retention(&s, &t)).transpose()?,
    };
    write_file(
        &layout.eval(),
        &(serde_json::to_string(&report).expect("report serializes") + "\n"),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReduceReport {
    pub version: u32,
    pub route: Route,
    pub input_tokens: usize,
    pub summary: Vec<u32>,
    pub text: String,
    /// REDUCE applications.
    pub depth: usize,
    pub map_chunks: usize,
}

pub fn cmd_mapreduce(
    cfg: &ExperimentConfig,
    layout: &Layout,
    document: &Path,
    checkpoint: Option<&Path>,
    reduce_checkpoint: Option<&Path>,
    trace: bool,
) -> Result<MapReduceReport> {
    let text = std::fs::read_to_string(document).map_err(|e| CliError::Io(document.to_path_buf(), e))?;
    let tokens = tokenize(&text)?;
    let map_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| layout.student_checkpoint());
    let map_model = load_checkpoint(&map_path, "checkpoint", "relkd distill")?.params.model;
    let reduce_model = match reduce_checkpoint {
        Some(p) => load_checkpoint(p, "reduce checkpoint", "relkd distill")?.params.model,
        None => map_model.clone(),
    };
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= map_model.vocab_size) {
        return Err(ToyError::TokenOutOfRange {
            token: t,
            vocab: map_model.vocab_size,
        }
        .into());
    }
    let gen = GenerateConfig {
        max_len: cfg.train.max_summary_len,
        ..Default::default()
    };
    let map = |doc: &[u32]| generate(&map_model, doc, &gen);
    let reduce = |doc: &[u32]| generate(&reduce_model, doc, &gen);
    let out = summarize_long(&tokens, &map, &reduce, &cfg.chunk)?;
    let report = MapReduceReport {
        version: OUTPUT_VERSION,
        route: out.trace.route,
        input_tokens: tokens.len(),
        text: detokenize(&out.summary),
        summary: out.summary,
        depth: out.trace.depth,
        map_chunks: out.trace.levels.first().map_or(0, |l| l.chunks.len()),
    };
    write_file(
        &layout.mapreduce(),
        &(serde_json::to_string(&report).expect("report serializes") + "\n"),
    )?;
    if trace {
        write_file(
            &layout.mapreduce_trace(),
            &(versioned_json::<MapReduceTrace>(&out.trace) + "\n"),
        )?;
    }
    Ok(report)
}

/// Gate records on gold targets. Teachers come from their caches, falling
/// back to their checkpoints for examples outside the cached split.
pub fn cmd_gate_trace(
    cfg: &ExperimentConfig,
    layout: &Layout,
    ids: &[String],
    checkpoint: Option<&Path>,
) -> Result<usize> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| layout.student_checkpoint());
    let ck = load_checkpoint(&path, "checkpoint", "relkd distill")?;
    check_vocab(&ck.params.model, cfg, "checkpoint")?;
    let mut sup = Supervision::default();
    for i in 1..=2 {
        let mut t = teacher_source(cfg, layout, i, false)?;
        let tp = layout.teacher_checkpoint(i);
        if tp.exists() {
            t.model = Some(Checkpoint::load(&tp)?.params.model);
        }
        if i == 1 {
            sup.teacher1 = Some(t);
        } else {
            sup.teacher2 = Some(t);
        }
    }
    let corpus = corpus(cfg)?;
    let anchor = ck
        .cpdp_anchor
        .map(CpdpAnchor::new)
        .transpose()
        .map_err(ToyError::from)?;
    let records = gate_trace(&ck.params, &corpus, ids, &sup, &cfg.train, anchor)?;
    write_jsonl(&layout.gate_trace(), &records)?;
    Ok(records.len())
}
