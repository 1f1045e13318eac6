//! Run specifications, single-cell train/evaluate and the loss × smoothing
//! grid.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_examples, build_vocab, load_corpus, tokenize, Conversation, TrainingExample};
use crate::embeddings::{load_embeddings, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::losses::{softmax, LossKind, LossRegistry};
use crate::metrics::{evaluate_run, MetricReport};
use crate::model::{argmax, init_model, train, Batch, Model, ModelConfig, Preset, TrainConfig, TrainOutcome};
use crate::smoothing::{load_synonyms, PolicyInputs, PolicyRegistry, SmoothingSpec, SynonymLexicon, TargetTable};
use crate::vocab::Vocabulary;

pub const GRID_S: [f64; 2] = [0.1, 0.2];
pub const GRID_T: [f64; 3] = [0.0, 0.5, 0.8];
pub const GRID_COLUMNS: [&str; 10] = [
    "loss",
    "s",
    "t",
    "w",
    "sacreBLEU",
    "ROUGE-1",
    "ROUGE-2",
    "ROUGE-L",
    "METEOR",
    "runtime_seconds",
];
pub const MAX_DECODE_LEN: usize = 40;
const DONE_MARKER: &str = "done";
const CELL_FILE: &str = "cell.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunPaths {
    pub corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// One training configuration: loss, smoothing, seed and where the data
/// lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub loss: LossKind,
    #[serde(flatten)]
    pub smoothing: SmoothingSpec,
    pub seed: u64,
    pub preset: Preset,
    /// Overrides the preset's epoch count.
    pub epochs: Option<usize>,
    pub paths: RunPaths,
}

impl RunSpec {
    pub fn new(loss: LossKind, smoothing: SmoothingSpec, seed: u64, preset: Preset) -> Self {
        Self {
            loss,
            smoothing,
            seed,
            preset,
            epochs: None,
            paths: RunPaths::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.smoothing.validate()?;
        if self.epochs == Some(0) {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig::preset(self.preset, vocab_size, self.seed)
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut config = TrainConfig::preset(self.preset, self.seed);
        if let Some(epochs) = self.epochs {
            config.epochs = epochs;
        }
        config
    }

    /// Directory-safe name such as `kl_s0.1_t0.5_w1`.
    pub fn label(&self) -> String {
        let SmoothingSpec { s, t, w } = self.smoothing;
        let mut label = self.loss.as_str().to_string();
        if let Some(s) = s {
            let _ = write!(label, "_s{s}");
        }
        if let Some(t) = t {
            let _ = write!(label, "_t{t:.1}");
        }
        if let Some(w) = w {
            let _ = write!(label, "_w{}", u8::from(w));
        }
        label
    }
}

/// Every (loss, s, t, w) combination allowed by [`SmoothingSpec::validate`].
pub fn grid_cells() -> Vec<(LossKind, SmoothingSpec)> {
    let s_values: Vec<Option<f64>> = std::iter::once(None).chain(GRID_S.map(Some)).collect();
    let t_values: Vec<Option<f64>> = std::iter::once(None).chain(GRID_T.map(Some)).collect();
    let w_values = [None, Some(false), Some(true)];
    let mut cells = Vec::new();
    for loss in LossKind::ALL {
        for &s in &s_values {
            for &t in &t_values {
                for w in w_values {
                    let spec = SmoothingSpec { s, t, w };
                    if spec.validate().is_ok() {
                        cells.push((loss, spec));
                    }
                }
            }
        }
    }
    cells
}

/// Last tenth of the conversations (at least one) held out for testing.
pub fn split_corpus(conversations: &[Conversation]) -> Result<(&[Conversation], &[Conversation])> {
    if conversations.len() < 2 {
        return Err(Error::Data("need at least two conversations to hold one out".into()));
    }
    let test = (conversations.len() / 10).max(1);
    Ok(conversations.split_at(conversations.len() - test))
}

/// Everything a run needs, resolved against one vocabulary.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub vocab: Vocabulary,
    pub embeddings: EmbeddingMatrix,
    pub lexicon: Option<SynonymLexicon>,
    pub train: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
    /// Gold response tokens for each test example, before vocabulary lookup.
    pub test_references: Vec<Vec<String>>,
    /// Vocabulary entries that had no vector in the embedding source.
    pub missing_vectors: usize,
}

impl ExperimentData {
    /// The vocabulary comes from `train` alone; vectors are looked up in
    /// `vectors` and seeded where missing.
    pub fn new(
        train: &[Conversation],
        test: &[Conversation],
        vectors: &(Vocabulary, EmbeddingMatrix),
        lexicon: Option<SynonymLexicon>,
    ) -> Result<Self> {
        let vocab = build_vocab(train, 1)?;
        let (embeddings, missing_vectors) = vectors.1.aligned_to(&vectors.0, &vocab);
        let train_examples: Vec<TrainingExample> = train.iter().flat_map(|c| build_examples(c, &vocab)).collect();
        let mut test_examples = Vec::new();
        let mut test_references = Vec::new();
        for conv in test {
            test_examples.extend(build_examples(conv, &vocab));
            test_references.extend(conv.turns.iter().skip(1).map(|t| tokenize(t)));
        }
        if train_examples.is_empty() {
            return Err(Error::Data("training corpus yields no examples".into()));
        }
        Ok(Self {
            vocab,
            embeddings,
            lexicon,
            train: train_examples,
            test: test_examples,
            test_references,
            missing_vectors,
        })
    }

    /// Load from the files named in `paths`. Without a test corpus the
    /// training corpus is split by [`split_corpus`].
    pub fn load(paths: &RunPaths) -> Result<Self> {
        let corpus = paths
            .corpus
            .as_ref()
            .ok_or_else(|| Error::Config("--corpus is required".into()))?;
        let embeddings = paths
            .embeddings
            .as_ref()
            .ok_or_else(|| Error::Config("--embeddings is required".into()))?;
        let conversations = load_corpus(corpus)?;
        let vectors = load_embeddings(embeddings, None)?;
        let lexicon = paths.lexicon.as_ref().map(load_synonyms).transpose()?;
        match &paths.test_corpus {
            Some(test_path) => {
                let test = load_corpus(test_path)?;
                Self::new(&conversations, &test, &vectors, lexicon)
            }
            None => {
                let (train, test) = split_corpus(&conversations)?;
                Self::new(train, test, &vectors, lexicon)
            }
        }
    }

    pub fn build_table(&self, smoothing: &SmoothingSpec) -> Result<TargetTable> {
        if smoothing.w == Some(true) && self.lexicon.is_none() {
            return Err(Error::Config("synonym masking (w = 1) needs --lexicon".into()));
        }
        let policy = PolicyRegistry::default().resolve(smoothing)?;
        policy.build_table(&PolicyInputs {
            vocab: &self.vocab,
            embeddings: Some(&self.embeddings),
            lexicon: self.lexicon.as_ref(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub model: Model,
    pub outcome: TrainOutcome,
    pub train_config: TrainConfig,
    /// Similarity rows computed while building targets; 0 unless the run
    /// uses similarity weighting.
    pub similarity_rows: usize,
}

pub fn train_run(data: &ExperimentData, spec: &RunSpec) -> Result<TrainedRun> {
    spec.validate()?;
    let table = data.build_table(&spec.smoothing)?;
    let registry = LossRegistry::default();
    let loss = registry.get(spec.loss.as_str())?;
    let train_config = spec.train_config();
    let mut model = init_model(&spec.model_config(data.vocab.len()), &data.embeddings)?;
    let outcome = train(&mut model, &data.train, &table, loss, &train_config)?;
    Ok(TrainedRun {
        model,
        outcome,
        train_config,
        similarity_rows: table.similarity_rows(),
    })
}

/// Greedy responses for `contexts`, as tokens.
pub fn decode_all(model: &Model, vocab: &Vocabulary, contexts: &[&[usize]]) -> Result<Vec<Vec<String>>> {
    contexts
        .iter()
        .map(|ctx| {
            let ids = model.greedy_decode(ctx, MAX_DECODE_LEN)?;
            Ok(ids
                .into_iter()
                .map(|id| vocab.token(id).unwrap_or_default().to_string())
                .collect())
        })
        .collect()
}

/// Decode every test context and score against the gold responses.
pub fn evaluate_model(model: &Model, data: &ExperimentData) -> Result<(MetricReport, Vec<Vec<String>>)> {
    evaluate_examples(model, &data.vocab, &data.test, &data.test_references, data.lexicon.as_ref())
}

pub fn evaluate_examples(
    model: &Model,
    vocab: &Vocabulary,
    examples: &[TrainingExample],
    references: &[Vec<String>],
    lexicon: Option<&SynonymLexicon>,
) -> Result<(MetricReport, Vec<Vec<String>>)> {
    if examples.is_empty() {
        return Err(Error::Data("no test examples to evaluate".into()));
    }
    let contexts: Vec<&[usize]> = examples.iter().map(|e| e.context_ids.as_slice()).collect();
    let hypotheses = decode_all(model, vocab, &contexts)?;
    let report = evaluate_run(&hypotheses, references, lexicon)?;
    Ok((report, hypotheses))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub runtime_seconds: f64,
}

/// Scores with the run that produced them. Only `metadata` varies between
/// identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runspec: Option<RunSpec>,
    pub metrics: MetricReport,
    pub metadata: Metadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub runspec: RunSpec,
    pub status: CellStatus,
    pub error: Option<String>,
    pub metrics: Option<MetricReport>,
    pub curve: Vec<f64>,
    pub similarity_rows: usize,
    pub metadata: Metadata,
}

/// Train and evaluate one cell. Failures are recorded, not returned.
pub fn run_cell(data: &ExperimentData, spec: &RunSpec) -> CellRecord {
    let start = Instant::now();
    let result = train_run(data, spec).and_then(|run| {
        let (metrics, _) = evaluate_model(&run.model, data)?;
        Ok((run, metrics))
    });
    let runtime_seconds = start.elapsed().as_secs_f64();
    match result {
        Ok((run, metrics)) => CellRecord {
            runspec: spec.clone(),
            status: CellStatus::Ok,
            error: None,
            metrics: Some(metrics),
            curve: run.outcome.curve,
            similarity_rows: run.similarity_rows,
            metadata: Metadata { runtime_seconds },
        },
        Err(e) => CellRecord {
            runspec: spec.clone(),
            status: CellStatus::Failed,
            error: Some(e.to_string()),
            metrics: None,
            curve: Vec::new(),
            similarity_rows: 0,
            metadata: Metadata { runtime_seconds },
        },
    }
}

#[derive(Debug, Clone, Default)]
pub struct GridOptions {
    /// Cells trained concurrently; 0 or 1 runs them in order.
    pub jobs: usize,
    /// Seed cell `i` with `base + i` instead of the shared base seed.
    pub seed_per_cell: bool,
    /// Reuse cells whose completion marker exists.
    pub resume: bool,
    /// Stop after this many cells.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub records: Vec<CellRecord>,
    /// Whether each record was read back from disk rather than recomputed.
    pub resumed: Vec<bool>,
}

pub fn cell_dir(out: &Path, index: usize, spec: &RunSpec) -> PathBuf {
    out.join(format!("cell{:02}_{}", index + 1, spec.label()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// The specs the grid would run for `base`, in order.
pub fn grid_specs(base: &RunSpec, seed_per_cell: bool) -> Vec<RunSpec> {
    grid_cells()
        .into_iter()
        .enumerate()
        .map(|(i, (loss, smoothing))| RunSpec {
            loss,
            smoothing,
            seed: if seed_per_cell { base.seed + i as u64 } else { base.seed },
            ..base.clone()
        })
        .collect()
}

/// Run the grid under `out`, one directory per cell, then write
/// `grid.csv` and `grid.json` covering every finished cell.
pub fn run_grid(data: &ExperimentData, base: &RunSpec, out: &Path, options: &GridOptions) -> Result<GridOutcome> {
    let mut specs = grid_specs(base, options.seed_per_cell);
    if let Some(limit) = options.limit {
        specs.truncate(limit);
    }
    let run_one = |(i, spec): (usize, &RunSpec)| -> Result<(CellRecord, bool)> {
        let dir = cell_dir(out, i, spec);
        if options.resume && dir.join(DONE_MARKER).exists() {
            let path = dir.join(CELL_FILE);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let record: CellRecord = serde_json::from_str(&text)?;
            if record.runspec == *spec {
                return Ok((record, true));
            }
        }
        let record = run_cell(data, spec);
        write(&dir.join(CELL_FILE), serde_json::to_string_pretty(&record)?)?;
        if record.status == CellStatus::Ok {
            write(&dir.join("loss_curve.csv"), curve_csv(&record.curve))?;
            write(&dir.join(DONE_MARKER), "")?;
        }
        Ok((record, false))
    };
    let results: Vec<(CellRecord, bool)> = if options.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", options.jobs)))?;
        pool.install(|| specs.par_iter().enumerate().map(run_one).collect::<Result<_>>())?
    } else {
        specs.iter().enumerate().map(run_one).collect::<Result<_>>()?
    };
    let (records, resumed): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    write(&out.join("grid.csv"), grid_csv(&records))?;
    write(&out.join("grid.json"), serde_json::to_string_pretty(&records)?)?;
    Ok(GridOutcome { records, resumed })
}

fn na<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

/// Four-decimal results table; failed cells leave their metric fields
/// empty.
pub fn grid_csv(records: &[CellRecord]) -> String {
    let mut out = GRID_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        let SmoothingSpec { s, t, w } = r.runspec.smoothing;
        let metrics = r
            .metrics
            .map_or_else(|| ",,,,".to_string(), |m| m.csv_row());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.4}",
            r.runspec.loss,
            na(s),
            na(t.map(|t| format!("{t:.1}"))),
            na(w.map(u8::from)),
            metrics,
            r.metadata.runtime_seconds
        );
    }
    out
}

pub fn curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, loss) in curve.iter().enumerate() {
        let _ = writeln!(out, "{},{loss}", i + 1);
    }
    out
}

/// Teacher-forced statistics at response positions whose gold token has
/// synonyms in the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotStats {
    pub slots: usize,
    /// Mean probability given to the gold token's synonyms.
    pub substitute_mass: f64,
    /// Fraction of slots where the gold token has the highest probability.
    pub top1_rate: f64,
}

pub fn synonym_slot_stats(
    model: &Model,
    examples: &[TrainingExample],
    vocab: &Vocabulary,
    lexicon: &SynonymLexicon,
) -> Result<SlotStats> {
    let synonyms: Vec<Vec<usize>> = vocab
        .tokens()
        .iter()
        .map(|tok| lexicon.synonyms(tok).filter_map(|s| vocab.id(s)).collect())
        .collect();
    let (mut slots, mut mass, mut top) = (0usize, 0.0, 0usize);
    for chunk in examples.chunks(64) {
        let batch = Batch::from_examples(chunk);
        let logits = model.forward_batch(&batch, None)?;
        for (row, &gold) in batch.targets.iter().enumerate() {
            if synonyms[gold].is_empty() {
                continue;
            }
            let z = logits.row(row).to_vec();
            let p = softmax(&z)?;
            mass += synonyms[gold].iter().map(|&i| p[i]).sum::<f64>();
            top += usize::from(argmax(p.iter().copied()) == gold);
            slots += 1;
        }
    }
    if slots == 0 {
        return Err(Error::Data("no response token has an in-vocabulary synonym".into()));
    }
    Ok(SlotStats {
        slots,
        substitute_mass: mass / slots as f64,
        top1_rate: top as f64 / slots as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_thirty_cells() {
        let cells = grid_cells();
        assert_eq!(cells.len(), 30);
        let per_loss = |k: LossKind| cells.iter().filter(|(l, _)| *l == k).count();
        assert_eq!(per_loss(LossKind::Ce), 15);
        let semantic = cells.iter().filter(|(_, s)| s.t.is_some()).count();
        assert_eq!(semantic, 24);
        let labels: std::collections::HashSet<String> = cells
            .iter()
            .map(|(l, s)| RunSpec::new(*l, *s, 0, Preset::Desk).label())
            .collect();
        assert_eq!(labels.len(), 30);
    }

    #[test]
    fn csv_schema() {
        let spec = RunSpec::new(LossKind::Kl, SmoothingSpec::semantic(0.1, 0.0, true), 0, Preset::Desk);
        let record = CellRecord {
            runspec: spec.clone(),
            status: CellStatus::Ok,
            error: None,
            metrics: Some(MetricReport { bleu: 12.345678, rouge1: 0.5, rouge2: 0.25, rouge_l: 0.125, meteor: 1.0 / 3.0 }),
            curve: vec![1.0],
            similarity_rows: 3,
            metadata: Metadata { runtime_seconds: 1.5 },
        };
        let failed = CellRecord { status: CellStatus::Failed, metrics: None, runspec: RunSpec::new(LossKind::Ce, SmoothingSpec::HARD, 0, Preset::Desk), ..record.clone() };
        let csv = grid_csv(&[record, failed]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "loss,s,t,w,sacreBLEU,ROUGE-1,ROUGE-2,ROUGE-L,METEOR,runtime_seconds");
        assert_eq!(lines[1], "kl,0.1,0.0,1,12.3457,0.5000,0.2500,0.1250,0.3333,1.5000");
        assert_eq!(lines[2], "ce,NA,NA,NA,,,,,,1.5000");
        assert_eq!(spec.label(), "kl_s0.1_t0.0_w1");
    }

    #[test]
    fn runspec_json_round_trip() {
        let mut spec = RunSpec::new(LossKind::Ce, SmoothingSpec::uniform(0.2), 9, Preset::Desk);
        spec.paths.corpus = Some("c.jsonl".into());
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"s\":0.2") && json.contains("\"t\":null"));
        assert_eq!(serde_json::from_str::<RunSpec>(&json).unwrap(), spec);
        let mut bad = spec.clone();
        bad.smoothing.t = Some(0.5);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn curve_csv_keeps_full_precision() {
        let csv = curve_csv(&[0.1 + 0.2, 1.0]);
        assert_eq!(csv, "epoch,loss\n1,0.30000000000000004\n2,1\n");
    }
}
