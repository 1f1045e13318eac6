use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use semsmooth::corpus::{
    build_examples, build_vocab, corpus_to_jsonl, default_clusters, load_corpus, parse_clusters, synthetic_corpus,
    synthetic_embeddings, tokenize,
};
use semsmooth::experiment::{
    curve_csv, evaluate_examples, run_grid, train_run, EvalReport, ExperimentData, GridOptions, Metadata, RunPaths,
    RunSpec,
};
use semsmooth::losses::LossKind;
use semsmooth::metrics::{evaluate_run, MetricReport};
use semsmooth::model::{Checkpoint, Preset};
use semsmooth::smoothing::{inspect_distribution, load_synonyms, SmoothingSpec, TableFile};
use semsmooth::{Error, Result};

#[derive(Parser)]
#[command(name = "semsmooth", version, about = "Similarity-weighted label smoothing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Precompute the target distribution for every vocabulary entry.
    BuildTargets {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        smoothing: SmoothingArgs,
        /// Output table file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Show one word's target distribution.
    Inspect {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        smoothing: SmoothingArgs,
        #[arg(long)]
        word: String,
        /// Emit `token,probability` rows instead of JSON.
        #[arg(long)]
        csv: bool,
    },
    /// Train one model and write its checkpoint and loss curve.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy-decode responses with a trained checkpoint.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Decode every response context in this corpus.
        #[arg(long, conflicts_with = "context")]
        corpus: Option<PathBuf>,
        /// Decode a single context given as text.
        #[arg(long)]
        context: Option<String>,
        #[arg(long, default_value_t = semsmooth::experiment::MAX_DECODE_LEN)]
        max_len: usize,
        /// Write hypotheses here, one per line, instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score hypotheses against references.
    Evaluate {
        /// Hypotheses, one tokenized sentence per line.
        #[arg(long, requires = "references", conflicts_with = "checkpoint")]
        hypotheses: Option<PathBuf>,
        /// References, parallel to the hypotheses.
        #[arg(long)]
        references: Option<PathBuf>,
        /// Decode with this checkpoint instead of reading hypotheses.
        #[arg(long, requires = "corpus")]
        checkpoint: Option<PathBuf>,
        /// Test corpus for checkpoint evaluation.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Output directory for report.json and report.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every loss × smoothing cell.
    Grid {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        epochs: Option<usize>,
        /// Cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Give cell i the seed base + i.
        #[arg(long)]
        seed_per_cell: bool,
        /// Skip cells that already finished.
        #[arg(long)]
        resume: bool,
        /// Run only the first N cells.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic synonym-cluster corpus, lexicon and word vectors.
    MakeSynthetic {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training conversations.
        #[arg(long, default_value_t = 2000)]
        count: usize,
        /// Held-out conversations.
        #[arg(long, default_value_t = 250)]
        test_count: usize,
        /// Clusters as `a,b,c;d,e,f`; defaults to the built-in set.
        #[arg(long)]
        clusters: Option<String>,
        #[arg(long, default_value_t = 50)]
        dim: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Training corpus (JSON lines, one conversation per line).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Held-out corpus; without it the last tenth of --corpus is held out.
    #[arg(long)]
    test_corpus: Option<PathBuf>,
    /// Word vectors in text format.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Synonym lexicon, `token<TAB>syn1,syn2` per line.
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

impl DataArgs {
    fn paths(&self, out: Option<&Path>) -> RunPaths {
        RunPaths {
            corpus: self.corpus.clone(),
            test_corpus: self.test_corpus.clone(),
            embeddings: self.embeddings.clone(),
            lexicon: self.lexicon.clone(),
            out: out.map(Path::to_path_buf),
        }
    }
}

#[derive(Args, Clone)]
struct SmoothingArgs {
    /// Smoothing mass.
    #[arg(long)]
    s: Option<f64>,
    /// Similarity threshold; requires --s.
    #[arg(long)]
    t: Option<f64>,
    /// Restrict support to lexicon synonyms (0 or 1); defaults to 0 when --t is set.
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=1))]
    wordnet: Option<u8>,
}

impl SmoothingArgs {
    fn spec(&self) -> Result<SmoothingSpec> {
        let w = match (self.t, self.wordnet) {
            (Some(_), w) => Some(w == Some(1)),
            (None, None) => None,
            (None, Some(_)) => {
                return Err(Error::Config("--wordnet needs a similarity threshold --t".into()));
            }
        };
        let spec = SmoothingSpec { s: self.s, t: self.t, w };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    smoothing: SmoothingArgs,
    #[arg(long, default_value = "ce")]
    loss: LossKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "desk")]
    preset: Preset,
    /// Override the preset's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
}

impl RunArgs {
    fn spec(&self, out: &Path) -> Result<RunSpec> {
        let spec = RunSpec {
            loss: self.loss,
            smoothing: self.smoothing.spec()?,
            seed: self.seed,
            preset: self.preset,
            epochs: self.epochs,
            paths: self.data.paths(Some(out)),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.into(), source: e })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn load_data(data: &DataArgs) -> Result<ExperimentData> {
    ExperimentData::load(&data.paths(None))
}

fn report_csv(report: &MetricReport) -> String {
    format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row())
}

fn cmd_build_targets(data: &DataArgs, smoothing: &SmoothingArgs, out: &Path) -> Result<()> {
    let spec = smoothing.spec()?;
    let data = load_data(data)?;
    let table = data.build_table(&spec)?;
    let file = TableFile::new(&table, &data.vocab)?;
    write(out, file.to_json()?)?;
    eprintln!("wrote {} targets to {}", data.vocab.len(), out.display());
    Ok(())
}

fn cmd_inspect(data: &DataArgs, smoothing: &SmoothingArgs, word: &str, csv: bool) -> Result<()> {
    let spec = smoothing.spec()?;
    let data = load_data(data)?;
    let table = data.build_table(&spec)?;
    let record = inspect_distribution(word, &data.vocab, &table)?;
    if csv {
        println!("token,probability");
        println!("{},{}", record.word, record.correct_probability);
        for entry in &record.support {
            println!("{},{}", entry.token, entry.probability);
        }
    } else {
        print!("{}", to_json(&record)?);
    }
    Ok(())
}

fn cmd_train(run: &RunArgs, out: &Path) -> Result<()> {
    let spec = run.spec(out)?;
    let data = load_data(&run.data)?;
    let trained = train_run(&data, &spec)?;
    fs::create_dir_all(out).map_err(|e| Error::Io { path: out.into(), source: e })?;
    let epochs = trained.outcome.curve.len();
    Checkpoint::new(&trained.model, &data.vocab, spec.seed, epochs)?.save(out.join("checkpoint.json"))?;
    write(&out.join("loss_curve.csv"), curve_csv(&trained.outcome.curve))?;
    let echo = serde_json::json!({
        "runspec": spec,
        "model": trained.model.config,
        "train": trained.train_config,
        "similarity_rows": trained.similarity_rows,
        "missing_vectors": data.missing_vectors,
        "train_examples": data.train.len(),
    });
    write(&out.join("runspec.json"), to_json(&echo)?)?;
    eprintln!(
        "trained {} epochs, final loss {:.4}; wrote {}",
        epochs,
        trained.outcome.curve.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_decode(checkpoint: &Path, corpus: Option<&Path>, context: Option<&str>, max_len: usize, out: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.to_model()?;
    let vocab = &ckpt.vocab;
    let contexts: Vec<Vec<usize>> = match (corpus, context) {
        (Some(path), _) => load_corpus(path)?
            .iter()
            .flat_map(|c| build_examples(c, vocab))
            .map(|e| e.context_ids)
            .collect(),
        (None, Some(text)) => {
            let mut ids = vec![semsmooth::vocab::SPEAKER1_ID];
            ids.extend(tokenize(text).iter().map(|t| vocab.id_or_unk(t)));
            let start = ids.len().saturating_sub(model.config.max_context);
            vec![ids[start..].to_vec()]
        }
        (None, None) => return Err(Error::Config("give --corpus or --context".into())),
    };
    let mut lines = String::new();
    for ctx in &contexts {
        let ids = model.greedy_decode(ctx, max_len)?;
        let tokens: Vec<&str> = ids.iter().map(|&id| vocab.token(id).unwrap_or_default()).collect();
        lines.push_str(&tokens.join(" "));
        lines.push('\n');
    }
    match out {
        Some(path) => write(path, lines),
        None => {
            print!("{lines}");
            Ok(())
        }
    }
}

fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read(path)?
        .lines()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    hypotheses: Option<&Path>,
    references: Option<&Path>,
    checkpoint: Option<&Path>,
    corpus: Option<&Path>,
    lexicon: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let start = Instant::now();
    let lexicon = lexicon.map(load_synonyms).transpose()?;
    let (metrics, runspec) = match (hypotheses, references, checkpoint, corpus) {
        (Some(h), Some(r), _, _) => {
            let hyps = read_sentences(h)?;
            let refs = read_sentences(r)?;
            (evaluate_run(&hyps, &refs, lexicon.as_ref())?, None)
        }
        (None, _, Some(ckpt_path), Some(corpus)) => {
            let ckpt = Checkpoint::load(ckpt_path)?;
            let model = ckpt.to_model()?;
            let mut examples = Vec::new();
            let mut refs = Vec::new();
            for conv in load_corpus(corpus)? {
                examples.extend(build_examples(&conv, &ckpt.vocab));
                refs.extend(conv.turns.iter().skip(1).map(|t| tokenize(t)));
            }
            let (metrics, _) = evaluate_examples(&model, &ckpt.vocab, &examples, &refs, lexicon.as_ref())?;
            let runspec = ckpt_path
                .parent()
                .map(|dir| dir.join("runspec.json"))
                .filter(|p| p.exists())
                .map(|p| -> Result<RunSpec> {
                    let echo: serde_json::Value = serde_json::from_str(&read(&p)?)?;
                    Ok(serde_json::from_value(echo["runspec"].clone())?)
                })
                .transpose()?;
            (metrics, runspec)
        }
        _ => return Err(Error::Config("give --hypotheses and --references, or --checkpoint and --corpus".into())),
    };
    let report = EvalReport {
        runspec,
        metrics,
        metadata: Metadata { runtime_seconds: start.elapsed().as_secs_f64() },
    };
    write(&out.join("report.json"), to_json(&report)?)?;
    write(&out.join("report.csv"), report_csv(&report.metrics))?;
    print!("{}", report_csv(&report.metrics));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_grid(
    data: &DataArgs,
    seed: u64,
    preset: Preset,
    epochs: Option<usize>,
    options: GridOptions,
    out: &Path,
) -> Result<()> {
    let loaded = load_data(data)?;
    let base = RunSpec {
        loss: LossKind::Ce,
        smoothing: SmoothingSpec::HARD,
        seed,
        preset,
        epochs,
        paths: data.paths(Some(out)),
    };
    base.validate()?;
    let outcome = run_grid(&loaded, &base, out, &options)?;
    let failed = outcome
        .records
        .iter()
        .filter(|r| r.status == semsmooth::experiment::CellStatus::Failed)
        .count();
    let resumed = outcome.resumed.iter().filter(|&&r| r).count();
    eprintln!(
        "{} cells ({} resumed, {} failed); table at {}",
        outcome.records.len(),
        resumed,
        failed,
        out.join("grid.csv").display()
    );
    for record in outcome.records.iter().filter(|r| r.error.is_some()) {
        eprintln!("  {}: {}", record.runspec.label(), record.error.as_deref().unwrap_or_default());
    }
    Ok(())
}

fn cmd_make_synthetic(seed: u64, count: usize, test_count: usize, clusters: Option<&str>, dim: usize, out: &Path) -> Result<()> {
    if dim == 0 {
        return Err(Error::Config("--dim must be positive".into()));
    }
    let clusters = match clusters {
        Some(spec) => parse_clusters(spec)?,
        None => default_clusters(),
    };
    let (conversations, lexicon) = synthetic_corpus(seed, count + test_count, &clusters)?;
    let (train, test) = conversations.split_at(count);
    let vocab = build_vocab(&conversations, 1)?;
    let words: Vec<String> = vocab
        .tokens()
        .iter()
        .skip(semsmooth::vocab::NUM_SPECIALS)
        .cloned()
        .collect();
    let mut vectors = String::new();
    for (word, v) in synthetic_embeddings(&words, &clusters, dim, seed) {
        vectors.push_str(&word);
        for x in v {
            vectors.push(' ');
            vectors.push_str(&x.to_string());
        }
        vectors.push('\n');
    }
    write(&out.join("train.jsonl"), corpus_to_jsonl(train)?)?;
    write(&out.join("test.jsonl"), corpus_to_jsonl(test)?)?;
    write(&out.join("synonyms.tsv"), lexicon.to_file_string())?;
    write(&out.join("vectors.txt"), vectors)?;
    eprintln!(
        "wrote {} training and {} test conversations over {} words to {}",
        train.len(),
        test.len(),
        words.len(),
        out.display()
    );
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("SEMSMOOTH_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("SEMSMOOTH_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot configure {threads} threads: {e}")))
}

fn thread_cap() -> Option<usize> {
    std::env::var("SEMSMOOTH_THREADS").ok()?.parse().ok()
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::BuildTargets { data, smoothing, out } => cmd_build_targets(&data, &smoothing, &out),
        Command::Inspect { data, smoothing, word, csv } => cmd_inspect(&data, &smoothing, &word, csv),
        Command::Train { run, out } => cmd_train(&run, &out),
        Command::Decode { checkpoint, corpus, context, max_len, out } => {
            cmd_decode(&checkpoint, corpus.as_deref(), context.as_deref(), max_len, out.as_deref())
        }
        Command::Evaluate { hypotheses, references, checkpoint, corpus, lexicon, out } => cmd_evaluate(
            hypotheses.as_deref(),
            references.as_deref(),
            checkpoint.as_deref(),
            corpus.as_deref(),
            lexicon.as_deref(),
            &out,
        ),
        Command::Grid { data, seed, preset, epochs, jobs, seed_per_cell, resume, limit, out } => {
            let jobs = thread_cap().map_or(jobs, |cap| jobs.min(cap));
            let options = GridOptions { jobs, seed_per_cell, resume, limit };
            cmd_grid(&data, seed, preset, epochs, options, &out)
        }
        Command::MakeSynthetic { seed, count, test_count, clusters, dim, out } => {
            cmd_make_synthetic(seed, count, test_count, clusters.as_deref(), dim, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
