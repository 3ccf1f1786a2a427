//! Command-line entry points: `rollout`, `score`, `analyze` and `eval`.

pub mod config;

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use arr_core::dialogue::{example_seed, Backends, DialogueRunner, Termination, Trace};
use arr_core::entropy::{aggregate_patterns, write_pattern_csv};
use arr_core::gateway::{GenerationBackend, HttpBackend, Profile, SimulatedAgent};
use arr_core::grpo::{batch_records, write_batch, GroupRollout, GrpoError};
use arr_core::metrics::{em, f1};
use arr_core::retrieval::{index_corpus, load_corpus, CorpusDoc, HttpRetriever, Retriever};
use arr_core::reward::score_trace;
use arr_core::store::{load_dataset, read_traces, QaExample, TraceWriter};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

pub use config::{BackendConfig, FileConfig};

#[derive(Debug, Parser)]
#[command(
    name = "arr",
    version,
    about = "Adversarial reasoner-verifier rollouts, rewards and analysis"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Http,
    Scripted,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run G dialogues per dataset example and append the traces.
    Rollout {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = BackendKind::Scripted)]
        backend: BackendKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Examples rolled out concurrently.
        #[arg(long, default_value_t = 4)]
        parallel: usize,
        /// Only the first N examples.
        #[arg(long)]
        limit: Option<usize>,
        /// Reject untagged text between agent tags.
        #[arg(long)]
        strict: bool,
        /// JSONL corpus for the in-memory index.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Scripted agent behaviour.
        #[arg(long)]
        profile: Option<Profile>,
        /// Rollouts per example; overrides the config.
        #[arg(long)]
        group_size: Option<usize>,
    },
    /// Recompute rewards and token advantages and write a training batch.
    Score {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        strict: bool,
    },
    /// Entropy-pattern proportions and accuracies as CSV.
    Analyze {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        delta: Option<f64>,
        /// Traces per bucket, in file order. One bucket when absent.
        #[arg(long)]
        bucket_size: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        strict: bool,
    },
    /// EM/F1 of the final, reasoner and verifier answers.
    Eval {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        strict: bool,
    },
}

/// Parses `args` (program name first) and runs the command. Returns 0 on
/// success, 1 on failure and 2 on a usage error.
pub fn execute<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Rollout {
            dataset,
            out,
            config,
            backend,
            seed,
            parallel,
            limit,
            strict,
            corpus,
            profile,
            group_size,
        } => {
            let mut cfg = FileConfig::load(config.as_deref())?;
            if let Some(c) = corpus {
                cfg.backend.corpus = Some(c);
            }
            if let Some(p) = profile {
                cfg.backend.scripted_profile = p;
            }
            if let Some(g) = group_size {
                cfg.reward.group_size = g;
            }
            cfg.reward.validate()?;
            let opts = RolloutOptions {
                backend,
                seed,
                parallel,
                limit,
                strict,
            };
            let summary = rollout(&dataset, &out, &cfg, &opts)?;
            println!("{summary}");
            Ok(())
        }
        Command::Score {
            traces,
            out,
            config,
            strict,
        } => {
            let cfg = FileConfig::load(config.as_deref())?;
            let n = score(&traces, &out, &cfg, strict)?;
            println!("wrote {n} batch records to {}", out.display());
            Ok(())
        }
        Command::Analyze {
            traces,
            out,
            delta,
            bucket_size,
            config,
            strict,
        } => {
            let mut cfg = FileConfig::load(config.as_deref())?;
            if let Some(d) = delta {
                cfg.reward.delta = d;
            }
            cfg.reward.validate()?;
            analyze(&traces, &out, &cfg, bucket_size, strict)
        }
        Command::Eval { traces, out, strict } => {
            let rows = evaluate(&traces, strict)?;
            print!("{}", render_eval_table(&rows));
            if let Some(path) = out {
                write_eval_csv(&rows, &path)?;
            }
            Ok(())
        }
    }
}

#[derive(Debug, Clone)]
pub struct RolloutOptions {
    pub backend: BackendKind,
    pub seed: u64,
    pub parallel: usize,
    pub limit: Option<usize>,
    pub strict: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RolloutSummary {
    pub examples: usize,
    pub traces: usize,
    pub terminations: HashMap<Termination, usize>,
}

impl std::fmt::Display for RolloutSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} examples, {} traces", self.examples, self.traces)?;
        for t in [
            Termination::Answered,
            Termination::MaxTurns,
            Termination::ProtocolError,
            Termination::BackendFailure,
        ] {
            write!(f, ", {t:?}: {}", self.terminations.get(&t).copied().unwrap_or(0))?;
        }
        Ok(())
    }
}

/// One corpus document per example, built from the dataset when no corpus
/// is configured for a scripted run.
pub fn corpus_from_dataset(examples: &[QaExample]) -> Vec<CorpusDoc> {
    examples
        .iter()
        .map(|ex| CorpusDoc {
            id: format!("synthetic-{}", ex.query_id),
            title: ex.gold_answers[0].clone(),
            text: format!("{} is the answer to: {}", ex.gold_answers[0], ex.question),
        })
        .collect()
}

fn build_retriever(cfg: &FileConfig, examples: &[QaExample], scripted: bool) -> anyhow::Result<Box<dyn Retriever>> {
    if let Some(base) = &cfg.backend.retrieval_endpoint {
        return Ok(Box::new(HttpRetriever::new(base, cfg.backend.llm_timeout_secs)?));
    }
    let docs = match &cfg.backend.corpus {
        Some(path) => load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))?,
        None if scripted => corpus_from_dataset(examples),
        None => bail!("an http rollout needs --corpus, `corpus` or `retrieval_endpoint`"),
    };
    Ok(Box::new(index_corpus(docs)?))
}

/// Rolls out every example and appends the traces to `out` in dataset order.
pub fn rollout(dataset: &Path, out: &Path, cfg: &FileConfig, opts: &RolloutOptions) -> anyhow::Result<RolloutSummary> {
    if opts.parallel == 0 {
        bail!("--parallel must be at least 1");
    }
    let mut examples = load_dataset(dataset).with_context(|| format!("loading dataset {}", dataset.display()))?;
    if let Some(n) = opts.limit {
        examples.truncate(n);
    }
    let scripted = opts.backend == BackendKind::Scripted;
    let retriever = build_retriever(cfg, &examples, scripted)?;
    let llm: Box<dyn GenerationBackend> = match opts.backend {
        BackendKind::Scripted => {
            let key = examples
                .iter()
                .map(|ex| (ex.question.clone(), ex.gold_answers[0].clone()))
                .collect();
            Box::new(SimulatedAgent::new(cfg.backend.scripted_profile, key))
        }
        BackendKind::Http => Box::new(HttpBackend::new(cfg.backend.http())?),
    };
    let runner = DialogueRunner::new(
        Backends {
            reasoner: llm.as_ref(),
            verifier: llm.as_ref(),
            retriever: retriever.as_ref(),
        },
        cfg.reward.clone(),
        cfg.backend.generation(opts.strict),
    );
    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.parallel).build()?;
    let groups: Vec<GroupRollout> = pool.install(|| {
        examples
            .par_iter()
            .map(|ex| {
                runner.run_group(
                    &ex.query_id,
                    &ex.question,
                    &ex.gold_answers,
                    cfg.reward.group_size,
                    example_seed(opts.seed, &ex.query_id),
                )
            })
            .collect::<Result<_, GrpoError>>()
    })?;

    let writer = TraceWriter::append(out)?;
    let mut summary = RolloutSummary {
        examples: examples.len(),
        ..RolloutSummary::default()
    };
    for group in &groups {
        for (trace, reward) in group.traces.iter().zip(&group.breakdowns) {
            writer.write(trace, reward)?;
            summary.traces += 1;
            *summary.terminations.entry(trace.termination).or_default() += 1;
        }
    }
    log::info!("rollout: {summary}");
    Ok(summary)
}

fn load_traces(path: &Path, strict: bool) -> anyhow::Result<Vec<Trace>> {
    let mut reader = read_traces(path, strict).with_context(|| format!("reading traces {}", path.display()))?;
    let mut traces = Vec::new();
    for item in reader.by_ref() {
        traces.push(item?.0);
    }
    for w in reader.warnings() {
        log::warn!("{}: skipped line {}: {}", path.display(), w.line, w.message);
    }
    Ok(traces)
}

/// Groups traces by query id in first-seen order.
pub fn group_by_query(traces: Vec<Trace>) -> Vec<(String, Vec<Trace>)> {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut groups: Vec<(String, Vec<Trace>)> = Vec::new();
    for trace in traces {
        match index.get(&trace.query_id) {
            Some(&i) => groups[i].1.push(trace),
            None => {
                index.insert(trace.query_id.clone(), groups.len());
                groups.push((trace.query_id.clone(), vec![trace]));
            }
        }
    }
    groups
}

/// Rescores stored traces and writes an `arr-batch/1` file. Returns the
/// number of records.
pub fn score(traces: &Path, out: &Path, cfg: &FileConfig, strict: bool) -> anyhow::Result<usize> {
    let traces = load_traces(traces, strict)?;
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = BufWriter::new(file);
    let mut count = 0;
    for (query_id, group) in group_by_query(traces) {
        let breakdowns = group.iter().map(|t| score_trace(t, &cfg.reward)).collect();
        let rollout =
            GroupRollout::from_scored(&query_id, group, breakdowns).with_context(|| format!("query {query_id}"))?;
        let sheets = rollout.sheets(&cfg.reward);
        let records = batch_records(&rollout, &sheets);
        write_batch(&records, &mut w)?;
        count += records.len();
    }
    w.flush()?;
    Ok(count)
}

fn final_correct(trace: &Trace) -> bool {
    let answer = trace.final_answer.as_deref().unwrap_or("");
    em(answer, &trace.gold_answers).unwrap_or(0.0) == 1.0
}

pub fn analyze(
    traces: &Path,
    out: &Path,
    cfg: &FileConfig,
    bucket_size: Option<usize>,
    strict: bool,
) -> anyhow::Result<()> {
    if bucket_size == Some(0) {
        bail!("--bucket-size must be at least 1");
    }
    let pairs: Vec<(Trace, bool)> = load_traces(traces, strict)?
        .into_iter()
        .map(|t| {
            let c = final_correct(&t);
            (t, c)
        })
        .collect();
    let bucket = |i: usize, _: &Trace| match bucket_size {
        None => "all".to_string(),
        Some(size) => {
            let start = i / size * size;
            format!("{}-{}", start, start + size - 1)
        }
    };
    let stats = aggregate_patterns(&pairs, bucket, cfg.reward.delta, &cfg.reward.monitored_reasoner_kinds);
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_pattern_csv(&stats, BufWriter::new(file))?;
    let counted: usize = stats.iter().map(|s| s.sample_count).sum();
    println!(
        "{counted} of {} traces classified into {} buckets; wrote {}",
        pairs.len(),
        stats.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub source: &'static str,
    pub n: usize,
    pub em: f64,
    pub f1: f64,
}

/// Mean EM and F1 per answer source. A missing answer scores zero.
pub fn evaluate(traces: &Path, strict: bool) -> anyhow::Result<Vec<EvalRow>> {
    let traces = load_traces(traces, strict)?;
    type Source = (&'static str, fn(&Trace) -> Option<&String>);
    let sources: [Source; 3] = [
        ("final", |t| t.final_answer.as_ref()),
        ("reasoner", |t| t.reasoner_answer.as_ref()),
        ("verifier", |t| t.verifier_answer.as_ref()),
    ];
    let mut rows = Vec::new();
    for (source, get) in sources {
        let (mut em_sum, mut f1_sum) = (0.0, 0.0);
        for t in &traces {
            let answer = get(t).map(String::as_str).unwrap_or("");
            em_sum += em(answer, &t.gold_answers)?;
            f1_sum += f1(answer, &t.gold_answers)?;
        }
        let n = traces.len();
        let mean = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
        rows.push(EvalRow {
            source,
            n,
            em: mean(em_sum),
            f1: mean(f1_sum),
        });
    }
    Ok(rows)
}

pub fn render_eval_table(rows: &[EvalRow]) -> String {
    let mut s = format!("{:<10} {:>6} {:>8} {:>8}\n", "answer", "n", "EM", "F1");
    for r in rows {
        s.push_str(&format!("{:<10} {:>6} {:>8.4} {:>8.4}\n", r.source, r.n, r.em, r.f1));
    }
    s
}

pub fn write_eval_csv(rows: &[EvalRow], path: &Path) -> anyhow::Result<()> {
    let mut w = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(w, "answer_source,n,em,f1")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.source, r.n, r.em, r.f1)?;
    }
    Ok(())
}
