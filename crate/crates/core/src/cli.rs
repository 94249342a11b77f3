//! Command-line front end. Exit codes: 0 success, 1 validation or runtime
//! failure, 2 usage error.

use std::fs;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::load_config;
use crate::corpus::{self, AnnotatedResponse, Split};
use crate::fdpo::{train_fdpo, ClassMap, FdpoConfig, MapMode};
use crate::metrics::{self, EvalRecord};
use crate::reward::{eval_rm, train_rm, RmConfig};
use crate::scorer::{ParamMask, Scorer, ScorerConfig, Vocab, DEFAULT_DIM, MAX_VOCAB};
use crate::segmenter::{condensed_line, Density, Granularity};
use crate::selector::{self, Mode};
use crate::server::{self, ServeConfig, DEFAULT_RESPONSES_PER_TASK};

#[derive(Debug, Parser)]
#[command(
    name = "finegrain",
    version,
    about = "Fine-grained hallucination toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StatsFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

impl SplitArg {
    fn keep(self, r: &AnnotatedResponse) -> bool {
        match self {
            SplitArg::Train => r.split == Split::Train,
            SplitArg::Val => r.split == Split::Val,
            SplitArg::All => true,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DensityArg {
    Sentence,
    Segment,
}

impl From<DensityArg> for Density {
    fn from(d: DensityArg) -> Self {
        match d {
            DensityArg::Sentence => Density::Sentence,
            DensityArg::Segment => Density::Segment,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GranularityArg {
    Binary,
    Ternary,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::Binary => Granularity::Binary,
            GranularityArg::Ternary => Granularity::Ternary,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Ia,
    Da,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SelectMode {
    Best,
    Worst,
}

impl From<SelectMode> for Mode {
    fn from(m: SelectMode) -> Self {
        match m {
            SelectMode::Best => Mode::Best,
            SelectMode::Worst => Mode::Worst,
        }
    }
}

#[derive(Debug, Args)]
struct ModelShape {
    /// Hidden width of a freshly initialized model.
    #[arg(long, default_value_t = DEFAULT_DIM)]
    dim: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a corpus file; prints one line per problem.
    Validate { path: PathBuf },
    /// Corpus statistics.
    Stats {
        path: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        out: StatsFormat,
    },
    /// Emit each record with condensed sentence labels.
    Condense { path: PathBuf },
    /// Train a reward model.
    TrainRm {
        corpus: PathBuf,
        /// Overrides the config; sentence when neither sets it.
        #[arg(long, value_enum)]
        density: Option<DensityArg>,
        /// Overrides the config; ternary when neither sets it.
        #[arg(long, value_enum)]
        granularity: Option<GranularityArg>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        shape: ModelShape,
    },
    /// Evaluate a reward model on held-out records.
    EvalRm {
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Defaults to the density the model was trained at.
        #[arg(long, value_enum)]
        density: Option<DensityArg>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Fine-grained preference training.
    TrainFdpo {
        corpus: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Starting checkpoint; also the frozen reference.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        shape: ModelShape,
    },
    /// Score generations with a sentence-level reward model.
    Score {
        generations: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Best-of-n or worst-of-n selection from a score report.
    Select {
        scores: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value = "best")]
        mode: SelectMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Selection score mean and variance as n grows (CSV).
    Curve {
        scores: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,4,16,64")]
        grid: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        draws: usize,
        #[arg(long, value_enum, default_value = "best")]
        mode: SelectMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-record hallucination rate (CSV).
    Rate { path: PathBuf },
    /// Pearson correlation between reward scores and human truthfulness.
    Correlate {
        /// CSV with `id,reward_score,human_score`.
        csv: Option<PathBuf>,
        /// Score report to join with `--human`.
        #[arg(long, requires = "human", conflicts_with = "csv")]
        scores: Option<PathBuf>,
        /// Annotated corpus providing human truthfulness.
        #[arg(long, requires = "scores")]
        human: Option<PathBuf>,
        /// Write the paired points here as CSV.
        #[arg(long)]
        points_out: Option<PathBuf>,
    },
    /// Serve the annotation API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_RESPONSES_PER_TASK)]
        responses_per_task: usize,
    },
}

/// Distinguishes "input failed validation" from other failures.
#[derive(Debug)]
struct ValidationFailed;

impl std::fmt::Display for ValidationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("validation failed")
    }
}

impl std::error::Error for ValidationFailed {}

/// Parse `argv` (including the program name) and run; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match execute(cli.command, &mut out) {
        Ok(()) => 0,
        Err(e) if e.is::<ValidationFailed>() => 1,
        // Downstream reader closed early (e.g. `| head`).
        Err(e)
            if e.downcast_ref::<std::io::Error>()
                .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) =>
        {
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_corpus(path: &Path, split: SplitArg) -> anyhow::Result<Vec<AnnotatedResponse>> {
    let records =
        corpus::ingest_str(&read(path)?).with_context(|| format!("loading {}", path.display()))?;
    Ok(records.into_iter().filter(|r| split.keep(r)).collect())
}

fn load_model(path: &Path) -> anyhow::Result<Scorer> {
    Scorer::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn execute(command: Command, out: &mut dyn Write) -> anyhow::Result<()> {
    match command {
        Command::Validate { path } => {
            let (_, issues) = corpus::lint_str(&read(&path)?);
            for issue in &issues {
                match &issue.id {
                    Some(id) => writeln!(out, "line {}: {id}: {}", issue.line, issue.message)?,
                    None => writeln!(out, "line {}: {}", issue.line, issue.message)?,
                }
            }
            if !issues.is_empty() {
                return Err(ValidationFailed.into());
            }
        }
        Command::Stats { path, out: format } => {
            let records = load_corpus(&path, SplitArg::All)?;
            let st = corpus::stats(&records)?;
            match format {
                StatsFormat::Json => writeln!(out, "{}", serde_json::to_string_pretty(&st)?)?,
                StatsFormat::Csv => write!(out, "{}", st.to_csv())?,
            }
        }
        Command::Condense { path } => {
            for r in load_corpus(&path, SplitArg::All)? {
                writeln!(out, "{}", condensed_line(&r))?;
            }
        }
        Command::TrainRm {
            corpus,
            density,
            granularity,
            config,
            split,
            seed,
            out: model_out,
            shape,
        } => {
            let mut cfg: RmConfig = match config {
                Some(p) => load_config(&p)?,
                None => RmConfig::default(),
            };
            if let Some(d) = density {
                cfg.density = d.into();
            }
            if let Some(g) = granularity {
                cfg.granularity = g.into();
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let records = load_corpus(&corpus, split)?;
            let vocab = Vocab::from_records(&records, MAX_VOCAB);
            let model = Scorer::new(
                vocab,
                ScorerConfig {
                    dim: shape.dim,
                    classes: cfg.granularity.num_classes(),
                    ..Default::default()
                },
                cfg.seed,
            );
            let trained = train_rm(&model, &records, &cfg, ParamMask::REWARD)?;
            trained.model.save(&model_out)?;
            writeln!(
                out,
                "{}",
                serde_json::json!({ "loss_trace": trained.loss_trace, "steps": trained.steps })
            )?;
        }
        Command::EvalRm {
            corpus,
            model,
            density,
            split,
        } => {
            let model = load_model(&model)?;
            let granularity = Granularity::from_num_classes(model.num_classes())
                .context("model head is neither binary nor ternary")?;
            let cfg = RmConfig {
                density: density
                    .map(Density::from)
                    .or(model.density())
                    .unwrap_or(Density::Sentence),
                granularity,
                ..Default::default()
            };
            let records = load_corpus(&corpus, split)?;
            let metrics = eval_rm(&model, &records, &cfg);
            writeln!(out, "{}", serde_json::to_string_pretty(&metrics)?)?;
        }
        Command::TrainFdpo {
            corpus,
            mode,
            config,
            init,
            split,
            seed,
            out: model_out,
            shape,
        } => {
            let mut cfg: FdpoConfig = match config {
                Some(p) => load_config(&p)?,
                None => FdpoConfig::default(),
            };
            if let Some(m) = mode {
                cfg.mode = match m {
                    ModeArg::Ia => MapMode::Ia,
                    ModeArg::Da => MapMode::Da,
                };
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let records = load_corpus(&corpus, split)?;
            let policy = match init {
                Some(p) => load_model(&p)?,
                None => Scorer::new(
                    Vocab::from_records(&records, MAX_VOCAB),
                    ScorerConfig {
                        dim: shape.dim,
                        ..Default::default()
                    },
                    cfg.seed,
                ),
            };
            let reference = policy.clone();
            let trained = train_fdpo(
                &policy,
                &reference,
                &records,
                ClassMap::new(cfg.mode),
                &cfg,
                ParamMask::PREFERENCE,
            )?;
            trained.model.save(&model_out)?;
            writeln!(
                out,
                "{}",
                serde_json::json!({ "loss_trace": trained.loss_trace, "steps": trained.steps })
            )?;
        }
        Command::Score { generations, model } => {
            let model = load_model(&model)?;
            let gens = selector::parse_generations(&read(&generations)?)?;
            let sets = selector::score_external(&gens, &model)?;
            write!(out, "{}", selector::score_report(&sets))?;
        }
        Command::Select {
            scores,
            n,
            mode,
            seed,
        } => {
            let sets = selector::parse_score_report(&read(&scores)?)?;
            for set in &sets {
                let chosen = selector::select(set, n, mode.into(), seed)?;
                let line = selector::SelectionLine {
                    prompt_id: set.prompt_id.clone(),
                    n,
                    mode: mode.into(),
                    chosen: chosen.id.clone(),
                    score: chosen.score,
                };
                writeln!(out, "{}", serde_json::to_string(&line)?)?;
            }
        }
        Command::Curve {
            scores,
            grid,
            draws,
            mode,
            seed,
        } => {
            let sets = selector::parse_score_report(&read(&scores)?)?;
            let c = selector::curve(&sets, &grid, draws, mode.into(), seed)?;
            write!(out, "{}", c.to_csv())?;
        }
        Command::Rate { path } => {
            writeln!(out, "id,hallucination_rate")?;
            for r in load_corpus(&path, SplitArg::All)? {
                writeln!(out, "{},{}", r.id, metrics::hallucination_rate(&r))?;
            }
        }
        Command::Correlate {
            csv,
            scores,
            human,
            points_out,
        } => {
            let records = match (csv, scores, human) {
                (Some(csv), _, _) => metrics::parse_points_csv(&read(&csv)?)?,
                (None, Some(scores), Some(human)) => {
                    let sets = selector::parse_score_report(&read(&scores)?)?;
                    let by_id: std::collections::HashMap<String, f64> = sets
                        .iter()
                        .flat_map(|s| s.candidates.iter().map(|c| (c.id.clone(), c.score)))
                        .collect();
                    load_corpus(&human, SplitArg::All)?
                        .iter()
                        .filter_map(|r| {
                            by_id.get(&r.id).map(|&s| EvalRecord::from_annotation(r, s))
                        })
                        .collect()
                }
                _ => bail!("pass a points CSV or both --scores and --human"),
            };
            if let Some(p) = points_out {
                fs::write(&p, metrics::points_csv(&records))?;
            }
            let r = metrics::correlate(&records)?;
            writeln!(out, "pearson_r={r}")?;
        }
        Command::Serve {
            port,
            host,
            tasks,
            out: sink,
            static_dir,
            responses_per_task,
        } => {
            let cfg = ServeConfig {
                addr: SocketAddr::new(host, port),
                tasks,
                out: sink,
                static_dir,
                responses_per_task,
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(cfg))?;
        }
    }
    Ok(())
}
