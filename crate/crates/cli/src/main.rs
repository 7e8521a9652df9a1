use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dictg2p::dictionary::{parse_dictionary, parse_dictionary_lenient, Dictionary, ParseOptions};
use dictg2p::encoders::{KeyFile, KeyMode};
use dictg2p::eval::{evaluate, export_attention};
use dictg2p::numerics::{DType, Real};
use dictg2p::pipeline::{infer_pronunciations, Checkpoint, Corpus, Labels, Lexicon, Model, ModelConfig, RunOptions, Split, Trainer};
use dictg2p::s2pa::RuleSet;
use dictg2p::synthcorpus::{write_bundle, ToyParams, CORPUS_FILE, DICT_FILE, KEYS_FILE, LABELS_FILE};

#[derive(Parser)]
#[command(name = "dictg2p", version, about = "Dictionary-grounded grapheme-to-phoneme conversion")]
struct Cli {
    /// Model configuration file (key=value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice. Required by `train` and `gen-corpus`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    dtype: Option<DTypeArg>,
    /// Refuse options whose result depends on wall-clock time.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw dictionary and write it as a binary snapshot or normalized text.
    BuildDict {
        #[arg(long = "in")]
        input: PathBuf,
        /// `.txt` writes text, anything else a binary snapshot.
        #[arg(long)]
        out: PathBuf,
        /// Skip malformed records instead of failing.
        #[arg(long)]
        lenient: bool,
        #[arg(long)]
        max_gloss_tokens: Option<usize>,
    },
    /// Generate a toy language: corpus, oracle dictionary, keys and labels.
    GenCorpus {
        #[arg(long, default_value_t = 60)]
        chars: usize,
        #[arg(long, default_value_t = 12)]
        polyphones: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Training sentences.
        #[arg(long, default_value_t = 5000)]
        n: usize,
        /// Held-out sentences; defaults to a tenth of `--n`.
        #[arg(long)]
        heldout: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from acoustic targets only.
    Train(TrainArgs),
    /// Predict pronunciations for text.
    G2p {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        input: TextInput,
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Add Gumbel noise before picking; needs `--seed`.
        #[arg(long)]
        sample_gumbel: bool,
    },
    /// Score predictions against labels.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Heldout)]
        split: SplitArg,
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write per-character attention and pronunciation weights as JSON lines.
    ExportAttn {
        #[arg(long)]
        model: PathBuf,
        /// Corpus to export; otherwise `--text` or `--file`.
        #[arg(long, conflicts_with_all = ["text", "file"])]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Heldout)]
        split: SplitArg,
        #[command(flatten)]
        input: OptionalTextInput,
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dict: Option<PathBuf>,
    #[arg(long)]
    keys: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Directory written by `gen-corpus`; fills in `--dict`, `--keys` and `--corpus`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Labels for held-out monitoring only.
    #[arg(long)]
    eval_labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    eval_every: u64,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides `max_steps`.
    #[arg(long)]
    steps: Option<u64>,
    /// Seconds.
    #[arg(long)]
    time_limit: Option<u64>,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct TextInput {
    #[arg(long)]
    text: Option<String>,
    /// One sentence per line.
    #[arg(long)]
    file: Option<PathBuf>,
}

#[derive(Args)]
#[group(required = false, multiple = false)]
struct OptionalTextInput {
    #[arg(long)]
    text: Option<String>,
    #[arg(long)]
    file: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Heldout,
    All,
}

impl SplitArg {
    fn select<F: Real>(self, corpus: Corpus<F>) -> Corpus<F> {
        match self {
            SplitArg::Train => corpus.split(Split::Train),
            SplitArg::Heldout => corpus.split(Split::Heldout),
            SplitArg::All => corpus,
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

macro_rules! with_dtype {
    ($dtype:expr, $f:ident($($arg:expr),*)) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => ModelConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ModelConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(d) = cli.dtype {
        config.dtype = d.into();
    }
    match cli.command {
        Command::BuildDict {
            input,
            out,
            lenient,
            max_gloss_tokens,
        } => build_dict(&input, &out, lenient, max_gloss_tokens),
        Command::GenCorpus {
            chars,
            polyphones,
            classes,
            n,
            heldout,
            out,
        } => {
            let seed = cli.seed.context("gen-corpus needs --seed")?;
            let params = ToyParams {
                chars,
                polyphones,
                classes,
                d_model: config.encoder.d_model,
                feature_dim: config.feature_dim,
                ..ToyParams::default()
            };
            let (_, corpus) = write_bundle(&out, params, n, heldout.unwrap_or(n / 10), seed)?;
            println!(
                "wrote {} sentences to {} ({DICT_FILE}, {KEYS_FILE}, {CORPUS_FILE}, {LABELS_FILE})",
                corpus.sentences.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train(args) => {
            ensure!(cli.seed.is_some(), "train needs --seed");
            if cli.deterministic {
                ensure!(args.time_limit.is_none(), "--time-limit depends on wall-clock time; drop it or --deterministic");
            }
            match config.dtype {
                DType::F32 => train::<f32>(config, &args, cli.config.is_some() || cli.dtype.is_some()),
                DType::F64 => train::<f64>(config, &args, cli.config.is_some() || cli.dtype.is_some()),
            }
        }
        Command::G2p {
            model,
            input,
            rules,
            sample_gumbel,
        } => {
            let seed = if sample_gumbel {
                Some(cli.seed.context("--sample-gumbel needs --seed")?)
            } else {
                None
            };
            let sentences = read_sentences(input.text, input.file)?;
            with_dtype!(config.dtype, g2p(&model, &sentences, rules.as_deref(), seed))
        }
        Command::Eval {
            model,
            corpus,
            labels,
            split,
            rules,
            json,
        } => with_dtype!(config.dtype, eval(&model, &corpus, &labels, split, rules.as_deref(), json.as_deref())),
        Command::ExportAttn {
            model,
            corpus,
            split,
            input,
            rules,
            out,
        } => {
            let source = match corpus {
                Some(c) => Source::Corpus(c, split),
                None if input.text.is_some() || input.file.is_some() => {
                    Source::Text(read_sentences(input.text, input.file)?)
                }
                None => bail!("export-attn needs --corpus, --text or --file"),
            };
            with_dtype!(config.dtype, export_attn(&model, source, rules.as_deref(), &out))
        }
    }
}

fn build_dict(input: &Path, out: &Path, lenient: bool, max_gloss_tokens: Option<usize>) -> Result<()> {
    let mut opts = ParseOptions::default();
    if let Some(n) = max_gloss_tokens {
        opts.max_gloss_tokens = n;
    }
    let reader = BufReader::new(File::open(input).with_context(|| format!("opening {}", input.display()))?);
    let dict = if lenient {
        let report = parse_dictionary_lenient(reader, &opts)?;
        for (line, err) in &report.errors {
            log::warn!("line {line}: {err}");
        }
        println!("skipped {} of {} records", report.errors.len(), report.data_lines);
        report.dictionary
    } else {
        parse_dictionary(reader, &opts)?
    };
    if out.extension().is_some_and(|e| e == "txt") {
        dict.save_text(out)?;
    } else {
        dict.save(out)?;
    }
    print!("{}", dict.stats());
    Ok(())
}

fn read_sentences(text: Option<String>, file: Option<PathBuf>) -> Result<Vec<Vec<char>>> {
    let lines: Vec<String> = match (text, file) {
        (Some(t), _) => vec![t],
        (None, Some(p)) => BufReader::new(File::open(&p).with_context(|| format!("opening {}", p.display()))?)
            .lines()
            .collect::<std::io::Result<_>>()?,
        (None, None) => bail!("no input text"),
    };
    let sentences: Vec<Vec<char>> = lines
        .iter()
        .map(|l| l.chars().filter(|c| !c.is_whitespace()).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect();
    ensure!(!sentences.is_empty(), "input has no characters");
    Ok(sentences)
}

fn load_rules(path: Option<&Path>) -> Result<Option<RuleSet>> {
    path.map(|p| RuleSet::load(p).with_context(|| format!("reading rules {}", p.display())))
        .transpose()
}

fn load_model<F: Real>(path: &Path) -> Result<Model<F>> {
    let ck = Checkpoint::<F>::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(ck.to_model()?)
}

fn train<F: Real>(mut config: ModelConfig, args: &TrainArgs, config_overridden: bool) -> Result<()> {
    let pick = |explicit: &Option<PathBuf>, name: &str| -> Option<PathBuf> {
        explicit.clone().or_else(|| args.data.as_ref().map(|d| d.join(name)))
    };
    let corpus_path = pick(&args.corpus, CORPUS_FILE).context("train needs --corpus or --data")?;
    let corpus = Corpus::<F>::load(&corpus_path).with_context(|| format!("reading {}", corpus_path.display()))?;
    let train = corpus.split(Split::Train);
    ensure!(!train.is_empty(), "corpus has no training sentences");
    let heldout = corpus.split(Split::Heldout);

    let mut trainer = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::<F>::load(p).with_context(|| format!("reading checkpoint {}", p.display()))?;
            if config_overridden && ck.config != config {
                log::warn!("resuming with the checkpoint's configuration; --config and --dtype are ignored");
            }
            Trainer::from_checkpoint(&ck)?
        }
        None => {
            if let Some(s) = args.steps {
                config.max_steps = s;
            }
            let width = train.feature_dim().unwrap_or(config.feature_dim);
            ensure!(
                width == config.feature_dim,
                "corpus targets have {width} features but feature_dim is {}",
                config.feature_dim
            );
            let dict_path = pick(&args.dict, DICT_FILE).context("train needs --dict or --data")?;
            let dict = Dictionary::load_any(&dict_path).with_context(|| format!("reading {}", dict_path.display()))?;
            let keys = match config.key_mode {
                KeyMode::Imported => {
                    let p = pick(&args.keys, KEYS_FILE).context("imported key mode needs --keys or --data")?;
                    Some(KeyFile::load(&p).with_context(|| format!("reading {}", p.display()))?)
                }
                KeyMode::Trainable => None,
            };
            let lexicon = Lexicon::new(dict, config.key_mode, keys.as_ref(), config.encoder.d_model)?;
            Trainer::new(Model::new(config, lexicon)?)
        }
    };
    let until_step = args.steps.unwrap_or(trainer.model.config.max_steps);
    let labels = args
        .eval_labels
        .as_ref()
        .map(|p| Labels::load(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let eval = match &labels {
        Some(l) if !heldout.is_empty() => Some((&heldout, l)),
        Some(_) => {
            log::warn!("no held-out sentences; skipping evaluation during training");
            None
        }
        None => None,
    };
    let opts = RunOptions {
        until_step,
        time_limit: args.time_limit.map(Duration::from_secs),
        eval,
        eval_every: args.eval_every,
        metrics_path: args.metrics.clone(),
        checkpoint_path: Some(args.out.clone()),
        checkpoint_every: args.checkpoint_every,
    };
    let summary = trainer.run(&train, &opts)?;
    println!(
        "trained {} steps in {:.1}s, final loss {:.6}{}; checkpoint {}",
        summary.steps,
        summary.elapsed.as_secs_f64(),
        summary.final_loss,
        if summary.timed_out { " (time limit reached)" } else { "" },
        args.out.display()
    );
    Ok(())
}

fn g2p<F: Real>(model: &Path, sentences: &[Vec<char>], rules: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let model = load_model::<F>(model)?;
    let rules = load_rules(rules)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, chars) in sentences.iter().enumerate() {
        let inf = infer_pronunciations(&model, chars, rules.as_ref(), seed.map(|s| s.wrapping_add(i as u64)))?;
        let text: String = chars.iter().collect();
        writeln!(out, "{text}\t{}", inf.texts().join(" | "))?;
    }
    Ok(())
}

fn eval<F: Real>(
    model: &Path,
    corpus: &Path,
    labels: &Path,
    split: SplitArg,
    rules: Option<&Path>,
    json: Option<&Path>,
) -> Result<()> {
    let model = load_model::<F>(model)?;
    let corpus = split.select(Corpus::<F>::load(corpus).with_context(|| format!("reading {}", corpus.display()))?);
    ensure!(!corpus.is_empty(), "no sentences in the selected split");
    let labels = Labels::load(labels).with_context(|| format!("reading {}", labels.display()))?;
    let rules = load_rules(rules)?;
    let report = evaluate(&model, &corpus, &labels, rules.as_ref())?;
    print!("{report}");
    if let Some(p) = json {
        std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

enum Source {
    Corpus(PathBuf, SplitArg),
    Text(Vec<Vec<char>>),
}

fn export_attn<F: Real>(model: &Path, source: Source, rules: Option<&Path>, out: &Path) -> Result<()> {
    let model = load_model::<F>(model)?;
    let rules = load_rules(rules)?;
    let sentences: Vec<(usize, Vec<char>)> = match source {
        Source::Corpus(p, split) => split
            .select(Corpus::<F>::load(&p).with_context(|| format!("reading {}", p.display()))?)
            .utterances
            .into_iter()
            .map(|u| (u.id, u.chars))
            .collect(),
        Source::Text(s) => s.into_iter().enumerate().collect(),
    };
    let mut diagnostics = Vec::with_capacity(sentences.len());
    for (id, chars) in &sentences {
        diagnostics.push((*id, infer_pronunciations(&model, chars, rules.as_ref(), None)?.diagnostics));
    }
    let records = export_attention(&diagnostics, out)?;
    println!("wrote {} rows to {}", records.len(), out.display());
    Ok(())
}
