use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use textnorm::config::RunConfig;
use textnorm::data::{self, SelectionMode, SplitManifest};
use textnorm::eval::{self, ClassifierThresholds, Metric, PredictionSet};
use textnorm::par::Execution;
use textnorm::toy::{self, ToyTask};
use textnorm::train::{Checkpoint, TrainLog, Trainer};
use textnorm::{Alphabet, Error, Model};

#[derive(Parser)]
#[command(name = "textnorm", version, about = "Character-level text normalization toolkit")]
struct Cli {
    /// Run single-threaded.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Shortest,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Copy,
    DigitsToWords,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Accuracy,
    Cer,
}

#[derive(Subcommand)]
enum Command {
    /// Convert token-level records into filtered, length-sorted sentence pairs.
    Preprocess {
        /// Three-column input file.
        input: PathBuf,
        /// Two-column output file.
        output: PathBuf,
        /// Drop pairs whose output is longer than this many characters.
        #[arg(long, default_value_t = data::MAX_OUTPUT_LEN)]
        max_output_len: usize,
        /// Alphabet file, one character per line.
        #[arg(long)]
        alphabet: Option<PathBuf>,
        /// Keep the input order instead of sorting by output length.
        #[arg(long)]
        keep_order: bool,
        /// Also write train/validation/test files with this many training pairs.
        #[arg(long, requires = "split_dir")]
        subset: Option<usize>,
        /// How the subset is chosen.
        #[arg(long, value_enum, default_value = "shortest")]
        mode: Mode,
        /// Seed for random subset selection.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the split files and manifest.
        #[arg(long, requires = "subset")]
        split_dir: Option<PathBuf>,
    },
    /// Train a model from a run configuration.
    Train {
        /// TOML run configuration.
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a pair file and dump its predictions.
    Evaluate {
        checkpoint: PathBuf,
        /// Two-column pair file.
        dataset: PathBuf,
        /// Output directory for report.txt and predictions.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        alphabet: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Paired approximate randomization test between two prediction dumps.
    Compare {
        dump_a: PathBuf,
        dump_b: PathBuf,
        #[arg(long, value_enum, default_value = "accuracy")]
        metric: MetricArg,
        /// Number of randomization trials.
        #[arg(long = "trials", short = 'R', default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Count incorrect predictions per error type.
    ClassifyErrors {
        dump: PathBuf,
        /// Truncation: prediction shorter than this fraction of the reference.
        #[arg(long, default_value_t = 0.6)]
        t3_length_ratio: f64,
        /// Truncation: common prefix of at least this fraction of the prediction.
        #[arg(long, default_value_t = 0.9)]
        t3_prefix_ratio: f64,
        /// Isolated-character errors: at most this many differing positions.
        #[arg(long, default_value_t = 3)]
        t2_max_mismatches: usize,
    },
    /// Decode one input and write its attention matrix.
    DumpAttention {
        checkpoint: PathBuf,
        /// Text to normalize.
        input: String,
        /// Trace file.
        #[arg(long)]
        out: PathBuf,
        /// Optional grayscale image (binary PGM).
        #[arg(long)]
        image: Option<PathBuf>,
        /// Pixels per matrix cell in the image.
        #[arg(long, default_value_t = 8)]
        cell: usize,
        #[arg(long)]
        alphabet: Option<PathBuf>,
    },
    /// Generate a synthetic pair file.
    GenToy {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_alphabet(path: Option<&Path>) -> Result<Alphabet> {
    Ok(match path {
        Some(p) => Alphabet::load(p).with_context(|| format!("loading alphabet {}", p.display()))?,
        None => Alphabet::default(),
    })
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn preprocess(
    input: &Path,
    output: &Path,
    max_output_len: usize,
    alphabet: Option<&Path>,
    keep_order: bool,
    split: Option<(usize, SelectionMode, &Path)>,
) -> Result<()> {
    let alphabet = load_alphabet(alphabet)?;
    let file = File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let records = data::parse_records(BufReader::new(file)).with_context(|| format!("parsing {}", input.display()))?;
    let pairs = data::recompose(&records);
    let (kept, stats) = if keep_order {
        data::filter_pairs(pairs, &alphabet, max_output_len)
    } else {
        data::filter_and_sort(pairs, &alphabet, max_output_len)
    };
    data::write_pairs_file(output, &kept).with_context(|| format!("writing {}", output.display()))?;
    print!("records\t{}\n{stats}", records.len());
    if let Some((n, mode, dir)) = split {
        let s = data::select_subset(&kept, n, mode)?;
        fs::create_dir_all(dir)?;
        data::write_pairs_file(dir.join("train.csv"), &s.train)?;
        data::write_pairs_file(dir.join("validation.csv"), &s.validation)?;
        data::write_pairs_file(dir.join("test.csv"), &s.test)?;
        let manifest = SplitManifest {
            mode,
            train: s.train.len(),
            validation: s.validation.len(),
            test: s.test.len(),
        };
        fs::write(dir.join("manifest.txt"), manifest.to_string())?;
    }
    Ok(())
}

fn train(config_path: &Path, resume: Option<&Path>, seed: Option<u64>, sequential: bool) -> Result<()> {
    let mut cfg = RunConfig::load(config_path).with_context(|| format!("reading {}", config_path.display()))?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if sequential {
        cfg.train.execution = Execution::Sequential;
    }
    let errors = cfg.validate();
    if !errors.is_empty() {
        for e in &errors {
            eprintln!("config error: {e}");
        }
        return Err(Error::Config(format!("{} problem(s) in {}", errors.len(), config_path.display())).into());
    }
    let alphabet = load_alphabet(cfg.data.alphabet.as_deref())?;
    let train_pairs =
        data::read_pairs_file(&cfg.data.train).with_context(|| format!("reading {}", cfg.data.train.display()))?;
    let validation = match &cfg.data.validation {
        Some(p) => data::read_pairs_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => Vec::new(),
    };
    let batches = data::make_batches(&train_pairs, cfg.train.batch_size, &alphabet)?;

    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            if ckpt.model != cfg.model {
                return Err(Error::Config("model section differs from the checkpoint's".into()).into());
            }
            Trainer::resume(ckpt, cfg.train.clone())?
        }
        None => Trainer::new(Model::new(cfg.model.clone(), cfg.train.seed)?, cfg.train.clone())?,
    };
    let log_path = out.join("train_log.tsv");
    let fresh = resume.is_none() || !log_path.exists();
    let sink = OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&log_path)?;
    let log = TrainLog::with_sink(Box::new(BufWriter::new(sink)), fresh)?;
    log::info!(
        "training {} model with {} parameters from iteration {}",
        cfg.model.encoder.kind,
        trainer.model().count_parameters(),
        trainer.state().iteration
    );
    let outcome = match trainer.run(&batches, &validation, &alphabet, log) {
        Ok(o) => o,
        Err(Error::Diverged { iteration, checkpoint }) => {
            let path = out.join("diverged.ckpt");
            checkpoint.save(&path)?;
            return Err(Error::NonFinite("training loss"))
                .with_context(|| format!("diverged at iteration {iteration}; state saved to {}", path.display()));
        }
        Err(e) => return Err(e.into()),
    };
    outcome.checkpoint.save(out.join("final.ckpt"))?;
    if let Some(best) = &outcome.best {
        let mut ck = outcome.checkpoint.clone();
        ck.params = best.params.clone();
        ck.save(out.join("best.ckpt"))?;
        println!("best\titeration {}\tval_loss {:.6}", best.iteration, best.val_loss);
    }
    println!("iterations\t{}", outcome.checkpoint.state.iteration);
    if let Ok(rate) = textnorm::train::measure_rate(&outcome.log) {
        println!("iterations_per_second\t{rate:.3}");
    }
    Ok(())
}

fn evaluate(
    checkpoint: &Path,
    dataset: &Path,
    out: &Path,
    alphabet: Option<&Path>,
    batch_size: usize,
    exec: Execution,
) -> Result<()> {
    let alphabet = load_alphabet(alphabet)?;
    let model = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?
        .to_model()?;
    let pairs = data::read_pairs_file(dataset).with_context(|| format!("reading {}", dataset.display()))?;
    if pairs.is_empty() {
        bail!(Error::Empty { op: "evaluate" });
    }
    let (report, preds) = eval::evaluate(&model, &pairs, &alphabet, batch_size, exec)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.txt"), report.to_string())?;
    preds.write(BufWriter::new(File::create(out.join("predictions.csv"))?))?;
    print!("{report}");
    Ok(())
}

fn read_dump(path: &Path) -> Result<PredictionSet> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(PredictionSet::read(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))?)
}

fn dump_attention(
    checkpoint: &Path,
    input: &str,
    out: &Path,
    image: Option<&Path>,
    cell: usize,
    alphabet: Option<&Path>,
) -> Result<()> {
    let alphabet = load_alphabet(alphabet)?;
    let model = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?
        .to_model()?;
    let result = model.greedy_decode(input, &alphabet)?;
    eval::dump_attention(BufWriter::new(File::create(out)?), input, &result)?;
    if let Some(p) = image {
        eval::write_pgm(BufWriter::new(File::create(p)?), &result.trace, cell)?;
    }
    println!("{}", result.text);
    if result.hit_cap {
        eprintln!("warning: output reached the length cap");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let exec = execution(cli.sequential);
    match cli.command {
        Command::Preprocess {
            input,
            output,
            max_output_len,
            alphabet,
            keep_order,
            subset,
            mode,
            seed,
            split_dir,
        } => {
            let mode = match mode {
                Mode::Shortest => SelectionMode::Shortest,
                Mode::Random => SelectionMode::Random { seed },
            };
            let split = subset.zip(split_dir.as_deref()).map(|(n, d)| (n, mode, d));
            preprocess(&input, &output, max_output_len, alphabet.as_deref(), keep_order, split)
        }
        Command::Train { config, resume, seed } => train(&config, resume.as_deref(), seed, cli.sequential),
        Command::Evaluate {
            checkpoint,
            dataset,
            out,
            alphabet,
            batch_size,
        } => evaluate(&checkpoint, &dataset, &out, alphabet.as_deref(), batch_size, exec),
        Command::Compare {
            dump_a,
            dump_b,
            metric,
            trials,
            seed,
        } => {
            let metric = match metric {
                MetricArg::Accuracy => Metric::Accuracy,
                MetricArg::Cer => Metric::Cer,
            };
            let p = eval::approx_randomization(&read_dump(&dump_a)?, &read_dump(&dump_b)?, metric, trials, seed, exec)?;
            println!("{p}");
            Ok(())
        }
        Command::ClassifyErrors {
            dump,
            t3_length_ratio,
            t3_prefix_ratio,
            t2_max_mismatches,
        } => {
            let thr = ClassifierThresholds {
                t3_length_ratio,
                t3_prefix_ratio,
                t2_max_mismatches,
            };
            print!("{}", eval::classify_errors(&read_dump(&dump)?, &thr));
            Ok(())
        }
        Command::DumpAttention {
            checkpoint,
            input,
            out,
            image,
            cell,
            alphabet,
        } => dump_attention(&checkpoint, &input, &out, image.as_deref(), cell, alphabet.as_deref()),
        Command::GenToy { task, n, seed, out } => {
            if n == 0 {
                bail!(Error::InvalidArgument("--n must be at least 1".into()));
            }
            let task = match task {
                TaskArg::Copy => ToyTask::Copy,
                TaskArg::DigitsToWords => ToyTask::DigitsToWords,
            };
            data::write_pairs_file(&out, &toy::generate(task, n, seed))?;
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::InvalidArgument(_) => 1,
                Error::NonFinite(_) | Error::Diverged { .. } => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
