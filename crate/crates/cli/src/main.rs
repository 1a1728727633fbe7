mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use olnmt::config::KeyValues;
use thiserror::Error;

use settings::Settings;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] olnmt::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        use olnmt::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => match e {
                E::Io { .. } => "io",
                E::Config(_) => "config",
                E::Utf8 { .. }
                | E::LineCount { .. }
                | E::LengthMismatch { .. }
                | E::EmptyReference(_)
                | E::Empty(_) => "data",
                E::Checkpoint(_) | E::Format(_) => "format",
                _ => "internal",
            },
        }
    }
}

const OPTIMIZERS: [&str; 7] = ["sgd", "adagrad", "adadelta", "adam", "pas", "ppas", "none"];

#[derive(Parser)]
#[command(
    name = "olnmt",
    version,
    about = "Online adaptation of attentional NMT from post-edits"
)]
struct Cli {
    /// Flat key=value settings file; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory [default: $OLNMT_OUT_DIR or ./olnmt-out]
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Progress logging on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Learn BPE merges from tokenized text.
    BpeLearn {
        /// Comma-separated text files.
        #[arg(long)]
        input: Option<String>,
        #[arg(long)]
        merges: Option<usize>,
    },
    /// Segment a text file with learned merges.
    BpeApply {
        #[arg(long)]
        codes: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Build a symbol<TAB>index vocabulary.
    Vocab {
        /// Comma-separated text files.
        #[arg(long)]
        input: Option<String>,
        #[arg(long)]
        max_vocab: Option<usize>,
    },
    /// Offline training with early stopping.
    Train {
        #[command(flatten)]
        train: TrainFiles,
        /// Continue from this system directory instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
    /// Online post-editing simulation over a test stream.
    Adapt {
        #[arg(long)]
        system: Option<PathBuf>,
        #[command(flatten)]
        test: TestFiles,
        #[command(flatten)]
        opt: OptArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        beam_size: Option<usize>,
    },
    /// Translate a source file with a frozen system.
    Translate {
        #[arg(long)]
        system: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        beam_size: Option<usize>,
    },
    /// Score hypotheses against references.
    Evaluate {
        #[arg(long)]
        hyp: Option<PathBuf>,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Train, then run the baseline and every online optimizer.
    Scenario {
        #[arg(long, value_parser = ["1", "2", "3"])]
        id: Option<String>,
        /// Generate a synthetic task instead of reading corpora.
        #[arg(long)]
        toy: bool,
        #[command(flatten)]
        toy_args: ToyArgs,
        #[command(flatten)]
        files: ScenarioFiles,
        #[command(flatten)]
        opt: OptArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
    /// Cumulative BLEU differences of online traces against a baseline.
    PlotData {
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Comma-separated trace files.
        #[arg(long)]
        online: Option<String>,
    },
}

#[derive(Args)]
struct TrainFiles {
    #[arg(long)]
    train_src: Option<PathBuf>,
    #[arg(long)]
    train_tgt: Option<PathBuf>,
    #[arg(long)]
    dev_src: Option<PathBuf>,
    #[arg(long)]
    dev_tgt: Option<PathBuf>,
}

#[derive(Args)]
struct TestFiles {
    #[arg(long)]
    test_src: Option<PathBuf>,
    #[arg(long)]
    test_tgt: Option<PathBuf>,
}

#[derive(Args)]
struct ScenarioFiles {
    #[command(flatten)]
    out: TrainFiles,
    #[arg(long)]
    in_train_src: Option<PathBuf>,
    #[arg(long)]
    in_train_tgt: Option<PathBuf>,
    #[arg(long)]
    in_dev_src: Option<PathBuf>,
    #[arg(long)]
    in_dev_tgt: Option<PathBuf>,
    #[command(flatten)]
    test: TestFiles,
}

#[derive(Args)]
struct OptArgs {
    /// Online optimizer; scenario accepts a comma-separated list.
    #[arg(long, value_parser = parse_optimizers)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    /// Passive-aggressive aggressiveness.
    #[arg(long = "C", value_name = "C")]
    c: Option<f64>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Shorten PPAS displacements only when longer than C.
    #[arg(long)]
    ppas_true_projection: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_parser = ["bleu", "ter", "all"])]
    metric: Option<String>,
    #[arg(long)]
    bootstrap_samples: Option<usize>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    attention_dim: Option<usize>,
    #[arg(long)]
    deep_output_dim: Option<usize>,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    max_output_length: Option<usize>,
    #[arg(long)]
    weight_noise: Option<f64>,
    /// 0 trains on whole words.
    #[arg(long)]
    bpe_merges: Option<usize>,
    #[arg(long)]
    max_vocab: Option<usize>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long)]
    max_updates: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    dev_limit: Option<usize>,
    #[arg(long, value_parser = ["sgd", "adagrad", "adadelta", "adam"])]
    train_optimizer: Option<String>,
    #[arg(long)]
    train_lr: Option<f64>,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, value_parser = ["copy", "reverse", "substitution"])]
    toy_kind: Option<String>,
    #[arg(long)]
    toy_train: Option<usize>,
    #[arg(long)]
    toy_test: Option<usize>,
    #[arg(long)]
    toy_vocab: Option<usize>,
    #[arg(long)]
    toy_shift: Option<f64>,
}

fn parse_optimizers(s: &str) -> Result<String, String> {
    for part in s.split(',') {
        if !OPTIMIZERS.contains(&part.trim().to_ascii_lowercase().as_str()) {
            return Err(format!(
                "unknown optimizer '{part}' (expected one of {})",
                OPTIMIZERS.join(", ")
            ));
        }
    }
    Ok(s.to_string())
}

/// Collects explicitly given flags as settings keys.
#[derive(Default)]
struct Flags(KeyValues);

impl Flags {
    fn put<V: ToString>(&mut self, key: &str, v: Option<V>) -> &mut Self {
        if let Some(v) = v {
            self.0.set(key, v.to_string());
        }
        self
    }

    fn path(&mut self, key: &str, v: Option<PathBuf>) -> &mut Self {
        self.put(key, v.map(|p| p.display().to_string()))
    }

    fn switch(&mut self, key: &str, on: bool) -> &mut Self {
        self.put(key, on.then_some(true))
    }

    fn train_files(&mut self, f: TrainFiles) -> &mut Self {
        self.path("train_src", f.train_src)
            .path("train_tgt", f.train_tgt)
            .path("dev_src", f.dev_src)
            .path("dev_tgt", f.dev_tgt)
    }

    fn test_files(&mut self, f: TestFiles) -> &mut Self {
        self.path("test_src", f.test_src).path("test_tgt", f.test_tgt)
    }

    fn opt(&mut self, o: OptArgs) -> &mut Self {
        self.put("optimizer", o.optimizer)
            .put("lr", o.lr)
            .put("C", o.c)
            .put("k_max", o.k_max)
            .put("clip_norm", o.clip_norm)
            .switch("ppas_true_projection", o.ppas_true_projection)
    }

    fn eval(&mut self, e: EvalArgs) -> &mut Self {
        self.put("metric", e.metric)
            .put("bootstrap_samples", e.bootstrap_samples)
    }

    fn model(&mut self, m: ModelArgs) -> &mut Self {
        self.put("embedding_dim", m.embedding_dim)
            .put("hidden_dim", m.hidden_dim)
            .put("attention_dim", m.attention_dim)
            .put("deep_output_dim", m.deep_output_dim)
            .put("beam_size", m.beam_size)
            .put("max_output_length", m.max_output_length)
            .put("weight_noise", m.weight_noise)
            .put("bpe_merges", m.bpe_merges)
            .put("max_vocab", m.max_vocab)
    }

    fn schedule(&mut self, s: ScheduleArgs) -> &mut Self {
        self.put("max_updates", s.max_updates)
            .put("eval_every", s.eval_every)
            .put("patience", s.patience)
            .put("dev_limit", s.dev_limit)
            .put("train_optimizer", s.train_optimizer)
            .put("train_lr", s.train_lr)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut f = Flags::default();
    f.put("seed", cli.seed).path("out_dir", cli.out_dir);
    let name = match cli.command {
        Command::BpeLearn { input, merges } => {
            f.put("input", input).put("bpe_merges", merges);
            "bpe-learn"
        }
        Command::BpeApply { codes, input } => {
            f.path("codes", codes).path("input", input);
            "bpe-apply"
        }
        Command::Vocab { input, max_vocab } => {
            f.put("input", input).put("max_vocab", max_vocab);
            "vocab"
        }
        Command::Train {
            train,
            init,
            model,
            schedule,
        } => {
            f.train_files(train).path("init", init).model(model).schedule(schedule);
            "train"
        }
        Command::Adapt {
            system,
            test,
            opt,
            eval,
            beam_size,
        } => {
            f.path("system", system)
                .test_files(test)
                .opt(opt)
                .eval(eval)
                .put("beam_size", beam_size);
            "adapt"
        }
        Command::Translate {
            system,
            input,
            beam_size,
        } => {
            f.path("system", system)
                .path("input", input)
                .put("beam_size", beam_size);
            "translate"
        }
        Command::Evaluate { hyp, reference, eval } => {
            f.path("hyp", hyp).path("ref", reference).eval(eval);
            "evaluate"
        }
        Command::Scenario {
            id,
            toy,
            toy_args,
            files,
            opt,
            eval,
            model,
            schedule,
        } => {
            f.put("id", id)
                .switch("toy", toy)
                .put("toy_kind", toy_args.toy_kind)
                .put("toy_train", toy_args.toy_train)
                .put("toy_test", toy_args.toy_test)
                .put("toy_vocab", toy_args.toy_vocab)
                .put("toy_shift", toy_args.toy_shift)
                .train_files(files.out)
                .path("in_train_src", files.in_train_src)
                .path("in_train_tgt", files.in_train_tgt)
                .path("in_dev_src", files.in_dev_src)
                .path("in_dev_tgt", files.in_dev_tgt)
                .test_files(files.test)
                .opt(opt)
                .eval(eval)
                .model(model)
                .schedule(schedule);
            "scenario"
        }
        Command::PlotData { baseline, online } => {
            f.path("baseline", baseline).put("online", online);
            "plot-data"
        }
    };
    let mut s = Settings::new(cli.config.as_deref(), f.0)?;
    let out = s.out_dir()?;
    commands::dispatch(name, &mut s, &out)?;
    s.write(&out, name)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp
                    | ErrorKind::DisplayVersion
                    | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                    ExitCode::from(2)
                } else {
                    ExitCode::SUCCESS
                };
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default();
            eprintln!("error: usage: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(if matches!(e, CliError::Usage(_)) { 2 } else { 1 })
        }
    }
}
