//! Command-line entry point.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::corpus::{flatten, load_jsonl, split_items, synth_generate, write_jsonl, OneToManyExample, Vocab};
use crate::diagnostics::all_suites;
use crate::error::{Error, Result};
use crate::eval::{evaluate, generate, DecodeSpec, DEFAULT_MAX_LEN};
use crate::model::Mode;
use crate::numeric::Rng;
use crate::train::{load_checkpoint, save_checkpoint, streams, train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "slcvae", version, about = "Train and evaluate one-to-many sequence generators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic one-to-many corpus as JSONL.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        items: usize,
        #[arg(long, default_value_t = 4)]
        targets_per_item: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Print hypotheses for every source, one per line.
    Generate {
        #[command(flatten)]
        common: DecodeArgs,
        /// Output file (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score generated hypotheses and write a JSON report.
    Eval {
        #[command(flatten)]
        common: DecodeArgs,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "slcvae", value_parser = parse_mode)]
    mode: Mode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// KL annealing steps; 0 disables annealing (one epoch when absent).
    #[arg(long)]
    kla_steps: Option<usize>,
    #[arg(long)]
    wd_rate: Option<f64>,
    #[arg(long)]
    lambda_max: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n_label: Option<usize>,
    #[arg(long)]
    embed: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    latent: Option<usize>,
    /// Fraction of items held out for validation losses.
    #[arg(long, default_value_t = 0.1)]
    valid_fraction: f64,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value = "greedy", value_parser = parse_decode)]
    decode: DecodeSpec,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    max_len: usize,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse()
}

fn parse_decode(s: &str) -> std::result::Result<DecodeSpec, String> {
    s.parse()
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("SLCVAE_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn load_corpus(path: &Path) -> Result<Vec<OneToManyExample>> {
    let ex = load_jsonl(path)?;
    if ex.is_empty() {
        return Err(Error::Contract(format!("{} holds no examples", path.display())));
    }
    Ok(ex)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            out,
            items,
            targets_per_item,
            seed,
        } => {
            if items == 0 || targets_per_item == 0 {
                return Err(Error::Contract("items and targets-per-item must be positive".into()));
            }
            info!("synth: items={items} targets_per_item={targets_per_item} seed={seed}");
            write_jsonl(&out, &synth_generate(items, targets_per_item, seed))
        }
        Command::Train(a) => run_train(a),
        Command::Generate { common, out } => {
            info!("generate: {common:?}");
            let (ck, examples) = (load_checkpoint(&common.model)?, load_corpus(&common.data)?);
            let model = ck.model()?;
            let sources: Vec<Vec<usize>> = examples.iter().map(|e| ck.vocab.encode(&e.source)).collect();
            let mut rng = Rng::derived(common.seed, streams::EVAL);
            let hyps = generate(&model, &sources, common.n, common.decode, common.max_len, &mut rng)?;
            let mut text = String::new();
            for h in hyps.iter().flatten() {
                text.push_str(&ck.vocab.decode(h).join(" "));
                text.push('\n');
            }
            match out {
                Some(path) => fs::write(path, text)?,
                None => io::stdout().lock().write_all(text.as_bytes())?,
            }
            Ok(())
        }
        Command::Eval { common, report } => {
            info!("eval: {common:?}");
            let (ck, examples) = (load_checkpoint(&common.model)?, load_corpus(&common.data)?);
            let model = ck.model()?;
            let r = evaluate(&model, &ck.vocab, &examples, common.n, common.decode, common.max_len, common.seed)?;
            let json = serde_json::to_string_pretty(&r)?;
            match report {
                Some(path) => fs::write(path, json + "\n")?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let results = all_suites(seed)?;
            let mut failed = Vec::new();
            for r in &results {
                println!("{:<40} worst {:.3e} (tolerance {:.0e}) {}", r.name, r.worst, r.tolerance, if r.passed() { "ok" } else { "FAIL" });
                if !r.passed() {
                    failed.push(r.name.clone());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Contract(format!("gradient check failed: {}", failed.join(", "))))
            }
        }
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let d = TrainConfig::default();
    let config = TrainConfig {
        mode: a.mode,
        embed: a.embed.unwrap_or(d.embed),
        hidden: a.hidden.unwrap_or(d.hidden),
        latent: a.latent.unwrap_or(d.latent),
        lr: a.lr.unwrap_or(d.lr),
        batch_size: a.batch.unwrap_or(d.batch_size),
        epochs: a.epochs.unwrap_or(d.epochs),
        kla_steps: a.kla_steps,
        wd_rate: a.wd_rate.unwrap_or(d.wd_rate),
        lambda_max: a.lambda_max.unwrap_or(d.lambda_max),
        m: a.m.unwrap_or(d.m),
        n: a.n_label.unwrap_or(d.n),
        seed: a.seed,
    };
    config.validate()?;
    if !(0.0..1.0).contains(&a.valid_fraction) {
        return Err(Error::Contract(format!("valid-fraction {} outside [0, 1)", a.valid_fraction)));
    }
    let examples = load_corpus(&a.data)?;
    let (tr, va) = split_items(&examples, a.valid_fraction);
    let vocab = Vocab::build(&tr, 1);
    info!(
        "train: data={} items={} (validation {}) vocab={} valid_fraction={}",
        a.data.display(),
        examples.len(),
        va.len(),
        vocab.len(),
        a.valid_fraction
    );
    let (tp, vp) = (flatten(&tr, &vocab), flatten(&va, &vocab));
    let ck = train(config, vocab, tp, vp)?;
    save_checkpoint(&ck, &a.out)?;
    info!("wrote {}", a.out.display());
    Ok(())
}
