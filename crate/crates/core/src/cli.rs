//! The `eva` command line.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime or numerical
//! failure. Errors are reported on stderr as one JSON line
//! `{"error": "config"|"runtime", "message": "..."}`.
//!
//! `EVA_OUTPUT_DIR` is prepended to relative output paths and
//! `EVA_THREADS` sets the worker thread count.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::{read_cohort, read_vocab, simulate_toy_cohort, write_cohort, write_encoded, write_vocab_with, CohortHeader};
use crate::error::{EvaError, Result};
use crate::eval::{ngram_stats, write_scatter, Metric};
use crate::generator::generate_cohort;
use crate::model::TrainedModel;
use crate::pipeline::{attack, evaluate_cohorts, prepare_corpus, train_on_cohort};

pub const OUTPUT_DIR_ENV: &str = "EVA_OUTPUT_DIR";
pub const THREADS_ENV: &str = "EVA_THREADS";

#[derive(Parser, Debug)]
#[command(name = "eva", version, about = "Generative models for synthetic visit sequences")]
struct Cli {
    /// Flat TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a toy cohort from the built-in simulator.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the visit vocabulary and encode a cohort.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        /// Receives vocab.jsonl, cohort.jsonl and encoded.jsonl.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model and write a checkpoint plus a metric stream.
    Train {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Generate a synthetic cohort from a checkpoint.
    Generate(GenerateArgs),
    /// Compare a synthetic cohort with a real one.
    Evaluate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synthetic: PathBuf,
        /// Held-out real cohort for utility and likelihood.
        #[arg(long)]
        holdout: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Bigram scatter data for plotting.
        #[arg(long)]
        scatter: Option<PathBuf>,
    },
    /// Run the presence-disclosure attack.
    Attack {
        #[arg(long)]
        synthetic: PathBuf,
        /// Known records that were in the training set.
        #[arg(long)]
        members: PathBuf,
        /// Known records that were not.
        #[arg(long)]
        non_members: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    /// `unconditional` or `conditional`.
    #[arg(long)]
    mode: Option<String>,
    /// Condition names for conditional generation; repeatable.
    #[arg(long = "condition")]
    conditions: Vec<String>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<EvaError> for Failure {
    fn from(e: EvaError) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

/// Output files written to temporaries and renamed into place together.
/// Dropping without [`Outputs::commit`] removes the temporaries.
struct Outputs {
    base: Option<PathBuf>,
    pending: Vec<(PathBuf, PathBuf)>,
}

impl Outputs {
    fn new() -> Self {
        Self {
            base: std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from),
            pending: Vec::new(),
        }
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        match &self.base {
            Some(b) if path.is_relative() => b.join(path),
            _ => path.to_path_buf(),
        }
    }

    /// Reserves `path`; returns the temporary path to write.
    fn stage(&mut self, path: &Path) -> Result<PathBuf> {
        let target = self.resolve(path);
        if let Some(parent) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| EvaError::io(parent, e))?;
        }
        let name = target.file_name().ok_or_else(|| EvaError::invalid(format!("{} is not a file path", path.display())))?;
        let mut tmp_name = OsString::from(".");
        tmp_name.push(name);
        tmp_name.push(".partial");
        let tmp = target.with_file_name(tmp_name);
        self.pending.push((tmp.clone(), target));
        Ok(tmp)
    }

    fn commit(mut self) -> Result<()> {
        for (tmp, target) in std::mem::take(&mut self.pending) {
            fs::rename(&tmp, &target).map_err(|e| EvaError::io(&target, e))?;
        }
        Ok(())
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        for (tmp, _) in &self.pending {
            let _ = fs::remove_file(tmp);
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| EvaError::io(path, e))
}

#[derive(Serialize)]
struct MetricReport<'a> {
    config_digest: &'a str,
    seed: u64,
    metrics: &'a [Metric],
}

#[derive(Serialize)]
struct StreamHeader<'a> {
    config_digest: &'a str,
    seed: u64,
}

fn load_run(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Command::Generate(g) = &cli.command {
        if let Some(c) = g.count {
            overrides.push(format!("count={c}"));
        }
        if let Some(m) = &g.mode {
            overrides.push(format!("mode={m:?}"));
        }
        if !g.conditions.is_empty() {
            let list = serde_json::to_string(&g.conditions)?;
            overrides.push(format!("conditions={list}"));
        }
    }
    RunConfig::load(cli.config.as_deref(), &overrides)
}

fn header(run: &RunConfig, condition_names: &[String]) -> CohortHeader {
    CohortHeader {
        condition_names: condition_names.to_vec(),
        config_digest: Some(run.digest()),
        seed: Some(run.seed),
    }
}

fn inputs(command: &Command) -> Vec<&Path> {
    match command {
        Command::Simulate { .. } => vec![],
        Command::Preprocess { input, .. } => vec![input],
        Command::Train { input, vocab, .. } => std::iter::once(input.as_path()).chain(vocab.as_deref()).collect(),
        Command::Generate(g) => vec![&g.model],
        Command::Evaluate {
            real,
            synthetic,
            holdout,
            model,
            ..
        } => [Some(real.as_path()), Some(synthetic.as_path()), holdout.as_deref(), model.as_deref()]
            .into_iter()
            .flatten()
            .collect(),
        Command::Attack {
            synthetic,
            members,
            non_members,
            ..
        } => vec![synthetic, members, non_members],
    }
}

fn dispatch(cli: &Cli) -> std::result::Result<(), Failure> {
    let run = load_run(cli)?;
    if let Some(missing) = inputs(&cli.command).into_iter().find(|p| !p.is_file()) {
        return Err(Failure::Config(format!("input file {} not found", missing.display())));
    }
    let digest = run.digest();
    let mut outputs = Outputs::new();
    match &cli.command {
        Command::Simulate { out } => {
            let cohort = simulate_toy_cohort(&run.simulator_config(), run.seed)?;
            let tmp = outputs.stage(out)?;
            write_cohort(&tmp, &cohort, Some(&header(&run, &cohort.condition_names)))?;
        }
        Command::Preprocess { input, out_dir } => {
            let (cohort, _) = read_cohort(input)?;
            let p = prepare_corpus(&cohort, None, run.vocab_size, run.t_max)?;
            let vocab_tmp = outputs.stage(&out_dir.join("vocab.jsonl"))?;
            write_vocab_with(&vocab_tmp, &p.vocab, Some(&digest), Some(run.seed))?;
            let cohort_tmp = outputs.stage(&out_dir.join("cohort.jsonl"))?;
            write_cohort(&cohort_tmp, &p.cohort, Some(&header(&run, &p.cohort.condition_names)))?;
            let enc_tmp = outputs.stage(&out_dir.join("encoded.jsonl"))?;
            write_encoded(&enc_tmp, &p.cohort, &p.encoded, Some(&digest), Some(run.seed))?;
        }
        Command::Train {
            input,
            vocab,
            out,
            metrics,
        } => {
            let (cohort, _) = read_cohort(input)?;
            let vocab = vocab.as_deref().map(read_vocab).transpose()?;
            let mut lines = Vec::new();
            serde_json::to_writer(
                &mut lines,
                &StreamHeader {
                    config_digest: &digest,
                    seed: run.seed,
                },
            )
            .map_err(EvaError::from)?;
            lines.push(b'\n');
            let model = train_on_cohort(&run, &cohort, vocab.as_ref(), |m| {
                serde_json::to_writer(&mut lines, m).expect("metric serializes");
                lines.push(b'\n');
            })?;
            let tmp = outputs.stage(out)?;
            model.save(&tmp)?;
            if let Some(mp) = metrics {
                let tmp = outputs.stage(mp)?;
                fs::write(&tmp, &lines).map_err(|e| EvaError::io(&tmp, e))?;
            }
        }
        Command::Generate(g) => {
            let model = TrainedModel::load(&g.model)?;
            let request = run.generation_request(&model)?;
            let cohort = generate_cohort(&model, &request)?;
            let tmp = outputs.stage(&g.out)?;
            write_cohort(&tmp, &cohort, Some(&header(&run, &cohort.condition_names)))?;
        }
        Command::Evaluate {
            real,
            synthetic,
            holdout,
            model,
            out,
            scatter,
        } => {
            let (real, _) = read_cohort(real)?;
            let (synth, _) = read_cohort(synthetic)?;
            let holdout = holdout.as_deref().map(read_cohort).transpose()?.map(|(c, _)| c);
            let model = model.as_deref().map(TrainedModel::load).transpose()?;
            let metrics = evaluate_cohorts(&run, &real, &synth, holdout.as_ref(), model.as_ref())?;
            let report = MetricReport {
                config_digest: &digest,
                seed: run.seed,
                metrics: &metrics,
            };
            let tmp = outputs.stage(out)?;
            write_json(&tmp, &report)?;
            if let Some(sp) = scatter {
                let tmp = outputs.stage(sp)?;
                write_scatter(&tmp, &ngram_stats(&real, 2)?, &ngram_stats(&synth, 2)?)?;
            }
            let mut stdout = std::io::stdout().lock();
            for m in &metrics {
                let _ = writeln!(stdout, "{}\t{:.6}", m.name, m.value);
            }
        }
        Command::Attack {
            synthetic,
            members,
            non_members,
            out,
        } => {
            let (synth, _) = read_cohort(synthetic)?;
            let (members, _) = read_cohort(members)?;
            let (non_members, _) = read_cohort(non_members)?;
            let report = attack(&run, &synth, &members, &non_members)?;
            let tmp = outputs.stage(out)?;
            write_json(&tmp, &report)?;
            let o = report.outcome;
            println!("sensitivity\t{:.6}\nprecision\t{:.6}", o.sensitivity, o.precision);
        }
    }
    outputs.commit()?;
    Ok(())
}

fn configure_threads() -> std::result::Result<(), Failure> {
    let Some(raw) = std::env::var_os(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .to_str()
        .and_then(|s| s.trim().parse().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Config(format!("{THREADS_ENV} must be a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn report(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{line}");
}

/// Parses `args` (including the program name) and runs the command;
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            report("config", first.trim_start_matches("error: "));
            return 1;
        }
    };
    let result = configure_threads().and_then(|_| dispatch(&cli));
    match result {
        Ok(()) => 0,
        Err(Failure::Config(m)) => {
            report("config", &m);
            1
        }
        Err(Failure::Runtime(m)) => {
            report("runtime", &m);
            2
        }
    }
}
