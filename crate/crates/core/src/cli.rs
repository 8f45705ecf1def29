//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.
//! Training settings resolve as flag, then `--config` file entry, then the
//! built-in default.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data_io::{self, LoadOptions, SparseDataset};
use crate::learners::LearnerKind;
use crate::synth::PairedBlobs;
use crate::trainer::{self, CodeLength, Mode, TrainConfig, TrainedModel};

pub const THREADS_ENV: &str = "LIGHTMC_THREADS";

/// Marks errors that should exit with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage<T>(message: impl Into<String>) -> anyhow::Result<T> {
    Err(UsageError(message.into()).into())
}

#[derive(Debug, Parser)]
#[command(name = "lightmc", version, about = "ECOC multiclass training with learned coding matrices")]
pub struct Cli {
    /// Worker threads (default: LIGHTMC_THREADS, else all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its bundle.
    Train(TrainArgs),
    /// Print predicted labels, one per line.
    Predict(PredictArgs),
    /// Print the classification error of a bundle on a dataset.
    Evaluate(EvaluateArgs),
    /// Train several modes on the same data and write convergence CSVs.
    Compare(CompareArgs),
    /// Write a paired Gaussian-blob dataset in sparse text format.
    GenBlobs(GenBlobsArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Training data (sparse text).
    #[arg(long)]
    pub data: PathBuf,
    /// Validation data; without it a stratified split of --data is used.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Fraction of --data held out for validation when --valid is absent.
    #[arg(long)]
    pub valid_fraction: Option<f64>,
    /// Test data for the final error report.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Feature indices in the files start at 0.
    #[arg(long)]
    pub zero_based: bool,
}

/// Training settings shared by `train` and `compare`. Unset flags fall back
/// to the config file, then to the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub code_length: Option<String>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub start_round: Option<usize>,
    /// Boosting shrinkage (also the update cadence, every round(1/alpha) rounds).
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma1: Option<f64>,
    #[arg(long)]
    pub gamma2: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub decoder_batch: Option<usize>,
    #[arg(long)]
    pub decoder_epochs: Option<usize>,
    #[arg(long)]
    pub matrix_batch: Option<usize>,
    /// Rounds without validation improvement before stopping (0 disables).
    #[arg(long)]
    pub early_stop: Option<usize>,
    /// `trees` or `linear`.
    #[arg(long)]
    pub learner: Option<String>,
    #[arg(long)]
    pub max_leaves: Option<usize>,
    #[arg(long)]
    pub min_samples_leaf: Option<usize>,
    #[arg(long)]
    pub epochs_per_round: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat `key=value` file; keys are the long flag names.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// `lightmc`, `ecoc_fixed` or `ova`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Output bundle directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub zero_based: bool,
    /// Write predictions here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub zero_based: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Comma-separated modes, e.g. `lightmc,ecoc_fixed,ova`.
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<String>,
    /// Class pairs to trace, as `a:b` with labels as written in the data.
    #[arg(long, value_delimiter = ',')]
    pub pairs: Vec<String>,
    /// Output directory for the CSVs and one bundle per mode.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenBlobsArgs {
    #[arg(long, default_value_t = 10)]
    pub pairs: usize,
    #[arg(long, default_value_t = 200)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 20)]
    pub features: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_train: PathBuf,
    #[arg(long)]
    pub out_test: PathBuf,
}

/// Summary line printed after each training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub mode: Mode,
    /// Error on --test when given, otherwise on the validation set.
    pub final_test_error: f64,
    pub evaluated_on: &'static str,
    /// Wall time until the returned (best) round.
    pub convergence_seconds: f64,
    pub rounds_run: usize,
    pub history_path: PathBuf,
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mode={} final_test_error={:.4} evaluated_on={} convergence_seconds={:.3} rounds_run={} history_path={}",
            self.mode,
            self.final_test_error,
            self.evaluated_on,
            self.convergence_seconds,
            self.rounds_run,
            self.history_path.display()
        )
    }
}

/// One row of the merged convergence CSV written by `compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub mode: String,
    pub round: usize,
    pub elapsed_seconds: f64,
    pub valid_error: f64,
}

/// One row of the code-distance trace written by `compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub round: usize,
    pub class_a: String,
    pub class_b: String,
    pub distance: f64,
}

pub const CONVERGENCE_FILE: &str = "convergence.csv";
pub const DISTANCES_FILE: &str = "distances.csv";

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let rows = r.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok(rows)
}

/// Flat `key=value` config. Blank lines and `#` comments are skipped; keys
/// may use `-` or `_`.
pub fn parse_config(text: &str) -> anyhow::Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return usage(format!("config line {}: expected key=value", n + 1));
        };
        let key = k.trim().replace('_', "-");
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return usage(format!("config line {}: unknown key {key:?}", n + 1));
        }
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

const CONFIG_KEYS: &[&str] = &[
    "mode",
    "code-length",
    "rounds",
    "start-round",
    "alpha",
    "gamma1",
    "gamma2",
    "l2",
    "decoder-batch",
    "decoder-epochs",
    "matrix-batch",
    "early-stop",
    "learner",
    "max-leaves",
    "min-samples-leaf",
    "epochs-per-round",
    "seed",
    "valid-fraction",
];

struct Resolver {
    config: HashMap<String, String>,
}

impl Resolver {
    fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                parse_config(&text)?
            }
            None => HashMap::new(),
        };
        Ok(Self { config })
    }

    fn get<T: FromStr>(&self, key: &str, flag: Option<T>) -> anyhow::Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.config.get(key) {
            Some(v) => match v.parse() {
                Ok(x) => Ok(Some(x)),
                Err(e) => usage(format!("config {key}={v}: {e}")),
            },
            None => Ok(None),
        }
    }

    fn apply<T: FromStr>(&self, key: &str, flag: Option<T>, slot: &mut T) -> anyhow::Result<()>
    where
        T::Err: fmt::Display,
    {
        if let Some(v) = self.get(key, flag)? {
            *slot = v;
        }
        Ok(())
    }
}

fn parse_flag<T: FromStr>(name: &str, value: &str) -> anyhow::Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().or_else(|e| usage(format!("--{name} {value}: {e}")))
}

/// Builds the training configuration from flags, config file and defaults.
/// Also returns the validation fraction.
pub fn resolve_config(flags: &TrainFlags, mode: Option<&str>, valid_fraction: Option<f64>) -> anyhow::Result<(TrainConfig, f64)> {
    let r = Resolver::load(flags.config.as_deref())?;
    let mut c = TrainConfig::default();
    let mode: Option<String> = r.get("mode", mode.map(str::to_string))?;
    if let Some(m) = mode {
        c.mode = parse_flag("mode", &m)?;
    }
    let code_length: Option<String> = r.get("code-length", flags.code_length.clone())?;
    if let Some(l) = code_length {
        c.code_length = parse_flag::<CodeLength>("code-length", &l)?;
    }
    let learner: Option<String> = r.get("learner", flags.learner.clone())?;
    if let Some(l) = learner {
        c.learner.kind = parse_flag::<LearnerKind>("learner", &l)?;
    }
    r.apply("rounds", flags.rounds, &mut c.max_rounds)?;
    r.apply("start-round", flags.start_round, &mut c.start_round)?;
    r.apply("alpha", flags.alpha, &mut c.learner.learning_rate)?;
    r.apply("gamma1", flags.gamma1, &mut c.gamma1)?;
    r.apply("gamma2", flags.gamma2, &mut c.gamma2)?;
    r.apply("l2", flags.l2, &mut c.l2)?;
    r.apply("decoder-batch", flags.decoder_batch, &mut c.decoder_batch)?;
    r.apply("decoder-epochs", flags.decoder_epochs, &mut c.decoder_epochs_per_call)?;
    r.apply("early-stop", flags.early_stop, &mut c.early_stop_rounds)?;
    r.apply("max-leaves", flags.max_leaves, &mut c.learner.max_leaves)?;
    r.apply("min-samples-leaf", flags.min_samples_leaf, &mut c.learner.min_samples_leaf)?;
    r.apply("epochs-per-round", flags.epochs_per_round, &mut c.learner.epochs_per_round)?;
    r.apply("seed", flags.seed, &mut c.seed)?;
    c.matrix_batch = r.get("matrix-batch", flags.matrix_batch)?;
    let mut fraction = 0.2;
    r.apply("valid-fraction", valid_fraction, &mut fraction)?;
    if let Err(e) = c.validate() {
        return usage(e.to_string());
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return usage(format!("valid-fraction must be in (0, 1), got {fraction}"));
    }
    Ok((c, fraction))
}

pub struct LoadedData {
    pub train: SparseDataset,
    pub valid: SparseDataset,
    pub test: Option<SparseDataset>,
}

pub fn load_data(args: &DataArgs, valid_fraction: f64, seed: u64) -> anyhow::Result<LoadedData> {
    let base = LoadOptions {
        zero_based: args.zero_based,
        ..Default::default()
    };
    let all = data_io::load_sparse_text_with(&args.data, &base)
        .with_context(|| format!("loading {}", args.data.display()))?;
    let companion = |path: &Path, train: &SparseDataset| {
        let opts = LoadOptions {
            zero_based: args.zero_based,
            min_features: train.num_features(),
            label_map: Some(train.label_map()),
        };
        data_io::load_sparse_text_with(path, &opts).with_context(|| format!("loading {}", path.display()))
    };
    let (train, valid) = match &args.valid {
        Some(p) => {
            let valid = companion(p, &all)?;
            (all, valid)
        }
        None => data_io::stratified_split(&all, valid_fraction, seed).context("splitting validation set")?,
    };
    let test = args.test.as_deref().map(|p| companion(p, &train)).transpose()?;
    Ok(LoadedData { train, valid, test })
}

fn report_for(model: &TrainedModel, data: &LoadedData, history_path: PathBuf) -> anyhow::Result<RunReport> {
    let (set, name) = match &data.test {
        Some(t) => (t, "test"),
        None => (&data.valid, "valid"),
    };
    let convergence_seconds = model
        .history
        .iter()
        .find(|r| r.round == model.best_round)
        .map_or(0.0, |r| r.elapsed_seconds);
    Ok(RunReport {
        mode: model.mode,
        final_test_error: model.error_rate(set)?,
        evaluated_on: name,
        convergence_seconds,
        rounds_run: model.rounds_run(),
        history_path,
    })
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let (config, fraction) = resolve_config(&args.flags, args.mode.as_deref(), args.data.valid_fraction)?;
    let data = load_data(&args.data, fraction, config.seed)?;
    let model = trainer::fit(&data.train, &data.valid, &config)?;
    model.save(&args.out).with_context(|| format!("writing bundle {}", args.out.display()))?;
    let report = report_for(&model, &data, args.out.join(trainer::HISTORY_FILE))?;
    writeln!(out, "{report}")?;
    Ok(())
}

fn load_for_model(model: &TrainedModel, path: &Path, zero_based: bool) -> anyhow::Result<SparseDataset> {
    let opts = LoadOptions {
        zero_based,
        min_features: model.ensemble.num_features(),
        label_map: Some(&model.label_map),
    };
    data_io::load_sparse_text_with(path, &opts).with_context(|| format!("loading {}", path.display()))
}

fn load_model(dir: &Path) -> anyhow::Result<TrainedModel> {
    TrainedModel::load(dir).with_context(|| format!("loading model bundle {}", dir.display()))
}

pub fn cmd_predict(args: &PredictArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let model = load_model(&args.model)?;
    let opts = LoadOptions {
        zero_based: args.zero_based,
        min_features: model.ensemble.num_features(),
        label_map: None,
    };
    // labels of the input are irrelevant here, so unseen ones are fine
    let data = data_io::load_sparse_text_with(&args.data, &opts)
        .with_context(|| format!("loading {}", args.data.display()))?;
    let mut text = String::new();
    for y in model.predict(&data)? {
        text.push_str(model.label_map.name(y).unwrap_or("?"));
        text.push('\n');
    }
    match &args.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let model = load_model(&args.model)?;
    let data = load_for_model(&model, &args.data, args.zero_based)?;
    writeln!(out, "{:.4}", model.error_rate(&data)?)?;
    Ok(())
}

fn parse_pairs(specs: &[String], data: &SparseDataset) -> anyhow::Result<Vec<(usize, usize)>> {
    let map = data.label_map();
    let class = |name: &str| match map.get(name) {
        Some(c) => Ok(c),
        None => usage(format!("--pairs: unknown label {name:?}")),
    };
    specs
        .iter()
        .map(|s| match s.split_once(':') {
            Some((a, b)) => Ok((class(a)?, class(b)?)),
            None => usage(format!("--pairs: expected a:b, got {s:?}")),
        })
        .collect()
}

pub fn cmd_compare(args: &CompareArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    if args.modes.iter().all(|m| m.trim().is_empty()) {
        return usage("--modes needs at least one mode");
    }
    let modes: Vec<Mode> = args
        .modes
        .iter()
        .map(|m| parse_flag("modes", m.trim()))
        .collect::<anyhow::Result<_>>()?;
    let (base, fraction) = resolve_config(&args.flags, None, args.data.valid_fraction)?;
    let data = load_data(&args.data, fraction, base.seed)?;
    let pairs = parse_pairs(&args.pairs, &data.train)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut convergence = Vec::new();
    let mut distances = Vec::new();
    for mode in modes {
        // every ECOC mode starts from the same seeded matrix
        let config = TrainConfig { mode, ..base.clone() };
        let model = trainer::fit(&data.train, &data.valid, &config)?;
        let dir = args.out.join(mode.as_str());
        model.save(&dir).with_context(|| format!("writing bundle {}", dir.display()))?;
        writeln!(out, "{}", report_for(&model, &data, dir.join(trainer::HISTORY_FILE))?)?;
        convergence.extend(model.history.iter().map(|h| ConvergenceRow {
            mode: mode.to_string(),
            round: h.round,
            elapsed_seconds: h.elapsed_seconds,
            valid_error: h.valid_error,
        }));
        if mode == Mode::Lightmc {
            let names = data.train.label_map();
            for (round, m) in &model.matrix_checkpoints {
                for &(a, b) in &pairs {
                    distances.push(DistanceRow {
                        round: *round,
                        class_a: names.name(a).unwrap_or_default().to_string(),
                        class_b: names.name(b).unwrap_or_default().to_string(),
                        distance: m.codeword_distance(a, b)?,
                    });
                }
            }
        }
    }
    write_csv(&args.out.join(CONVERGENCE_FILE), &convergence)?;
    if !pairs.is_empty() {
        write_csv(&args.out.join(DISTANCES_FILE), &distances)?;
    }
    Ok(())
}

pub fn cmd_gen_blobs(args: &GenBlobsArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let spec = PairedBlobs {
        num_pairs: args.pairs,
        train_per_class: args.train_per_class,
        test_per_class: args.test_per_class,
        num_features: args.features,
        seed: args.seed,
        ..Default::default()
    };
    if spec.num_pairs < 2 || spec.train_per_class < 2 || spec.test_per_class < 1 || spec.num_features < 1 {
        return usage("gen-blobs needs --pairs >= 2, --train-per-class >= 2, --test-per-class >= 1, --features >= 1");
    }
    let g = spec.generate()?;
    g.train.save(&args.out_train, false)?;
    g.test.save(&args.out_test, false)?;
    writeln!(
        out,
        "wrote {} training and {} test rows, {} classes",
        g.train.len(),
        g.test.len(),
        spec.num_classes()
    )?;
    Ok(())
}

/// Thread cap from `--threads`, else the environment.
pub fn thread_count(flag: Option<usize>) -> anyhow::Result<Option<usize>> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(parse_flag::<usize>("threads", v.trim())?),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return usage("thread count must be positive");
    }
    Ok(n)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    if let Some(n) = thread_count(cli.threads)? {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    match &cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Predict(a) => cmd_predict(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Compare(a) => cmd_compare(a, out),
        Command::GenBlobs(a) => cmd_gen_blobs(a, out),
    }
}

/// 2 for usage errors, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        2
    } else {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parsing() {
        let m = parse_config("# run\nrounds = 40\n\ngamma_1=0.3\ncode_length=auto\n").unwrap_err();
        assert!(m.downcast_ref::<UsageError>().is_some());
        let m = parse_config("# run\nrounds = 40\n\ngamma1=0.3\ncode_length=auto\n").unwrap();
        assert_eq!(m["rounds"], "40");
        assert_eq!(m["code-length"], "auto");
        assert!(parse_config("rounds 40").is_err());
    }

    #[test]
    fn flags_override_config_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "rounds=40\ngamma1=0.3\nmode=ova\n").unwrap();
        let flags = TrainFlags {
            rounds: Some(7),
            config: Some(p),
            ..Default::default()
        };
        let (c, frac) = resolve_config(&flags, None, None).unwrap();
        assert_eq!(c.max_rounds, 7);
        assert_eq!(c.gamma1, 0.3);
        assert_eq!(c.mode, Mode::Ova);
        assert_eq!(c.gamma2, 0.2);
        assert_eq!(frac, 0.2);
        let (c, _) = resolve_config(&flags, Some("lightmc"), None).unwrap();
        assert_eq!(c.mode, Mode::Lightmc);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let flags = TrainFlags {
            code_length: Some("zero".into()),
            ..Default::default()
        };
        let e = resolve_config(&flags, None, None).unwrap_err();
        assert_eq!(exit_code(&e), 2);
        let flags = TrainFlags {
            alpha: Some(2.0),
            ..Default::default()
        };
        assert_eq!(exit_code(&resolve_config(&flags, None, None).unwrap_err()), 2);
        assert_eq!(exit_code(&resolve_config(&TrainFlags::default(), None, Some(1.5)).unwrap_err()), 2);
    }

    #[test]
    fn csv_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let rows = vec![
            DistanceRow { round: 0, class_a: "a".into(), class_b: "b,c".into(), distance: 4.0 },
            DistanceRow { round: 30, class_a: "a".into(), class_b: "b,c".into(), distance: 3.75 },
        ];
        write_csv(&p, &rows).unwrap();
        assert_eq!(read_csv::<DistanceRow>(&p).unwrap(), rows);
    }
}
