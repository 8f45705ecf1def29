//! The joint training loop and the two fixed-code baselines.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{self, CodingMatrix};
use crate::data_io::{LabelMap, SparseDataset};
use crate::error::{Error, Result};
use crate::learners::{BaseLearnerEnsemble, LearnerSpec, OutputCache};
use crate::matrix::Matrix;
use crate::matrix_optimizer;
use crate::seed;
use crate::softmax_decoder::{self, DecoderParams, DecoderTraining};

// seed streams
const MATRIX_STREAM: u64 = 1;
const LEARNER_STREAM: u64 = 2;
const DECODER_STREAM: u64 = 3;

pub const CODEBOOK_FILE: &str = "codebook.txt";
pub const DECODER_FILE: &str = "decoder.txt";
pub const ENSEMBLE_FILE: &str = "ensemble.txt";
pub const HISTORY_FILE: &str = "history.csv";
pub const LABELS_FILE: &str = "labels.map";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Lightmc,
    EcocFixed,
    Ova,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Lightmc => "lightmc",
            Mode::EcocFixed => "ecoc_fixed",
            Mode::Ova => "ova",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lightmc" => Ok(Mode::Lightmc),
            "ecoc_fixed" | "ecoc" => Ok(Mode::EcocFixed),
            "ova" => Ok(Mode::Ova),
            _ => Err(Error::InvalidArg(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeLength {
    Auto,
    Fixed(usize),
}

impl CodeLength {
    pub fn resolve(self, num_classes: usize) -> Result<usize> {
        match self {
            CodeLength::Auto => codebook::auto_code_length(num_classes),
            CodeLength::Fixed(l) => Ok(l),
        }
    }
}

impl fmt::Display for CodeLength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodeLength::Auto => f.write_str("auto"),
            CodeLength::Fixed(l) => write!(f, "{l}"),
        }
    }
}

impl FromStr for CodeLength {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(CodeLength::Auto);
        }
        match s.parse::<usize>() {
            Ok(l) if l >= 1 => Ok(CodeLength::Fixed(l)),
            _ => Err(Error::InvalidArg(format!(
                "code length must be `auto` or a positive integer, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub code_length: CodeLength,
    pub max_rounds: usize,
    pub start_round: usize,
    pub learner: LearnerSpec,
    pub gamma1: f64,
    pub gamma2: f64,
    pub decoder_batch: usize,
    pub decoder_epochs_per_call: usize,
    pub l2: f64,
    pub seed: u64,
    /// 0 disables early stopping.
    pub early_stop_rounds: usize,
    /// Only honoured in `lightmc` mode.
    pub matrix_update: bool,
    /// Only honoured in `lightmc` mode.
    pub decoder_update: bool,
    /// Mini-batch size for the matrix update; `None` uses the whole training set.
    pub matrix_batch: Option<usize>,
    /// Overrides the seeded random initial matrix (ECOC modes only).
    pub initial_matrix: Option<CodingMatrix>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Lightmc,
            code_length: CodeLength::Auto,
            max_rounds: 100,
            start_round: 30,
            learner: LearnerSpec::default(),
            gamma1: softmax_decoder::DEFAULT_LEARNING_RATE,
            gamma2: matrix_optimizer::DEFAULT_LEARNING_RATE,
            decoder_batch: softmax_decoder::DEFAULT_BATCH_SIZE,
            decoder_epochs_per_call: 1,
            l2: 0.0,
            seed: 0,
            early_stop_rounds: 20,
            matrix_update: true,
            decoder_update: true,
            matrix_batch: None,
            initial_matrix: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.max_rounds < 1 {
            return bad("max_rounds must be at least 1".into());
        }
        if self.start_round < 1 {
            return bad("start_round must be at least 1".into());
        }
        if self.decoder_updates() && !(self.gamma1 > 0.0 && self.gamma1.is_finite()) {
            return bad(format!("gamma1 must be positive, got {}", self.gamma1));
        }
        if self.matrix_updates() && !(self.gamma2 > 0.0 && self.gamma2.is_finite()) {
            return bad(format!("gamma2 must be positive, got {}", self.gamma2));
        }
        if self.decoder_batch < 1 {
            return bad("decoder_batch must be at least 1".into());
        }
        if self.decoder_epochs_per_call < 1 {
            return bad("decoder_epochs_per_call must be at least 1".into());
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad(format!("l2 must be nonnegative, got {}", self.l2));
        }
        if self.matrix_batch == Some(0) {
            return bad("matrix_batch must be positive".into());
        }
        if let CodeLength::Fixed(0) = self.code_length {
            return bad("code_length must be positive".into());
        }
        self.learner.validate()
    }

    pub fn decoder_updates(&self) -> bool {
        self.mode == Mode::Lightmc && self.decoder_update
    }

    pub fn matrix_updates(&self) -> bool {
        self.mode == Mode::Lightmc && self.matrix_update
    }

    /// Rounds between updates for boosting learners: `round(1/alpha)`, at least 1.
    pub fn update_period(&self) -> usize {
        ((1.0 / self.learner.learning_rate).round() as usize).max(1)
    }

    /// Whether decoder and matrix updates fire after training round `round`
    /// (1-based).
    pub fn is_update_round(&self, round: usize) -> bool {
        if !self.learner.is_boosting() {
            return true;
        }
        round >= self.start_round && (round - self.start_round).is_multiple_of(self.update_period())
    }
}

/// One row of `history.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub elapsed_seconds: f64,
    pub train_loss: f64,
    pub valid_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub mode: Mode,
    pub matrix: CodingMatrix,
    pub decoder: DecoderParams,
    pub ensemble: BaseLearnerEnsemble,
    pub label_map: LabelMap,
    pub history: Vec<RoundRecord>,
    /// Round whose state was returned.
    pub best_round: usize,
    /// Rounds after which the decoder and matrix were updated.
    pub update_rounds: Vec<usize>,
    /// The matrix at round 0 and after every update round.
    pub matrix_checkpoints: Vec<(usize, CodingMatrix)>,
}

impl TrainedModel {
    pub fn num_classes(&self) -> usize {
        self.matrix.num_classes()
    }

    pub fn rounds_run(&self) -> usize {
        self.history.last().map_or(0, |r| r.round)
    }

    pub fn outputs(&self, data: &SparseDataset) -> Matrix {
        self.ensemble.predict_all(data)
    }

    pub fn predict(&self, data: &SparseDataset) -> Result<Vec<usize>> {
        decode_rows(&self.decoder, &self.outputs(data))
    }

    /// Fraction of misclassified instances.
    pub fn error_rate(&self, data: &SparseDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(error_rate(&self.predict(data)?, data.labels()))
    }

    /// Writes the bundle files into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.matrix.save(&dir.join(CODEBOOK_FILE))?;
        self.decoder.save(&dir.join(DECODER_FILE))?;
        self.ensemble.save(&dir.join(ENSEMBLE_FILE))?;
        self.label_map.save(&dir.join(LABELS_FILE))?;
        write_history(&dir.join(HISTORY_FILE), &self.history)
    }

    /// Reads a bundle written by [`TrainedModel::save`]. Training-only
    /// bookkeeping (checkpoints, update rounds) is not persisted.
    pub fn load(dir: &Path) -> Result<Self> {
        let matrix = CodingMatrix::load(&dir.join(CODEBOOK_FILE))?;
        let decoder = DecoderParams::load(&dir.join(DECODER_FILE))?;
        let ensemble = BaseLearnerEnsemble::load(&dir.join(ENSEMBLE_FILE))?;
        let label_map = LabelMap::load(&dir.join(LABELS_FILE))?;
        let history = read_history(&dir.join(HISTORY_FILE))?;
        let k = matrix.num_classes();
        let mismatch = |what, expected, found| Err(Error::DimensionMismatch { what, expected, found });
        if decoder.num_classes() != k {
            return mismatch("decoder classes", k, decoder.num_classes());
        }
        if decoder.code_length() != matrix.code_length() {
            return mismatch("decoder code length", matrix.code_length(), decoder.code_length());
        }
        if ensemble.len() != matrix.code_length() {
            return mismatch("ensemble members", matrix.code_length(), ensemble.len());
        }
        if label_map.len() != k {
            return mismatch("label map classes", k, label_map.len());
        }
        let mode = if matrix == CodingMatrix::one_vs_all(k)? && decoder == DecoderParams::argmax_identity(k) {
            Mode::Ova
        } else {
            Mode::Lightmc
        };
        Ok(Self {
            mode,
            best_round: ensemble.rounds(),
            matrix,
            decoder,
            ensemble,
            label_map,
            history,
            update_rounds: Vec::new(),
            matrix_checkpoints: Vec::new(),
        })
    }
}

pub fn error_rate(predicted: &[usize], labels: &[usize]) -> f64 {
    let wrong = predicted.iter().zip(labels).filter(|(p, y)| p != y).count();
    wrong as f64 / labels.len().max(1) as f64
}

fn decode_rows(decoder: &DecoderParams, outputs: &Matrix) -> Result<Vec<usize>> {
    (0..outputs.rows())
        .into_par_iter()
        .map(|i| decoder.predict(outputs.row(i)))
        .collect()
}

/// Trains a model in the mode named by `config.mode`.
pub fn fit(data: &SparseDataset, valid: &SparseDataset, config: &TrainConfig) -> Result<TrainedModel> {
    if config.mode == Mode::Ova {
        return fit_ova(data, valid, config);
    }
    config.validate()?;
    let k = check_data(data, valid)?;
    let matrix = match &config.initial_matrix {
        Some(m) => {
            if m.num_classes() != k {
                return Err(Error::ConfigInvalid(format!(
                    "initial matrix has {} classes, data has {k}",
                    m.num_classes()
                )));
            }
            m.clone()
        }
        None => {
            let l = config.code_length.resolve(k)?;
            CodingMatrix::init_random(k, l, seed::derive(config.seed, MATRIX_STREAM, 0))?
        }
    };
    let decoder = DecoderParams::from_matrix(&matrix);
    run(data, valid, config, matrix, decoder)
}

/// One-vs-all baseline: K learners on +1/-1 targets, predicting the argmax of
/// the raw outputs. The decoder is the identity, so nothing is updated.
pub fn fit_ova(data: &SparseDataset, valid: &SparseDataset, config: &TrainConfig) -> Result<TrainedModel> {
    let config = TrainConfig {
        mode: Mode::Ova,
        ..config.clone()
    };
    config.validate()?;
    let k = check_data(data, valid)?;
    let matrix = CodingMatrix::one_vs_all(k)?;
    let decoder = DecoderParams::argmax_identity(k);
    run(data, valid, &config, matrix, decoder)
}

fn check_data(data: &SparseDataset, valid: &SparseDataset) -> Result<usize> {
    if data.is_empty() || valid.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = data.num_classes();
    if k < 3 {
        return Err(Error::ConfigInvalid(format!("need at least 3 classes, found {k}")));
    }
    if let Some(missing) = data.class_counts().iter().position(|&c| c == 0) {
        return Err(Error::MissingClass(missing));
    }
    if let Some(&y) = valid.labels().iter().find(|&&y| y >= k) {
        return Err(Error::IndexOutOfRange { index: y, bound: k });
    }
    Ok(k)
}

struct Snapshot {
    round: usize,
    error: f64,
    matrix: CodingMatrix,
    decoder: DecoderParams,
    // linear members cannot be rewound, so they are copied
    ensemble: Option<BaseLearnerEnsemble>,
}

fn run(
    data: &SparseDataset,
    valid: &SparseDataset,
    config: &TrainConfig,
    mut matrix: CodingMatrix,
    mut decoder: DecoderParams,
) -> Result<TrainedModel> {
    let labels = data.labels();
    let l = matrix.code_length();
    let mut ensemble = BaseLearnerEnsemble::new(
        config.learner.kind,
        l,
        data.num_features(),
        seed::derive(config.seed, LEARNER_STREAM, 0),
    );
    let mut train_cache = OutputCache::new(data.len(), l);
    let mut valid_cache = OutputCache::new(valid.len(), l);
    let mut history = Vec::new();
    let mut update_rounds = Vec::new();
    let mut checkpoints = vec![(0, matrix.clone())];
    let mut best: Option<Snapshot> = None;
    let start = Instant::now();

    for round in 1..=config.max_rounds {
        ensemble.train_round(data, &matrix, &config.learner, &mut train_cache)?;
        let outputs = train_cache.outputs();

        let updating = (config.decoder_updates() || config.matrix_updates()) && config.is_update_round(round);
        if updating {
            if config.decoder_updates() {
                let settings = DecoderTraining {
                    learning_rate: config.gamma1,
                    batch_size: config.decoder_batch,
                    epochs: config.decoder_epochs_per_call,
                    l2: config.l2,
                    seed: seed::derive(config.seed, DECODER_STREAM, round as u64),
                };
                decoder = softmax_decoder::train_decoding(&decoder, outputs, labels, &settings)?;
            }
            if config.matrix_updates() {
                let grads = matrix_optimizer::output_gradients(&decoder, outputs, labels)?;
                matrix = match config.matrix_batch {
                    Some(b) => matrix_optimizer::update_matrix_minibatch(&matrix, &grads, labels, config.gamma2, b)?,
                    None => {
                        let stats = matrix_optimizer::accumulate(&grads, labels, matrix.num_classes())?;
                        matrix_optimizer::update_matrix(&matrix, &stats, config.gamma2)?
                    }
                };
                checkpoints.push((round, matrix.clone()));
            }
            update_rounds.push(round);
        }

        let train_loss = softmax_decoder::mean_loss(&decoder, outputs, labels)?;
        valid_cache.refresh(&ensemble, valid)?;
        let valid_error = error_rate(&decode_rows(&decoder, valid_cache.outputs())?, valid.labels());
        history.push(RoundRecord {
            round,
            elapsed_seconds: start.elapsed().as_secs_f64(),
            train_loss,
            valid_error,
        });
        log::debug!("round {round}: train loss {train_loss:.6}, valid error {valid_error:.4}");

        if best.as_ref().is_none_or(|b| valid_error < b.error) {
            best = Some(Snapshot {
                round,
                error: valid_error,
                matrix: matrix.clone(),
                decoder: decoder.clone(),
                ensemble: (!ensemble.is_boosting()).then(|| ensemble.clone()),
            });
        }
        let best_round = best.as_ref().map_or(round, |b| b.round);
        if config.early_stop_rounds > 0 && round - best_round >= config.early_stop_rounds {
            log::info!("early stop at round {round}, best round {best_round}");
            break;
        }
    }

    let best = best.expect("at least one round runs");
    let ensemble = match best.ensemble {
        Some(e) => e,
        None => {
            ensemble.truncate_rounds(best.round)?;
            ensemble
        }
    };
    Ok(TrainedModel {
        mode: config.mode,
        matrix: best.matrix,
        decoder: best.decoder,
        ensemble,
        label_map: data.label_map().clone(),
        history,
        best_round: best.round,
        update_rounds,
        matrix_checkpoints: checkpoints,
    })
}

pub fn write_history(path: &Path, history: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<RoundRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let records = r.deserialize().collect::<std::result::Result<Vec<RoundRecord>, _>>()?;
    Ok(records)
}
