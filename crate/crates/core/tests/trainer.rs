use lightmc::codebook::CodingMatrix;
use lightmc::data_io::{self, SparseDataset};
use lightmc::learners::{LearnerKind, LearnerSpec};
use lightmc::matrix::Matrix;
use lightmc::softmax_decoder::DecoderParams;
use lightmc::synth;
use lightmc::trainer::{self, CodeLength, Mode, TrainConfig, TrainedModel};
use lightmc::Error;

fn three_blobs() -> (SparseDataset, SparseDataset, SparseDataset) {
    let all = synth::blobs(3, 500, 10, 1.0, 42).unwrap();
    let (rest, test) = data_io::stratified_split(&all, 0.2, 1).unwrap();
    let (train, valid) = data_io::stratified_split(&rest, 0.2, 2).unwrap();
    (train, valid, test)
}

fn quick(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        max_rounds: 60,
        early_stop_rounds: 0,
        seed: 9,
        ..Default::default()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[test]
fn lightmc_training_loss_not_above_fixed_code() {
    let (train, valid, _) = three_blobs();
    let light = trainer::fit(&train, &valid, &quick(Mode::Lightmc)).unwrap();
    let fixed = trainer::fit(&train, &valid, &quick(Mode::EcocFixed)).unwrap();
    assert_eq!(light.matrix_checkpoints[0].1, fixed.matrix);
    assert_eq!(light.history.len(), fixed.history.len());
    // identical until the first update round
    for (a, b) in light.history.iter().zip(&fixed.history).take(29) {
        assert_eq!(a.train_loss, b.train_loss);
    }
    for (a, b) in light.history.iter().zip(&fixed.history).skip(29) {
        assert!(a.train_loss <= b.train_loss, "round {}: {} > {}", a.round, a.train_loss, b.train_loss);
    }
    assert_eq!(light.update_rounds, vec![30, 40, 50, 60]);
    assert!(fixed.update_rounds.is_empty());
}

#[test]
fn fixed_code_keeps_initial_matrix_and_decoder() {
    let (train, valid, _) = three_blobs();
    let fixed = trainer::fit(&train, &valid, &quick(Mode::EcocFixed)).unwrap();
    assert_eq!(fixed.decoder, DecoderParams::from_matrix(&fixed.matrix));
    assert_eq!(fixed.matrix_checkpoints.len(), 1);
    assert_eq!(fixed.matrix.code_length(), 3);
}

#[test]
fn held_out_accuracy_far_above_chance() {
    let (train, valid, test) = three_blobs();
    for mode in [Mode::Lightmc, Mode::EcocFixed, Mode::Ova] {
        let model = trainer::fit(&train, &valid, &quick(mode)).unwrap();
        let err = model.error_rate(&test).unwrap();
        assert!(err < 0.2, "{mode}: error {err}");
    }
}

#[test]
fn single_row_prediction_matches_batch() {
    let (train, valid, test) = three_blobs();
    let model = trainer::fit(&train, &valid, &quick(Mode::Lightmc)).unwrap();
    let batch = model.predict(&test).unwrap();
    for i in [0, 5, 77, test.len() - 1] {
        let one = test.subset(&[i]);
        assert_eq!(model.predict(&one).unwrap(), vec![batch[i]]);
    }
}

#[test]
fn idealized_outputs_decode_perfectly() {
    for seed in 0..20 {
        let k = 3 + (seed as usize % 8);
        let l = lightmc::codebook::auto_code_length(k).unwrap();
        let m = CodingMatrix::init_random(k, l, seed).unwrap();
        let d = DecoderParams::from_matrix(&m);
        for y in 0..k {
            assert_eq!(d.predict(m.codeword(y)).unwrap(), y);
        }
    }
}

#[test]
fn ova_matches_identity_code_with_updates_off() {
    let (train, valid, test) = three_blobs();
    let ova = trainer::fit_ova(&train, &valid, &quick(Mode::Ova)).unwrap();
    assert_eq!(ova.ensemble.len(), 3);
    let outputs = ova.outputs(&test);
    let raw: Vec<usize> = outputs.iter_rows().map(argmax).collect();
    assert_eq!(ova.predict(&test).unwrap(), raw);

    let as_code = TrainConfig {
        initial_matrix: Some(CodingMatrix::one_vs_all(3).unwrap()),
        ..quick(Mode::EcocFixed)
    };
    let ecoc = trainer::fit(&train, &valid, &as_code).unwrap();
    assert_eq!(ecoc.predict(&test).unwrap(), raw);
}

#[test]
fn identical_runs_are_identical() {
    let (train, valid, _) = three_blobs();
    let strip = |m: TrainedModel| {
        let losses: Vec<(usize, f64, f64)> = m.history.iter().map(|h| (h.round, h.train_loss, h.valid_error)).collect();
        (m.matrix, m.decoder, m.ensemble, losses, m.best_round)
    };
    let a = strip(trainer::fit(&train, &valid, &quick(Mode::Lightmc)).unwrap());
    let b = strip(trainer::fit(&train, &valid, &quick(Mode::Lightmc)).unwrap());
    assert!(a == b);
}

#[test]
fn early_stopping_returns_best_snapshot() {
    let (train, valid, _) = three_blobs();
    let cfg = TrainConfig {
        max_rounds: 300,
        early_stop_rounds: 5,
        ..quick(Mode::EcocFixed)
    };
    let model = trainer::fit(&train, &valid, &cfg).unwrap();
    let best = model.history.iter().map(|h| h.valid_error).fold(f64::INFINITY, f64::min);
    let first_best = model.history.iter().find(|h| h.valid_error == best).unwrap().round;
    assert_eq!(model.best_round, first_best);
    assert_eq!(model.rounds_run(), first_best + 5);
    assert_eq!(model.ensemble.rounds(), first_best);
    assert_eq!(model.error_rate(&valid).unwrap(), best);
    for w in model.history.windows(2) {
        assert!(w[1].round == w[0].round + 1 && w[1].elapsed_seconds > w[0].elapsed_seconds);
    }
}

#[test]
fn history_loss_is_mean_decoder_loss() {
    let (train, valid, _) = three_blobs();
    let model = trainer::fit(&train, &valid, &quick(Mode::Lightmc)).unwrap();
    let rec = model.history[model.best_round - 1];
    let o = model.outputs(&train);
    let loss = lightmc::softmax_decoder::mean_loss(&model.decoder, &o, train.labels()).unwrap();
    assert!((loss - rec.train_loss).abs() < 1e-9, "{loss} vs {}", rec.train_loss);
}

#[test]
fn linear_learners_update_every_round() {
    let (train, valid, test) = three_blobs();
    let cfg = TrainConfig {
        learner: LearnerSpec {
            kind: LearnerKind::LinearSgd,
            learning_rate: 0.05,
            ..Default::default()
        },
        max_rounds: 8,
        ..quick(Mode::Lightmc)
    };
    let model = trainer::fit(&train, &valid, &cfg).unwrap();
    assert_eq!(model.update_rounds, (1..=8).collect::<Vec<_>>());
    assert!(model.error_rate(&test).unwrap() < 0.3);
}

#[test]
fn bundle_round_trip() {
    let (train, valid, test) = three_blobs();
    let model = trainer::fit(&train, &valid, &quick(Mode::Lightmc)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = TrainedModel::load(dir.path()).unwrap();
    assert_eq!(back.matrix, model.matrix);
    assert_eq!(back.decoder, model.decoder);
    assert_eq!(back.ensemble, model.ensemble);
    assert_eq!(back.history, model.history);
    assert_eq!(back.predict(&test).unwrap(), model.predict(&test).unwrap());
}

#[test]
fn input_errors() {
    let (train, valid, _) = three_blobs();
    // class 2 missing from the training rows
    let rows: Vec<usize> = (0..train.len()).filter(|&i| train.labels()[i] != 2).collect();
    let partial = train.subset(&rows);
    assert!(matches!(trainer::fit(&partial, &valid, &quick(Mode::Lightmc)), Err(Error::MissingClass(2))));

    let bad = TrainConfig { start_round: 0, ..quick(Mode::Lightmc) };
    assert!(matches!(trainer::fit(&train, &valid, &bad), Err(Error::ConfigInvalid(_))));

    let infeasible = TrainConfig { code_length: CodeLength::Fixed(2), ..quick(Mode::Lightmc) };
    assert!(matches!(trainer::fit(&train, &valid, &infeasible), Err(Error::InfeasibleCode { .. })));

    let empty = train.subset(&[]);
    assert!(matches!(trainer::fit(&train, &empty, &quick(Mode::Lightmc)), Err(Error::EmptyDataset)));
}

#[test]
fn minibatch_matrix_update_runs() {
    let (train, valid, _) = three_blobs();
    let cfg = TrainConfig { matrix_batch: Some(64), ..quick(Mode::Lightmc) };
    let model = trainer::fit(&train, &valid, &cfg).unwrap();
    assert_eq!(model.matrix_checkpoints.len(), 5);
    let m: &Matrix = model.matrix_checkpoints[4].1.entries();
    assert!(m.is_finite());
}
