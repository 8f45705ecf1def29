//! Per-column regression base learners.
//!
//! Member `j` of an ensemble learns the real-valued targets `M[y_i][j]` of the
//! current coding matrix. Targets are re-read from the matrix every round, so
//! when the matrix optimizer moves a codeword the learners chase it.

mod linear;
mod tree;

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::codebook::CodingMatrix;
use crate::data_io::SparseDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;
use crate::textfmt;

pub use linear::LinearModel;
pub use tree::{Node, Presorted, RegressionTree, TreeParams};

const HEADER: &str = "lightmc-ensemble";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnerKind {
    BoostedTrees,
    LinearSgd,
}

impl LearnerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LearnerKind::BoostedTrees => "boosted_trees",
            LearnerKind::LinearSgd => "linear_sgd",
        }
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boosted_trees" | "trees" => Ok(LearnerKind::BoostedTrees),
            "linear_sgd" | "linear" => Ok(LearnerKind::LinearSgd),
            _ => Err(Error::InvalidArg(format!("unknown learner kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    /// Shrinkage for boosted trees, step size for linear SGD.
    pub learning_rate: f64,
    pub max_leaves: usize,
    pub min_samples_leaf: usize,
    /// SGD epochs per training round (linear learners only).
    pub epochs_per_round: usize,
}

impl Default for LearnerSpec {
    fn default() -> Self {
        Self {
            kind: LearnerKind::BoostedTrees,
            learning_rate: 0.1,
            max_leaves: 31,
            min_samples_leaf: 20,
            epochs_per_round: 1,
        }
    }
}

impl LearnerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "learner learning rate must be in (0, 1], got {}",
                self.learning_rate
            )));
        }
        if self.max_leaves < 2 {
            return Err(Error::ConfigInvalid("max_leaves must be at least 2".into()));
        }
        if self.min_samples_leaf < 1 {
            return Err(Error::ConfigInvalid("min_samples_leaf must be at least 1".into()));
        }
        if self.kind == LearnerKind::LinearSgd && self.epochs_per_round < 1 {
            return Err(Error::ConfigInvalid("epochs_per_round must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_boosting(&self) -> bool {
        self.kind == LearnerKind::BoostedTrees
    }
}

/// Targets for code column `column`: `M[labels[i]][column]`.
pub fn make_targets(matrix: &CodingMatrix, labels: &[usize], column: usize) -> Result<Vec<f64>> {
    if column >= matrix.code_length() {
        return Err(Error::IndexOutOfRange {
            index: column,
            bound: matrix.code_length(),
        });
    }
    labels
        .iter()
        .map(|&y| {
            if y >= matrix.num_classes() {
                Err(Error::IndexOutOfRange {
                    index: y,
                    bound: matrix.num_classes(),
                })
            } else {
                Ok(matrix.get(y, column))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Member {
    Trees(Vec<RegressionTree>),
    Linear(LinearModel),
}

impl Member {
    fn predict_range(&self, row: crate::data_io::SparseRow<'_>, from: usize, to: usize) -> f64 {
        match self {
            Member::Trees(trees) => trees[from..to].iter().map(|t| t.predict(row)).sum(),
            Member::Linear(m) => m.predict(row),
        }
    }
}

/// L independent regressors, one per code column.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseLearnerEnsemble {
    kind: LearnerKind,
    members: Vec<Member>,
    num_features: usize,
    rounds: usize,
    seed: u64,
}

impl BaseLearnerEnsemble {
    pub fn new(kind: LearnerKind, num_members: usize, num_features: usize, seed: u64) -> Self {
        let members = (0..num_members)
            .map(|_| match kind {
                LearnerKind::BoostedTrees => Member::Trees(Vec::new()),
                LearnerKind::LinearSgd => Member::Linear(LinearModel::zeros(num_features)),
            })
            .collect();
        Self {
            kind,
            members,
            num_features,
            rounds: 0,
            seed,
        }
    }

    pub fn kind(&self) -> LearnerKind {
        self.kind
    }

    pub fn is_boosting(&self) -> bool {
        self.kind == LearnerKind::BoostedTrees
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    /// Completed training rounds.
    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// One training round for every member against the current matrix.
    ///
    /// `cache` must hold this ensemble's outputs on `data` (it is brought up to
    /// date first and advanced afterwards). Boosted members fit one tree each
    /// to `target - current output`; linear members run `epochs_per_round`
    /// SGD epochs. Columns train in parallel.
    pub fn train_round(
        &mut self,
        data: &SparseDataset,
        matrix: &CodingMatrix,
        spec: &LearnerSpec,
        cache: &mut OutputCache,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        spec.validate()?;
        if spec.kind != self.kind {
            return Err(Error::ConfigInvalid(format!(
                "learner spec is {} but ensemble holds {}",
                spec.kind, self.kind
            )));
        }
        if matrix.code_length() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "code length vs ensemble members",
                expected: self.len(),
                found: matrix.code_length(),
            });
        }
        if data.num_features() != self.num_features {
            return Err(Error::DimensionMismatch {
                what: "training features",
                expected: self.num_features,
                found: data.num_features(),
            });
        }
        cache.refresh(self, data)?;

        let targets: Vec<Vec<f64>> = (0..self.len())
            .map(|j| make_targets(matrix, data.labels(), j))
            .collect::<Result<_>>()?;
        let round = self.rounds as u64;
        let base_seed = self.seed;
        let outputs = &cache.outputs;
        let sorted = self.is_boosting().then(|| Presorted::new(data));

        self.members
            .par_iter_mut()
            .enumerate()
            .for_each(|(j, member)| match member {
                Member::Trees(trees) => {
                    let residuals: Vec<f64> = targets[j]
                        .iter()
                        .enumerate()
                        .map(|(i, t)| t - outputs[(i, j)])
                        .collect();
                    let params = TreeParams {
                        max_leaves: spec.max_leaves,
                        min_samples_leaf: spec.min_samples_leaf,
                        shrinkage: spec.learning_rate,
                    };
                    let sorted = sorted.as_ref().expect("built for boosting");
                    trees.push(RegressionTree::fit_presorted(sorted, &residuals, &params));
                }
                Member::Linear(model) => {
                    let s = seed::derive(base_seed, j as u64, round);
                    model.train(data, &targets[j], spec.learning_rate, spec.epochs_per_round, s);
                }
            });
        self.rounds += 1;
        cache.refresh(self, data)
    }

    /// N x L outputs on `data`. Features beyond the trained width are ignored.
    pub fn predict_all(&self, data: &SparseDataset) -> Matrix {
        let mut cache = OutputCache::new(data.len(), self.len());
        cache.refresh(self, data).expect("fresh cache matches ensemble");
        cache.outputs
    }

    pub fn predict_one(&self, row: crate::data_io::SparseRow<'_>) -> Vec<f64> {
        self.members
            .iter()
            .map(|m| m.predict_range(row, 0, self.rounds))
            .collect()
    }

    /// Drops boosting rounds after `rounds`. Linear members keep only their
    /// latest state, so only the current round count is accepted for them.
    pub fn truncate_rounds(&mut self, rounds: usize) -> Result<()> {
        if rounds > self.rounds {
            return Err(Error::InvalidArg(format!(
                "cannot truncate {} rounds to {rounds}",
                self.rounds
            )));
        }
        if rounds == self.rounds {
            return Ok(());
        }
        if !self.is_boosting() {
            return Err(Error::InvalidArg("linear learners cannot be truncated".into()));
        }
        for m in &mut self.members {
            if let Member::Trees(trees) = m {
                trees.truncate(rounds);
            }
        }
        self.rounds = rounds;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{HEADER} v1 {} {}", self.len(), self.kind).unwrap();
        writeln!(
            s,
            "meta features {} rounds {} seed {}",
            self.num_features, self.rounds, self.seed
        )
        .unwrap();
        for (j, m) in self.members.iter().enumerate() {
            match m {
                Member::Trees(trees) => {
                    writeln!(s, "member {j} trees {}", trees.len()).unwrap();
                    for t in trees {
                        writeln!(s, "tree {}", t.nodes().len()).unwrap();
                        for (id, n) in t.nodes().iter().enumerate() {
                            if n.is_leaf() {
                                writeln!(s, "{id} -1 0 -1 -1 {}", n.value).unwrap();
                            } else {
                                writeln!(
                                    s,
                                    "{id} {} {} {} {} 0",
                                    n.feature, n.threshold, n.left, n.right
                                )
                                .unwrap();
                            }
                        }
                    }
                }
                Member::Linear(model) => {
                    writeln!(s, "member {j} linear").unwrap();
                    textfmt::push_reals(&mut s, &[model.bias]);
                    textfmt::push_reals(&mut s, &model.weights);
                }
            }
        }
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = textfmt::Lines::new(text, "ensemble", origin);
        let fields = lines.header_fields(HEADER)?;
        if fields.len() != 2 {
            return Err(lines.error("expected `<L> <kind>` after version"));
        }
        let num_members: usize = lines.parse(fields[0])?;
        let kind: LearnerKind = fields[1].parse().map_err(|e: Error| lines.error(e.to_string()))?;

        let meta: Vec<&str> = lines.next_line()?.split_whitespace().collect();
        if meta.len() != 7 || meta[0] != "meta" || meta[1] != "features" || meta[3] != "rounds" || meta[5] != "seed" {
            return Err(lines.error("expected `meta features F rounds R seed S`"));
        }
        let num_features: usize = lines.parse(meta[2])?;
        let rounds: usize = lines.parse(meta[4])?;
        let seed: u64 = lines.parse(meta[6])?;

        let mut members = Vec::with_capacity(num_members);
        for j in 0..num_members {
            let head: Vec<&str> = lines.next_line()?.split_whitespace().collect();
            if head.len() < 3 || head[0] != "member" || lines.parse::<usize>(head[1])? != j {
                return Err(lines.error(format!("expected member {j}")));
            }
            match (kind, head[2]) {
                (LearnerKind::BoostedTrees, "trees") if head.len() == 4 => {
                    let n_trees: usize = lines.parse(head[3])?;
                    if n_trees != rounds {
                        return Err(lines.error("tree count differs from round count"));
                    }
                    let mut trees = Vec::with_capacity(n_trees);
                    for _ in 0..n_trees {
                        trees.push(read_tree(&mut lines, num_features)?);
                    }
                    members.push(Member::Trees(trees));
                }
                (LearnerKind::LinearSgd, "linear") if head.len() == 3 => {
                    let bias = lines.reals(1)?[0];
                    let weights = lines.reals(num_features)?;
                    members.push(Member::Linear(LinearModel { weights, bias }));
                }
                _ => return Err(lines.error("member kind does not match header")),
            }
        }
        lines.finish()?;
        Ok(Self {
            kind,
            members,
            num_features,
            rounds,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?, path)
    }
}

fn read_tree(lines: &mut textfmt::Lines<'_>, num_features: usize) -> Result<RegressionTree> {
    let head: Vec<&str> = lines.next_line()?.split_whitespace().collect();
    if head.len() != 2 || head[0] != "tree" {
        return Err(lines.error("expected `tree <nodes>`"));
    }
    let n: usize = lines.parse(head[1])?;
    let mut nodes = Vec::with_capacity(n);
    for id in 0..n {
        let t: Vec<&str> = lines.next_line()?.split_whitespace().collect();
        if t.len() != 6 || lines.parse::<usize>(t[0])? != id {
            return Err(lines.error(format!("expected node {id}")));
        }
        let value: f64 = lines.parse(t[5])?;
        let threshold: f64 = lines.parse(t[2])?;
        if !value.is_finite() || !threshold.is_finite() {
            return Err(lines.error("non-finite node value"));
        }
        if t[1] == "-1" {
            nodes.push(Node::leaf(value));
        } else {
            let feature: u32 = lines.parse(t[1])?;
            if feature as usize >= num_features {
                return Err(lines.error("split feature out of range"));
            }
            nodes.push(Node {
                feature,
                threshold,
                left: lines.parse(t[3])?,
                right: lines.parse(t[4])?,
                value: 0.0,
            });
        }
    }
    RegressionTree::from_nodes(nodes).map_err(|m| lines.error(m))
}

/// Running N x L outputs of an ensemble on one dataset.
///
/// Boosted outputs are advanced incrementally by adding only the trees grown
/// since the last refresh; linear outputs are recomputed when stale.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputCache {
    outputs: Matrix,
    rounds: usize,
}

impl OutputCache {
    pub fn new(num_rows: usize, num_members: usize) -> Self {
        Self {
            outputs: Matrix::zeros(num_rows, num_members),
            rounds: 0,
        }
    }

    pub fn outputs(&self) -> &Matrix {
        &self.outputs
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn refresh(&mut self, ensemble: &BaseLearnerEnsemble, data: &SparseDataset) -> Result<()> {
        if self.outputs.rows() != data.len() || self.outputs.cols() != ensemble.len() {
            return Err(Error::DimensionMismatch {
                what: "output cache shape",
                expected: data.len() * ensemble.len(),
                found: self.outputs.rows() * self.outputs.cols(),
            });
        }
        if self.rounds > ensemble.rounds {
            return Err(Error::InvalidArg("output cache is ahead of its ensemble".into()));
        }
        if self.rounds == ensemble.rounds {
            return Ok(());
        }
        let (from, to) = (self.rounds, ensemble.rounds);
        let l = ensemble.len();
        if l > 0 {
            self.outputs
                .as_mut_slice()
                .par_chunks_mut(l)
                .enumerate()
                .for_each(|(i, out)| {
                    let row = data.row(i);
                    for (o, m) in out.iter_mut().zip(&ensemble.members) {
                        match m {
                            Member::Trees(_) => *o += m.predict_range(row, from, to),
                            Member::Linear(_) => *o = m.predict_range(row, from, to),
                        }
                    }
                });
        }
        self.rounds = to;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::LabelMap;

    fn toy(n: usize) -> SparseDataset {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| vec![(i % 10) as f64, ((i * 7) % 13) as f64 - 6.0, (i / 10) as f64])
            .collect();
        let labels = (0..n).map(|i| i % 3).collect();
        SparseDataset::from_dense(&rows, labels, LabelMap::numbered(3)).unwrap()
    }

    #[test]
    fn targets_lookup() {
        let m = CodingMatrix::from_rows(&[[1.0, 0.5], [-1.0, 0.25], [1.0, -2.0]]).unwrap();
        assert_eq!(make_targets(&m, &[0, 1, 2, 0], 0).unwrap(), vec![1.0, -1.0, 1.0, 1.0]);
        assert_eq!(make_targets(&m, &[2, 1], 1).unwrap(), vec![-2.0, 0.25]);
        assert!(matches!(make_targets(&m, &[0], 2), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn untrained_boosting_predicts_zero() {
        let e = BaseLearnerEnsemble::new(LearnerKind::BoostedTrees, 4, 3, 0);
        let out = e.predict_all(&toy(10));
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_targets_move_by_shrinkage() {
        let data = toy(30);
        let m = CodingMatrix::from_rows(&[[0.7, -0.7], [0.7, -0.7], [0.7, 0.7]]).unwrap();
        let spec = LearnerSpec::default();
        let mut e = BaseLearnerEnsemble::new(LearnerKind::BoostedTrees, 2, 3, 0);
        let mut cache = OutputCache::new(data.len(), 2);
        e.train_round(&data, &m, &spec, &mut cache).unwrap();
        // column 0 targets are all 0.7: a single leaf predicting 0.1 * 0.7
        for i in 0..data.len() {
            assert!((cache.outputs()[(i, 0)] - 0.07).abs() < 1e-15);
        }
    }

    #[test]
    fn cache_matches_fresh_prediction() {
        let data = toy(120);
        let m = CodingMatrix::init_random(3, 4, 5).unwrap();
        let spec = LearnerSpec {
            min_samples_leaf: 3,
            ..Default::default()
        };
        let mut e = BaseLearnerEnsemble::new(LearnerKind::BoostedTrees, 4, 3, 0);
        let mut cache = OutputCache::new(data.len(), 4);
        for _ in 0..5 {
            e.train_round(&data, &m, &spec, &mut cache).unwrap();
        }
        let fresh = e.predict_all(&data);
        for (a, b) in cache.outputs().as_slice().iter().zip(fresh.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        for i in [0, 17, 119] {
            assert_eq!(e.predict_one(data.row(i)), fresh.row(i).to_vec());
        }
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let data = toy(20);
        let mut e = BaseLearnerEnsemble::new(LearnerKind::BoostedTrees, 3, 3, 0);
        let mut cache = OutputCache::new(data.len(), 3);
        let m4 = CodingMatrix::init_random(3, 4, 0).unwrap();
        assert!(e.train_round(&data, &m4, &LearnerSpec::default(), &mut cache).is_err());
        let m3 = CodingMatrix::init_random(3, 3, 0).unwrap();
        let linear = LearnerSpec {
            kind: LearnerKind::LinearSgd,
            ..Default::default()
        };
        assert!(e.train_round(&data, &m3, &linear, &mut cache).is_err());
        let bad = LearnerSpec {
            learning_rate: 1.5,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn truncation_restores_earlier_predictions() {
        let data = toy(60);
        let m = CodingMatrix::init_random(3, 3, 2).unwrap();
        let spec = LearnerSpec {
            min_samples_leaf: 2,
            ..Default::default()
        };
        let mut e = BaseLearnerEnsemble::new(LearnerKind::BoostedTrees, 3, 3, 0);
        let mut cache = OutputCache::new(data.len(), 3);
        e.train_round(&data, &m, &spec, &mut cache).unwrap();
        e.train_round(&data, &m, &spec, &mut cache).unwrap();
        let after_two = e.predict_all(&data);
        e.train_round(&data, &m, &spec, &mut cache).unwrap();
        e.truncate_rounds(2).unwrap();
        assert_eq!(e.predict_all(&data), after_two);
        assert!(e.truncate_rounds(5).is_err());
    }

    #[test]
    fn text_round_trip_both_kinds() {
        let data = toy(80);
        let m = CodingMatrix::init_random(3, 3, 4).unwrap();
        for kind in [LearnerKind::BoostedTrees, LearnerKind::LinearSgd] {
            let spec = LearnerSpec {
                kind,
                min_samples_leaf: 4,
                ..Default::default()
            };
            let mut e = BaseLearnerEnsemble::new(kind, 3, 3, 9);
            let mut cache = OutputCache::new(data.len(), 3);
            for _ in 0..3 {
                e.train_round(&data, &m, &spec, &mut cache).unwrap();
            }
            let text = e.to_text();
            assert!(text.starts_with(&format!("lightmc-ensemble v1 3 {kind}\n")));
            let back = BaseLearnerEnsemble::from_text(&text, Path::new("mem")).unwrap();
            assert_eq!(back, e);
        }
    }

    #[test]
    fn corrupt_ensemble_rejected() {
        let p = Path::new("mem");
        let good = "lightmc-ensemble v1 1 boosted_trees\nmeta features 2 rounds 1 seed 0\nmember 0 trees 1\ntree 3\n0 1 0.5 1 2 0\n1 -1 0 -1 -1 0.25\n2 -1 0 -1 -1 -0.5\n";
        assert!(BaseLearnerEnsemble::from_text(good, p).is_ok());
        for bad in [
            good.replace("tree 3", "tree 4"),
            good.replace("0 1 0.5 1 2 0", "0 5 0.5 1 2 0"),
            good.replace("0 1 0.5 1 2 0", "0 1 0.5 1 1 0"),
            good.replace("boosted_trees", "linear_sgd"),
            good.replace("rounds 1", "rounds 2"),
        ] {
            assert!(BaseLearnerEnsemble::from_text(&bad, p).is_err(), "{bad}");
        }
    }
}
