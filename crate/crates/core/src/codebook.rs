//! Coding matrices: construction, validation, Hamming decoding, and the
//! versioned text format.
//!
//! Rows are class codewords and columns define base-learner targets. A fresh
//! matrix is binary (entries in {-1, +1}); once the matrix optimizer has run,
//! entries are arbitrary finite reals.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{argmin, Matrix};
use crate::textfmt;

const HEADER: &str = "lightmc-codebook";

/// Sweeps of row/column redraws before starting a fresh draw.
const MAX_REPAIR_SWEEPS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct CodingMatrix {
    entries: Matrix,
}

impl CodingMatrix {
    /// Wraps a K x L matrix. Requires K >= 3, L >= 1 and finite entries.
    pub fn new(entries: Matrix) -> Result<Self> {
        check_dims(entries.rows(), entries.cols())?;
        if !entries.is_finite() {
            return Err(Error::NonFiniteInput("coding matrix"));
        }
        Ok(Self { entries })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    /// K x K one-versus-all code: +1 on the diagonal, -1 elsewhere.
    pub fn one_vs_all(num_classes: usize) -> Result<Self> {
        let mut m = Matrix::zeros(num_classes, num_classes);
        for k in 0..num_classes {
            for j in 0..num_classes {
                m[(k, j)] = if k == j { 1.0 } else { -1.0 };
            }
        }
        Self::new(m)
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.entries.rows()
    }

    #[inline]
    pub fn code_length(&self) -> usize {
        self.entries.cols()
    }

    #[inline]
    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    #[inline]
    pub fn codeword(&self, class: usize) -> &[f64] {
        self.entries.row(class)
    }

    #[inline]
    pub fn get(&self, class: usize, column: usize) -> f64 {
        self.entries[(class, column)]
    }

    pub fn into_entries(self) -> Matrix {
        self.entries
    }

    pub fn is_binary(&self) -> bool {
        self.entries
            .as_slice()
            .iter()
            .all(|&v| v == 1.0 || v == -1.0)
    }

    /// Binary, no identical or complementary rows, no constant column.
    pub fn is_valid_binary(&self) -> bool {
        self.is_binary()
            && find_row_conflict(&self.entries).is_none()
            && find_constant_column(&self.entries).is_none()
    }

    /// Draws a random valid binary matrix.
    ///
    /// Entries are i.i.d. uniform +/-1. Rows that duplicate or complement an
    /// earlier row are redrawn, constant columns are redrawn, and the two
    /// repairs alternate until the matrix is valid. Deterministic per seed.
    pub fn init_random(num_classes: usize, code_length: usize, seed: u64) -> Result<Self> {
        check_dims(num_classes, code_length)?;
        if !binary_code_feasible(num_classes, code_length) {
            return Err(Error::InfeasibleCode {
                num_classes,
                code_length,
            });
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(num_classes, code_length);
        loop {
            for v in m.as_mut_slice() {
                *v = random_sign(&mut rng);
            }
            for _ in 0..MAX_REPAIR_SWEEPS {
                let mut clean = true;
                while let Some(row) = find_row_conflict(&m) {
                    clean = false;
                    for v in m.row_mut(row) {
                        *v = random_sign(&mut rng);
                    }
                }
                while let Some(col) = find_constant_column(&m) {
                    clean = false;
                    for k in 0..num_classes {
                        m[(k, col)] = random_sign(&mut rng);
                    }
                }
                if clean {
                    return Ok(Self { entries: m });
                }
            }
            log::debug!("coding matrix repair did not settle, redrawing");
        }
    }

    /// Hamming decoding: `argmin_k 1/2 * sum_j |M_kj - sgn(o_j)|` with
    /// sgn(0) = +1 and ties going to the lowest class index.
    pub fn hamming_decode(&self, outputs: &[f64]) -> Result<usize> {
        self.check_outputs(outputs)?;
        let signs: Vec<f64> = outputs.iter().map(|&o| sign(o)).collect();
        let distances: Vec<f64> = self
            .entries
            .iter_rows()
            .map(|row| {
                0.5 * row
                    .iter()
                    .zip(&signs)
                    .map(|(m, s)| (m - s).abs())
                    .sum::<f64>()
            })
            .collect();
        Ok(argmin(&distances))
    }

    /// Squared Euclidean distance between two codewords. For binary rows this
    /// is four times their Hamming distance.
    pub fn codeword_distance(&self, class_a: usize, class_b: usize) -> Result<f64> {
        let k = self.num_classes();
        for c in [class_a, class_b] {
            if c >= k {
                return Err(Error::IndexOutOfRange { index: c, bound: k });
            }
        }
        Ok(self
            .codeword(class_a)
            .iter()
            .zip(self.codeword(class_b))
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// Smallest pairwise Hamming distance between sign patterns of the rows.
    pub fn min_row_hamming_distance(&self) -> usize {
        let k = self.num_classes();
        let mut best = usize::MAX;
        for a in 0..k {
            for b in a + 1..k {
                let d = self
                    .codeword(a)
                    .iter()
                    .zip(self.codeword(b))
                    .filter(|(x, y)| sign(**x) != sign(**y))
                    .count();
                best = best.min(d);
            }
        }
        best
    }

    pub(crate) fn check_outputs(&self, outputs: &[f64]) -> Result<()> {
        if outputs.len() != self.code_length() {
            return Err(Error::DimensionMismatch {
                what: "base learner outputs",
                expected: self.code_length(),
                found: outputs.len(),
            });
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{HEADER} v1 {} {}",
            self.num_classes(),
            self.code_length()
        )
        .unwrap();
        for row in self.entries.iter_rows() {
            textfmt::push_reals(&mut s, row);
        }
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = textfmt::Lines::new(text, "codebook", origin);
        let (k, l) = lines.header(HEADER)?;
        let mut m = Matrix::zeros(k, l);
        for i in 0..k {
            let row = lines.reals(l)?;
            m.row_mut(i).copy_from_slice(&row);
        }
        lines.finish()?;
        Self::new(m).map_err(|e| lines.error(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?, path)
    }
}

/// Code length heuristic `min(5 log2(K-1) + 1, K/2)`, rounded half away from
/// zero, never below 1.
pub fn suggested_code_length(num_classes: usize) -> Result<usize> {
    if num_classes < 3 {
        return Err(Error::InvalidArg(format!(
            "need at least 3 classes, got {num_classes}"
        )));
    }
    let k = num_classes as f64;
    let raw = (5.0 * (k - 1.0).log2() + 1.0).min(k / 2.0);
    Ok((raw.round() as usize).max(1))
}

/// Smallest L for which a valid binary K x L matrix exists.
pub fn min_feasible_code_length(num_classes: usize) -> usize {
    (1..).find(|&l| binary_code_feasible(num_classes, l)).unwrap()
}

/// Code length used for `auto`: the heuristic, raised to the smallest
/// feasible length where the heuristic is too short (e.g. K = 3 gives 2).
pub fn auto_code_length(num_classes: usize) -> Result<usize> {
    Ok(suggested_code_length(num_classes)?.max(min_feasible_code_length(num_classes)))
}

fn binary_code_feasible(num_classes: usize, code_length: usize) -> bool {
    // distinct non-complementary rows need 2^(L-1) > K
    code_length >= 1
        && (code_length >= usize::BITS as usize
            || (1usize << (code_length - 1)) > num_classes)
}

fn check_dims(num_classes: usize, code_length: usize) -> Result<()> {
    if num_classes < 3 {
        return Err(Error::InvalidArg(format!(
            "a coding matrix needs at least 3 classes, got {num_classes}"
        )));
    }
    if code_length == 0 {
        return Err(Error::InvalidArg("code length must be positive".into()));
    }
    Ok(())
}

#[inline]
fn sign(o: f64) -> f64 {
    if o >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn random_sign(rng: &mut impl Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// First row that equals or complements some earlier row.
fn find_row_conflict(m: &Matrix) -> Option<usize> {
    (1..m.rows()).find(|&b| {
        (0..b).any(|a| {
            let (ra, rb) = (m.row(a), m.row(b));
            ra == rb || ra.iter().zip(rb).all(|(x, y)| *x == -*y)
        })
    })
}

fn find_constant_column(m: &Matrix) -> Option<usize> {
    (0..m.cols()).find(|&j| (1..m.rows()).all(|k| m[(k, j)] == m[(0, j)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cat_kitty_dog() -> CodingMatrix {
        CodingMatrix::from_rows(&[[1.0, 1.0, 1.0], [1.0, 1.0, -1.0], [-1.0, -1.0, -1.0]]).unwrap()
    }

    #[test]
    fn init_small_is_valid() {
        let m = CodingMatrix::init_random(3, 3, 7).unwrap();
        assert_eq!((m.num_classes(), m.code_length()), (3, 3));
        assert!(m.is_valid_binary());
    }

    #[test]
    fn init_rejects_infeasible_and_degenerate() {
        for seed in 0..4 {
            assert!(matches!(
                CodingMatrix::init_random(4, 2, seed),
                Err(Error::InfeasibleCode { .. })
            ));
        }
        assert!(matches!(
            CodingMatrix::init_random(2, 5, 0),
            Err(Error::InvalidArg(_))
        ));
        assert!(matches!(
            CodingMatrix::init_random(5, 0, 0),
            Err(Error::InvalidArg(_))
        ));
    }

    #[test]
    fn init_tight_feasible_shapes() {
        // 2^(L-1) = K + 1: every complementary pair but one is used
        for (k, l) in [(3, 3), (7, 4), (15, 5)] {
            for seed in 0..5 {
                assert!(CodingMatrix::init_random(k, l, seed).unwrap().is_valid_binary());
            }
        }
    }

    #[test]
    fn init_twenty_classes_uses_heuristic_length() {
        let l = suggested_code_length(20).unwrap();
        assert_eq!(l, 10);
        let m = CodingMatrix::init_random(20, l, 1).unwrap();
        assert_eq!((m.num_classes(), m.code_length()), (20, 10));
        assert!(m.is_valid_binary());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = CodingMatrix::init_random(12, 8, 99).unwrap();
        let b = CodingMatrix::init_random(12, 8, 99).unwrap();
        let c = CodingMatrix::init_random(12, 8, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn suggested_lengths() {
        assert_eq!(suggested_code_length(20).unwrap(), 10);
        assert_eq!(suggested_code_length(1000).unwrap(), 51);
        assert_eq!(suggested_code_length(3).unwrap(), 2);
        assert_eq!(suggested_code_length(5).unwrap(), 3);
        assert!(matches!(suggested_code_length(2), Err(Error::InvalidArg(_))));
    }

    #[test]
    fn auto_length_is_always_feasible() {
        assert_eq!(auto_code_length(3).unwrap(), 3);
        assert_eq!(auto_code_length(20).unwrap(), 10);
        for k in 3..200 {
            let l = auto_code_length(k).unwrap();
            assert!(binary_code_feasible(k, l), "K={k} L={l}");
        }
    }

    #[test]
    fn hamming_cat_kitty_dog() {
        let m = cat_kitty_dog();
        assert_eq!(m.hamming_decode(&[0.2, 0.9, -0.4]).unwrap(), 1);
        assert_eq!(m.hamming_decode(&[-1.0, -1.0, -1.0]).unwrap(), 2);
    }

    #[test]
    fn hamming_zero_output_counts_as_positive() {
        let m = cat_kitty_dog();
        assert_eq!(m.hamming_decode(&[0.0, 0.0, 0.0]).unwrap(), 0);
    }

    #[test]
    fn hamming_tie_goes_to_lowest_index() {
        let sym = CodingMatrix::from_rows(&[[1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]]).unwrap();
        // (-1,-1): distance 1 to rows 0 and 1, 2 to row 2
        assert_eq!(sym.hamming_decode(&[-0.5, -0.5]).unwrap(), 0);
    }

    #[test]
    fn hamming_dimension_mismatch() {
        assert!(matches!(
            cat_kitty_dog().hamming_decode(&[1.0, 1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn distances() {
        let m = cat_kitty_dog();
        assert_eq!(m.codeword_distance(0, 0).unwrap(), 0.0);
        assert_eq!(m.codeword_distance(0, 1).unwrap(), 4.0);
        assert_eq!(m.codeword_distance(0, 2).unwrap(), 12.0);
        assert!(matches!(
            m.codeword_distance(0, 3),
            Err(Error::IndexOutOfRange { index: 3, bound: 3 })
        ));
    }

    #[test]
    fn text_round_trip_is_exact() {
        let m = CodingMatrix::from_rows(&[
            [0.1, -1.0 / 3.0, 1e-300],
            [1.0, 2.5e17, -0.0],
            [f64::MIN_POSITIVE, 7.0, -123.456],
        ])
        .unwrap();
        let text = m.to_text();
        assert!(text.starts_with("lightmc-codebook v1 3 3\n"));
        let back = CodingMatrix::from_text(&text, Path::new("mem")).unwrap();
        for (a, b) in m.entries().as_slice().iter().zip(back.entries().as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn text_rejects_bad_input() {
        let p = Path::new("mem");
        assert!(CodingMatrix::from_text("lightmc-codebook v2 3 1\n1\n1\n1\n", p).is_err());
        assert!(CodingMatrix::from_text("lightmc-codebook v1 3 1\n1\n1\n", p).is_err());
        assert!(CodingMatrix::from_text("lightmc-codebook v1 3 1\n1\nx\n1\n", p).is_err());
        assert!(CodingMatrix::from_text("lightmc-codebook v1 3 1\n1\n1\n1\n1\n", p).is_err());
        assert!(CodingMatrix::from_text("lightmc-codebook v1 3 1\n1\nNaN\n1\n", p).is_err());
    }

    proptest! {
        #[test]
        fn hamming_ignores_positive_rescaling(
            seed in 0u64..500,
            outputs in prop::collection::vec(-3.0f64..3.0, 6),
            scale in 1e-3f64..1e3,
        ) {
            let m = CodingMatrix::init_random(9, 6, seed).unwrap();
            let scaled: Vec<f64> = outputs.iter().map(|o| o * scale).collect();
            prop_assert_eq!(m.hamming_decode(&outputs).unwrap(), m.hamming_decode(&scaled).unwrap());
        }

        #[test]
        fn exact_codeword_decodes_to_its_class(seed in 0u64..500, k in 3usize..16) {
            let l = auto_code_length(k).unwrap() + 2;
            let m = CodingMatrix::init_random(k, l, seed).unwrap();
            prop_assert!(m.is_valid_binary());
            prop_assert!(m.min_row_hamming_distance() >= 1);
            for class in 0..k {
                prop_assert_eq!(m.hamming_decode(m.codeword(class)).unwrap(), class);
            }
        }
    }
}
