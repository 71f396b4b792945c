//! Unstructured and N:M semi-structured binary masks built from score matrices.
//!
//! N:M blocks run along rows: a token's hidden channels are split into
//! contiguous groups of `m` and the `n` highest-scoring entries of each group
//! survive. Tie-breaking is always "lower column index wins", so masks are
//! deterministic and only the ranking of scores matters.

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use std::fmt;
use std::str::FromStr;

/// An N-of-M keep pattern, e.g. 2:4 or 8:16.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatternSpec {
    n: usize,
    m: usize,
}

impl PatternSpec {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || n > m {
            return Err(Error::InvalidPattern { n, m });
        }
        Ok(Self { n, m })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Fraction of elements kept, n/m.
    pub fn density(&self) -> f64 {
        self.n as f64 / self.m as f64
    }

    /// Keeps every element of each block.
    pub fn is_dense(&self) -> bool {
        self.n == self.m
    }

    /// The four block patterns studied at 50% density.
    pub fn standard_half_density() -> [PatternSpec; 4] {
        [
            PatternSpec { n: 2, m: 4 },
            PatternSpec { n: 4, m: 8 },
            PatternSpec { n: 8, m: 16 },
            PatternSpec { n: 16, m: 32 },
        ]
    }
}

impl fmt::Display for PatternSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.n, self.m)
    }
}

/// Mask construction rule: either a global-count unstructured target or an
/// N:M block pattern.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskPattern {
    /// Keep exactly `round((1 - s) * count)` elements globally.
    Unstructured(f64),
    /// Keep the top n of every m-block along each row.
    Nm(PatternSpec),
}

impl MaskPattern {
    /// Build a mask for the given scores under this pattern.
    pub fn build(&self, scores: &Matrix) -> Result<Mask> {
        match *self {
            MaskPattern::Unstructured(s) => unstructured_mask(scores, s),
            MaskPattern::Nm(spec) => nm_mask(scores, spec),
        }
    }

    /// True when the pattern keeps every element.
    pub fn is_dense(&self) -> bool {
        match *self {
            MaskPattern::Unstructured(s) => s == 0.0,
            MaskPattern::Nm(spec) => spec.is_dense(),
        }
    }

    pub fn nm_spec(&self) -> Option<PatternSpec> {
        match *self {
            MaskPattern::Nm(spec) => Some(spec),
            MaskPattern::Unstructured(_) => None,
        }
    }
}

impl fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskPattern::Unstructured(s) => write!(f, "unstructured:{s}"),
            MaskPattern::Nm(spec) => write!(f, "{spec}"),
        }
    }
}

impl FromStr for MaskPattern {
    type Err = Error;

    /// Parses `"N:M"` or `"unstructured:S"`.
    fn from_str(s: &str) -> Result<Self> {
        let text = s.trim();
        let parse_err = || Error::PatternParse {
            text: text.to_string(),
        };
        if let Some(rest) = text.strip_prefix("unstructured:") {
            let value: f64 = rest.trim().parse().map_err(|_| parse_err())?;
            if !(0.0..1.0).contains(&value) {
                return Err(Error::InvalidSparsity { value });
            }
            return Ok(MaskPattern::Unstructured(value));
        }
        let (n_text, m_text) = text.split_once(':').ok_or_else(parse_err)?;
        let n: usize = n_text.trim().parse().map_err(|_| parse_err())?;
        let m: usize = m_text.trim().parse().map_err(|_| parse_err())?;
        Ok(MaskPattern::Nm(PatternSpec::new(n, m)?))
    }
}

/// Binary keep/drop matrix with a record of the pattern that built it.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
    pattern: MaskPattern,
}

impl Mask {
    /// All-ones mask (a dense unstructured pattern).
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![1; rows * cols],
            pattern: MaskPattern::Unstructured(0.0),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn pattern(&self) -> MaskPattern {
        self.pattern
    }

    #[inline]
    pub fn is_kept(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j] != 0
    }

    /// Keep bits for row `i`, one byte per element (0 or 1).
    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    /// Checks the structural N:M invariant: exactly n ones per m-block.
    pub fn satisfies_nm(&self, spec: PatternSpec) -> bool {
        if !self.cols.is_multiple_of(spec.m) {
            return false;
        }
        for i in 0..self.rows {
            for block in self.row(i).chunks(spec.m) {
                if block.iter().filter(|&&b| b != 0).count() != spec.n {
                    return false;
                }
            }
        }
        true
    }
}

/// Keep the `n` highest-scoring elements of every m-block along each row.
///
/// Ties go to the lower column index.
pub fn nm_mask(scores: &Matrix, spec: PatternSpec) -> Result<Mask> {
    if !scores.cols().is_multiple_of(spec.m) {
        return Err(Error::BlockMismatch {
            cols: scores.cols(),
            m: spec.m,
        });
    }
    let mut bits = vec![0u8; scores.rows() * scores.cols()];
    let mut order: Vec<usize> = Vec::with_capacity(spec.m);
    for i in 0..scores.rows() {
        let row = scores.row(i);
        for (b, block) in row.chunks(spec.m).enumerate() {
            order.clear();
            order.extend(0..spec.m);
            order.sort_by(|&a, &c| {
                block[c]
                    .partial_cmp(&block[a])
                    .expect("scores must be finite")
                    .then(a.cmp(&c))
            });
            for &local in order.iter().take(spec.n) {
                bits[i * scores.cols() + b * spec.m + local] = 1;
            }
        }
    }
    Ok(Mask {
        rows: scores.rows(),
        cols: scores.cols(),
        bits,
        pattern: MaskPattern::Nm(spec),
    })
}

/// Keep exactly `round((1 - sparsity) * count)` elements with the globally
/// highest scores. Ties go to the smaller row-major index.
pub fn unstructured_mask(scores: &Matrix, sparsity: f64) -> Result<Mask> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidSparsity { value: sparsity });
    }
    let count = scores.rows() * scores.cols();
    let keep = ((1.0 - sparsity) * count as f64).round() as usize;
    let keep = keep.min(count);
    let data = scores.data();
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| {
        data[b]
            .partial_cmp(&data[a])
            .expect("scores must be finite")
            .then(a.cmp(&b))
    });
    let mut bits = vec![0u8; count];
    for &idx in order.iter().take(keep) {
        bits[idx] = 1;
    }
    Ok(Mask {
        rows: scores.rows(),
        cols: scores.cols(),
        bits,
        pattern: MaskPattern::Unstructured(sparsity),
    })
}

/// Elementwise product `X (.) M`, writing exact zeros at dropped positions.
pub fn apply_mask(x: &Matrix, mask: &Mask) -> Result<Matrix> {
    if x.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            context: "apply_mask",
            left: x.shape(),
            right: mask.shape(),
        });
    }
    let mut out = x.clone();
    for (v, &bit) in out.data_mut().iter_mut().zip(&mask.bits) {
        if bit == 0 {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Sum of scores over kept positions.
pub fn retained_score(scores: &Matrix, mask: &Mask) -> Result<f64> {
    if scores.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            context: "retained_score",
            left: scores.shape(),
            right: mask.shape(),
        });
    }
    Ok(scores
        .data()
        .iter()
        .zip(&mask.bits)
        .filter(|(_, &bit)| bit != 0)
        .map(|(v, _)| v)
        .sum())
}
