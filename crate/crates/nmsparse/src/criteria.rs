//! Importance scoring for activation and weight elements.
//!
//! Four criteria are provided:
//! - `act`: absolute activation value,
//! - `wt`: absolute weight value (weight pruning only),
//! - `clact`: per-token-normalized magnitude weighted by the channel column norm,
//! - `amber`: activation magnitude weighted by the l2 norm of the
//!   outlier-clipped, standardized weight channel.

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use std::fmt;
use std::str::FromStr;

/// Per-element importance values. Same shape as the matrix being scored.
pub type ScoreMatrix = Matrix;

/// Named scoring rule, selectable from the CLI as `act | wt | clact | amber`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Criterion {
    Act,
    Wt,
    Clact,
    Amber,
}

impl Criterion {
    /// Score the activations `x` of a linear layer with weights `w`.
    ///
    /// `wt` has no meaning for activations (its scores live on the weight
    /// matrix, whose shape differs) and is rejected here.
    pub fn score(&self, x: &Matrix, w: &Matrix) -> Result<ScoreMatrix> {
        match self {
            Criterion::Act => Ok(score_act(x)),
            Criterion::Clact => Ok(score_clact(x)),
            Criterion::Amber => score_amber(x, w),
            Criterion::Wt => Err(Error::Selection {
                reason: "criterion 'wt' scores weights and cannot rank activations".into(),
            }),
        }
    }

    /// True when scoring needs the weight matrix.
    pub fn uses_weights(&self) -> bool {
        matches!(self, Criterion::Wt | Criterion::Amber)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Criterion::Act => "act",
            Criterion::Wt => "wt",
            Criterion::Clact => "clact",
            Criterion::Amber => "amber",
        };
        f.write_str(name)
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "act" => Ok(Criterion::Act),
            "wt" => Ok(Criterion::Wt),
            "clact" => Ok(Criterion::Clact),
            "amber" => Ok(Criterion::Amber),
            other => Err(Error::Selection {
                reason: format!("unknown criterion '{other}' (expected act|wt|clact|amber)"),
            }),
        }
    }
}

/// Magnitude criterion on activations: `S[i][j] = |X[i][j]|`.
pub fn score_act(x: &Matrix) -> ScoreMatrix {
    Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j).abs())
}

/// Magnitude criterion on weights: `S[i][j] = |W[i][j]|`.
pub fn score_wt(w: &Matrix) -> ScoreMatrix {
    Matrix::from_fn(w.rows(), w.cols(), |i, j| w.get(i, j).abs())
}

/// Cosine-loss activation criterion.
///
/// `S[i][j] = |X[i][j]| / ||X[i,:]||_2 * ||X[:,j]||_2` with `i` indexing
/// tokens and `j` channels. A token row with zero l2 norm scores 0 across
/// the board.
pub fn score_clact(x: &Matrix) -> ScoreMatrix {
    let row_norms: Vec<f64> = (0..x.rows())
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut col_sq = vec![0.0f64; x.cols()];
    for i in 0..x.rows() {
        for (j, v) in x.row(i).iter().enumerate() {
            col_sq[j] += v * v;
        }
    }
    let col_norms: Vec<f64> = col_sq.iter().map(|v| v.sqrt()).collect();
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        if row_norms[i] == 0.0 {
            0.0
        } else {
            x.get(i, j).abs() / row_norms[i] * col_norms[j]
        }
    })
}

/// Channel statistics behind the amber criterion, precomputable once per
/// layer and shared read-only across batches.
#[derive(Clone, Debug)]
pub struct AmberWeightStats {
    clipped_mean: f64,
    clipped_std: f64,
    channel_norms: Vec<f64>,
}

impl AmberWeightStats {
    /// Mean of weights surviving the percentile clip.
    pub fn clipped_mean(&self) -> f64 {
        self.clipped_mean
    }

    /// Population standard deviation of surviving weights. Zero only in the
    /// degenerate all-equal case.
    pub fn clipped_std(&self) -> f64 {
        self.clipped_std
    }

    /// Per-input-channel l2 norms of the standardized weight columns (raw
    /// columns when degenerate).
    pub fn channel_norms(&self) -> &[f64] {
        &self.channel_norms
    }

    pub fn is_degenerate(&self) -> bool {
        self.clipped_std == 0.0
    }
}

/// Linear-interpolation quantile over sorted values.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[sorted.len() - 1]
    }
}

/// Three-step channel statistics for amber scoring:
/// 1. drop weights outside the [0.5, 99.5] percentile range of all entries,
/// 2. take mean/variance of the survivors, standardize the full matrix with
///    them (clipping only affects the statistics),
/// 3. l2 norm per standardized column.
///
/// Zero clipped variance falls back to raw column norms.
pub fn amber_stats(w: &Matrix) -> AmberWeightStats {
    let mut sorted: Vec<f64> = w.data().to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("weights must be finite"));
    let q_low = quantile_sorted(&sorted, 0.005);
    let q_high = quantile_sorted(&sorted, 0.995);
    let survivors: Vec<f64> = sorted
        .iter()
        .copied()
        .filter(|v| *v >= q_low && *v <= q_high)
        .collect();
    let (mean, var) = if survivors.is_empty() {
        (0.0, 0.0)
    } else {
        let mu = survivors.iter().sum::<f64>() / survivors.len() as f64;
        let var = survivors.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>()
            / survivors.len() as f64;
        (mu, var)
    };
    let std = var.sqrt();
    let mut col_sq = vec![0.0f64; w.cols()];
    for i in 0..w.rows() {
        for (j, v) in w.row(i).iter().enumerate() {
            let z = if std > 0.0 { (v - mean) / std } else { *v };
            col_sq[j] += z * z;
        }
    }
    AmberWeightStats {
        clipped_mean: mean,
        clipped_std: std,
        channel_norms: col_sq.iter().map(|v| v.sqrt()).collect(),
    }
}

/// Amber criterion: `S[i][j] = |X[i][j]| * c_j` with `c_j` from [`amber_stats`].
pub fn score_amber(x: &Matrix, w: &Matrix) -> Result<ScoreMatrix> {
    if x.cols() != w.cols() {
        return Err(Error::ShapeMismatch {
            context: "score_amber",
            left: x.shape(),
            right: w.shape(),
        });
    }
    let stats = amber_stats(w);
    Ok(score_amber_with_stats(x, &stats))
}

/// Amber scoring against precomputed channel statistics.
pub fn score_amber_with_stats(x: &Matrix, stats: &AmberWeightStats) -> ScoreMatrix {
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        x.get(i, j).abs() * stats.channel_norms[j]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{nm_mask, PatternSpec};
    use crate::tensor::Rng;

    #[test]
    fn act_and_wt_are_absolute_values() {
        let x = Matrix::new(1, 2, vec![-3.0, 2.0]).unwrap();
        assert_eq!(score_act(&x).data(), &[3.0, 2.0]);
        let w = Matrix::new(1, 2, vec![-1.0, 0.0]).unwrap();
        assert_eq!(score_wt(&w).data(), &[1.0, 0.0]);
        let z = Matrix::zeros(2, 3);
        assert!(score_act(&z).data().iter().all(|&v| v == 0.0));

        let mut rng = Rng::new(71);
        let r = rng.normal_matrix(3, 5);
        for (s, v) in score_wt(&r).data().iter().zip(r.data()) {
            assert_eq!(*s, v.abs());
        }
    }

    #[test]
    fn clact_identity_structure() {
        let x = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = score_clact(&x);
        assert_eq!(s.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn clact_single_token_ranks_like_act() {
        // with one token the per-token normalization is a common factor and
        // the column norms are the magnitudes themselves
        let x = Matrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        let clact = score_clact(&x);
        let act = score_act(&x);
        assert!(clact.get(0, 1) > clact.get(0, 0));
        assert!(act.get(0, 1) > act.get(0, 0));

        let mut rng = Rng::new(41);
        for _ in 0..20 {
            let x = rng.normal_matrix(1, 16);
            let spec = PatternSpec::new(4, 8).unwrap();
            let via_clact = nm_mask(&score_clact(&x), spec).unwrap();
            let via_act = nm_mask(&score_act(&x), spec).unwrap();
            assert_eq!(via_clact, via_act);
        }
    }

    #[test]
    fn clact_single_token_spearman_is_one() {
        let mut rng = Rng::new(43);
        let x = rng.normal_matrix(1, 12);
        let clact = score_clact(&x);
        let act = score_act(&x);
        let rank = |scores: &Matrix| {
            let mut idx: Vec<usize> = (0..12).collect();
            idx.sort_by(|&a, &b| scores.data()[b].partial_cmp(&scores.data()[a]).unwrap());
            idx
        };
        assert_eq!(rank(&clact), rank(&act));
    }

    #[test]
    fn clact_zero_row_scores_zero() {
        let x = Matrix::new(2, 3, vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let s = score_clact(&x);
        assert_eq!(&s.data()[..3], &[0.0, 0.0, 0.0]);
        assert!(s.data()[3..].iter().all(|&v| v > 0.0));
    }

    /// Direct transcription of the scoring formula, kept independent of the
    /// implementation above.
    fn clact_oracle(x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            let row_sq: f64 = (0..x.cols()).map(|k| x.get(i, k).powi(2)).sum();
            let col_sq: f64 = (0..x.rows()).map(|p| x.get(p, j).powi(2)).sum();
            if row_sq == 0.0 {
                0.0
            } else {
                x.get(i, j).abs() / row_sq.sqrt() * col_sq.sqrt()
            }
        })
    }

    #[test]
    fn clact_matches_formula_oracle() {
        let mut rng = Rng::new(7);
        let x = rng.normal_matrix(4, 6);
        let got = score_clact(&x);
        let want = clact_oracle(&x);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clact_mask_invariant_under_token_scaling() {
        let mut rng = Rng::new(53);
        let x = rng.normal_matrix(1, 16);
        let spec = PatternSpec::new(2, 4).unwrap();
        let base = nm_mask(&score_clact(&x), spec).unwrap();
        for c in [0.1, 2.0, 1000.0] {
            let scaled = Matrix::from_fn(1, 16, |i, j| c * x.get(i, j));
            let mask = nm_mask(&score_clact(&scaled), spec).unwrap();
            assert_eq!(mask, base, "scale {c}");
        }
    }

    #[test]
    fn amber_uniform_columns_reduce_to_act() {
        // identical columns give a common channel norm, so rankings agree
        let w = Matrix::new(3, 4, vec![0.5; 12]).unwrap();
        let mut rng = Rng::new(13);
        let x = rng.normal_matrix(2, 4);
        let spec = PatternSpec::new(2, 4).unwrap();
        let amber = nm_mask(&score_amber(&x, &w).unwrap(), spec).unwrap();
        let act = nm_mask(&score_act(&x), spec).unwrap();
        assert_eq!(amber, act);
    }

    #[test]
    fn amber_monotone_in_channel_norm() {
        let x = Matrix::new(1, 2, vec![1.0, 1.0]).unwrap();
        let w = Matrix::new(2, 2, vec![2.0, 1.0, -2.0, -1.0]).unwrap();
        let s = score_amber(&x, &w).unwrap();
        assert!(s.get(0, 0) > s.get(0, 1));
    }

    #[test]
    fn amber_outlier_case_matches_frozen_oracle() {
        // one extreme outlier among |w| <= 1; both tail extremes fall outside
        // the interpolated [0.5, 99.5] percentile window
        let w = Matrix::from_rows(&[
            &[0.5, -0.2, 0.1, 0.4],
            &[-0.3, 0.8, -0.6, 0.2],
            &[0.7, -0.9, 0.3, -0.1],
            &[1000.0, 0.6, -0.4, -0.8],
        ])
        .unwrap();
        let stats = amber_stats(&w);
        assert!((stats.clipped_mean() - 0.08571428571428576).abs() < 1e-12);
        assert!((stats.clipped_std() - 0.4808580765630524).abs() < 1e-12);
        let expect_norms = [
            2079.4381613980618,
            2.811682851773741,
            1.8036933766577725,
            2.006388736875245,
        ];
        for (got, want) in stats.channel_norms().iter().zip(expect_norms) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn amber_degenerate_weights_fall_back_to_raw_norms() {
        let w = Matrix::new(2, 2, vec![2.0, 2.0, 2.0, 2.0]).unwrap();
        let stats = amber_stats(&w);
        assert!(stats.is_degenerate());
        let raw = 8.0f64.sqrt();
        for &c in stats.channel_norms() {
            assert!((c - raw).abs() < 1e-12);
        }
    }

    #[test]
    fn amber_invariant_to_token_permutation() {
        let mut rng = Rng::new(61);
        let x = rng.normal_matrix(3, 4);
        let w = rng.normal_matrix(2, 4);
        let s = score_amber(&x, &w).unwrap();
        let permuted = Matrix::from_rows(&[x.row(2), x.row(0), x.row(1)]).unwrap();
        let sp = score_amber(&permuted, &w).unwrap();
        assert_eq!(sp.row(0), s.row(2));
        assert_eq!(sp.row(1), s.row(0));
        assert_eq!(sp.row(2), s.row(1));
    }

    #[test]
    fn amber_rejects_channel_mismatch() {
        let x = Matrix::zeros(2, 4);
        let w = Matrix::zeros(2, 6);
        assert!(score_amber(&x, &w).is_err());
    }

    #[test]
    fn criterion_parsing_and_dispatch() {
        assert_eq!("act".parse::<Criterion>().unwrap(), Criterion::Act);
        assert_eq!("amber".parse::<Criterion>().unwrap(), Criterion::Amber);
        assert!("wanda".parse::<Criterion>().is_err());

        let x = Matrix::zeros(1, 4);
        let w = Matrix::zeros(2, 4);
        assert!(Criterion::Wt.score(&x, &w).is_err());
        assert!(Criterion::Act.score(&x, &w).is_ok());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn scores_are_nonnegative(
                xv in proptest::collection::vec(-50.0f64..50.0, 12),
                wv in proptest::collection::vec(-50.0f64..50.0, 8),
            ) {
                let x = Matrix::new(3, 4, xv).unwrap();
                let w = Matrix::new(2, 4, wv).unwrap();
                prop_assert!(score_act(&x).data().iter().all(|&v| v >= 0.0));
                prop_assert!(score_wt(&w).data().iter().all(|&v| v >= 0.0));
                prop_assert!(score_clact(&x).data().iter().all(|&v| v >= 0.0));
                prop_assert!(score_amber(&x, &w).unwrap().data().iter().all(|&v| v >= 0.0));
            }
        }
    }
}
