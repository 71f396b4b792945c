//! Error-mitigation transforms around masked linear layers.
//!
//! Every `forward_*` computes `Y_p` for a linear layer `Y = X W^T` whose
//! activations are pruned by a criterion-driven mask, wrapping the masking
//! step in a compensation:
//!
//! - baseline: mask, multiply, no compensation
//! - D-PTS: subtract the per-token row mean before masking, add it back after
//! - S-PTS: same shape with a fixed per-channel shift calibrated beforehand
//! - L-PTS: the shift (optionally plus a diagonal channel scale) is fitted by
//!   gradient descent against the dense output on calibration batches
//! - VAR: rescale each masked token row to restore its original variance
//! - PCS: move scale between activations and weights per channel before
//!   masking, cancelling it on the weight side
//! - R-Sparse: route the masked activations through the full weights and the
//!   dropped residual through a truncated-SVD low-rank approximation

use crate::criteria::Criterion;
use crate::error::{Error, Result};
use crate::masks::{apply_mask, MaskPattern};
use crate::tensor::{matmul, row_mean, row_var, Matrix};
use std::fmt;
use std::str::FromStr;

/// Named transform, selectable from the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    None,
    Dpts,
    Spts,
    Lpts,
    Var,
    VarLpts,
    Pcs,
    Rsparse,
    LsLpts,
    LsLptsVar,
}

impl Transform {
    /// Transforms that must see calibration data before inference.
    pub fn needs_calibration(&self) -> bool {
        matches!(
            self,
            Transform::Spts
                | Transform::Lpts
                | Transform::VarLpts
                | Transform::LsLpts
                | Transform::LsLptsVar
        )
    }

    /// For the learned-shift family: (with_ls, with_var) flags.
    pub fn lpts_flags(&self) -> Option<(bool, bool)> {
        match self {
            Transform::Lpts => Some((false, false)),
            Transform::VarLpts => Some((false, true)),
            Transform::LsLpts => Some((true, false)),
            Transform::LsLptsVar => Some((true, true)),
            _ => None,
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Transform::None => "none",
            Transform::Dpts => "dpts",
            Transform::Spts => "spts",
            Transform::Lpts => "lpts",
            Transform::Var => "var",
            Transform::VarLpts => "var+lpts",
            Transform::Pcs => "pcs",
            Transform::Rsparse => "rsparse",
            Transform::LsLpts => "ls+lpts",
            Transform::LsLptsVar => "ls+lpts+var",
        };
        f.write_str(name)
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Transform::None),
            "dpts" => Ok(Transform::Dpts),
            "spts" => Ok(Transform::Spts),
            "lpts" => Ok(Transform::Lpts),
            "var" => Ok(Transform::Var),
            "var+lpts" => Ok(Transform::VarLpts),
            "pcs" => Ok(Transform::Pcs),
            "rsparse" => Ok(Transform::Rsparse),
            "ls+lpts" => Ok(Transform::LsLpts),
            "ls+lpts+var" => Ok(Transform::LsLptsVar),
            other => Err(Error::Selection {
                reason: format!(
                    "unknown transform '{other}' (expected none|dpts|spts|lpts|var|var+lpts|pcs|rsparse|ls+lpts|ls+lpts+var)"
                ),
            }),
        }
    }
}

/// Where a shift vector came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftKind {
    /// Recomputed per forward from the current batch (row means).
    Dynamic,
    /// Calibrated once, fixed afterwards.
    Static,
    /// Fitted by gradient descent.
    Learnable,
}

/// A centering shift. Static and learnable shifts are per channel
/// (length = layer input dim); dynamic shifts are per token.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftVector {
    values: Vec<f64>,
    kind: ShiftKind,
}

impl ShiftVector {
    pub fn new(values: Vec<f64>, kind: ShiftKind) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "shift vector",
            });
        }
        Ok(Self { values, kind })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> ShiftKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-token scale factors produced by variance correction. Always >= 0 and
/// exactly 1 where masking left the row variance unchanged or degenerate.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleVector {
    values: Vec<f64>,
}

impl ScaleVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Mask from the criterion's scores, then multiply: `Y_p = (X (.) M) W^T`.
pub fn forward_baseline(
    x: &Matrix,
    w: &Matrix,
    criterion: Criterion,
    pattern: MaskPattern,
) -> Result<Matrix> {
    let scores = criterion.score(x, w)?;
    let mask = pattern.build(&scores)?;
    matmul(&apply_mask(x, &mask)?, w)
}

/// Dynamic per-token shift: center each token row on its mean before
/// masking, add the shift back after: `Y_p = ((X_hat (.) M) + eta) W^T`.
pub fn forward_dpts(
    x: &Matrix,
    w: &Matrix,
    criterion: Criterion,
    pattern: MaskPattern,
) -> Result<Matrix> {
    let eta = row_mean(x);
    let x_hat = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) - eta[i]);
    let scores = criterion.score(&x_hat, w)?;
    let mask = pattern.build(&scores)?;
    let masked = apply_mask(&x_hat, &mask)?;
    let restored = Matrix::from_fn(x.rows(), x.cols(), |i, j| masked.get(i, j) + eta[i]);
    matmul(&restored, w)
}

/// Pool the per-channel mean over every calibration token. The result is a
/// static shift, fixed for all subsequent batches.
pub fn calibrate_spts(batches: &[Matrix]) -> Result<ShiftVector> {
    let first = batches.first().ok_or(Error::EmptyCalibration)?;
    let cols = first.cols();
    let mut sums = vec![0.0f64; cols];
    let mut tokens = 0usize;
    for batch in batches {
        if batch.cols() != cols {
            return Err(Error::ShapeMismatch {
                context: "calibrate_spts",
                left: (first.rows(), cols),
                right: batch.shape(),
            });
        }
        for i in 0..batch.rows() {
            for (j, v) in batch.row(i).iter().enumerate() {
                sums[j] += v;
            }
        }
        tokens += batch.rows();
    }
    let inv = 1.0 / tokens as f64;
    ShiftVector::new(sums.iter().map(|s| s * inv).collect(), ShiftKind::Static)
}

/// Static per-channel shift around the masked multiply.
pub fn forward_spts(
    x: &Matrix,
    w: &Matrix,
    eta: &ShiftVector,
    criterion: Criterion,
    pattern: MaskPattern,
) -> Result<Matrix> {
    if eta.kind() != ShiftKind::Static {
        return Err(Error::Selection {
            reason: format!("forward_spts needs a static shift, got {:?}", eta.kind()),
        });
    }
    if eta.len() != x.cols() {
        return Err(Error::ShapeMismatch {
            context: "forward_spts",
            left: x.shape(),
            right: (1, eta.len()),
        });
    }
    let e = eta.values();
    let x_hat = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) - e[j]);
    let scores = criterion.score(&x_hat, w)?;
    let mask = pattern.build(&scores)?;
    let masked = apply_mask(&x_hat, &mask)?;
    let restored = Matrix::from_fn(x.rows(), x.cols(), |i, j| masked.get(i, j) + e[j]);
    matmul(&restored, w)
}

/// Per-token scales `nu_i = sqrt(Var[X_i] / Var[(X (.) M)_i])`, with
/// `nu_i = 1` wherever the masked row variance is zero (scaling a constant
/// row cannot restore variance, and 1 leaves the compensable part intact).
pub fn variance_scales(x: &Matrix, masked: &Matrix) -> ScaleVector {
    let var_x = row_var(x);
    let var_m = row_var(masked);
    let values = var_x
        .iter()
        .zip(&var_m)
        .map(|(&vx, &vm)| if vm == 0.0 { 1.0 } else { (vx / vm).sqrt() })
        .collect();
    ScaleVector { values }
}

/// Variance correction: `Y_p = nu (X (.) M) W^T` with `nu` applied per row.
pub fn forward_var(
    x: &Matrix,
    w: &Matrix,
    criterion: Criterion,
    pattern: MaskPattern,
) -> Result<Matrix> {
    let scores = criterion.score(x, w)?;
    let mask = pattern.build(&scores)?;
    let masked = apply_mask(x, &mask)?;
    let nu = variance_scales(x, &masked);
    let scaled = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        masked.get(i, j) * nu.values[i]
    });
    matmul(&scaled, w)
}

/// Per-channel smoothing factors `s_j = sqrt(max|X_:,j| / max|W_:,j|)`.
/// Zero or non-finite factors are replaced by 1 for that channel.
pub fn pcs_scales(x: &Matrix, w: &Matrix) -> Result<Vec<f64>> {
    if x.cols() != w.cols() {
        return Err(Error::ShapeMismatch {
            context: "pcs_scales",
            left: x.shape(),
            right: w.shape(),
        });
    }
    let mut scales = vec![1.0f64; x.cols()];
    for (j, slot) in scales.iter_mut().enumerate() {
        let max_x = (0..x.rows()).map(|i| x.get(i, j).abs()).fold(0.0, f64::max);
        let max_w = (0..w.rows()).map(|k| w.get(k, j).abs()).fold(0.0, f64::max);
        let s = (max_x / max_w).sqrt();
        if s.is_finite() && s > 0.0 {
            *slot = s;
        }
    }
    Ok(scales)
}

/// Per-channel smoothing: scale activations down and weights up by `s`
/// before masking, so the product is unchanged wherever the mask keeps.
pub fn forward_pcs(
    x: &Matrix,
    w: &Matrix,
    criterion: Criterion,
    pattern: MaskPattern,
) -> Result<Matrix> {
    let s = pcs_scales(x, w)?;
    let x_hat = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) / s[j]);
    let w_scaled = Matrix::from_fn(w.rows(), w.cols(), |k, j| w.get(k, j) * s[j]);
    let scores = criterion.score(&x_hat, &w_scaled)?;
    let mask = pattern.build(&scores)?;
    let masked = apply_mask(&x_hat, &mask)?;
    matmul(&masked, &w_scaled)
}

/// Parameters fitted by [`fit_lpts`]: a learnable per-channel shift,
/// optionally a learnable diagonal scale, and whether variance correction
/// runs inside the forward.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnableParams {
    eta: ShiftVector,
    diag_scale: Option<Vec<f64>>,
    with_var: bool,
    loss_trace: Vec<f64>,
    diverged: bool,
}

impl LearnableParams {
    /// Identity parameters: zero shift, unit scale.
    pub fn identity(dim: usize, with_ls: bool, with_var: bool) -> Self {
        Self {
            eta: ShiftVector {
                values: vec![0.0; dim],
                kind: ShiftKind::Learnable,
            },
            diag_scale: with_ls.then(|| vec![1.0; dim]),
            with_var,
            loss_trace: Vec::new(),
            diverged: false,
        }
    }

    pub fn eta(&self) -> &ShiftVector {
        &self.eta
    }

    pub fn diag_scale(&self) -> Option<&[f64]> {
        self.diag_scale.as_deref()
    }

    pub fn with_var(&self) -> bool {
        self.with_var
    }

    /// Best-so-far loss per recorded step; non-increasing by construction.
    pub fn loss_trace(&self) -> &[f64] {
        &self.loss_trace
    }

    /// True when fitting hit a non-finite loss and stopped early.
    pub fn diverged(&self) -> bool {
        self.diverged
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.loss_trace.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }
}

/// Forward pass with learned parameters:
/// `Y_p = (scale (.) nu (.) ((X - eta) (.) M) + eta) W^T`.
pub fn forward_lpts(
    x: &Matrix,
    w: &Matrix,
    params: &LearnableParams,
    criterion: Criterion,
    pattern: MaskPattern,
) -> Result<Matrix> {
    if params.eta.len() != x.cols() {
        return Err(Error::ShapeMismatch {
            context: "forward_lpts",
            left: x.shape(),
            right: (1, params.eta.len()),
        });
    }
    let e = params.eta.values();
    let x_hat = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) - e[j]);
    let scores = criterion.score(&x_hat, w)?;
    let mask = pattern.build(&scores)?;
    let masked = apply_mask(&x_hat, &mask)?;
    let nu = if params.with_var {
        Some(variance_scales(&x_hat, &masked))
    } else {
        None
    };
    let restored = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        let mut z = masked.get(i, j);
        if let Some(nu) = &nu {
            z *= nu.values[i];
        }
        if let Some(d) = &params.diag_scale {
            z *= d[j];
        }
        z + e[j]
    });
    matmul(&restored, w)
}

/// Fit a learnable per-channel shift (and optionally a diagonal scale) by
/// gradient descent on the layer-local reconstruction error
/// `mean((Y_p - X W^T)^2)` over calibration inputs.
///
/// The mask (and the variance scale, when enabled) is frozen at the current
/// parameters for each step and gradients flow straight through it; the
/// remaining objective is quadratic in the shift and in the scale, so the
/// gradients are closed-form. Returns the best-loss parameters seen, with
/// `loss_trace` recording the running best: entry 0 is the initial loss,
/// then one entry per step.
#[allow(clippy::too_many_arguments)]
pub fn fit_lpts(
    layer_inputs: &[Matrix],
    w: &Matrix,
    criterion: Criterion,
    pattern: MaskPattern,
    steps: usize,
    lr: f64,
    with_ls: bool,
    with_var: bool,
) -> Result<LearnableParams> {
    if steps == 0 {
        return Err(Error::ZeroSteps);
    }
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::NonPositive {
            name: "learning rate",
            value: lr,
        });
    }
    let first = layer_inputs.first().ok_or(Error::EmptyCalibration)?;
    let h = first.cols();
    if w.cols() != h {
        return Err(Error::ShapeMismatch {
            context: "fit_lpts",
            left: first.shape(),
            right: w.shape(),
        });
    }
    let targets: Vec<Matrix> = layer_inputs
        .iter()
        .map(|x| matmul(x, w))
        .collect::<Result<_>>()?;
    let w_t = w.transposed();
    let total_out: usize = targets.iter().map(|y| y.rows() * y.cols()).sum();
    let inv_total = 1.0 / total_out as f64;

    let mut eta = vec![0.0f64; h];
    let mut scale = if with_ls { vec![1.0f64; h] } else { Vec::new() };
    let mut best_eta = eta.clone();
    let mut best_scale = scale.clone();
    let mut best_loss = f64::INFINITY;
    let mut loss_trace = Vec::with_capacity(steps + 1);
    let mut diverged = false;

    // evaluates loss and, when grads is Some, accumulates closed-form
    // gradients at the current parameters with the mask frozen
    let evaluate = |eta: &[f64],
                    scale: &[f64],
                    grads: Option<(&mut [f64], &mut [f64])>|
     -> Result<f64> {
        let mut loss = 0.0;
        let mut grad_pair = grads;
        for (x, y) in layer_inputs.iter().zip(&targets) {
            let x_hat = Matrix::from_fn(x.rows(), h, |i, j| x.get(i, j) - eta[j]);
            let scores = criterion.score(&x_hat, w)?;
            let mask = pattern.build(&scores)?;
            let masked = apply_mask(&x_hat, &mask)?;
            let nu = if with_var {
                variance_scales(&x_hat, &masked)
                    .values
            } else {
                vec![1.0; x.rows()]
            };
            let restored = Matrix::from_fn(x.rows(), h, |i, j| {
                let d = if with_ls { scale[j] } else { 1.0 };
                masked.get(i, j) * nu[i] * d + eta[j]
            });
            let pred = matmul(&restored, w)?;
            let err = Matrix::from_fn(pred.rows(), pred.cols(), |i, k| {
                pred.get(i, k) - y.get(i, k)
            });
            loss += err.data().iter().map(|v| v * v).sum::<f64>();
            if let Some((grad_eta, grad_scale)) = grad_pair.as_mut() {
                // d loss / d restored = 2/total * err * W
                let g = matmul(&err, &w_t)?;
                for i in 0..x.rows() {
                    for j in 0..h {
                        let gij = 2.0 * inv_total * g.get(i, j);
                        let kept = if mask.is_kept(i, j) { 1.0 } else { 0.0 };
                        let d = if with_ls { scale[j] } else { 1.0 };
                        grad_eta[j] += gij * (1.0 - nu[i] * d * kept);
                        if with_ls {
                            grad_scale[j] += gij * masked.get(i, j) * nu[i];
                        }
                    }
                }
            }
        }
        Ok(loss * inv_total)
    };

    let update_best = |loss: f64,
                       eta: &[f64],
                       scale: &[f64],
                       best_loss: &mut f64,
                       best_eta: &mut Vec<f64>,
                       best_scale: &mut Vec<f64>| {
        if loss.is_finite() && loss < *best_loss {
            *best_loss = loss;
            best_eta.copy_from_slice(eta);
            best_scale.copy_from_slice(scale);
        }
    };

    for _ in 0..steps {
        let mut grad_eta = vec![0.0f64; h];
        let mut grad_scale = vec![0.0f64; if with_ls { h } else { 0 }];
        let loss = evaluate(&eta, &scale, Some((&mut grad_eta, &mut grad_scale)))?;
        if !loss.is_finite() {
            diverged = true;
            break;
        }
        update_best(loss, &eta, &scale, &mut best_loss, &mut best_eta, &mut best_scale);
        loss_trace.push(best_loss);
        for (e, g) in eta.iter_mut().zip(&grad_eta) {
            *e -= lr * g;
        }
        for (d, g) in scale.iter_mut().zip(&grad_scale) {
            *d -= lr * g;
        }
        if eta.iter().chain(scale.iter()).any(|v| !v.is_finite()) {
            diverged = true;
            break;
        }
    }
    if !diverged {
        let final_loss = evaluate(&eta, &scale, None)?;
        if final_loss.is_finite() {
            update_best(
                final_loss,
                &eta,
                &scale,
                &mut best_loss,
                &mut best_eta,
                &mut best_scale,
            );
        } else {
            diverged = true;
        }
        loss_trace.push(best_loss);
    }

    Ok(LearnableParams {
        eta: ShiftVector {
            values: best_eta,
            kind: ShiftKind::Learnable,
        },
        diag_scale: with_ls.then_some(best_scale),
        with_var,
        loss_trace,
        diverged,
    })
}

/// Rank-r factors of a weight matrix from its truncated SVD. `A * B` is the
/// best rank-r Frobenius approximation of `W`.
#[derive(Clone, Debug)]
pub struct LowRankFactors {
    a: Matrix,
    b: Matrix,
    rank: usize,
}

impl LowRankFactors {
    /// `o x r` left factor (`U_r Sigma_r`).
    pub fn a(&self) -> &Matrix {
        &self.a
    }

    /// `r x h` right factor (`V_r^T`).
    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// The rank-r approximation `A * B`, shaped like the original weights.
    pub fn product(&self) -> Matrix {
        let mut out = Matrix::zeros(self.a.rows(), self.b.cols());
        for i in 0..self.a.rows() {
            for t in 0..self.rank {
                let a_it = self.a.get(i, t);
                if a_it == 0.0 {
                    continue;
                }
                for j in 0..self.b.cols() {
                    let v = out.get(i, j) + a_it * self.b.get(t, j);
                    out.set(i, j, v);
                }
            }
        }
        out
    }
}

/// One-sided Jacobi SVD on the columns of `a` (consumed). Returns the
/// rotated matrix whose columns are `sigma_j * u_j`, the singular values in
/// descending order, and `V` with matching column order.
fn jacobi_svd(mut a: Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (rows, cols) = a.shape();
    let mut v = Matrix::from_fn(cols, cols, |i, j| if i == j { 1.0 } else { 0.0 });
    let tol = 1e-15;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let mut dpp = 0.0;
                let mut dqq = 0.0;
                let mut dpq = 0.0;
                for i in 0..rows {
                    let ap = a.get(i, p);
                    let aq = a.get(i, q);
                    dpp += ap * ap;
                    dqq += aq * aq;
                    dpq += ap * aq;
                }
                if dpq.abs() <= tol * (dpp * dqq).sqrt() || dpp == 0.0 || dqq == 0.0 {
                    continue;
                }
                let tau = (dqq - dpp) / (2.0 * dpq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let ap = a.get(i, p);
                    let aq = a.get(i, q);
                    a.set(i, p, c * ap - s * aq);
                    a.set(i, q, s * ap + c * aq);
                }
                for i in 0..cols {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
                rotated = true;
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| a.get(i, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&x, &y| sigma[y].partial_cmp(&sigma[x]).unwrap().then(x.cmp(&y)));
    let a_sorted = Matrix::from_fn(rows, cols, |i, j| a.get(i, order[j]));
    let v_sorted = Matrix::from_fn(cols, cols, |i, j| v.get(i, order[j]));
    sigma = order.iter().map(|&j| sigma[j]).collect();
    (a_sorted, sigma, v_sorted)
}

/// Full SVD of `w` (o x h): columns of `us` are `sigma_j u_j` (o x k),
/// `v` is h x k, with k = min(o, h) singular triplets in descending order.
pub(crate) fn svd(w: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (o, h) = w.shape();
    if o >= h {
        let (us, sigma, v) = jacobi_svd(w.clone());
        (us, sigma, v)
    } else {
        // decompose W^T = P Sigma Q^T, so W = Q Sigma P^T
        let (p_sigma, sigma, q) = jacobi_svd(w.transposed());
        // us = Q Sigma: scale columns of Q by sigma
        let us = Matrix::from_fn(o, o, |i, j| q.get(i, j) * sigma[j]);
        // v = P = p_sigma with columns normalized by sigma (zero stays zero)
        let v = Matrix::from_fn(h, o, |i, j| {
            if sigma[j] > 0.0 {
                p_sigma.get(i, j) / sigma[j]
            } else {
                0.0
            }
        });
        (us, sigma, v)
    }
}

/// Truncated-SVD rank-r factors of `w`.
pub fn rsparse_factors(w: &Matrix, rank: usize) -> Result<LowRankFactors> {
    let max = w.rows().min(w.cols());
    if rank == 0 || rank > max {
        return Err(Error::RankOutOfRange { rank, max });
    }
    let (us, _sigma, v) = svd(w);
    let a = Matrix::from_fn(w.rows(), rank, |i, t| us.get(i, t));
    let b = Matrix::from_fn(rank, w.cols(), |t, j| v.get(j, t));
    Ok(LowRankFactors { a, b, rank })
}

/// Sparse path plus low-rank residual:
/// `Y_p = (X (.) M) W^T + (X - X (.) M) (A B)^T`.
pub fn forward_rsparse(
    x: &Matrix,
    w: &Matrix,
    factors: &LowRankFactors,
    criterion: Criterion,
    pattern: MaskPattern,
) -> Result<Matrix> {
    if factors.a.rows() != w.rows() || factors.b.cols() != w.cols() {
        return Err(Error::ShapeMismatch {
            context: "forward_rsparse",
            left: (factors.a.rows(), factors.b.cols()),
            right: w.shape(),
        });
    }
    let scores = criterion.score(x, w)?;
    let mask = pattern.build(&scores)?;
    let masked = apply_mask(x, &mask)?;
    let y_sparse = matmul(&masked, w)?;
    let residual = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        x.get(i, j) - masked.get(i, j)
    });
    // residual (A B)^T through the factors: (residual B^T) A^T
    let t = matmul(&residual, &factors.b)?;
    let y_lowrank = matmul(&t, &factors.a)?;
    Ok(Matrix::from_fn(x.rows(), w.rows(), |i, k| {
        y_sparse.get(i, k) + y_lowrank.get(i, k)
    }))
}
