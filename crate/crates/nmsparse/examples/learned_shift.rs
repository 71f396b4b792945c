//! Fitting the learnable per-channel shift by gradient descent on
//! layer-local reconstruction error, on a case whose optimum is known in
//! closed form: when deviations from a fixed channel profile are sparse
//! enough for the mask to capture them all, the profile itself is the
//! zero-loss shift.
//!
//! ```bash
//! cargo run -p nmsparse --example learned_shift
//! ```

use nmsparse::criteria::Criterion;
use nmsparse::masks::{MaskPattern, PatternSpec};
use nmsparse::tensor::{Matrix, Rng};
use nmsparse::transforms::{calibrate_spts, fit_lpts};

fn main() -> nmsparse::Result<()> {
    let mut rng = Rng::new(16);
    let hidden = 8;
    let profile: Vec<f64> = (0..hidden).map(|j| 0.5 + 0.1 * j as f64).collect();

    // sign-balanced sparse deviations: at most 2 per 4-block, magnitude >> profile
    let patterns = [[0usize, 2], [1, 3], [0, 3]];
    let mut batches = Vec::new();
    for _ in 0..2 {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for pat in &patterns {
            let mut plus = profile.clone();
            let mut minus = profile.clone();
            for block in 0..hidden / 4 {
                for &local in pat {
                    let delta = 5.0 + 5.0 * rng.uniform();
                    plus[block * 4 + local] += delta;
                    minus[block * 4 + local] -= delta;
                }
            }
            rows.push(plus);
            rows.push(minus);
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        batches.push(Matrix::new(rows.len(), hidden, flat)?);
    }
    let w = rng.normal_matrix(4, hidden);

    let pattern = MaskPattern::Nm(PatternSpec::new(2, 4)?);
    let params = fit_lpts(&batches, &w, Criterion::Act, pattern, 400, 0.25, false, false)?;

    println!("channel |  profile | pooled mean | fitted shift");
    let pooled = calibrate_spts(&batches)?;
    let rows = profile
        .iter()
        .zip(pooled.values())
        .zip(params.eta().values());
    for (j, ((target, pool), fitted)) in rows.enumerate() {
        println!("{j:>7} | {target:>8.4} | {pool:>11.4} | {fitted:>12.6}");
    }
    let trace = params.loss_trace();
    println!("\nbest-so-far loss trace (every 50th step):");
    for (i, loss) in trace.iter().enumerate().step_by(50) {
        println!("  step {i:>3}: {loss:.3e}");
    }
    println!("  final   : {:.3e}", trace.last().unwrap());
    println!("diverged: {}", params.diverged());
    Ok(())
}
