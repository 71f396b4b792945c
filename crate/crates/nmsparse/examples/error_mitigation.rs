//! How much of the masking damage each transform recovers on a random
//! linear layer, measured as relative Frobenius error of the layer output
//! against the dense result.
//!
//! ```bash
//! cargo run -p nmsparse --example error_mitigation
//! ```

use nmsparse::criteria::Criterion;
use nmsparse::masks::{MaskPattern, PatternSpec};
use nmsparse::tensor::{matmul, Matrix, Rng};
use nmsparse::transforms::{
    calibrate_spts, fit_lpts, forward_baseline, forward_dpts, forward_lpts, forward_pcs,
    forward_rsparse, forward_spts, forward_var, rsparse_factors,
};

fn rel_err(got: &Matrix, want: &Matrix) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in got.data().iter().zip(want.data()) {
        num += (a - b) * (a - b);
        den += b * b;
    }
    (num / den).sqrt()
}

fn main() -> nmsparse::Result<()> {
    let mut rng = Rng::new(17);
    let tokens = 16;
    let hidden = 64;
    // off-center activations with per-channel scale spread make the shifts
    // and smoothing transforms earn their keep
    let x = Matrix::from_fn(tokens, hidden, |_, j| {
        1.5 + 0.4 * (j as f64 / hidden as f64) + (0.3 + 0.02 * j as f64) * rng.normal()
    });
    let w = rng.normal_matrix(32, hidden);
    let dense = matmul(&x, &w)?;
    let pattern = MaskPattern::Nm(PatternSpec::new(2, 4)?);
    let criterion = Criterion::Act;

    let calib: Vec<Matrix> = (0..4)
        .map(|_| {
            Matrix::from_fn(tokens, hidden, |_, j| {
                1.5 + 0.4 * (j as f64 / hidden as f64) + (0.3 + 0.02 * j as f64) * rng.normal()
            })
        })
        .collect();
    let eta = calibrate_spts(&calib)?;
    let lpts = fit_lpts(&calib, &w, criterion, pattern, 250, 0.2, false, false)?;
    let factors = rsparse_factors(&w, 8)?;

    println!("relative output error vs dense, 2:4 activation masking:");
    let rows: Vec<(&str, Matrix)> = vec![
        ("baseline", forward_baseline(&x, &w, criterion, pattern)?),
        ("dpts", forward_dpts(&x, &w, criterion, pattern)?),
        ("spts", forward_spts(&x, &w, &eta, criterion, pattern)?),
        ("var", forward_var(&x, &w, criterion, pattern)?),
        ("pcs", forward_pcs(&x, &w, criterion, pattern)?),
        ("lpts", forward_lpts(&x, &w, &lpts, criterion, pattern)?),
        ("rsparse", forward_rsparse(&x, &w, &factors, criterion, pattern)?),
    ];
    for (name, y) in rows {
        println!("  {name:>8}: {:.4}", rel_err(&y, &dense));
    }
    println!(
        "\nlearned shift: initial loss {:.5} -> best loss {:.5} over {} recorded steps",
        lpts.initial_loss().unwrap(),
        lpts.final_loss().unwrap(),
        lpts.loss_trace().len()
    );
    Ok(())
}
