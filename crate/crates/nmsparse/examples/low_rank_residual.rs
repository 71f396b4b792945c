//! Routing masked-out activation mass through a truncated-SVD approximation
//! of the weights: output error as a function of the residual rank.
//!
//! ```bash
//! cargo run -p nmsparse --example low_rank_residual
//! ```

use nmsparse::criteria::Criterion;
use nmsparse::masks::{MaskPattern, PatternSpec};
use nmsparse::tensor::{matmul, Matrix, Rng};
use nmsparse::transforms::{forward_baseline, forward_rsparse, rsparse_factors};

fn main() -> nmsparse::Result<()> {
    let mut rng = Rng::new(29);
    let x = rng.normal_matrix(12, 64);
    let w = rng.normal_matrix(48, 64);
    let dense = matmul(&x, &w)?;
    let pattern = MaskPattern::Nm(PatternSpec::new(8, 16)?);

    let err = |y: &Matrix| {
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, b) in y.data().iter().zip(dense.data()) {
            num += (a - b) * (a - b);
            den += b * b;
        }
        (num / den).sqrt()
    };

    let baseline = forward_baseline(&x, &w, Criterion::Act, pattern)?;
    println!("8:16 masking, no residual path : {:.5}", err(&baseline));
    for rank in [1, 2, 4, 8, 16, 32, 48] {
        let factors = rsparse_factors(&w, rank)?;
        let recon = {
            let p = factors.product();
            let mut gap = 0.0;
            for (a, b) in p.data().iter().zip(w.data()) {
                gap += (a - b) * (a - b);
            }
            gap.sqrt()
        };
        let y = forward_rsparse(&x, &w, &factors, Criterion::Act, pattern)?;
        println!(
            "rank {rank:>2} residual path         : {:.5}   (||W - AB||_F = {recon:.3})",
            err(&y)
        );
    }
    println!("\nfull rank recovers the dense product; small ranks already cut the error.");
    Ok(())
}
