//! Building N:M and unstructured masks from scores, and the retention
//! ordering across patterns at equal density: looser blocks always retain
//! at least as much score mass.
//!
//! ```bash
//! cargo run -p nmsparse --example nm_masking
//! ```

use nmsparse::masks::{nm_mask, retained_score, unstructured_mask, PatternSpec};
use nmsparse::tensor::{Matrix, Rng};

fn main() -> nmsparse::Result<()> {
    let scores = Matrix::new(1, 8, vec![4.0, 1.0, 3.0, 2.0, 0.5, 9.0, 0.1, 8.0])?;
    let mask = nm_mask(&scores, PatternSpec::new(2, 4)?)?;
    println!("scores  {:?}", scores.row(0));
    println!("2:4     {:?}  (top-2 per 4-block, ties -> lower index)", mask.row(0));
    let unstr = unstructured_mask(&scores, 0.5)?;
    println!("u:0.5   {:?}  (global top-4)", unstr.row(0));

    let mut rng = Rng::new(7);
    let wide = rng.uniform_matrix(4, 64, 0.0, 1.0);
    println!("\nretained score mass at 50% density (4x64 random scores):");
    let full: f64 = wide.data().iter().sum();
    let u = unstructured_mask(&wide, 0.5)?;
    println!("  unstructured : {:.4}", retained_score(&wide, &u)? / full);
    for spec in [(16, 32), (8, 16), (4, 8), (2, 4)] {
        let spec = PatternSpec::new(spec.0, spec.1)?;
        let m = nm_mask(&wide, spec)?;
        println!(
            "  {:>12} : {:.4}",
            spec.to_string(),
            retained_score(&wide, &m)? / full
        );
    }
    println!("\nevery (n,m)-feasible mask is (2n,2m)-feasible, so the optima nest.");
    Ok(())
}
