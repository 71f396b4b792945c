//! The four importance criteria side by side on one activation matrix:
//! plain magnitude, context-aware cosine-loss scoring, and weight-informed
//! amber scoring, plus which 2:4 mask each of them induces.
//!
//! ```bash
//! cargo run -p nmsparse --example criteria_showcase
//! ```

use nmsparse::criteria::{score_act, score_amber, score_clact, score_wt};
use nmsparse::masks::{nm_mask, PatternSpec};
use nmsparse::tensor::{Matrix, Rng};

fn print_scores(label: &str, s: &Matrix) {
    print!("{label:>6}:");
    for i in 0..s.rows() {
        print!("  [");
        for (j, v) in s.row(i).iter().enumerate() {
            print!("{}{v:.2}", if j > 0 { " " } else { "" });
        }
        print!("]");
    }
    println!();
}

fn main() -> nmsparse::Result<()> {
    // two tokens, one shared strong channel, one token-local spike
    let x = Matrix::from_rows(&[
        &[0.2, -3.0, 0.4, 1.1, 0.3, 2.4, -0.2, 0.5],
        &[2.0, 0.3, -0.1, 1.0, -0.4, 2.2, 0.6, -0.3],
    ])?;
    let mut rng = Rng::new(3);
    let mut w = rng.normal_matrix(4, 8);
    // one outlier weight and one consistently loud input channel
    w.set(1, 5, 6.0);
    w.set(3, 5, -5.0);
    w.set(0, 0, 40.0);

    print_scores("act", &score_act(&x));
    print_scores("clact", &score_clact(&x));
    print_scores("amber", &score_amber(&x, &w)?);
    print_scores("wt", &score_wt(&w));

    let spec = PatternSpec::new(2, 4)?;
    println!("\n2:4 masks induced on the activations:");
    for (name, scores) in [
        ("act", score_act(&x)),
        ("clact", score_clact(&x)),
        ("amber", score_amber(&x, &w)?),
    ] {
        let mask = nm_mask(&scores, spec)?;
        print!("{name:>6}:");
        for i in 0..mask.rows() {
            print!("  {:?}", mask.row(i));
        }
        println!();
    }
    println!("\namber rescores channels by clipped-standardized weight norms,");
    println!("clact trades raw magnitude for within-token salience.");
    Ok(())
}
