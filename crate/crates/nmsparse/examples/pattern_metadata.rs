//! The hardware-facing arithmetic behind N:M pattern choice: how many keep
//! configurations each block admits, what the pattern index costs in
//! metadata bits, and why a native 8:16 block beats four stacked 2:4 blocks.
//!
//! ```bash
//! cargo run -p nmsparse --example pattern_metadata
//! ```

use nmsparse::masks::PatternSpec;
use nmsparse::sparse_format::{
    metadata_bits_per_block, metadata_bits_per_element, pattern_count, stacked_config_count,
};

fn main() {
    println!("pattern | configurations C(m,n) | bits/block | bits/element");
    println!("--------+-----------------------+------------+-------------");
    for spec in PatternSpec::standard_half_density() {
        println!(
            "{:>7} | {:>21} | {:>10} | {:.4}",
            spec.to_string(),
            pattern_count(spec).to_string(),
            metadata_bits_per_block(spec),
            metadata_bits_per_element(spec)
        );
    }

    let two_four = PatternSpec::new(2, 4).unwrap();
    let eight_sixteen = PatternSpec::new(8, 16).unwrap();
    let stacked = stacked_config_count(two_four, 4);
    let native = pattern_count(eight_sixteen);
    println!();
    println!("four stacked 2:4 blocks: {stacked} configurations");
    println!("one native 8:16 block:   {native} configurations");

    // both counts fit comfortably in f64 here
    let ratio = native.to_string().parse::<f64>().unwrap()
        / stacked.to_string().parse::<f64>().unwrap();
    println!("flexibility ratio:       {ratio:.2}x (nearly an order of magnitude)");
}
