//! Compressed N:M storage end to end: mask, encode with colexicographic
//! pattern indices, serialize, decode losslessly, and multiply straight from
//! the compressed form.
//!
//! ```bash
//! cargo run -p nmsparse --example compressed_format
//! ```

use nmsparse::criteria::score_act;
use nmsparse::masks::{apply_mask, nm_mask, PatternSpec};
use nmsparse::sparse_format::{decode, encode, spmm};
use nmsparse::tensor::{matmul, Rng};

fn main() -> nmsparse::Result<()> {
    let mut rng = Rng::new(31);
    let x = rng.normal_matrix(8, 32);
    let spec = PatternSpec::new(8, 16)?;
    let mask = nm_mask(&score_act(&x), spec)?;
    let compressed = encode(&x, &mask)?;

    let dense_bits = (x.rows() * x.cols() * 64) as f64;
    let value_bits = (compressed.values().len() * 64) as f64;
    let meta_bits = compressed.meta_bits() as f64;
    println!("matrix 8x32 under {spec}:");
    println!("  dense storage        : {dense_bits} bits");
    println!(
        "  compressed storage   : {} bits values + {} bits metadata",
        value_bits, meta_bits
    );
    println!(
        "  metadata per element : {:.4} bits",
        meta_bits / (x.rows() * x.cols()) as f64
    );

    // byte-level roundtrip through the NMSP layout
    let bytes = compressed.to_bytes()?;
    let path = std::env::temp_dir().join("example.nmsp");
    compressed.write_to(&path)?;
    println!("  serialized           : {} bytes -> {}", bytes.len(), path.display());

    let restored = decode(&compressed)?;
    assert_eq!(restored, apply_mask(&x, &mask)?);
    println!("  decode(encode(x))    : exact");

    let w = rng.normal_matrix(16, 32);
    let fast = spmm(&compressed, &w)?;
    let slow = matmul(&restored, &w)?;
    let max_gap = fast
        .data()
        .iter()
        .zip(slow.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("  spmm vs decode+matmul: max |gap| = {max_gap:.2e}");
    Ok(())
}
