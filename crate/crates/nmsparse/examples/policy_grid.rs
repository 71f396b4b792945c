//! Run the bundled mini experiment grid through the harness and print the
//! markdown drop report. Same machinery as `nmsparse grid --config ...`.
//!
//! ```bash
//! cargo run --release -p nmsparse --example policy_grid
//! ```

use nmsparse::harness::{run, ExperimentConfig};
use std::path::Path;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/mini_grid.toml");
    let config = ExperimentConfig::load(&config_path)?;
    println!(
        "running {} grid rows (model: {:?}, train {} steps)\n",
        config.grid.len(),
        match &config.model {
            nmsparse::harness::ModelSource::Config(c) => format!("dim {} ctx {}", c.dim, c.ctx),
            nmsparse::harness::ModelSource::Checkpoint(p) => p.display().to_string(),
        },
        config.training.steps
    );
    let report = run(&config)?;
    print!("{}", report.to_markdown());
    eprintln!(
        "\nreport files written under {}",
        config.output_dir.display()
    );
    Ok(())
}
