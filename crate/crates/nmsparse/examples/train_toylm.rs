//! Train the bundled tiny byte-level language model and report perplexity
//! on the held-out split.
//!
//! ```bash
//! cargo run --release -p nmsparse --example train_toylm -- [steps] [lr]
//! ```

use nmsparse::toylm::{train, ToyLMConfig};
use std::time::Instant;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(300);
    let lr: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.5);

    let train_text = include_bytes!("../assets/corpus_train.txt");
    let eval_text = include_bytes!("../assets/corpus_eval.txt");

    let config = ToyLMConfig::default();
    println!(
        "training: dim={} layers={} heads={} ctx={} seed={} steps={steps} lr={lr}",
        config.dim, config.layers, config.heads, config.ctx, config.seed
    );

    let start = Instant::now();
    let model = train(&config, train_text, steps, lr)?;
    let elapsed = start.elapsed();
    println!(
        "trained in {:.1}s ({:.1} ms/step), final loss {:.4} nats/byte",
        elapsed.as_secs_f64(),
        elapsed.as_secs_f64() * 1000.0 / steps as f64,
        model.final_loss()
    );

    let ppl = model.perplexity(eval_text, None)?;
    println!("held-out perplexity: {ppl:.4}");

    let out = std::env::temp_dir().join("toylm.ckpt");
    model.save(&out)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}
