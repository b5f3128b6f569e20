//! Trains an N=3 model on synthetic scenes and reports held-out separation quality.
//!
//! Usage: `cargo run --release --example separation_benchmark -- [seed] [epochs]`

use meae_core::bench::{run_benchmark, BenchmarkConfig};

fn main() -> meae_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let epochs = args.next().map_or(30, |s| s.parse().expect("epochs must be an integer"));
    let outcome = run_benchmark(&BenchmarkConfig::new(seed, epochs))?;
    for r in &outcome.reports {
        println!("{}", r.log_line(3));
    }
    println!("seed {seed}: {}", outcome.summary());
    Ok(())
}
