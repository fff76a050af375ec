//! Out-of-class ratio sweep under weighted and uniform sampling, printed as CSV.
//!
//! `cargo run --release --example sampling_sweep [budget]`

use deeprank::cli::{self, RunConfig};
use deeprank::datagen;
use deeprank::net::{MultiscaleConfig, Network};
use deeprank::sampler::SamplingMode;

fn main() -> deeprank::error::Result<()> {
    let mut config = RunConfig::default();
    config.stats.sweep_budget = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(8_000);
    let data = datagen::generate(&config.gen)?;
    let network = Network::new(MultiscaleConfig::desk_scale())?;

    let mut rows = Vec::new();
    for mode in [SamplingMode::Weighted, SamplingMode::Uniform] {
        config.train.sampling = mode;
        rows.extend(cli::sampling_sweep(&data.train, &data.eval, &network, &config)?);
    }
    let mut w = csv::Writer::from_writer(std::io::stdout());
    for r in &rows {
        w.serialize(r).expect("stdout");
    }
    w.flush().expect("stdout");
    Ok(())
}
