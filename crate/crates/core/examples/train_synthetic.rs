//! Single-worker training on the default synthetic corpus, then held-out precision.
//!
//! `cargo run --release --example train_synthetic [triplets]`

use deeprank::datagen::{self, GenConfig};
use deeprank::eval::{self, EvalConfig, NetworkModel};
use deeprank::net::{MultiscaleConfig, Network};
use deeprank::trainer::{self, TrainConfig};

fn main() -> deeprank::error::Result<()> {
    let budget = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(64_000);
    let data = datagen::generate(&GenConfig::default())?;
    let network = Network::new(MultiscaleConfig::desk_scale())?;
    let init = network.init_params(1);
    let groups = eval::prepare_groups(&data.eval, &EvalConfig::default())?;

    let before = eval::evaluate(&NetworkModel { network: &network, params: &init }, &data.eval, &groups, 30, 1)?;
    let config = TrainConfig { budget, log_interval: 500, ..TrainConfig::default() };
    let model = trainer::train_with(&data.train, &network, init, &config, &mut |r, _| {
        println!(
            "step {:>6}  triplets {:>7}  loss {:.4}  active {:.2}  probe {:.4}",
            r.step,
            r.triplets,
            r.loss,
            r.active_fraction,
            r.probe_loss.unwrap_or(f64::NAN)
        );
        Ok(())
    })?;
    let after = eval::evaluate(&NetworkModel { network: &network, params: &model.params }, &data.eval, &groups, 30, 1)?;
    println!("untrained: precision {:.3}, score@30 {}", before.precision, before.score_at_top_k);
    println!("trained:   precision {:.3}, score@30 {}", after.precision, after.score_at_top_k);
    println!("{} triplets in {:.1} s", model.triplets, model.wall_ms as f64 / 1000.0);
    Ok(())
}
