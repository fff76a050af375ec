//! The same task trained by one worker and by four asynchronous workers.

use std::time::Instant;

use deeprank::datagen::{self, GenConfig};
use deeprank::eval::{self, EvalConfig, NetworkModel};
use deeprank::net::{MultiscaleConfig, Network};
use deeprank::trainer::{self, TrainConfig};

fn main() -> deeprank::error::Result<()> {
    let data = datagen::generate(&GenConfig::default())?;
    let network = Network::new(MultiscaleConfig::desk_scale())?;
    let groups = eval::prepare_groups(&data.eval, &EvalConfig::default())?;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    println!("{cores} cores available");

    for workers in [1, 4] {
        let config = TrainConfig { budget: 16_000, workers, async_momentum: Some(0.8), ..TrainConfig::default() };
        let start = Instant::now();
        let model = if workers == 1 {
            trainer::train(&data.train, &network, network.init_params(1), &config)?
        } else {
            trainer::train_async(&data.train, &network, network.init_params(1), &config)?
        };
        let wall = start.elapsed();
        let r = eval::evaluate(&NetworkModel { network: &network, params: &model.params }, &data.eval, &groups, 30, 1)?;
        println!(
            "{workers} worker(s): precision {:.3}, score@30 {}, {:.1?}, commits per worker {:?}",
            r.precision, r.score_at_top_k, wall, model.worker_steps
        );
    }
    Ok(())
}
