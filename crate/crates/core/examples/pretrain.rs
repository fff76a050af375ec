//! Softmax pretraining of the full-resolution path on the category labels.

use deeprank::datagen::{self, GenConfig};
use deeprank::net::{MultiscaleConfig, Network};
use deeprank::trainer::{self, PretrainConfig};

fn main() -> deeprank::error::Result<()> {
    let data = datagen::generate(&GenConfig { centroid_scale: 10.0, ..GenConfig::default() })?;
    let network = Network::new(MultiscaleConfig::desk_scale())?;
    let config = PretrainConfig { epochs: 10, learning_rate: 0.01, ..PretrainConfig::default() };
    let (_, report) = trainer::pretrain_softmax(&data.train, Some(&data.eval), &network, network.init_params(1), &config)?;
    println!("{} classes, uniform cross-entropy {:.3}", report.classes, report.uniform_cross_entropy);
    for e in &report.epochs {
        println!(
            "epoch {:>2}: cross-entropy {:.3}  train acc {:.3}  held-out acc {:.3}",
            e.epoch,
            e.cross_entropy,
            e.train_accuracy,
            e.heldout_accuracy.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
