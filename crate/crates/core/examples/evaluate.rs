//! Both metrics for three models on the same held-out triplets: the planted latents,
//! raw pixels and an untrained network.

use deeprank::datagen::{self, GenConfig};
use deeprank::dataset::ImageRecord;
use deeprank::error::Result;
use deeprank::eval::{self, EvalConfig, LatentModel, NetworkModel};
use deeprank::net::{MultiscaleConfig, Network};

fn main() -> Result<()> {
    let data = datagen::generate(&GenConfig::default())?;
    let cfg = EvalConfig::default();
    let groups = eval::prepare_groups(&data.eval, &cfg)?;
    let network = Network::new(MultiscaleConfig::desk_scale())?;
    let params = network.init_params(1);
    let pixels = |img: &ImageRecord| -> Result<Vec<f64>> { Ok(img.tensor.iter().map(|&v| v as f64).collect()) };

    let reports = [
        ("latent", eval::evaluate(&LatentModel, &data.eval, &groups, cfg.k, 1)?),
        ("pixels", eval::evaluate(&pixels, &data.eval, &groups, cfg.k, 1)?),
        ("untrained", eval::evaluate(&NetworkModel { network: &network, params: &params }, &data.eval, &groups, cfg.k, 1)?),
    ];
    for (name, r) in &reports {
        println!(
            "{name:>9}: precision {:.3}  score@{} {:>5}  ({} triplets, {} in a top-{})",
            r.precision, r.k, r.score_at_top_k, r.n_triplets, r.n_eligible, r.k
        );
    }
    Ok(())
}
