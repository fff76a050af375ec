//! Finite-difference check of every layer kind and of the desk-scale network
//! through the regularized triplet objective.

use std::time::Instant;

use deeprank::dataset::Shape;
use deeprank::net::gradcheck::{self, GradCheckConfig};
use deeprank::net::{MultiscaleConfig, Network};
use deeprank::rankloss::LossConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> deeprank::error::Result<()> {
    let cfg = GradCheckConfig::default();
    let start = Instant::now();
    for (name, report) in gradcheck::check_all_layer_kinds(1, &cfg)? {
        println!("{name:>26}: {report}");
    }

    let net = Network::new(MultiscaleConfig::desk_scale())?;
    let params = net.init_params(7);
    let shape: Shape = net.input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let imgs: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..shape.len()).map(|_| rng.random::<f64>()).collect())
        .collect();
    let loss = LossConfig { gap: 10.0, ..LossConfig::default() };
    let (report, active) =
        gradcheck::check_network_triplet(&net, &params, [&imgs[0], &imgs[1], &imgs[2]], loss, Some(3), &cfg)?;
    println!("desk-scale network ({} parameters, hinge active: {active}): {report}", params.num_values());
    println!("elapsed {:.1?}", start.elapsed());
    Ok(())
}
