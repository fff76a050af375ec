//! Writes the first-layer kernels of a briefly trained network as PNG grids.

use deeprank::cli;
use deeprank::datagen::{self, GenConfig};
use deeprank::net::{MultiscaleConfig, Network};
use deeprank::trainer::{self, TrainConfig};

fn main() -> deeprank::error::Result<()> {
    let data = datagen::generate(&GenConfig::default())?;
    let network = Network::new(MultiscaleConfig::desk_scale())?;
    let config = TrainConfig { budget: 4_000, ..TrainConfig::default() };
    let model = trainer::train(&data.train, &network, network.init_params(1), &config)?;

    let dir = std::env::temp_dir().join("deeprank-filters");
    std::fs::create_dir_all(&dir).expect("temp dir");
    for grid in cli::filter_grids(&network, &model.params) {
        let path = dir.join(format!("path{}_filters.png", grid.path));
        cli::write_png(&path, &grid)?;
        println!("{}: {} kernels of {}x{}, image {}x{}", path.display(), grid.kernels, grid.kernel_size, grid.kernel_size, grid.width, grid.height);
    }
    Ok(())
}
