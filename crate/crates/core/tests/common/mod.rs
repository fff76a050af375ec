#![allow(dead_code)]

use deeprank::datagen::{self, GenConfig, SyntheticData};
use deeprank::dataset::Shape;
use deeprank::net::{MultiscaleConfig, Network};

pub fn tiny_data(seed: u64) -> SyntheticData {
    datagen::generate(&GenConfig {
        num_categories: 4,
        images_per_category: 20,
        eval_per_category: 10,
        shape: Shape::new(3, 16, 16),
        seed,
        ..GenConfig::default()
    })
    .unwrap()
}

pub fn tiny_net() -> Network {
    Network::new(MultiscaleConfig::tiny(Shape::new(3, 16, 16))).unwrap()
}
