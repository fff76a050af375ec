pub mod cli;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod net;
pub mod rankloss;
pub mod sampler;
pub mod trainer;
