//! Draws triplets from the streaming sampler and prints its diagnostics.

use deeprank::datagen::{self, GenConfig};
use deeprank::dataset::NegativeKind;
use deeprank::sampler::{self, SamplerConfig, SamplingMode};
use deeprank::trainer::TripletStream;

fn main() -> deeprank::error::Result<()> {
    let data = datagen::generate(&GenConfig::default())?;
    let config = SamplerConfig { out_of_class_ratio: 0.2, ..SamplerConfig::default() };
    let mut stream = TripletStream::new(&data.train, config.clone(), SamplingMode::Weighted, 5)?;
    let triplets = stream.next_batch(10_000)?;

    let out = triplets.iter().filter(|t| t.negative_kind == NegativeKind::OutOfClass).count();
    let valid = triplets
        .iter()
        .filter(|t| sampler::check_triplet(&data.train, t, config.relevance_margin).is_ok())
        .count();
    for t in triplets.iter().take(5) {
        let rel = data.train.relevance();
        println!(
            "q {:>3}  p {:>3} (r {:.3})  n {:>3} (r {:.3})  {:?}",
            t.query,
            t.positive,
            rel.get(t.query, t.positive),
            t.negative,
            rel.get(t.query, t.negative),
            t.negative_kind
        );
    }
    println!("{valid} of {} satisfy the category and margin constraints", triplets.len());
    println!("out-of-class fraction {:.3}", out as f64 / triplets.len() as f64);
    println!("{}", serde_json::to_string_pretty(&stream.sampler().report())?);
    Ok(())
}
