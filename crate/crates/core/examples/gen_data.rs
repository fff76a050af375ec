//! Generates the default synthetic corpus, writes both splits and reads them back.

use deeprank::datagen::{self, GenConfig};
use deeprank::dataset::Dataset;

fn main() -> deeprank::error::Result<()> {
    let config = GenConfig::default();
    let data = datagen::generate(&config)?;
    let dir = std::env::temp_dir().join("deeprank-gen-data");
    let manifest = data.train.save(&dir, "train")?;
    data.eval.save(&dir, "eval")?;

    let back = Dataset::load(&manifest)?;
    println!("wrote {} ({} images, shape {})", manifest.display(), back.len(), back.shape());
    for (cat, ids) in back.by_category().iter().take(3) {
        let r: Vec<String> = ids
            .iter()
            .take(4)
            .map(|&id| format!("{:.2}", back.total_relevance(id).unwrap()))
            .collect();
        println!("category {cat}: {} images, total relevance of the first few: {}", ids.len(), r.join(" "));
    }
    println!("relevance pairs stored: {}", back.relevance().len());
    Ok(())
}
