//! The whole pipeline on synthetic features, stage by stage, with every
//! artifact written under a working directory.

use std::error::Error;

use mdpm::pipeline::{self, PipelineConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let dir = tempfile::tempdir()?;
    let mut config = PipelineConfig::default();
    config.paths.workdir = dir.path().to_path_buf();
    config.mining.default.conf_min = 0.6;
    // Synthetic activations are small; the default threshold suits real CNN features.
    config.merge.threshold = 10.0;
    config.n_per_class = 8;
    config.synth.n_categories = 4;
    config.synth.train_images_per_category = 20;
    config.synth.test_images_per_category = 10;

    let ingest = pipeline::synth(&config)?;
    println!("{}", serde_json::to_string(&ingest)?);
    let mined = pipeline::mine(&config)?;
    for c in &mined.categories {
        println!("{:<6} {:>6} patterns", c.category, c.count);
    }
    let merged = pipeline::merge(&config)?;
    for c in &merged.categories {
        println!("{:<6} {:>6} elements -> {:>3}", c.category, c.elements, c.merged);
    }
    let selected = pipeline::select(&config)?;
    println!("bank uses {} elements per category", selected.n_per_class);
    pipeline::encode(&config)?;
    let trained = pipeline::train(&config)?;
    println!("{}", serde_json::to_string(&trained)?);
    let eval = pipeline::eval(&config)?;
    println!("accuracy {:.3}, mAP {:.3}", eval.accuracy, eval.mean_average_precision);

    let study = pipeline::study(&config)?;
    println!("{}", study.table());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
