//! Collapsing near-duplicate elements with ensemble merging.
//!
//! Each plant shows up as many mined subsets with the same patches
//! behind them; merging folds each family into one element.

use std::error::Error;

use mdpm::detectors::{fit_background, BackgroundOptions};
use mdpm::elements::{build_index, retrieve_all};
use mdpm::merging::{ensemble_merge, MergeConfig};
use mdpm::miner::{mine, MineConfig};
use mdpm::synth::{generate_synthetic, SynthSpec};
use mdpm::transactions::{build_labeled_database, FeatureSelection};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let spec = SynthSpec {
        n_categories: 3,
        train_images_per_category: 20,
        test_images_per_category: 0,
        patches_per_image: 30,
        dimension: 128,
        ..Default::default()
    };
    let out = generate_synthetic(&spec)?;
    let set = &out.train;
    let rows: Vec<&[f32]> = set.records().iter().map(|r| r.feature.as_slice()).collect();
    let stats = fit_background(&rows, &BackgroundOptions::default())?;

    let selection = FeatureSelection::all(set, 0);
    let db = build_labeled_database(&selection, 20, |category| category == 0)?;
    let patterns = mine(
        &db,
        &MineConfig {
            supp_min: 0.0001,
            conf_min: 0.6,
            ..Default::default()
        },
    )?;
    let elements = retrieve_all(&patterns, &build_index(&db), &db)?;

    let config = MergeConfig {
        threshold: 10.0,
        max_rounds: 10,
    };
    let merged = ensemble_merge(&elements, set, &stats, &config)?;
    println!("{} elements merged into {}", elements.len(), merged.len());
    // Chance co-occurrences of noise dimensions make up the small tail.
    for (e, absorbed) in merged.elements.iter().zip(&merged.provenance).take(4) {
        println!(
            "  {:?}: {} patches, {} images, absorbed {} elements",
            e.pattern.items,
            e.members.len(),
            e.covered_images.len(),
            absorbed.len()
        );
    }
    println!("planted: {:?}", out.plants.plants[0]);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
