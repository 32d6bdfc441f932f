//! Retrieving the patches behind each mined pattern through an inverted
//! index over positive transactions.

use std::error::Error;

use mdpm::elements::{build_index, retrieve_all};
use mdpm::miner::{mine, MineConfig};
use mdpm::synth::{generate_synthetic, SynthSpec};
use mdpm::transactions::{build_labeled_database, FeatureSelection};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let spec = SynthSpec {
        n_categories: 3,
        train_images_per_category: 12,
        test_images_per_category: 0,
        patches_per_image: 20,
        dimension: 96,
        ..Default::default()
    };
    let out = generate_synthetic(&spec)?;
    let selection = FeatureSelection::all(&out.train, 0);
    let db = build_labeled_database(&selection, 20, |category| category == 1)?;

    let config = MineConfig {
        supp_min: 0.001,
        conf_min: 0.6,
        min_len: 3,
        ..Default::default()
    };
    let patterns = mine(&db, &config)?;
    let index = build_index(&db);
    let elements = retrieve_all(&patterns, &index, &db)?;

    let images = out.train.image_ids();
    for e in elements.iter().take(5) {
        let first = e.members[0];
        println!(
            "element {:>3} {:?}: {} patches in {} images, first from {}",
            e.element_id.0,
            e.pattern.items,
            e.members.len(),
            e.covered_images.len(),
            out.train.records()[first.record as usize].image_id,
        );
    }
    println!("{} elements over {} training images", elements.len(), images.len());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
