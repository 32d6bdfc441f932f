//! Turning patches into labeled transactions and mining confident
//! itemsets for one target category.

use std::error::Error;

use mdpm::miner::{mine, MineConfig};
use mdpm::synth::{synthetic_database, SynthSpec};
use mdpm::transactions::make_transaction;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    // One patch: the three strongest dimensions plus the positive label.
    let mut f = vec![0.0f32; 10];
    f[1] = 3.0;
    f[4] = 5.0;
    f[8] = 4.0;
    let t = make_transaction(&f, 3, true, 10)?;
    println!("items {:?}, label {}", t.items, t.label);

    let spec = SynthSpec {
        n_categories: 3,
        train_images_per_category: 20,
        ..Default::default()
    };
    let (db, plants) = synthetic_database(&spec, 0, 20)?;
    println!("{} transactions over D = {}", db.len(), db.dimension());

    let config = MineConfig {
        supp_min: 0.0001,
        conf_min: 0.6,
        ..Default::default()
    };
    let patterns = mine(&db, &config)?;
    println!("{} patterns; the most frequent:", patterns.len());
    for p in patterns.iter().take(8) {
        println!("  {:?}  supp {:.4}  conf {:.3}", p.items, p.support, p.confidence);
    }
    for plant in &plants.plants[0] {
        let hit = patterns.iter().any(|p| &p.items == plant);
        println!("planted {plant:?}: {}", if hit { "mined" } else { "missed" });
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
