//! Whitened LDA detectors: background statistics, training on an
//! element's patches, scoring and the detector file format.

use std::error::Error;

use mdpm::detectors::{fit_background, load_detectors, save_detectors, train_lda, BackgroundOptions};
use mdpm::elements::ElementId;
use mdpm::synth::{generate_synthetic, SynthSpec};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let spec = SynthSpec {
        n_categories: 2,
        train_images_per_category: 20,
        test_images_per_category: 0,
        dimension: 64,
        noise_active: 8,
        ..Default::default()
    };
    let out = generate_synthetic(&spec)?;
    let records = out.train.records();
    let rows: Vec<&[f32]> = records.iter().map(|r| r.feature.as_slice()).collect();
    let stats = fit_background(&rows, &BackgroundOptions::default())?;
    println!("background from {} patches, lambda {:.4}", rows.len(), stats.lambda());

    // Positives: patches carrying the first planted set.
    let plant = &out.plants.plants[0][0];
    let carries = |f: &[f32]| plant.iter().all(|&item| f[item as usize - 1] > spec.noise_ceiling);
    let positives: Vec<&[f32]> = rows.iter().copied().filter(|f| carries(f)).collect();
    let w = train_lda(&positives, &stats)?;

    let mean = |xs: &[&[f32]]| xs.iter().map(|x| w.score(x)).sum::<f64>() / xs.len() as f64;
    let others: Vec<&[f32]> = rows.iter().copied().filter(|f| !carries(f)).collect();
    println!("plant {plant:?}: {} positives", positives.len());
    println!("mean score on positives {:8.3}", mean(&positives));
    println!("mean score elsewhere    {:8.3}", mean(&others));

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("detectors.mdpd");
    save_detectors(&path, &[(ElementId(0), &w)])?;
    let back = load_detectors(&path)?;
    // Weights are stored as f32.
    let stored: Vec<f64> = w.weights.iter().map(|&v| f64::from(v as f32)).collect();
    assert_eq!(back[0].1.weights, stored);
    println!("detector round trip ok ({} weights)", back[0].1.dimension());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
