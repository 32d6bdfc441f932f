//! Building a detector bank, encoding images with spatial max pooling
//! and training the one-vs-rest classifier.

use std::error::Error;

use mdpm::classifier::{train_classifier, ClassifierOptions};
use mdpm::detectors::{fit_background, BackgroundOptions};
use mdpm::elements::{build_index, retrieve_all, ElementId};
use mdpm::encoding::{encode_feature_set, select_elements, DetectorBank, EncodeOptions, REGIONS};
use mdpm::featurestore::FeatureSet;
use mdpm::merging::{ensemble_merge, MergeConfig};
use mdpm::miner::{mine, MineConfig};
use mdpm::synth::{generate_synthetic, SynthSpec};
use mdpm::detectors::LdaDetector;
use mdpm::transactions::{build_labeled_database, FeatureSelection};

fn rows_and_labels(set: &FeatureSet) -> (Vec<Vec<f64>>, Vec<usize>) {
    let labels = set.image_labels();
    set.records()
        .iter()
        .map(|r| (r.feature.iter().map(|&v| f64::from(v)).collect(), labels[&r.image_id]))
        .unzip()
}

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let spec = SynthSpec {
        n_categories: 3,
        train_images_per_category: 20,
        test_images_per_category: 10,
        patches_per_image: 30,
        dimension: 128,
        ..Default::default()
    };
    let out = generate_synthetic(&spec)?;
    let train = &out.train;
    let rows: Vec<&[f32]> = train.records().iter().map(|r| r.feature.as_slice()).collect();
    let stats = fit_background(&rows, &BackgroundOptions::default())?;
    let selection = FeatureSelection::all(train, 0);
    let mine_config = MineConfig {
        supp_min: 0.0001,
        conf_min: 0.6,
        ..Default::default()
    };
    let merge_config = MergeConfig {
        threshold: 10.0,
        max_rounds: 10,
    };

    let n_per_class = 4;
    let mut per_category: Vec<Vec<(ElementId, LdaDetector)>> = Vec::new();
    for c in 0..spec.n_categories {
        let db = build_labeled_database(&selection, 20, |category| category == c)?;
        let patterns = mine(&db, &mine_config)?;
        let elements = retrieve_all(&patterns, &build_index(&db), &db)?;
        let merged = ensemble_merge(&elements, train, &stats, &merge_config)?;
        let picked = select_elements(&merged, n_per_class)?;
        println!("category {c}: {} merged elements, picked {:?}", merged.len(), picked.picked);
        per_category.push(
            picked
                .picked
                .iter()
                .take(n_per_class)
                .map(|&i| (merged.elements[i].element_id, merged.detectors[i].clone()))
                .collect(),
        );
    }
    let shortest = per_category.iter().map(Vec::len).min().unwrap_or(0);
    per_category.iter_mut().for_each(|d| d.truncate(shortest));
    let bank = DetectorBank::new(train.category_names().to_vec(), per_category)?;
    println!("bank: {} detectors, {} values per image", bank.len(), bank.encoding_len());
    assert_eq!(bank.encoding_len(), REGIONS * bank.len());

    let options = EncodeOptions::default();
    let (x, y) = rows_and_labels(&encode_feature_set(train, &bank, &options)?);
    let model = train_classifier(&x, &y, spec.n_categories, &ClassifierOptions::default())?;
    for (c, accuracy) in &model.cv_accuracy {
        println!("C = {c:<6} cross-validated accuracy {accuracy:.3}");
    }
    println!("chose C = {}", model.c);

    let (tx, ty) = rows_and_labels(&encode_feature_set(&out.test, &bank, &options)?);
    let correct = tx.iter().zip(&ty).filter(|(v, &label)| model.predict(v) == label).count();
    println!("test accuracy {correct}/{}", ty.len());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
