//! Writing and reading patch feature files.
//!
//! A feature file holds fixed-length little-endian records; the JSON
//! manifest next to it carries the dimension, category names and the
//! image labels.

use std::error::Error;

use mdpm::featurestore::{manifest_path, BBox, FeatureSet, LoadOptions, PatchRecord};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let mut set = FeatureSet::new(6, vec!["kitchen".into(), "office".into()]);
    set.set_image_label("kitchen/0001", 0)?;
    set.set_image_label("office/0001", 1)?;

    let patches = [
        ("kitchen/0001", BBox::new(0, 0, 128, 128), [0.0, 3.5, 0.0, 1.0, 0.0, 0.2]),
        ("kitchen/0001", BBox::new(128, 0, 128, 128), [0.1, 3.0, 0.0, 0.9, 0.0, 0.0]),
        ("office/0001", BBox::new(64, 64, 128, 128), [2.0, 0.0, 1.5, 0.0, 0.3, 0.0]),
    ];
    for (image, bbox, feature) in patches {
        set.push(PatchRecord {
            image_id: image.into(),
            bbox,
            scale_index: 0,
            feature: feature.to_vec(),
        })?;
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("patches.mdpm");
    set.save(&path)?;
    let bytes = std::fs::metadata(&path)?.len();
    println!("wrote {} records ({bytes} bytes) to {}", set.len(), path.display());
    println!("manifest: {}", std::fs::read_to_string(manifest_path(&path))?);

    let back = FeatureSet::load(&path)?;
    assert_eq!(back, set);
    for (i, r) in back.records().iter().enumerate() {
        let category = back.category_names()[back.category_of(i).unwrap()].as_str();
        println!("{i}: {:<14} {category:<8} {:?}", r.image_id, r.bbox);
    }

    // Derived files may carry negative values; the default load refuses them.
    let mut signed = FeatureSet::new(2, vec!["any".into()]);
    signed.set_image_label("img", 0)?;
    signed.push_signed(PatchRecord {
        image_id: "img".into(),
        bbox: BBox::default(),
        scale_index: 0,
        feature: vec![-1.0, 2.0],
    })?;
    let signed_path = dir.path().join("signed.mdpm");
    signed.save(&signed_path)?;
    match FeatureSet::load(&signed_path) {
        Err(e) => println!("default load rejects it: {e}"),
        Ok(_) => return Err("negative value accepted".into()),
    }
    let lenient = FeatureSet::load_with(&signed_path, LoadOptions { require_non_negative: false })?;
    println!("lenient load: {:?}", lenient.records()[0].feature);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
