//! Synthetic patch features with planted co-activation patterns.
//!
//! Every patch carries a few weak noise activations. With some probability
//! it also activates one of its category's planted item sets, at magnitudes
//! above the noise ceiling, so the planted items always make the top-k.
//! Plants are disjoint across categories and logged as ground truth.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurestore::{BBox, FeatureSet, FormatError, ImageKey, PatchRecord, PatchRef};
use crate::transactions::{make_transaction, Item, TransactionDatabase, TransactionError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {field} {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Transactions(#[from] TransactionError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_categories: usize,
    pub train_images_per_category: usize,
    pub test_images_per_category: usize,
    /// Patches per image and scale.
    pub patches_per_image: usize,
    pub n_scales: usize,
    pub dimension: usize,
    pub plants_per_category: usize,
    pub plant_size: usize,
    pub plant_probability: f64,
    pub plant_magnitude: f32,
    /// Uniform extra magnitude in `[0, plant_jitter)`.
    pub plant_jitter: f32,
    /// Nonzero noise dimensions per patch.
    pub noise_active: usize,
    /// Noise values lie in `(0, noise_ceiling]`.
    pub noise_ceiling: f32,
    pub image_size: u32,
    pub patch_size: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_categories: 5,
            train_images_per_category: 40,
            test_images_per_category: 20,
            patches_per_image: 50,
            n_scales: 1,
            dimension: 512,
            plants_per_category: 2,
            plant_size: 4,
            plant_probability: 0.5,
            plant_magnitude: 5.0,
            plant_jitter: 1.0,
            noise_active: 2,
            noise_ceiling: 1.0,
            image_size: 256,
            patch_size: 128,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |field, reason: String| Err(SynthError::InvalidSpec { field, reason });
        if self.n_categories == 0 {
            return bad("n_categories", "must be at least 1".into());
        }
        if self.patches_per_image == 0 {
            return bad("patches_per_image", "must be at least 1".into());
        }
        if self.n_scales == 0 || self.n_scales > 8 {
            return bad("n_scales", "must be in 1..=8".into());
        }
        if self.plant_size == 0 && self.plants_per_category > 0 {
            return bad("plant_size", "must be at least 1".into());
        }
        let planted = self.n_categories * self.plants_per_category * self.plant_size;
        if planted > self.dimension {
            return bad(
                "dimension",
                format!("{} is too small for {planted} disjoint planted items", self.dimension),
            );
        }
        if self.noise_active > self.dimension {
            return bad("noise_active", "exceeds dimension".into());
        }
        if !(0.0..=1.0).contains(&self.plant_probability) {
            return bad("plant_probability", "must be in [0, 1]".into());
        }
        if !(self.noise_ceiling > 0.0) {
            return bad("noise_ceiling", "must be positive".into());
        }
        if !(self.plant_magnitude > self.noise_ceiling) || !(self.plant_jitter >= 0.0) {
            return bad("plant_magnitude", "must exceed noise_ceiling, with non-negative jitter".into());
        }
        if self.patch_size == 0 || self.patch_size > self.image_size {
            return bad("patch_size", "must be in 1..=image_size".into());
        }
        Ok(())
    }

    pub fn category_name(c: usize) -> String {
        format!("cat{c:02}")
    }

    pub fn image_id(category: usize, split: Split, index: usize) -> String {
        format!("{}/{}/{index:04}", Self::category_name(category), split.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Ground-truth item sets (1-based) per category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantLog {
    pub categories: Vec<String>,
    pub plants: Vec<Vec<Vec<Item>>>,
}

pub struct SynthOutput {
    pub train: FeatureSet,
    pub test: FeatureSet,
    pub plants: PlantLog,
}

fn draw_plants(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> PlantLog {
    let mut dims: Vec<usize> = (0..spec.dimension).collect();
    dims.shuffle(rng);
    let mut next = dims.into_iter();
    let plants = (0..spec.n_categories)
        .map(|_| {
            (0..spec.plants_per_category)
                .map(|_| {
                    let mut items: Vec<Item> = next.by_ref().take(spec.plant_size).map(|d| d as Item + 1).collect();
                    items.sort_unstable();
                    items
                })
                .collect()
        })
        .collect();
    PlantLog {
        categories: (0..spec.n_categories).map(SynthSpec::category_name).collect(),
        plants,
    }
}

/// Draws one patch feature into `out`.
fn draw_feature(spec: &SynthSpec, plants: &[Vec<Item>], rng: &mut ChaCha8Rng, out: &mut [f32]) {
    out.fill(0.0);
    for d in sample(rng, spec.dimension, spec.noise_active) {
        out[d] = spec.noise_ceiling * (1.0 - rng.random::<f32>());
    }
    if !plants.is_empty() && rng.random::<f64>() < spec.plant_probability {
        let plant = &plants[rng.random_range(0..plants.len())];
        for &item in plant {
            out[item as usize - 1] = spec.plant_magnitude + spec.plant_jitter * rng.random::<f32>();
        }
    }
}

/// Visits every patch of one split in category, image, scale, patch order.
fn for_each_patch(
    spec: &SynthSpec,
    plants: &PlantLog,
    split: Split,
    rng: &mut ChaCha8Rng,
    mut visit: impl FnMut(usize, usize, BBox, u8, &[f32]) -> Result<(), SynthError>,
) -> Result<(), SynthError> {
    let images = match split {
        Split::Train => spec.train_images_per_category,
        Split::Test => spec.test_images_per_category,
    };
    let mut feature = vec![0.0f32; spec.dimension];
    for c in 0..spec.n_categories {
        for i in 0..images {
            for s in 0..spec.n_scales {
                let size = (spec.patch_size >> s).max(1);
                for _ in 0..spec.patches_per_image {
                    let x = rng.random_range(0..=spec.image_size - size);
                    let y = rng.random_range(0..=spec.image_size - size);
                    draw_feature(spec, &plants.plants[c], rng, &mut feature);
                    visit(c, i, BBox::new(x, y, size, size), s as u8, &feature)?;
                }
            }
        }
    }
    Ok(())
}

fn empty_set(spec: &SynthSpec, split: Split) -> Result<FeatureSet, SynthError> {
    let mut set = FeatureSet::new(spec.dimension, (0..spec.n_categories).map(SynthSpec::category_name).collect());
    let images = match split {
        Split::Train => spec.train_images_per_category,
        Split::Test => spec.test_images_per_category,
    };
    for c in 0..spec.n_categories {
        for i in 0..images {
            set.set_image_label(SynthSpec::image_id(c, split, i), c)?;
        }
    }
    Ok(set)
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthOutput, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let plants = draw_plants(spec, &mut rng);
    let mut sets = Vec::with_capacity(2);
    for split in [Split::Train, Split::Test] {
        let mut set = empty_set(spec, split)?;
        for_each_patch(spec, &plants, split, &mut rng, |c, i, bbox, scale, f| {
            set.push(PatchRecord {
                image_id: SynthSpec::image_id(c, split, i),
                bbox,
                scale_index: scale,
                feature: f.to_vec(),
            })?;
            Ok(())
        })?;
        sets.push(set);
    }
    let test = sets.pop().expect("two splits");
    let train = sets.pop().expect("two splits");
    Ok(SynthOutput { train, test, plants })
}

/// Writes `train.mdpm`, `test.mdpm` (with manifests) and `plants.json`.
pub fn write_synthetic(output: &SynthOutput, dir: &Path) -> Result<(), SynthError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    output.train.save(dir.join("train.mdpm"))?;
    output.test.save(dir.join("test.mdpm"))?;
    let plants = dir.join("plants.json");
    let json = serde_json::to_string_pretty(&output.plants).expect("plant log serializes");
    fs::write(&plants, json).map_err(io(&plants))
}

/// Training-split transactions for one target category, generated without
/// storing features. Equivalent to generating the training set and
/// building its labeled database, for any size of dataset.
pub fn synthetic_database(spec: &SynthSpec, target: usize, k: usize) -> Result<(TransactionDatabase, PlantLog), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let plants = draw_plants(spec, &mut rng);
    let mut db = TransactionDatabase::new(spec.dimension, k);
    let mut record = 0u32;
    for_each_patch(spec, &plants, Split::Train, &mut rng, |c, i, _, _, f| {
        let t = make_transaction(f, k, c == target, spec.dimension)?;
        let image = (c * spec.train_images_per_category + i) as u32;
        db.push(&t, PatchRef::new(0, record), ImageKey { source: 0, image })?;
        record += 1;
        Ok(())
    })?;
    Ok((db, plants))
}
