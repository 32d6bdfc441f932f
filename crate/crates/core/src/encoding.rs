//! Element selection and spatial-pyramid image encoding.
//!
//! Every image becomes a vector of `|bank| × 5` values: for each detector,
//! the max patch score over the whole image and over each 2×2 quadrant
//! (`[whole, TL, TR, BL, BR]`). Patches are assigned to quadrants by their
//! bbox center. Per-scale vectors are max-pooled across scales.

use std::collections::{BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::LdaDetector;
use crate::elements::ElementId;
use crate::featurestore::{BBox, FeatureSet, FormatError, ImageKey, PatchRecord};
use crate::merging::MergedEnsemble;

pub const REGIONS: usize = 5;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("cannot select from an empty ensemble")]
    EmptyEnsemble,
    #[error("image {0:?} has no patches")]
    EmptyImage(String),
    #[error("image {image:?} has scales {found:?}, expected {expected:?}")]
    ScaleMismatch {
        image: String,
        expected: Vec<u8>,
        found: Vec<u8>,
    },
    #[error("category {category:?} has {found} detectors, expected {expected}")]
    UnequalBank {
        category: String,
        expected: usize,
        found: usize,
    },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{categories} category names for {banks} detector lists")]
    CategoryCount { categories: usize, banks: usize },
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Elements picked for one category, as indices into the ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub picked: Vec<usize>,
    pub requested: usize,
}

impl Selection {
    pub fn is_short(&self) -> bool {
        self.picked.len() < self.requested
    }
}

/// Greedy coverage selection. Each pick maximizes the number of newly
/// covered training images (ties: larger total coverage, then lower
/// element id). Once nothing adds coverage the uncovered set resets to all
/// images.
pub fn select_elements(ensemble: &MergedEnsemble, n_per_class: usize) -> Result<Selection, EncodeError> {
    if ensemble.is_empty() {
        return Err(EncodeError::EmptyEnsemble);
    }
    let universe: HashSet<ImageKey> = ensemble
        .elements
        .iter()
        .flat_map(|e| e.covered_images.iter().copied())
        .collect();
    let mut uncovered = universe.clone();
    let mut remaining: Vec<usize> = (0..ensemble.len()).collect();
    let mut picked = Vec::with_capacity(n_per_class.min(ensemble.len()));
    while picked.len() < n_per_class && !remaining.is_empty() {
        let mut best = best_gain(ensemble, &remaining, &uncovered);
        if best.2 == 0 && uncovered.len() < universe.len() {
            uncovered = universe.clone();
            best = best_gain(ensemble, &remaining, &uncovered);
        }
        let (pos, i, _) = best;
        for k in &ensemble.elements[i].covered_images {
            uncovered.remove(k);
        }
        remaining.remove(pos);
        picked.push(i);
    }
    if picked.len() < n_per_class {
        log::warn!("only {} elements available, {} requested", picked.len(), n_per_class);
    }
    Ok(Selection {
        picked,
        requested: n_per_class,
    })
}

/// `(position in remaining, element index, gain)` of the best next pick.
fn best_gain(e: &MergedEnsemble, remaining: &[usize], uncovered: &HashSet<ImageKey>) -> (usize, usize, usize) {
    remaining
        .iter()
        .enumerate()
        .map(|(pos, &i)| {
            let gain = e.elements[i].covered_images.iter().filter(|k| uncovered.contains(k)).count();
            (pos, i, gain)
        })
        .max_by(|a, b| {
            let (ea, eb) = (&e.elements[a.1], &e.elements[b.1]);
            a.2.cmp(&b.2)
                .then(ea.coverage().cmp(&eb.coverage()))
                .then(eb.element_id.cmp(&ea.element_id))
        })
        .expect("remaining is nonempty")
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub category: usize,
    pub element_id: ElementId,
    pub detector: LdaDetector,
}

/// Detectors stacked across categories, the same number per category.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorBank {
    categories: Vec<String>,
    n_per_class: usize,
    entries: Vec<BankEntry>,
}

/// On-disk description of a bank: element ids per category. The weights
/// live in the per-category detector files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    pub categories: Vec<String>,
    pub n_per_class: usize,
    pub element_ids: Vec<Vec<ElementId>>,
}

impl DetectorBank {
    pub fn new(categories: Vec<String>, per_category: Vec<Vec<(ElementId, LdaDetector)>>) -> Result<Self, EncodeError> {
        if categories.len() != per_category.len() {
            return Err(EncodeError::CategoryCount {
                categories: categories.len(),
                banks: per_category.len(),
            });
        }
        let n = per_category.first().map_or(0, Vec::len);
        let mut dimension = None;
        let mut entries = Vec::with_capacity(n * categories.len());
        for (c, list) in per_category.into_iter().enumerate() {
            if list.len() != n {
                return Err(EncodeError::UnequalBank {
                    category: categories[c].clone(),
                    expected: n,
                    found: list.len(),
                });
            }
            for (element_id, detector) in list {
                let d = *dimension.get_or_insert(detector.dimension());
                if detector.dimension() != d {
                    return Err(EncodeError::DimensionMismatch {
                        expected: d,
                        found: detector.dimension(),
                    });
                }
                entries.push(BankEntry {
                    category: c,
                    element_id,
                    detector,
                });
            }
        }
        Ok(Self {
            categories,
            n_per_class: n,
            entries,
        })
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn n_per_class(&self) -> usize {
        self.n_per_class
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dimension(&self) -> Option<usize> {
        self.entries.first().map(|e| e.detector.dimension())
    }

    pub fn encoding_len(&self) -> usize {
        self.len() * REGIONS
    }

    pub fn manifest(&self) -> BankManifest {
        let mut element_ids = vec![Vec::with_capacity(self.n_per_class); self.categories.len()];
        for e in &self.entries {
            element_ids[e.category].push(e.element_id);
        }
        BankManifest {
            categories: self.categories.clone(),
            n_per_class: self.n_per_class,
            element_ids,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodeOptions {
    /// Value of a region no patch center falls in. Never exceeds the
    /// whole-image value of the same detector and scale.
    pub empty_region_value: f64,
    /// Scale indices every image must have, if set.
    pub expected_scales: Option<Vec<u8>>,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            empty_region_value: 0.0,
            expected_scales: None,
        }
    }
}

/// Quadrant (1..=4) of a bbox center within a `width × height` image.
pub fn quadrant(bbox: &BBox, width: f64, height: f64) -> usize {
    let (cx, cy) = bbox.center();
    let right = cx >= width / 2.0;
    let bottom = cy >= height / 2.0;
    1 + usize::from(right) + 2 * usize::from(bottom)
}

/// Image extent implied by its patches: the furthest bbox edge on each axis.
pub fn image_extent(patches: &[&PatchRecord]) -> (f64, f64) {
    patches.iter().fold((0.0, 0.0), |(w, h), p| {
        (
            w.max(p.bbox.x as f64 + p.bbox.w as f64),
            h.max(p.bbox.y as f64 + p.bbox.h as f64),
        )
    })
}

/// Encodes one image from all of its patches.
pub fn encode_image(
    image_id: &str,
    patches: &[&PatchRecord],
    bank: &DetectorBank,
    options: &EncodeOptions,
) -> Result<Vec<f64>, EncodeError> {
    if patches.is_empty() {
        return Err(EncodeError::EmptyImage(image_id.to_owned()));
    }
    if let Some(d) = bank.dimension() {
        if let Some(p) = patches.iter().find(|p| p.feature.len() != d) {
            return Err(EncodeError::DimensionMismatch {
                expected: d,
                found: p.feature.len(),
            });
        }
    }
    let scales: BTreeSet<u8> = patches.iter().map(|p| p.scale_index).collect();
    if let Some(expected) = &options.expected_scales {
        let expected_set: BTreeSet<u8> = expected.iter().copied().collect();
        if expected_set != scales {
            return Err(EncodeError::ScaleMismatch {
                image: image_id.to_owned(),
                expected: expected_set.into_iter().collect(),
                found: scales.into_iter().collect(),
            });
        }
    }
    let (width, height) = image_extent(patches);
    let regions: Vec<usize> = patches.iter().map(|p| quadrant(&p.bbox, width, height)).collect();

    let n = bank.len();
    let mut out = vec![f64::NEG_INFINITY; n * REGIONS];
    let mut per_scale = vec![f64::NEG_INFINITY; n * REGIONS];
    for &s in &scales {
        per_scale.fill(f64::NEG_INFINITY);
        for (p, &q) in patches.iter().zip(&regions) {
            if p.scale_index != s {
                continue;
            }
            for (d, entry) in bank.entries().iter().enumerate() {
                let score = entry.detector.score(&p.feature);
                let cell = &mut per_scale[d * REGIONS..(d + 1) * REGIONS];
                cell[0] = cell[0].max(score);
                cell[q] = cell[q].max(score);
            }
        }
        for (cell, acc) in per_scale.chunks(REGIONS).zip(out.chunks_mut(REGIONS)) {
            let whole = cell[0];
            for r in 0..REGIONS {
                let v = if cell[r] == f64::NEG_INFINITY {
                    options.empty_region_value.min(whole)
                } else {
                    cell[r]
                };
                acc[r] = acc[r].max(v);
            }
        }
    }
    Ok(out)
}

/// Encodes every image of a feature set. The result has one record per
/// image, in sorted image-id order, with the image extent as its bbox.
pub fn encode_feature_set(set: &FeatureSet, bank: &DetectorBank, options: &EncodeOptions) -> Result<FeatureSet, EncodeError> {
    let by_image = set.records_by_image();
    let ids = set.image_ids();
    let encoded: Vec<(Vec<f64>, (f64, f64))> = by_image
        .par_iter()
        .zip(ids.par_iter())
        .map(|(records, id)| {
            let patches: Vec<&PatchRecord> = records.iter().map(|&r| &set.records()[r]).collect();
            let v = encode_image(id, &patches, bank, options)?;
            Ok((v, image_extent(&patches)))
        })
        .collect::<Result<_, EncodeError>>()?;
    let mut out = FeatureSet::new(bank.encoding_len(), set.category_names().to_vec());
    for (id, (v, (w, h))) in ids.iter().zip(encoded) {
        let category = set.image_labels()[*id];
        out.set_image_label(*id, category)?;
        out.push_signed(PatchRecord {
            image_id: (*id).to_owned(),
            bbox: BBox::new(0, 0, w as u32, h as u32),
            scale_index: 0,
            feature: v.iter().map(|&x| x as f32).collect(),
        })?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elements::VisualElement;
    use crate::miner::Pattern;
    use proptest::prelude::*;

    fn merged(cover: &[&[u32]]) -> MergedEnsemble {
        let mut e = MergedEnsemble::default();
        for (i, c) in cover.iter().enumerate() {
            e.elements.push(VisualElement {
                element_id: ElementId(i as u32),
                pattern: Pattern::new(vec![1, 2], 0.1, 0.9),
                members: vec![],
                covered_images: c.iter().map(|&image| ImageKey { source: 0, image }).collect(),
            });
            e.detectors.push(LdaDetector { weights: vec![] });
            e.provenance.push(vec![ElementId(i as u32)]);
        }
        e
    }

    #[test]
    fn select_single() {
        let s = select_elements(&merged(&[&[0]]), 1).unwrap();
        assert_eq!(s.picked, vec![0]);
        assert!(!s.is_short());
    }

    #[test]
    fn select_greedy_cover() {
        let s = select_elements(&merged(&[&[0, 1], &[1], &[2]]), 2).unwrap();
        assert_eq!(s.picked, vec![0, 2]);
    }

    #[test]
    fn select_resets_after_full_cover() {
        let s = select_elements(&merged(&[&[0, 1], &[1], &[2], &[0]]), 4).unwrap();
        assert_eq!(s.picked, vec![0, 2, 1, 3]);
        let short = select_elements(&merged(&[&[0], &[1]]), 5).unwrap();
        assert_eq!(short.picked, vec![0, 1]);
        assert!(short.is_short());
        assert!(matches!(select_elements(&merged(&[]), 3), Err(EncodeError::EmptyEnsemble)));
    }

    fn patch(x: u32, y: u32, scale: u8, feature: Vec<f32>) -> PatchRecord {
        PatchRecord {
            image_id: "im".into(),
            bbox: BBox::new(x, y, 10, 10),
            scale_index: scale,
            feature,
        }
    }

    fn bank(weights: Vec<Vec<f64>>) -> DetectorBank {
        let list = weights
            .into_iter()
            .enumerate()
            .map(|(i, w)| (ElementId(i as u32), LdaDetector { weights: w }))
            .collect();
        DetectorBank::new(vec!["c".into()], vec![list]).unwrap()
    }

    #[test]
    fn top_left_example() {
        let b = bank(vec![vec![1.0, 0.0]]);
        let mut ps = vec![
            patch(0, 0, 0, vec![1.0, 5.0]),
            patch(5, 5, 0, vec![3.0, 5.0]),
            patch(2, 2, 0, vec![2.0, 5.0]),
        ];
        // Far corner patch fixes the image extent at 100×100 but has score 0.
        ps.push(patch(90, 90, 0, vec![0.0, 1.0]));
        let refs: Vec<&PatchRecord> = ps.iter().collect();
        let v = encode_image("im", &refs, &b, &EncodeOptions::default()).unwrap();
        assert_eq!(v, vec![3.0, 3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn repeated_scale_is_idempotent() {
        let b = bank(vec![vec![1.0, -1.0], vec![0.5, 2.0]]);
        let ps = vec![patch(0, 0, 0, vec![1.0, 2.0]), patch(60, 70, 0, vec![4.0, 1.0])];
        let mut both = ps.clone();
        both.extend(ps.iter().cloned().map(|mut p| {
            p.scale_index = 1;
            p
        }));
        let one: Vec<&PatchRecord> = ps.iter().collect();
        let two: Vec<&PatchRecord> = both.iter().collect();
        let o = EncodeOptions::default();
        assert_eq!(encode_image("im", &one, &b, &o).unwrap(), encode_image("im", &two, &b, &o).unwrap());
    }

    #[test]
    fn negative_scores_keep_nesting() {
        let b = bank(vec![vec![-1.0]]);
        let ps = vec![patch(0, 0, 0, vec![2.0]), patch(0, 90, 0, vec![1.0])];
        let refs: Vec<&PatchRecord> = ps.iter().collect();
        let v = encode_image("im", &refs, &b, &EncodeOptions::default()).unwrap();
        assert_eq!(v, vec![-1.0, -1.0, -2.0, -1.0, -1.0]);
    }

    #[test]
    fn encode_errors() {
        let b = bank(vec![vec![1.0]]);
        assert!(matches!(
            encode_image("im", &[], &b, &EncodeOptions::default()),
            Err(EncodeError::EmptyImage(_))
        ));
        let p = patch(0, 0, 1, vec![1.0]);
        let opts = EncodeOptions {
            expected_scales: Some(vec![0, 1]),
            ..Default::default()
        };
        assert!(matches!(encode_image("im", &[&p], &b, &opts), Err(EncodeError::ScaleMismatch { .. })));
        let wrong = patch(0, 0, 0, vec![1.0, 2.0]);
        assert!(matches!(
            encode_image("im", &[&wrong], &b, &EncodeOptions::default()),
            Err(EncodeError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn bank_requires_equal_counts() {
        let d = |i| (ElementId(i), LdaDetector { weights: vec![1.0] });
        let err = DetectorBank::new(vec!["a".into(), "b".into()], vec![vec![d(0), d(1)], vec![d(2)]]);
        assert!(matches!(err, Err(EncodeError::UnequalBank { found: 1, .. })));
        let ok = DetectorBank::new(vec!["a".into(), "b".into()], vec![vec![d(0)], vec![d(2)]]).unwrap();
        assert_eq!(ok.encoding_len(), 10);
        assert_eq!(ok.manifest().element_ids, vec![vec![ElementId(0)], vec![ElementId(2)]]);
    }

    #[test]
    fn feature_set_encoding() {
        let mut s = FeatureSet::new(1, vec!["a".into(), "b".into()]);
        s.set_image_label("x", 1).unwrap();
        s.set_image_label("w", 0).unwrap();
        for (id, x, f) in [("x", 0, 2.0f32), ("w", 50, 1.0), ("x", 50, 3.0)] {
            s.push(PatchRecord {
                image_id: id.into(),
                bbox: BBox::new(x, 0, 50, 50),
                scale_index: 0,
                feature: vec![f],
            })
            .unwrap();
        }
        let e = encode_feature_set(&s, &bank(vec![vec![1.0]]), &EncodeOptions::default()).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e.records()[0].image_id, "w");
        assert_eq!(e.records()[0].feature, vec![1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(e.records()[1].feature, vec![3.0, 0.0, 0.0, 2.0, 3.0]);
        assert_eq!(e.category_of(1), Some(1));
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_nested(
            feats in proptest::collection::vec((0u32..200, 0u32..200, 0u8..3, proptest::collection::vec(0.0f32..5.0, 3)), 1..30),
            w in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 3), 1..4),
        ) {
            let b = bank(w);
            let ps: Vec<PatchRecord> = feats.into_iter().map(|(x, y, s, f)| patch(x, y, s, f)).collect();
            let refs: Vec<&PatchRecord> = ps.iter().collect();
            let mut rev = refs.clone();
            rev.reverse();
            let o = EncodeOptions::default();
            let v = encode_image("im", &refs, &b, &o).unwrap();
            prop_assert_eq!(&v, &encode_image("im", &rev, &b, &o).unwrap());
            prop_assert_eq!(v.len(), b.len() * REGIONS);
            for cell in v.chunks(REGIONS) {
                for r in 1..REGIONS {
                    prop_assert!(cell[0] >= cell[r]);
                }
            }
        }
    }
}
