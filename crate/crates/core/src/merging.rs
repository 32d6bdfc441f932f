//! Greedy ensemble merging of redundant visual elements.
//!
//! Each outer step seeds on the element covering the most training images,
//! trains a detector on the absorbed patches, and pulls in every remaining
//! element whose mean member score exceeds the threshold. This repeats until
//! nothing new clears the threshold. The absorbed elements then leave the
//! pool and become one merged element.
//!
//! An element's score is the mean detector response over its members. Since
//! the detector is linear, this equals the response to the member centroid,
//! so centroids are computed once up front.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::{train_lda_from_mean, BackgroundStats, DetectorError, LdaDetector};
use crate::elements::{ElementId, ElementManifest, SourceTable, VisualElement};
use crate::featurestore::{ImageKey, PatchLookup, PatchRef};

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("merging needs a nonempty pool")]
    EmptyPool,
    #[error("element {0} has no member patches")]
    EmptyElement(ElementId),
    #[error("invalid merge config: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub threshold: f64,
    pub max_rounds: usize,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            threshold: 150.0,
            max_rounds: 10,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<(), MergeError> {
        if self.max_rounds == 0 {
            return Err(MergeError::InvalidConfig {
                field: "max_rounds",
                reason: "must be at least 1".into(),
            });
        }
        if self.threshold.is_nan() {
            return Err(MergeError::InvalidConfig {
                field: "threshold",
                reason: "must be a number".into(),
            });
        }
        Ok(())
    }
}

/// Result of one seeded merging step over a pool.
#[derive(Clone, Debug)]
pub struct MergeStep {
    /// Pool indices, seed first, then in absorption order.
    pub absorbed: Vec<usize>,
    pub detector: LdaDetector,
    /// Train-and-score rounds run.
    pub rounds: usize,
    /// The round cap stopped the loop while elements were still joining.
    pub exhausted: bool,
}

#[derive(Clone, Debug, Default)]
pub struct MergedEnsemble {
    pub elements: Vec<VisualElement>,
    pub detectors: Vec<LdaDetector>,
    /// Source element ids absorbed into each merged element, seed first.
    pub provenance: Vec<Vec<ElementId>>,
    /// Merged elements whose inner loop hit the round cap.
    pub exhausted: Vec<ElementId>,
}

impl MergedEnsemble {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn manifests(&self, sources: &SourceTable) -> Vec<ElementManifest> {
        self.elements
            .iter()
            .zip(&self.provenance)
            .map(|(e, p)| ElementManifest::new(e, p, sources))
            .collect()
    }
}

/// Mean member feature of every element.
pub fn element_centroids<L>(elements: &[VisualElement], features: &L) -> Result<Vec<Vec<f64>>, MergeError>
where
    L: PatchLookup + Sync + ?Sized,
{
    elements
        .par_iter()
        .map(|e| {
            let first = *e.members.first().ok_or(MergeError::EmptyElement(e.element_id))?;
            let d = features
                .feature(first)
                .ok_or(DetectorError::MissingPatch(first))?
                .len();
            let mut c = vec![0.0f64; d];
            for &m in &e.members {
                let x = features.feature(m).ok_or(DetectorError::MissingPatch(m))?;
                for (a, &v) in c.iter_mut().zip(x) {
                    *a += v as f64;
                }
            }
            let n = e.members.len() as f64;
            c.iter_mut().for_each(|a| *a /= n);
            Ok(c)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pick_seed(elements: &[VisualElement], active: &[usize]) -> usize {
    *active
        .iter()
        .max_by(|&&a, &&b| {
            let (ea, eb) = (&elements[a], &elements[b]);
            ea.coverage()
                .cmp(&eb.coverage())
                .then(ea.members.len().cmp(&eb.members.len()))
                .then(eb.element_id.cmp(&ea.element_id))
        })
        .expect("active pool is nonempty")
}

struct Accumulator {
    seen: HashSet<PatchRef>,
    sum: Vec<f64>,
}

impl Accumulator {
    fn add<L: PatchLookup + ?Sized>(&mut self, element: &VisualElement, features: &L) -> Result<(), MergeError> {
        for &m in &element.members {
            if self.seen.insert(m) {
                let x = features.feature(m).ok_or(DetectorError::MissingPatch(m))?;
                for (a, &v) in self.sum.iter_mut().zip(x) {
                    *a += v as f64;
                }
            }
        }
        Ok(())
    }

    fn train(&self, stats: &BackgroundStats) -> Result<LdaDetector, MergeError> {
        let n = self.seen.len() as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        Ok(train_lda_from_mean(&mean, stats)?)
    }
}

fn merge_step<L>(
    elements: &[VisualElement],
    centroids: &[Vec<f64>],
    active: &[usize],
    features: &L,
    stats: &BackgroundStats,
    config: &MergeConfig,
) -> Result<MergeStep, MergeError>
where
    L: PatchLookup + Sync + ?Sized,
{
    let seed = pick_seed(elements, active);
    let mut acc = Accumulator {
        seen: HashSet::new(),
        sum: vec![0.0; stats.dimension()],
    };
    acc.add(&elements[seed], features)?;
    let mut absorbed = vec![seed];
    let mut taken: HashSet<usize> = HashSet::from([seed]);
    let mut rounds = 0;
    loop {
        let detector = acc.train(stats)?;
        rounds += 1;
        let joined: Vec<usize> = active
            .par_iter()
            .copied()
            .filter(|i| !taken.contains(i) && dot(&detector.weights, &centroids[*i]) > config.threshold)
            .collect();
        if joined.is_empty() {
            return Ok(MergeStep {
                absorbed,
                detector,
                rounds,
                exhausted: false,
            });
        }
        for &i in &joined {
            acc.add(&elements[i], features)?;
            taken.insert(i);
        }
        absorbed.extend(joined);
        if rounds == config.max_rounds {
            log::warn!(
                "merging seeded on element {} hit the {}-round cap with {} elements absorbed",
                elements[seed].element_id,
                config.max_rounds,
                absorbed.len()
            );
            return Ok(MergeStep {
                absorbed,
                detector: acc.train(stats)?,
                rounds,
                exhausted: true,
            });
        }
    }
}

/// One seeded merging step over the whole pool.
pub fn merging_train<L>(
    pool: &[VisualElement],
    features: &L,
    stats: &BackgroundStats,
    config: &MergeConfig,
) -> Result<MergeStep, MergeError>
where
    L: PatchLookup + Sync + ?Sized,
{
    config.validate()?;
    if pool.is_empty() {
        return Err(MergeError::EmptyPool);
    }
    let centroids = element_centroids(pool, features)?;
    let active: Vec<usize> = (0..pool.len()).collect();
    merge_step(pool, &centroids, &active, features, stats, config)
}

fn union_element(elements: &[VisualElement], absorbed: &[usize]) -> VisualElement {
    let seed = &elements[absorbed[0]];
    let mut members: Vec<PatchRef> = absorbed.iter().flat_map(|&i| elements[i].members.iter().copied()).collect();
    members.sort_unstable();
    members.dedup();
    let mut covered: Vec<ImageKey> = absorbed
        .iter()
        .flat_map(|&i| elements[i].covered_images.iter().copied())
        .collect();
    covered.sort_unstable();
    covered.dedup();
    VisualElement {
        element_id: seed.element_id,
        pattern: seed.pattern.clone(),
        members,
        covered_images: covered,
    }
}

/// Merges the pool until every element belongs to exactly one merged
/// element. Each merged element keeps its seed's id and pattern.
pub fn ensemble_merge<L>(
    elements: &[VisualElement],
    features: &L,
    stats: &BackgroundStats,
    config: &MergeConfig,
) -> Result<MergedEnsemble, MergeError>
where
    L: PatchLookup + Sync + ?Sized,
{
    config.validate()?;
    let centroids = element_centroids(elements, features)?;
    let mut active: Vec<usize> = (0..elements.len()).collect();
    let mut out = MergedEnsemble::default();
    while !active.is_empty() {
        let step = merge_step(elements, &centroids, &active, features, stats, config)?;
        let merged = union_element(elements, &step.absorbed);
        if step.exhausted {
            out.exhausted.push(merged.element_id);
        }
        out.provenance
            .push(step.absorbed.iter().map(|&i| elements[i].element_id).collect());
        out.elements.push(merged);
        out.detectors.push(step.detector);
        let gone: HashSet<usize> = step.absorbed.into_iter().collect();
        active.retain(|i| !gone.contains(i));
    }
    Ok(out)
}
