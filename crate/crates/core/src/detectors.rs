//! Shared background statistics and closed-form LDA detectors.
//!
//! The background mean and covariance are estimated once over
//! natural-world patches. A detector for any positive set is then a single
//! solve against the cached Cholesky factor of `Σ + λI`:
//! `w = (Σ + λI)⁻¹ (μ_pos − μ₀)`. Scores are bias-free dot products.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elements::{ElementId, VisualElement};
use crate::featurestore::{decode_records, encode_records, BBox, FormatError, PatchLookup, PatchRecord, PatchRef};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("background statistics need at least 2 samples, got {0}")]
    NotEnoughSamples(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("dimension {dimension} exceeds the full-covariance cap of {cap}")]
    TooLarge { dimension: usize, cap: usize },
    #[error("Σ + λI is not positive definite at λ = {lambda}; try λ ≥ {suggested}")]
    Factorization { lambda: f64, suggested: f64 },
    #[error("detector training needs at least one positive sample")]
    NoPositives,
    #[error("patch {0:?} not found in the feature sources")]
    MissingPatch(PatchRef),
    #[error("detector record {0:?} is not an element id")]
    BadElementId(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Ridge added to the covariance diagonal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ridge {
    /// Absolute λ.
    Fixed(f64),
    /// λ = factor × trace(Σ) / D.
    TraceScaled(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::TraceScaled(0.01)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundOptions {
    pub ridge: Ridge,
    /// Largest D for which a full covariance is built.
    pub max_dimension: usize,
}

impl Default for BackgroundOptions {
    fn default() -> Self {
        Self {
            ridge: Ridge::default(),
            max_dimension: 4096,
        }
    }
}

/// Natural-world mean, covariance and the factorization of `Σ + λI`.
#[derive(Clone, Debug)]
pub struct BackgroundStats {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    lambda: f64,
    factor: Cholesky<f64, Dyn>,
}

// Pivots below this fraction of the largest diagonal entry are treated as
// a singular matrix.
const PIVOT_TOLERANCE: f64 = 1e-12;

impl BackgroundStats {
    /// Builds stats from an explicit mean and covariance.
    pub fn from_parts(mean: Vec<f64>, covariance: DMatrix<f64>, lambda: f64) -> Result<Self, DetectorError> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(DetectorError::DimensionMismatch {
                expected: d,
                found: covariance.nrows(),
            });
        }
        let mut regularized = covariance.clone();
        for i in 0..d {
            regularized[(i, i)] += lambda;
        }
        let max_diag = (0..d).map(|i| regularized[(i, i)]).fold(0.0f64, f64::max);
        let suggested = {
            let trace: f64 = (0..d).map(|i| covariance[(i, i)]).sum();
            let base = if trace > 0.0 { 0.01 * trace / d.max(1) as f64 } else { 1e-6 };
            if lambda >= base {
                lambda * 10.0
            } else {
                base
            }
        };
        let fail = DetectorError::Factorization { lambda, suggested };
        let factor = Cholesky::new(regularized).ok_or_else(|| fail)?;
        let l = factor.l_dirty();
        let min_pivot = (0..d).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
        if d > 0 && !(min_pivot > PIVOT_TOLERANCE * max_diag) {
            return Err(DetectorError::Factorization { lambda, suggested });
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            covariance,
            lambda,
            factor,
        })
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `(Σ + λI)⁻¹ rhs`.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        self.factor.solve(&DVector::from_column_slice(rhs)).data.into()
    }
}

/// Sample mean and covariance (denominator `n − 1`) of `samples`, then the
/// ridge and factorization.
pub fn fit_background(samples: &[&[f32]], options: &BackgroundOptions) -> Result<BackgroundStats, DetectorError> {
    let n = samples.len();
    if n < 2 {
        return Err(DetectorError::NotEnoughSamples(n));
    }
    let d = samples[0].len();
    if d > options.max_dimension {
        return Err(DetectorError::TooLarge {
            dimension: d,
            cap: options.max_dimension,
        });
    }
    let mut mean = vec![0.0f64; d];
    for s in samples {
        if s.len() != d {
            return Err(DetectorError::DimensionMismatch {
                expected: d,
                found: s.len(),
            });
        }
        for (m, &v) in mean.iter_mut().zip(s.iter()) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    const CHUNK: usize = 512;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for rows in samples.chunks(CHUNK) {
        let centered = DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c] as f64 - mean[c]);
        cov.gemm_tr(1.0, &centered, &centered, 1.0);
    }
    let denom = (n - 1) as f64;
    for c in 0..d {
        for r in c..d {
            let v = cov[(r, c)] / denom;
            cov[(r, c)] = v;
            cov[(c, r)] = v;
        }
    }
    let lambda = match options.ridge {
        Ridge::Fixed(l) => l,
        Ridge::TraceScaled(f) => f * cov.trace() / d.max(1) as f64,
    };
    BackgroundStats::from_parts(mean, cov, lambda)
}

/// A linear element detector.
#[derive(Clone, Debug, PartialEq)]
pub struct LdaDetector {
    pub weights: Vec<f64>,
}

impl LdaDetector {
    pub fn dimension(&self) -> usize {
        self.weights.len()
    }

    pub fn score(&self, x: &[f32]) -> f64 {
        self.weights.iter().zip(x).map(|(&w, &v)| w * v as f64).sum()
    }

    /// Dot product with an `f64` vector, e.g. an element centroid.
    pub fn score_f64(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(&w, &v)| w * v).sum()
    }
}

/// Detector from a precomputed positive mean.
pub fn train_lda_from_mean(positive_mean: &[f64], stats: &BackgroundStats) -> Result<LdaDetector, DetectorError> {
    if positive_mean.len() != stats.dimension() {
        return Err(DetectorError::DimensionMismatch {
            expected: stats.dimension(),
            found: positive_mean.len(),
        });
    }
    let diff: Vec<f64> = positive_mean.iter().zip(stats.mean()).map(|(p, m)| p - m).collect();
    Ok(LdaDetector {
        weights: stats.solve(&diff),
    })
}

pub fn train_lda(positives: &[&[f32]], stats: &BackgroundStats) -> Result<LdaDetector, DetectorError> {
    if positives.is_empty() {
        return Err(DetectorError::NoPositives);
    }
    let d = stats.dimension();
    let mut mean = vec![0.0f64; d];
    for p in positives {
        if p.len() != d {
            return Err(DetectorError::DimensionMismatch {
                expected: d,
                found: p.len(),
            });
        }
        for (m, &v) in mean.iter_mut().zip(p.iter()) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= positives.len() as f64;
    }
    train_lda_from_mean(&mean, stats)
}

pub fn score_patch(detector: &LdaDetector, x: &[f32]) -> f64 {
    detector.score(x)
}

/// Mean detector score over an element's member patches.
pub fn score_element<L: PatchLookup + ?Sized>(
    detector: &LdaDetector,
    element: &VisualElement,
    features: &L,
) -> Result<f64, DetectorError> {
    let mut total = 0.0;
    for &m in &element.members {
        let x = features.feature(m).ok_or(DetectorError::MissingPatch(m))?;
        total += detector.score(x);
    }
    Ok(total / element.members.len() as f64)
}

/// Writes detectors in the feature-file envelope, one record per element
/// (record id = element id, features = weights as `f32`).
pub fn save_detectors(path: &Path, detectors: &[(ElementId, &LdaDetector)]) -> Result<(), DetectorError> {
    let dimension = detectors.first().map_or(0, |(_, d)| d.dimension());
    let records: Vec<PatchRecord> = detectors
        .iter()
        .map(|(id, d)| PatchRecord {
            image_id: id.to_string(),
            bbox: BBox::default(),
            scale_index: 0,
            feature: d.weights.iter().map(|&w| w as f32).collect(),
        })
        .collect();
    let io = |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    encode_records(&mut w, dimension, &records).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load_detectors(path: &Path) -> Result<Vec<(ElementId, LdaDetector)>, DetectorError> {
    let bytes = fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (_, records) = decode_records(&bytes, false)?;
    records
        .into_iter()
        .map(|r| {
            let id = r
                .image_id
                .parse::<u32>()
                .map_err(|_| DetectorError::BadElementId(r.image_id.clone()))?;
            Ok((
                ElementId(id),
                LdaDetector {
                    weights: r.feature.iter().map(|&w| w as f64).collect(),
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurestore::ImageKey;
    use crate::miner::Pattern;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_sample_background() {
        let a = [0.0f32, 0.0];
        let b = [2.0f32, 2.0];
        let opts = BackgroundOptions {
            ridge: Ridge::Fixed(0.5),
            ..Default::default()
        };
        let s = fit_background(&[&a, &b], &opts).unwrap();
        assert_eq!(s.mean(), &[1.0, 1.0]);
        assert_eq!(s.covariance(), &DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 2.0]));
    }

    #[test]
    fn singular_covariance_without_ridge_fails() {
        let a = [0.0f32, 0.0];
        let b = [2.0f32, 2.0];
        let opts = BackgroundOptions {
            ridge: Ridge::Fixed(0.0),
            ..Default::default()
        };
        match fit_background(&[&a, &b], &opts) {
            Err(DetectorError::Factorization { suggested, .. }) => assert!(suggested > 0.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn background_rejects_bad_input() {
        let a = [1.0f32; 3];
        assert!(matches!(
            fit_background(&[&a], &BackgroundOptions::default()),
            Err(DetectorError::NotEnoughSamples(1))
        ));
        let opts = BackgroundOptions {
            max_dimension: 2,
            ..Default::default()
        };
        assert!(matches!(fit_background(&[&a, &a], &opts), Err(DetectorError::TooLarge { .. })));
    }

    #[test]
    fn covariance_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d) = (500, 32);
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random::<f32>() * 3.0).collect())
            .collect();
        let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
        let s = fit_background(&refs, &BackgroundOptions::default()).unwrap();
        let mut mean = vec![0.0f64; d];
        for r in &rows {
            for j in 0..d {
                mean[j] += r[j] as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for a in 0..d {
            for b in 0..d {
                let mut acc = 0.0;
                for r in &rows {
                    acc += (r[a] as f64 - mean[a]) * (r[b] as f64 - mean[b]);
                }
                let expect = acc / (n - 1) as f64;
                let got = s.covariance()[(a, b)];
                assert!((got - expect).abs() <= 1e-10 * expect.abs().max(1e-300), "{a},{b}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn identity_covariance_detector_is_mean_difference() {
        let stats = BackgroundStats::from_parts(vec![1.0, 0.5, 0.0], DMatrix::identity(3, 3), 0.0).unwrap();
        let p1 = [3.0f32, 1.0, 2.0];
        let p2 = [1.0f32, 2.0, 0.0];
        let d = train_lda(&[&p1, &p2], &stats).unwrap();
        assert_eq!(d.weights, vec![1.0, 1.0, 1.0]);
        let same = [1.0f32, 0.5, 0.0];
        assert_eq!(train_lda(&[&same], &stats).unwrap().weights, vec![0.0, 0.0, 0.0]);
        assert!(matches!(train_lda(&[], &stats), Err(DetectorError::NoPositives)));
        assert!(matches!(train_lda(&[&[1.0f32][..]], &stats), Err(DetectorError::DimensionMismatch { .. })));
    }

    #[test]
    fn scores() {
        let d = LdaDetector { weights: vec![1.0, 0.0] };
        assert_eq!(score_patch(&d, &[3.0, 9.0]), 3.0);
        let feats = {
            let mut s = crate::featurestore::FeatureSet::new(2, vec!["c".into()]);
            s.set_image_label("i", 0).unwrap();
            for f in [[3.0f32, 9.0], [5.0, 1.0]] {
                s.push(PatchRecord {
                    image_id: "i".into(),
                    bbox: BBox::default(),
                    scale_index: 0,
                    feature: f.to_vec(),
                })
                .unwrap();
            }
            s
        };
        let mut el = VisualElement {
            element_id: ElementId(0),
            pattern: Pattern::new(vec![1], 1.0, 1.0),
            members: vec![PatchRef::new(0, 0)],
            covered_images: vec![ImageKey { source: 0, image: 0 }],
        };
        assert_eq!(score_element(&d, &el, &feats).unwrap(), 3.0);
        el.members.push(PatchRef::new(0, 1));
        assert_eq!(score_element(&d, &el, &feats).unwrap(), 4.0);
        el.members.push(PatchRef::new(0, 7));
        assert!(matches!(score_element(&d, &el, &feats), Err(DetectorError::MissingPatch(_))));
    }

    #[test]
    fn detector_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mdpd");
        let a = LdaDetector { weights: vec![0.5, -1.25, 3.0] };
        let b = LdaDetector { weights: vec![-0.0, 2.0, 1.0] };
        save_detectors(&path, &[(ElementId(3), &a), (ElementId(17), &b)]).unwrap();
        let back = load_detectors(&path).unwrap();
        assert_eq!(back, vec![(ElementId(3), a), (ElementId(17), b)]);
    }
}
