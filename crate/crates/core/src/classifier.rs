//! One-vs-rest linear classifier on image encodings.
//!
//! Each class gets an L2-regularized squared-hinge SVM trained by dual
//! coordinate descent, with a constant bias feature. The regularization
//! constant is chosen from a grid by k-fold cross-validation. Features are
//! optionally divided by their largest absolute training value first.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("no training samples")]
    Empty,
    #[error("{samples} samples but {labels} labels")]
    LabelCount { samples: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("sample {index} has dimension {found}, expected {expected}")]
    Dimension { index: usize, expected: usize, found: usize },
    #[error("invalid classifier option: {field} {reason}")]
    InvalidOption { field: &'static str, reason: String },
    #[error("model file {path}: {reason}")]
    Model { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierOptions {
    pub c_grid: Vec<f64>,
    pub folds: usize,
    pub max_epochs: usize,
    pub tolerance: f64,
    /// Divide each feature by its largest absolute value on the training set.
    pub scale_features: bool,
    pub seed: u64,
}

impl Default for ClassifierOptions {
    fn default() -> Self {
        Self {
            c_grid: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            folds: 5,
            max_epochs: 1000,
            tolerance: 1e-3,
            scale_features: true,
            seed: 0,
        }
    }
}

impl ClassifierOptions {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |field, reason: &str| {
            Err(ClassifierError::InvalidOption {
                field,
                reason: reason.into(),
            })
        };
        if self.c_grid.is_empty() {
            return bad("c_grid", "must not be empty");
        }
        if self.c_grid.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return bad("c_grid", "values must be positive and finite");
        }
        if self.folds < 2 {
            return bad("folds", "must be at least 2");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be at least 1");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance", "must be positive");
        }
        Ok(())
    }
}

/// Per-class weight vectors; the last weight of each multiplies a constant 1.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub n_classes: usize,
    pub dimension: usize,
    pub c: f64,
    /// Mean cross-validation accuracy per grid value, in grid order.
    pub cv_accuracy: Vec<(f64, f64)>,
    /// Per-feature divisors applied before the weights, if fitted.
    pub scale: Option<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

impl LinearModel {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        match &self.scale {
            Some(s) => {
                let scaled: Vec<f64> = x.iter().zip(s).map(|(v, d)| v / d).collect();
                self.weights.iter().map(|w| decision(w, &scaled)).collect()
            }
            None => self.weights.iter().map(|w| decision(w, x)).collect(),
        }
    }

    /// Highest-scoring class; ties go to the lower index.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.scores(x))
    }
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn decision(w: &[f64], x: &[f64]) -> f64 {
    let (bias, w) = w.split_last().expect("weights include a bias");
    w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias
}

/// Scales `v` to unit L2 norm; zero vectors are left as they are.
pub fn unit_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Concatenates the parts after normalizing each to unit norm, e.g. an
/// encoding followed by a global image descriptor.
pub fn concat_normalized(parts: &[&[f64]]) -> Vec<f64> {
    let mut out = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        let start = out.len();
        out.extend_from_slice(p);
        unit_normalize(&mut out[start..]);
    }
    out
}

/// Dual coordinate descent for `min ½‖w‖² + C Σ max(0, 1 − yᵢ w·xᵢ)²` with
/// `xᵢ` extended by a trailing 1.
fn train_binary(x: &[&[f64]], y: &[f64], c: f64, options: &ClassifierOptions, seed: u64) -> Vec<f64> {
    let d = x.first().map_or(0, |v| v.len());
    let mut w = vec![0.0; d + 1];
    let diag = 0.5 / c;
    let q: Vec<f64> = x.iter().map(|v| v.iter().map(|a| a * a).sum::<f64>() + 1.0 + diag).collect();
    let mut alpha = vec![0.0; x.len()];
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..options.max_epochs {
        order.shuffle(&mut rng);
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &i in &order {
            let g = y[i] * decision(&w, x[i]) - 1.0 + diag * alpha[i];
            let pg = if alpha[i] == 0.0 { g.min(0.0) } else { g };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / q[i]).max(0.0);
                let step = (alpha[i] - old) * y[i];
                for (wj, xj) in w.iter_mut().zip(x[i].iter()) {
                    *wj += step * xj;
                }
                w[d] += step;
            }
        }
        if pg_max - pg_min < options.tolerance {
            break;
        }
    }
    w
}

fn train_ovr(x: &[&[f64]], labels: &[usize], n_classes: usize, c: f64, options: &ClassifierOptions) -> Vec<Vec<f64>> {
    (0..n_classes)
        .into_par_iter()
        .map(|k| {
            let y: Vec<f64> = labels.iter().map(|&l| if l == k { 1.0 } else { -1.0 }).collect();
            train_binary(x, &y, c, options, options.seed.wrapping_add(k as u64))
        })
        .collect()
}

fn check(x: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<usize, ClassifierError> {
    if x.is_empty() {
        return Err(ClassifierError::Empty);
    }
    if x.len() != labels.len() {
        return Err(ClassifierError::LabelCount {
            samples: x.len(),
            labels: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(ClassifierError::LabelRange {
            label,
            classes: n_classes,
        });
    }
    let d = x[0].len();
    if let Some(index) = x.iter().position(|v| v.len() != d) {
        return Err(ClassifierError::Dimension {
            index,
            expected: d,
            found: x[index].len(),
        });
    }
    Ok(d)
}

/// Trains a one-vs-rest model. When the training labels hold a single
/// class the model predicts that class for every input.
pub fn train_classifier(
    x: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    options: &ClassifierOptions,
) -> Result<LinearModel, ClassifierError> {
    options.validate()?;
    let d = check(x, labels, n_classes)?;
    let scale = options.scale_features.then(|| {
        (0..d)
            .map(|j| {
                let m = x.iter().map(|v| v[j].abs()).fold(0.0, f64::max);
                if m > 0.0 {
                    m
                } else {
                    1.0
                }
            })
            .collect::<Vec<f64>>()
    });
    let scaled: Vec<Vec<f64>>;
    let x = match &scale {
        Some(s) => {
            scaled = x.iter().map(|v| v.iter().zip(s).map(|(a, b)| a / b).collect()).collect();
            &scaled[..]
        }
        None => x,
    };
    let refs: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();

    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        let mut weights = vec![vec![0.0; d + 1]; n_classes];
        weights[first][d] = 1.0;
        return Ok(LinearModel {
            n_classes,
            dimension: d,
            c: options.c_grid[0],
            cv_accuracy: vec![],
            scale,
            weights,
        });
    }

    let folds = options.folds.min(x.len());
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(options.seed));
    let mut fold_of = vec![0; x.len()];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }

    let mut cv_accuracy = Vec::with_capacity(options.c_grid.len());
    for &c in &options.c_grid {
        let mut correct = 0usize;
        for f in 0..folds {
            let train: Vec<usize> = (0..x.len()).filter(|&i| fold_of[i] != f).collect();
            let tx: Vec<&[f64]> = train.iter().map(|&i| refs[i]).collect();
            let ty: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
            let w = train_ovr(&tx, &ty, n_classes, c, options);
            correct += (0..x.len())
                .filter(|&i| fold_of[i] == f)
                .filter(|&i| {
                    let s: Vec<f64> = w.iter().map(|wk| decision(wk, refs[i])).collect();
                    argmax(&s) == labels[i]
                })
                .count();
        }
        cv_accuracy.push((c, correct as f64 / x.len() as f64));
    }
    let best_c = cv_accuracy
        .iter()
        .fold(None::<(f64, f64)>, |best, &(c, acc)| match best {
            Some((_, a)) if a >= acc => best,
            _ => Some((c, acc)),
        })
        .expect("grid is nonempty")
        .0;
    Ok(LinearModel {
        n_classes,
        dimension: d,
        c: best_c,
        cv_accuracy,
        scale,
        weights: train_ovr(&refs, labels, n_classes, best_c, options),
    })
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    n_classes: usize,
    dimension: usize,
    c: f64,
    cv_accuracy: Vec<(f64, f64)>,
    #[serde(default)]
    scale: Option<Vec<f64>>,
    weights_file: String,
}

/// Writes `<path>` (JSON header) and `<path>` with extension `bin`
/// (little-endian `f64` weights, class-major, bias last).
pub fn save_model(model: &LinearModel, path: &Path) -> Result<(), ClassifierError> {
    let bin = path.with_extension("bin");
    let header = ModelHeader {
        n_classes: model.n_classes,
        dimension: model.dimension,
        c: model.c,
        cv_accuracy: model.cv_accuracy.clone(),
        scale: model.scale.clone(),
        weights_file: bin.file_name().unwrap_or_default().to_string_lossy().into_owned(),
    };
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(path, json).map_err(|source| ClassifierError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bytes: Vec<u8> = model.weights.iter().flatten().flat_map(|w| w.to_le_bytes()).collect();
    fs::write(&bin, bytes).map_err(|source| ClassifierError::Io { path: bin, source })
}

pub fn load_model(path: &Path) -> Result<LinearModel, ClassifierError> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| ClassifierError::Io { path: p, source }
    };
    let text = fs::read_to_string(path).map_err(io(path))?;
    let header: ModelHeader = serde_json::from_str(&text).map_err(|e| ClassifierError::Model {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let bin = path.with_file_name(&header.weights_file);
    let bytes = fs::read(&bin).map_err(io(&bin))?;
    let per_class = header.dimension + 1;
    if bytes.len() != header.n_classes * per_class * 8 {
        return Err(ClassifierError::Model {
            path: bin,
            reason: format!("expected {} weights, found {} bytes", header.n_classes * per_class, bytes.len()),
        });
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Ok(LinearModel {
        n_classes: header.n_classes,
        dimension: header.dimension,
        c: header.c,
        cv_accuracy: header.cv_accuracy,
        scale: header.scale,
        weights: flat.chunks(per_class).map(<[f64]>::to_vec).collect(),
    })
}

/// Average precision of ranking `scores` against binary `relevant` flags.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Option<f64> {
    let positives = relevant.iter().filter(|&&r| r).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if relevant[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn separable_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..60 {
            let c = i % 2;
            let center = if c == 0 { [-2.0, 1.0] } else { [2.0, -1.0] };
            x.push(vec![center[0] + rng.random_range(-0.5..0.5), center[1] + rng.random_range(-0.5..0.5)]);
            y.push(c);
        }
        let m = train_classifier(&x, &y, 2, &ClassifierOptions::default()).unwrap();
        let correct = x.iter().zip(&y).filter(|(v, &l)| m.predict(v) == l).count();
        assert_eq!(correct, x.len());
        assert_eq!(m.cv_accuracy.len(), 5);
    }

    #[test]
    fn three_classes() {
        let x = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.9, 0.1, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.1, 0.9, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.1, 0.9],
        ];
        let y = vec![0, 0, 1, 1, 2, 2];
        let m = train_classifier(&x, &y, 3, &ClassifierOptions::default()).unwrap();
        for (v, &l) in x.iter().zip(&y) {
            assert_eq!(m.predict(v), l);
        }
    }

    #[test]
    fn single_class_is_constant() {
        let x = vec![vec![1.0, 2.0], vec![-3.0, 0.5]];
        let m = train_classifier(&x, &[2, 2], 4, &ClassifierOptions::default()).unwrap();
        for v in [[0.0, 0.0], [100.0, -100.0], [-5.0, 7.0]] {
            assert_eq!(m.predict(&v), 2);
        }
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let m = LinearModel {
            n_classes: 3,
            dimension: 1,
            c: 1.0,
            cv_accuracy: vec![],
            scale: None,
            weights: vec![vec![0.0, 1.0], vec![0.0, 2.0], vec![0.0, 2.0]],
        };
        assert_eq!(m.predict(&[5.0]), 1);
    }

    #[test]
    fn input_checks() {
        let o = ClassifierOptions::default();
        assert!(matches!(train_classifier(&[], &[], 2, &o), Err(ClassifierError::Empty)));
        assert!(matches!(
            train_classifier(&[vec![1.0]], &[3], 2, &o),
            Err(ClassifierError::LabelRange { .. })
        ));
        assert!(matches!(
            train_classifier(&[vec![1.0], vec![1.0, 2.0]], &[0, 1], 2, &o),
            Err(ClassifierError::Dimension { index: 1, .. })
        ));
        let bad = ClassifierOptions { folds: 1, ..o };
        assert!(matches!(bad.validate(), Err(ClassifierError::InvalidOption { field: "folds", .. })));
    }

    #[test]
    fn normalization_helpers() {
        let mut v = vec![3.0, 4.0];
        unit_normalize(&mut v);
        assert_eq!(v, vec![0.6, 0.8]);
        let mut z = vec![0.0; 3];
        unit_normalize(&mut z);
        assert_eq!(z, vec![0.0; 3]);
        assert_eq!(concat_normalized(&[&[3.0, 4.0], &[0.0, 2.0]]), vec![0.6, 0.8, 0.0, 1.0]);
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = LinearModel {
            n_classes: 2,
            dimension: 2,
            c: 0.1,
            cv_accuracy: vec![(0.1, 0.75)],
            scale: Some(vec![2.0, 0.5]),
            weights: vec![vec![1.5, -2.25, 0.1], vec![f64::MIN_POSITIVE, 3.0, -0.3]],
        };
        save_model(&m, &path).unwrap();
        assert!(dir.path().join("model.bin").exists());
        assert_eq!(load_model(&path).unwrap(), m);
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, false, true]), Some((1.0 + 2.0 / 3.0) / 2.0));
        assert_eq!(average_precision(&[0.1, 0.2], &[true, true]), Some(1.0));
        assert_eq!(average_precision(&[0.1], &[false]), None);
    }
}
