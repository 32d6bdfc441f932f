//! Pipeline stages over a working directory.
//!
//! Each stage reads the artifacts of earlier stages from disk and writes its
//! own, so any stage can be rerun on its own:
//!
//! ```text
//! features/{train,test}.mdpm     ingest | synth
//! patterns/<cat>.jsonl           mine
//! elements/<cat>.json            merge
//! detectors/<cat>.mdpd           merge
//! bank.json                      select
//! encodings/{train,test}.mdpm    encode
//! model.json, model.bin          train
//! eval.json                      eval
//! study.json                     study
//! ```

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{
    average_precision, load_model, save_model, train_classifier, unit_normalize, ClassifierError, ClassifierOptions,
    LinearModel,
};
use crate::detectors::{fit_background, load_detectors, save_detectors, BackgroundOptions, DetectorError, LdaDetector};
use crate::elements::{build_index, read_manifests, retrieve_all, write_manifests, ElementError, ElementId, SourceTable};
use crate::encoding::{encode_feature_set, select_elements, BankManifest, DetectorBank, EncodeError, EncodeOptions};
use crate::featurestore::{max_pool, FeatureSet, FormatError, LoadOptions, Transform};
use crate::merging::{ensemble_merge, MergeConfig, MergeError, MergedEnsemble};
use crate::miner::{mine_per_category, read_patterns, write_patterns, CategoryMineConfig, MineError, PatternShortfall};
use crate::synth::{generate_synthetic, write_synthetic, SynthError, SynthSpec};
use crate::transactions::{build_labeled_database, FeatureSelection, TransactionError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {field} {reason}")]
    Config { field: String, reason: String },
    #[error("missing {path}; run the `{stage}` stage first")]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Transactions(#[from] TransactionError),
    #[error(transparent)]
    Mine(#[from] MineError),
    #[error(transparent)]
    Elements(#[from] ElementError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl PipelineError {
    /// Process exit code: 2 config, 3 missing artifact, 4 numerical, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config { .. }
            | PipelineError::Mine(MineError::InvalidConfig { .. })
            | PipelineError::Merge(MergeError::InvalidConfig { .. })
            | PipelineError::Classifier(ClassifierError::InvalidOption { .. })
            | PipelineError::Synth(SynthError::InvalidSpec { .. }) => 2,
            PipelineError::MissingArtifact { .. } => 3,
            PipelineError::Detector(DetectorError::Factorization { .. })
            | PipelineError::Merge(MergeError::Detector(DetectorError::Factorization { .. })) => 4,
            _ => 1,
        }
    }
}

fn config_error(field: &str, reason: impl Into<String>) -> PipelineError {
    PipelineError::Config {
        field: field.to_owned(),
        reason: reason.into(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Training features to ingest; if unset, `features/train.mdpm` must
    /// already exist in the working directory.
    pub train_features: Option<PathBuf>,
    pub test_features: Option<PathBuf>,
    pub workdir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub k: usize,
    pub mining: CategoryMineConfig,
    /// Patch scales used for mining and background statistics.
    pub mining_scales: Vec<u8>,
    pub background: BackgroundOptions,
    /// Cap on patches used for background statistics (seeded subsample).
    pub background_samples: usize,
    /// Scale every patch feature to unit norm before detectors and encoding.
    pub unit_norm_patches: bool,
    pub merge: MergeConfig,
    pub n_per_class: usize,
    pub encode: EncodeOptions,
    pub classifier: ClassifierOptions,
    pub study_ks: Vec<usize>,
    pub synth: SynthSpec,
    pub seed: u64,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 20,
            mining: CategoryMineConfig::default(),
            mining_scales: vec![0],
            background: BackgroundOptions::default(),
            background_samples: 20_000,
            unit_norm_patches: false,
            merge: MergeConfig::default(),
            n_per_class: 50,
            encode: EncodeOptions::default(),
            classifier: ClassifierOptions::default(),
            study_ks: vec![10, 20, 50, 100],
            synth: SynthSpec::default(),
            seed: 0,
            paths: Paths {
                workdir: PathBuf::from("work"),
                ..Default::default()
            },
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: Self = serde_json::from_str(&text).map_err(|e| config_error("config", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k == 0 {
            return Err(config_error("k", "must be at least 1"));
        }
        let prefix = |field: &str, e: MineError| match e {
            MineError::InvalidConfig { field: f, reason } => config_error(&format!("{field}.{f}"), reason),
            other => PipelineError::Mine(other),
        };
        self.mining.default.validate().map_err(|e| prefix("mining.default", e))?;
        for (c, m) in &self.mining.overrides {
            m.validate().map_err(|e| prefix(&format!("mining.overrides.{c}"), e))?;
        }
        if self.mining_scales.is_empty() {
            return Err(config_error("mining_scales", "must not be empty"));
        }
        if self.background_samples < 2 {
            return Err(config_error("background_samples", "must be at least 2"));
        }
        if self.merge.validate().is_err() {
            return Err(config_error("merge.max_rounds", "must be at least 1"));
        }
        if self.n_per_class == 0 {
            return Err(config_error("n_per_class", "must be at least 1"));
        }
        if let Err(ClassifierError::InvalidOption { field, reason }) = self.classifier.validate() {
            return Err(config_error(&format!("classifier.{field}"), reason));
        }
        if self.study_ks.is_empty() || self.study_ks.contains(&0) {
            return Err(config_error("study_ks", "must be a nonempty list of positive values"));
        }
        if let Err(SynthError::InvalidSpec { field, reason }) = self.synth.validate() {
            return Err(config_error(&format!("synth.{field}"), reason));
        }
        if self.paths.train_features.is_some() && self.paths.train_features == self.paths.test_features {
            return Err(config_error("paths.test_features", "must differ from paths.train_features"));
        }
        Ok(())
    }
}

/// Artifact locations inside a working directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn features(&self, split: &str) -> PathBuf {
        self.root.join("features").join(format!("{split}.mdpm"))
    }

    pub fn plants(&self) -> PathBuf {
        self.root.join("features").join("plants.json")
    }

    pub fn patterns(&self, category: usize, name: &str) -> PathBuf {
        self.root.join("patterns").join(format!("{}.jsonl", category_stem(category, name)))
    }

    pub fn mine_report(&self) -> PathBuf {
        self.root.join("patterns").join("mine_report.json")
    }

    pub fn elements(&self, category: usize, name: &str) -> PathBuf {
        self.root.join("elements").join(format!("{}.json", category_stem(category, name)))
    }

    pub fn detectors(&self, category: usize, name: &str) -> PathBuf {
        self.root.join("detectors").join(format!("{}.mdpd", category_stem(category, name)))
    }

    pub fn bank(&self) -> PathBuf {
        self.root.join("bank.json")
    }

    pub fn encodings(&self, split: &str) -> PathBuf {
        self.root.join("encodings").join(format!("{split}.mdpm"))
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.json")
    }

    pub fn study(&self) -> PathBuf {
        self.root.join("study.json")
    }
}

fn category_stem(category: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{category:03}-{clean}")
}

fn require(path: &Path, stage: &'static str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        })
    }
}

fn create_parent(path: &Path) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Copies (and thereby validates) the configured feature files into the
/// working directory.
pub fn ingest(config: &PipelineConfig) -> Result<IngestReport, PipelineError> {
    let ws = Workspace::new(&config.paths.workdir);
    let mut report = IngestReport::default();
    for (split, source, field) in [
        ("train", &config.paths.train_features, "paths.train_features"),
        ("test", &config.paths.test_features, "paths.test_features"),
    ] {
        let source = source.as_ref().ok_or_else(|| config_error(field, "is not set"))?;
        let set = FeatureSet::load(source)?;
        let dest = ws.features(split);
        create_parent(&dest)?;
        set.save(&dest)?;
        report.splits.push(SplitSummary {
            split: split.into(),
            patches: set.len(),
            images: set.image_labels().len(),
            dimension: set.dimension(),
            categories: set.category_names().len(),
        });
    }
    Ok(report)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct IngestReport {
    pub splits: Vec<SplitSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SplitSummary {
    pub split: String,
    pub patches: usize,
    pub images: usize,
    pub dimension: usize,
    pub categories: usize,
}

/// Generates synthetic train/test features into the working directory.
pub fn synth(config: &PipelineConfig) -> Result<IngestReport, PipelineError> {
    let ws = Workspace::new(&config.paths.workdir);
    let out = generate_synthetic(&config.synth)?;
    let dir = ws.features("train").parent().expect("features dir").to_path_buf();
    write_synthetic(&out, &dir)?;
    let summary = |split: &str, set: &FeatureSet| SplitSummary {
        split: split.into(),
        patches: set.len(),
        images: set.image_labels().len(),
        dimension: set.dimension(),
        categories: set.category_names().len(),
    };
    Ok(IngestReport {
        splits: vec![summary("train", &out.train), summary("test", &out.test)],
    })
}

fn load_features(ws: &Workspace, split: &str, config: &PipelineConfig) -> Result<FeatureSet, PipelineError> {
    let path = ws.features(split);
    require(&path, "ingest")?;
    let set = FeatureSet::load(&path)?;
    Ok(if config.unit_norm_patches {
        set.unit_normalized()
    } else {
        set
    })
}

fn mining_selection<'a>(set: &'a FeatureSet, config: &PipelineConfig) -> FeatureSelection<'a> {
    let scales: BTreeSet<u8> = config.mining_scales.iter().copied().collect();
    let records = set
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| scales.contains(&r.scale_index))
        .map(|(i, _)| i)
        .collect();
    FeatureSelection::new(set, 0, records)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MineReport {
    pub transactions: usize,
    pub categories: Vec<CategoryCount>,
    pub shortfalls: Vec<PatternShortfall>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CategoryCount {
    pub category: String,
    pub count: usize,
}

pub fn mine(config: &PipelineConfig) -> Result<MineReport, PipelineError> {
    let ws = Workspace::new(&config.paths.workdir);
    let set = load_features(&ws, "train", config)?;
    let selection = mining_selection(&set, config);
    let started = Instant::now();
    let found = mine_per_category(&selection, config.k, &config.mining)?;
    log::info!("mined {} transactions in {:.1?}", selection.len(), started.elapsed());
    let mut categories = Vec::new();
    for (c, name) in set.category_names().iter().enumerate() {
        let patterns = found.patterns.get(&c).map(Vec::as_slice).unwrap_or(&[]);
        let path = ws.patterns(c, name);
        create_parent(&path)?;
        let file = fs::File::create(&path).map_err(|source| PipelineError::Io {
            path: path.clone(),
            source,
        })?;
        let mut w = BufWriter::new(file);
        write_patterns(&mut w, patterns)?;
        w.flush().map_err(|source| PipelineError::Io { path, source })?;
        categories.push(CategoryCount {
            category: name.clone(),
            count: patterns.len(),
        });
    }
    let report = MineReport {
        transactions: selection.len(),
        categories,
        shortfalls: found.shortfalls,
    };
    write_json(&ws.mine_report(), &report)?;
    Ok(report)
}

fn source_table(ws: &Workspace, set: &FeatureSet) -> SourceTable {
    let mut sources = SourceTable::default();
    let file = ws.features("train").to_string_lossy().into_owned();
    sources.push(file, set.image_ids().into_iter().map(str::to_owned).collect());
    sources
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MergeReport {
    pub lambda: f64,
    pub categories: Vec<MergeSummary>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MergeSummary {
    pub category: String,
    pub elements: usize,
    pub merged: usize,
    pub exhausted: usize,
}

pub fn merge(config: &PipelineConfig) -> Result<MergeReport, PipelineError> {
    let ws = Workspace::new(&config.paths.workdir);
    let set = load_features(&ws, "train", config)?;
    let names = set.category_names().to_vec();
    for (c, name) in names.iter().enumerate() {
        require(&ws.patterns(c, name), "mine")?;
    }
    let selection = mining_selection(&set, config);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let take = config.background_samples.min(selection.len());
    let mut picked: Vec<usize> = sample(&mut rng, selection.len(), take).into_vec();
    picked.sort_unstable();
    let samples: Vec<&[f32]> = picked
        .iter()
        .map(|&i| set.records()[selection.records[i]].feature.as_slice())
        .collect();
    let stats = fit_background(&samples, &config.background)?;
    log::info!("background statistics from {} patches, lambda {:.4e}", samples.len(), stats.lambda());

    let base = build_labeled_database(&selection, config.k, |_| false)?;
    let categories: Vec<usize> = selection
        .records
        .iter()
        .map(|&r| set.category_of(r).unwrap_or(usize::MAX))
        .collect();
    let sources = source_table(&ws, &set);
    let mut summaries = Vec::new();
    for (c, name) in names.iter().enumerate() {
        let path = ws.patterns(c, name);
        let file = fs::File::open(&path).map_err(|source| PipelineError::Io {
            path: path.clone(),
            source,
        })?;
        let patterns = read_patterns(BufReader::new(file))?;
        let db = base.relabeled(|i| categories[i] == c);
        let index = build_index(&db);
        let elements = retrieve_all(&patterns, &index, &db)?;
        let started = Instant::now();
        let ensemble = ensemble_merge(&elements, &set, &stats, &config.merge)?;
        log::info!(
            "{name}: {} elements merged into {} in {:.1?}",
            elements.len(),
            ensemble.len(),
            started.elapsed()
        );
        let elements_path = ws.elements(c, name);
        create_parent(&elements_path)?;
        write_manifests(&elements_path, &ensemble.manifests(&sources))?;
        let detectors_path = ws.detectors(c, name);
        create_parent(&detectors_path)?;
        let pairs: Vec<(ElementId, &LdaDetector)> = ensemble
            .elements
            .iter()
            .map(|e| e.element_id)
            .zip(&ensemble.detectors)
            .collect();
        save_detectors(&detectors_path, &pairs)?;
        summaries.push(MergeSummary {
            category: name.clone(),
            elements: elements.len(),
            merged: ensemble.len(),
            exhausted: ensemble.exhausted.len(),
        });
    }
    Ok(MergeReport {
        lambda: stats.lambda(),
        categories: summaries,
    })
}

fn load_ensemble(ws: &Workspace, sources: &SourceTable, c: usize, name: &str) -> Result<MergedEnsemble, PipelineError> {
    let path = ws.elements(c, name);
    require(&path, "merge")?;
    let mut ensemble = MergedEnsemble::default();
    for m in read_manifests(&path)? {
        let (element, absorbed) = m.resolve(sources)?;
        ensemble.elements.push(element);
        ensemble.provenance.push(absorbed);
    }
    Ok(ensemble)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectReport {
    pub requested: usize,
    pub n_per_class: usize,
    pub available: Vec<CategoryCount>,
}

/// Picks the same number of elements per category and writes `bank.json`.
/// Categories with fewer merged elements than requested bring every
/// category down to the smallest count.
pub fn select(config: &PipelineConfig) -> Result<SelectReport, PipelineError> {
    let ws = Workspace::new(&config.paths.workdir);
    let train = ws.features("train");
    require(&train, "ingest")?;
    let set = FeatureSet::load(&train)?;
    let sources = source_table(&ws, &set);
    let names = set.category_names().to_vec();
    let mut picked = Vec::with_capacity(names.len());
    let mut available = Vec::new();
    for (c, name) in names.iter().enumerate() {
        let ensemble = load_ensemble(&ws, &sources, c, name)?;
        if ensemble.is_empty() {
            return Err(PipelineError::Encode(EncodeError::EmptyEnsemble));
        }
        let selection = select_elements(&ensemble, config.n_per_class)?;
        available.push(CategoryCount {
            category: name.clone(),
            count: selection.picked.len(),
        });
        picked.push(
            selection
                .picked
                .iter()
                .map(|&i| ensemble.elements[i].element_id)
                .collect::<Vec<_>>(),
        );
    }
    let n = picked.iter().map(Vec::len).min().unwrap_or(0);
    if n < config.n_per_class {
        log::warn!("selecting {n} elements per category, {} requested", config.n_per_class);
    }
    for p in &mut picked {
        p.truncate(n);
    }
    let manifest = BankManifest {
        categories: names,
        n_per_class: n,
        element_ids: picked,
    };
    write_json(&ws.bank(), &manifest)?;
    Ok(SelectReport {
        requested: config.n_per_class,
        n_per_class: n,
        available,
    })
}

fn load_bank(ws: &Workspace) -> Result<DetectorBank, PipelineError> {
    require(&ws.bank(), "select")?;
    let manifest: BankManifest = read_json(&ws.bank())?;
    let mut per_category = Vec::with_capacity(manifest.categories.len());
    for (c, (name, ids)) in manifest.categories.iter().zip(&manifest.element_ids).enumerate() {
        let path = ws.detectors(c, name);
        require(&path, "merge")?;
        let by_id: HashMap<ElementId, LdaDetector> = load_detectors(&path)?.into_iter().collect();
        let list = ids
            .iter()
            .map(|id| {
                by_id
                    .get(id)
                    .cloned()
                    .map(|d| (*id, d))
                    .ok_or_else(|| config_error("bank.json", format!("element {id} missing from {}", path.display())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        per_category.push(list);
    }
    Ok(DetectorBank::new(manifest.categories, per_category)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncodeReport {
    pub detectors: usize,
    pub length: usize,
    pub train_images: usize,
    pub test_images: usize,
}

pub fn encode(config: &PipelineConfig) -> Result<EncodeReport, PipelineError> {
    let ws = Workspace::new(&config.paths.workdir);
    let bank = load_bank(&ws)?;
    let train = load_features(&ws, "train", config)?;
    let test = load_features(&ws, "test", config)?;
    let mut options = config.encode.clone();
    if options.expected_scales.is_none() {
        let scales: BTreeSet<u8> = train.records().iter().map(|r| r.scale_index).collect();
        options.expected_scales = Some(scales.into_iter().collect());
    }
    let mut counts = [0; 2];
    for (i, (split, set)) in [("train", &train), ("test", &test)].into_iter().enumerate() {
        let encoded = encode_feature_set(set, &bank, &options)?;
        let path = ws.encodings(split);
        create_parent(&path)?;
        encoded.save(&path)?;
        counts[i] = encoded.len();
    }
    Ok(EncodeReport {
        detectors: bank.len(),
        length: bank.encoding_len(),
        train_images: counts[0],
        test_images: counts[1],
    })
}

fn load_encodings(ws: &Workspace, split: &str) -> Result<(Vec<Vec<f64>>, Vec<usize>, Vec<String>), PipelineError> {
    let path = ws.encodings(split);
    require(&path, "encode")?;
    let set = FeatureSet::load_with(
        &path,
        LoadOptions {
            require_non_negative: false,
        },
    )?;
    let mut x = Vec::with_capacity(set.len());
    let mut y = Vec::with_capacity(set.len());
    for (i, r) in set.records().iter().enumerate() {
        let mut v: Vec<f64> = r.feature.iter().map(|&f| f as f64).collect();
        unit_normalize(&mut v);
        x.push(v);
        y.push(set.category_of(i).expect("loaded records are labelled"));
    }
    Ok((x, y, set.category_names().to_vec()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub images: usize,
    pub c: f64,
    pub cv_accuracy: Vec<(f64, f64)>,
}

pub fn train(config: &PipelineConfig) -> Result<TrainReport, PipelineError> {
    let ws = Workspace::new(&config.paths.workdir);
    let (x, y, names) = load_encodings(&ws, "train")?;
    let options = ClassifierOptions {
        seed: config.seed,
        ..config.classifier.clone()
    };
    let model = train_classifier(&x, &y, names.len(), &options)?;
    save_model(&model, &ws.model())?;
    Ok(TrainReport {
        images: x.len(),
        c: model.c,
        cv_accuracy: model.cv_accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryEval {
    pub category: String,
    pub images: usize,
    pub accuracy: f64,
    pub average_precision: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub accuracy: f64,
    pub mean_class_accuracy: f64,
    pub mean_average_precision: f64,
    pub categories: Vec<CategoryEval>,
}

fn evaluate(model: &LinearModel, x: &[Vec<f64>], y: &[usize], names: &[String]) -> EvalReport {
    let scores: Vec<Vec<f64>> = x.iter().map(|v| model.scores(v)).collect();
    let predicted: Vec<usize> = x.iter().map(|v| model.predict(v)).collect();
    let correct = predicted.iter().zip(y).filter(|(p, t)| p == t).count();
    let categories: Vec<CategoryEval> = names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
            let hits = members.iter().filter(|&&i| predicted[i] == c).count();
            let class_scores: Vec<f64> = scores.iter().map(|s| s[c]).collect();
            let relevant: Vec<bool> = y.iter().map(|&t| t == c).collect();
            CategoryEval {
                category: name.clone(),
                images: members.len(),
                accuracy: if members.is_empty() {
                    0.0
                } else {
                    hits as f64 / members.len() as f64
                },
                average_precision: average_precision(&class_scores, &relevant),
            }
        })
        .collect();
    let present: Vec<&CategoryEval> = categories.iter().filter(|c| c.images > 0).collect();
    let aps: Vec<f64> = categories.iter().filter_map(|c| c.average_precision).collect();
    EvalReport {
        images: y.len(),
        accuracy: if y.is_empty() { 0.0 } else { correct as f64 / y.len() as f64 },
        mean_class_accuracy: present.iter().map(|c| c.accuracy).sum::<f64>() / present.len().max(1) as f64,
        mean_average_precision: aps.iter().sum::<f64>() / aps.len().max(1) as f64,
        categories,
    }
}

pub fn eval(config: &PipelineConfig) -> Result<EvalReport, PipelineError> {
    let ws = Workspace::new(&config.paths.workdir);
    require(&ws.model(), "train")?;
    let model = load_model(&ws.model())?;
    let (x, y, names) = load_encodings(&ws, "test")?;
    if let Some(v) = x.first() {
        if v.len() != model.dimension {
            return Err(PipelineError::Encode(EncodeError::DimensionMismatch {
                expected: model.dimension,
                found: v.len(),
            }));
        }
    }
    let report = evaluate(&model, &x, &y, &names);
    write_json(&ws.eval(), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub ks: Vec<usize>,
    /// Accuracy per k of max-pooled sparsified patch features.
    pub sparsified: Vec<f64>,
    /// Accuracy per k of max-pooled binarized patch features.
    pub binarized: Vec<f64>,
}

impl StudyReport {
    pub fn table(&self) -> String {
        let mut out = String::from("representation    ");
        for k in &self.ks {
            out.push_str(&format!("{:>9}", format!("k={k}")));
        }
        for (name, row) in [("CNN-Sparsified", &self.sparsified), ("CNN-Binarized", &self.binarized)] {
            out.push_str(&format!("\n{name:<18}"));
            for a in row {
                out.push_str(&format!("{:>8.2}%", 100.0 * a));
            }
        }
        out
    }
}

fn pooled(set: &FeatureSet, transform: Transform) -> Result<(Vec<Vec<f64>>, Vec<usize>), PipelineError> {
    let labels = set.image_labels();
    let ids = set.image_ids();
    let rows: Vec<Vec<f64>> = set
        .records_by_image()
        .par_iter()
        .map(|records| {
            let v = max_pool(records.iter().map(|&r| set.records()[r].feature.as_slice()), transform)?;
            let mut v: Vec<f64> = v.into_iter().map(f64::from).collect();
            unit_normalize(&mut v);
            Ok(v)
        })
        .collect::<Result<_, FormatError>>()?;
    Ok((rows, ids.iter().map(|id| labels[*id]).collect()))
}

/// Classification accuracy of whole-image max-pooled patch features
/// after sparsifying or binarizing each patch at several k.
pub fn study(config: &PipelineConfig) -> Result<StudyReport, PipelineError> {
    let ws = Workspace::new(&config.paths.workdir);
    let train = load_features(&ws, "train", config)?;
    let test = load_features(&ws, "test", config)?;
    let options = ClassifierOptions {
        seed: config.seed,
        ..config.classifier.clone()
    };
    let n_classes = train.category_names().len();
    let mut report = StudyReport {
        ks: config.study_ks.clone(),
        sparsified: Vec::new(),
        binarized: Vec::new(),
    };
    for &k in &config.study_ks {
        for (transform, row) in [
            (Transform::Sparsify(k), &mut report.sparsified),
            (Transform::Binarize(k), &mut report.binarized),
        ] {
            let (x, y) = pooled(&train, transform)?;
            let model = train_classifier(&x, &y, n_classes, &options)?;
            let (tx, ty) = pooled(&test, transform)?;
            let names = test.category_names().to_vec();
            row.push(evaluate(&model, &tx, &ty, &names).accuracy);
        }
    }
    write_json(&ws.study(), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineReport {
    pub mine: MineReport,
    pub merge: MergeReport,
    pub select: SelectReport,
    pub encode: EncodeReport,
    pub train: TrainReport,
    pub eval: EvalReport,
}

/// Runs every stage from ingest to eval. Ingest is skipped when no
/// feature paths are configured and features already exist.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineReport, PipelineError> {
    config.validate()?;
    let ws = Workspace::new(&config.paths.workdir);
    if config.paths.train_features.is_some() || config.paths.test_features.is_some() {
        ingest(config)?;
    } else {
        require(&ws.features("train"), "ingest")?;
        require(&ws.features("test"), "ingest")?;
    }
    let stage = |name: &str, started: Instant| log::info!("{name} done in {:.1?}", started.elapsed());
    let t = Instant::now();
    let mine = mine(config)?;
    stage("mine", t);
    let t = Instant::now();
    let merge = merge(config)?;
    stage("merge", t);
    let select = select(config)?;
    let t = Instant::now();
    let encode = encode(config)?;
    stage("encode", t);
    let t = Instant::now();
    let train = train(config)?;
    stage("train", t);
    let eval = eval(config)?;
    Ok(PipelineReport {
        mine,
        merge,
        select,
        encode,
        train,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let c = PipelineConfig::default();
        assert_eq!(c.k, 20);
        assert_eq!(c.merge.threshold, 150.0);
        assert_eq!(c.n_per_class, 50);
        c.validate().unwrap();
        let parsed: PipelineConfig = serde_json::from_str(r#"{"k": 5, "merge": {"threshold": 3.0}}"#).unwrap();
        assert_eq!(parsed.k, 5);
        assert_eq!(parsed.merge.max_rounds, 10);
        let bad = PipelineConfig {
            k: 0,
            ..Default::default()
        };
        match bad.validate() {
            Err(e @ PipelineError::Config { .. }) => {
                assert!(e.to_string().contains("k "));
                assert_eq!(e.exit_code(), 2);
            }
            other => panic!("{other:?}"),
        }
        let mut nested = PipelineConfig::default();
        nested.mining.default.conf_min = 2.0;
        match nested.validate() {
            Err(PipelineError::Config { field, .. }) => assert_eq!(field, "mining.default.conf_min"),
            other => panic!("{other:?}"),
        }
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"kk": 5}"#).is_err());
    }

    #[test]
    fn missing_artifacts_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig {
            paths: Paths {
                workdir: dir.path().to_path_buf(),
                ..Default::default()
            },
            ..Default::default()
        };
        for (result, stage) in [
            (mine(&config).map(|_| ()), "ingest"),
            (encode(&config).map(|_| ()), "select"),
            (train(&config).map(|_| ()), "encode"),
            (eval(&config).map(|_| ()), "train"),
        ] {
            match result {
                Err(e @ PipelineError::MissingArtifact { .. }) => {
                    assert_eq!(e.exit_code(), 3);
                    assert!(e.to_string().contains(&format!("`{stage}`")), "{e}");
                }
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn category_stems_are_file_safe() {
        assert_eq!(category_stem(3, "living room/2"), "003-living_room_2");
    }

    #[test]
    fn study_table_layout() {
        let r = StudyReport {
            ks: vec![10, 20],
            sparsified: vec![0.5, 0.25],
            binarized: vec![1.0, 0.125],
        };
        let t = r.table();
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().nth(1).unwrap().starts_with("CNN-Sparsified"));
        assert!(t.contains("12.50%"));
    }
}
