//! Patch feature storage and the top-k sparsify/binarize/pool operations.
//!
//! A feature file is a little-endian binary payload with a JSON manifest
//! next to it. For `train.mdpm` the manifest is `train.manifest.json`.
//!
//! ```text
//! "MDPM"  version:u16  dimension:u32  count:u64
//! count × { id_len:u32 id:utf8  x:u32 y:u32 w:u32 h:u32  scale:u8  dimension × f32 }
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"MDPM";
pub const FORMAT_VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 4 + 8;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic bytes {found:?} (expected \"MDPM\")")]
    MagicMismatch { found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("record {record}: dimension mismatch, expected {expected}, found {found}")]
    DimensionMismatch {
        record: u64,
        expected: usize,
        found: usize,
    },
    #[error("payload truncated inside record {record}")]
    Truncated { record: u64 },
    #[error("{extra} trailing bytes after record {records}")]
    TrailingBytes { records: u64, extra: usize },
    #[error("record {record}: image id is not valid UTF-8")]
    InvalidImageId { record: u64 },
    #[error("record {record}: image id {image_id:?} has no label in the manifest")]
    UnknownImage { record: u64, image_id: String },
    #[error("record {record}: feature {dim} is {value}, expected a finite non-negative value")]
    InvalidFeature { record: u64, dim: usize, value: f32 },
    #[error("manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("image {image_id:?} labelled with unknown category {category}")]
    UnknownCategory { image_id: String, category: usize },
    #[error("top-k requires k >= 1")]
    ZeroK,
    #[error("cannot pool an empty record set")]
    EmptyPool,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Pixel rectangle in source-image coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
        )
    }
}

/// One image patch and its activation vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub image_id: String,
    pub bbox: BBox,
    pub scale_index: u8,
    pub feature: Vec<f32>,
}

/// Location of a patch: which feature set (`source`) and which record in it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatchRef {
    pub source: u32,
    pub record: u32,
}

impl PatchRef {
    pub fn new(source: u32, record: u32) -> Self {
        Self { source, record }
    }
}

/// An image within a feature set, identified by its ordinal in the
/// set's sorted image list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ImageKey {
    pub source: u32,
    pub image: u32,
}

/// Anything that can resolve a [`PatchRef`] to a feature vector.
pub trait PatchLookup {
    fn feature(&self, patch: PatchRef) -> Option<&[f32]>;
}

impl PatchLookup for FeatureSet {
    fn feature(&self, patch: PatchRef) -> Option<&[f32]> {
        if patch.source != 0 {
            return None;
        }
        self.records
            .get(patch.record as usize)
            .map(|r| r.feature.as_slice())
    }
}

impl PatchLookup for [FeatureSet] {
    fn feature(&self, patch: PatchRef) -> Option<&[f32]> {
        self.get(patch.source as usize)?
            .records
            .get(patch.record as usize)
            .map(|r| r.feature.as_slice())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dimension: usize,
    categories: Vec<String>,
    image_labels: BTreeMap<String, usize>,
}

/// Options controlling validation when reading a feature file.
#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    /// Reject negative values. Patch activations are rectified; derived
    /// files such as image encodings may legitimately carry negatives.
    pub require_non_negative: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            require_non_negative: true,
        }
    }
}

/// A dataset of patch records with image-level category labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    dimension: usize,
    records: Vec<PatchRecord>,
    image_labels: BTreeMap<String, usize>,
    category_names: Vec<String>,
}

impl FeatureSet {
    pub fn new(dimension: usize, category_names: Vec<String>) -> Self {
        Self {
            dimension,
            records: Vec::new(),
            image_labels: BTreeMap::new(),
            category_names,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn records(&self) -> &[PatchRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn category_names(&self) -> &[String] {
        &self.category_names
    }

    pub fn image_labels(&self) -> &BTreeMap<String, usize> {
        &self.image_labels
    }

    pub fn set_image_label(&mut self, image_id: impl Into<String>, category: usize) -> Result<(), FormatError> {
        let image_id = image_id.into();
        if category >= self.category_names.len() {
            return Err(FormatError::UnknownCategory { image_id, category });
        }
        self.image_labels.insert(image_id, category);
        Ok(())
    }

    /// Appends a record after checking it against the set's invariants.
    pub fn push(&mut self, record: PatchRecord) -> Result<(), FormatError> {
        self.push_checked(record, true)
    }

    /// Like [`push`](Self::push) but admits negative values. Used for
    /// derived vectors (image encodings) stored in the same format.
    pub fn push_signed(&mut self, record: PatchRecord) -> Result<(), FormatError> {
        self.push_checked(record, false)
    }

    fn push_checked(&mut self, record: PatchRecord, require_non_negative: bool) -> Result<(), FormatError> {
        let index = self.records.len() as u64;
        validate_record(index, &record, self.dimension, require_non_negative)?;
        if !self.image_labels.contains_key(&record.image_id) {
            return Err(FormatError::UnknownImage {
                record: index,
                image_id: record.image_id,
            });
        }
        self.records.push(record);
        Ok(())
    }

    pub fn category_of(&self, record: usize) -> Option<usize> {
        self.image_labels
            .get(&self.records.get(record)?.image_id)
            .copied()
    }

    /// Sorted list of image ids; an image's position here is its ordinal.
    pub fn image_ids(&self) -> Vec<&str> {
        self.image_labels.keys().map(String::as_str).collect()
    }

    /// Image ordinal for every record, parallel to [`records`](Self::records).
    pub fn record_image_ordinals(&self) -> Vec<u32> {
        let ordinals: HashMap<&str, u32> = self
            .image_labels
            .keys()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i as u32))
            .collect();
        self.records
            .iter()
            .map(|r| ordinals[r.image_id.as_str()])
            .collect()
    }

    /// Record indices grouped by image ordinal. Images without records get
    /// an empty group.
    pub fn records_by_image(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.image_labels.len()];
        for (i, ord) in self.record_image_ordinals().into_iter().enumerate() {
            groups[ord as usize].push(i);
        }
        groups
    }

    /// Copy of the set with every feature scaled to unit L2 norm.
    pub fn unit_normalized(&self) -> FeatureSet {
        let mut out = self.clone();
        for r in &mut out.records {
            let norm = r.feature.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in &mut r.feature {
                    *v = (*v as f64 / norm) as f32;
                }
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FeatureSet, FormatError> {
        Self::load_with(path, LoadOptions::default())
    }

    pub fn load_with(path: impl AsRef<Path>, options: LoadOptions) -> Result<FeatureSet, FormatError> {
        let path = path.as_ref();
        let manifest_path = manifest_path(path);
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|source| FormatError::Manifest {
                path: manifest_path.clone(),
                source,
            })?;
        let bytes = fs::read(path).map_err(io_err(path))?;
        let (dimension, records) = decode_records(&bytes, options.require_non_negative)?;
        if dimension != manifest.dimension {
            return Err(FormatError::DimensionMismatch {
                record: 0,
                expected: manifest.dimension,
                found: dimension,
            });
        }
        for (image_id, &category) in &manifest.image_labels {
            if category >= manifest.categories.len() {
                return Err(FormatError::UnknownCategory {
                    image_id: image_id.clone(),
                    category,
                });
            }
        }
        for (i, r) in records.iter().enumerate() {
            if !manifest.image_labels.contains_key(&r.image_id) {
                return Err(FormatError::UnknownImage {
                    record: i as u64,
                    image_id: r.image_id.clone(),
                });
            }
        }
        Ok(FeatureSet {
            dimension,
            records,
            image_labels: manifest.image_labels,
            category_names: manifest.categories,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        encode_records(&mut w, self.dimension, &self.records).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))?;

        let manifest = Manifest {
            dimension: self.dimension,
            categories: self.category_names.clone(),
            image_labels: self.image_labels.clone(),
        };
        let manifest_path = manifest_path(path);
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|source| {
            FormatError::Manifest {
                path: manifest_path.clone(),
                source,
            }
        })?;
        text.push('\n');
        fs::write(&manifest_path, text).map_err(io_err(&manifest_path))
    }
}

/// `dir/name.mdpm` → `dir/name.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.manifest.json"))
}

fn validate_record(
    index: u64,
    record: &PatchRecord,
    dimension: usize,
    require_non_negative: bool,
) -> Result<(), FormatError> {
    if record.feature.len() != dimension {
        return Err(FormatError::DimensionMismatch {
            record: index,
            expected: dimension,
            found: record.feature.len(),
        });
    }
    for (dim, &value) in record.feature.iter().enumerate() {
        if !value.is_finite() || (require_non_negative && value < 0.0) {
            return Err(FormatError::InvalidFeature {
                record: index,
                dim,
                value,
            });
        }
    }
    Ok(())
}

/// Writes the binary envelope. Shared by feature files, detector banks and
/// image encodings.
pub fn encode_records<W: Write>(w: &mut W, dimension: usize, records: &[PatchRecord]) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(dimension as u32).to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(dimension * 4);
    for r in records {
        if r.feature.len() != dimension {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("record for {:?} has {} features, expected {dimension}", r.image_id, r.feature.len()),
            ));
        }
        let id = r.image_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        for v in [r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[r.scale_index])?;
        buf.clear();
        for v in &r.feature {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, record: u64) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(FormatError::Truncated { record })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, record: u64) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, record)?.try_into().unwrap()))
    }
}

/// Parses the binary envelope into `(dimension, records)`.
pub fn decode_records(bytes: &[u8], require_non_negative: bool) -> Result<(usize, Vec<PatchRecord>), FormatError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(FormatError::MagicMismatch { found });
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated { record: 0 });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let dimension = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[10..18].try_into().unwrap());

    let mut cur = Cursor {
        bytes,
        pos: HEADER_LEN,
    };
    // Each record needs at least its fixed-size part; reject absurd counts
    // before allocating.
    let min_record = 4 + 16 + 1 + dimension * 4;
    let remaining = bytes.len() - HEADER_LEN;
    let plausible = (remaining / min_record.max(1)) as u64;
    if count > plausible {
        return Err(FormatError::Truncated { record: plausible });
    }
    let mut records = Vec::with_capacity(count as usize);
    for index in 0..count {
        let id_len = cur.u32(index)? as usize;
        let id = cur.take(id_len, index)?;
        let image_id = std::str::from_utf8(id)
            .map_err(|_| FormatError::InvalidImageId { record: index })?
            .to_owned();
        let bbox = BBox {
            x: cur.u32(index)?,
            y: cur.u32(index)?,
            w: cur.u32(index)?,
            h: cur.u32(index)?,
        };
        let scale_index = cur.take(1, index)?[0];
        let raw = cur.take(dimension * 4, index)?;
        let feature: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let record = PatchRecord {
            image_id,
            bbox,
            scale_index,
            feature,
        };
        validate_record(index, &record, dimension, require_non_negative)?;
        records.push(record);
    }
    if cur.pos != bytes.len() {
        return Err(FormatError::TrailingBytes {
            records: count,
            extra: bytes.len() - cur.pos,
        });
    }
    Ok((dimension, records))
}

/// Indices of the `min(k, #positive)` largest strictly positive entries,
/// ascending. Equal values resolve toward the lower index.
pub fn top_k_indices(v: &[f32], k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let mut positive: Vec<(usize, f32)> = v
        .iter()
        .enumerate()
        .filter(|(_, &x)| x > 0.0)
        .map(|(i, &x)| (i, x))
        .collect();
    if positive.len() > k {
        let order = |a: &(usize, f32), b: &(usize, f32)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        positive.select_nth_unstable_by(k - 1, order);
        positive.truncate(k);
    }
    let mut idx: Vec<usize> = positive.into_iter().map(|(i, _)| i).collect();
    idx.sort_unstable();
    idx
}

/// Keeps the `k` largest entries and zeroes the rest.
pub fn sparsify(v: &[f32], k: usize) -> Result<Vec<f32>, FormatError> {
    if k == 0 {
        return Err(FormatError::ZeroK);
    }
    let mut out = vec![0.0; v.len()];
    for i in top_k_indices(v, k) {
        out[i] = v[i];
    }
    Ok(out)
}

/// Sets the `k` largest entries to one and the rest to zero.
pub fn binarize(v: &[f32], k: usize) -> Result<Vec<f32>, FormatError> {
    if k == 0 {
        return Err(FormatError::ZeroK);
    }
    let mut out = vec![0.0; v.len()];
    for i in top_k_indices(v, k) {
        out[i] = 1.0;
    }
    Ok(out)
}

/// Per-patch transform applied before pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Sparsify(usize),
    Binarize(usize),
}

impl Transform {
    pub fn apply(&self, v: &[f32]) -> Result<Vec<f32>, FormatError> {
        match *self {
            Transform::Identity => Ok(v.to_vec()),
            Transform::Sparsify(k) => sparsify(v, k),
            Transform::Binarize(k) => binarize(v, k),
        }
    }
}

/// Componentwise max of the transformed features of one image's patches.
pub fn max_pool<'a, I>(features: I, transform: Transform) -> Result<Vec<f32>, FormatError>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let mut pooled: Option<Vec<f32>> = None;
    for f in features {
        let t = transform.apply(f)?;
        match pooled.as_mut() {
            None => pooled = Some(t),
            Some(acc) => {
                if acc.len() != t.len() {
                    return Err(FormatError::DimensionMismatch {
                        record: 0,
                        expected: acc.len(),
                        found: t.len(),
                    });
                }
                for (a, b) in acc.iter_mut().zip(t) {
                    if b > *a {
                        *a = b;
                    }
                }
            }
        }
    }
    pooled.ok_or(FormatError::EmptyPool)
}
