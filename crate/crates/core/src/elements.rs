//! Mid-level visual elements: the target-category patches sharing a pattern,
//! found through an inverted index over positive transactions.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurestore::{ImageKey, PatchRef};
use crate::miner::Pattern;
use crate::transactions::{Item, TransactionDatabase};

#[derive(Debug, Error)]
pub enum ElementError {
    #[error("cannot retrieve an element for an empty pattern")]
    EmptyPattern,
    #[error("pattern {0:?} has no positive transactions; index and database disagree")]
    EmptyElement(Vec<Item>),
    #[error("manifest refers to unknown feature file {0:?}")]
    UnknownFile(String),
    #[error("manifest refers to unknown image {0:?}")]
    UnknownImage(String),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ElementId(pub u32);

impl fmt::Display for ElementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Item → ascending indices of the positive transactions containing it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InvertedIndex {
    postings: Vec<Vec<u32>>,
}

impl InvertedIndex {
    pub fn postings(&self, item: Item) -> &[u32] {
        self.postings.get(item as usize).map_or(&[], Vec::as_slice)
    }

    /// Items with a nonempty posting list, ascending.
    pub fn items(&self) -> impl Iterator<Item = (Item, &[u32])> + '_ {
        self.postings
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.is_empty())
            .map(|(i, p)| (i as Item, p.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.postings.iter().all(Vec::is_empty)
    }
}

pub fn build_index(db: &TransactionDatabase) -> InvertedIndex {
    let mut postings = vec![Vec::new(); db.dimension() + 1];
    for (tid, t) in db.iter().enumerate() {
        if !t.positive {
            continue;
        }
        for &item in t.items {
            postings[item as usize].push(tid as u32);
        }
    }
    InvertedIndex { postings }
}

/// Patches of the target category that share one pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualElement {
    pub element_id: ElementId,
    pub pattern: Pattern,
    pub members: Vec<PatchRef>,
    /// Distinct source images of the members, ascending.
    pub covered_images: Vec<ImageKey>,
}

impl VisualElement {
    pub fn coverage(&self) -> usize {
        self.covered_images.len()
    }
}

fn intersect_sorted(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len().min(b.len()));
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Positive transactions containing every item of `items`.
pub fn matching_positives(items: &[Item], index: &InvertedIndex) -> Vec<u32> {
    let mut lists: Vec<&[u32]> = items.iter().map(|&i| index.postings(i)).collect();
    lists.sort_by_key(|l| l.len());
    let Some((first, rest)) = lists.split_first() else {
        return Vec::new();
    };
    let mut acc = first.to_vec();
    for l in rest {
        if acc.is_empty() {
            break;
        }
        acc = intersect_sorted(&acc, l);
    }
    acc
}

pub fn retrieve(
    element_id: ElementId,
    pattern: &Pattern,
    index: &InvertedIndex,
    db: &TransactionDatabase,
) -> Result<VisualElement, ElementError> {
    if pattern.items.is_empty() {
        return Err(ElementError::EmptyPattern);
    }
    let tids = matching_positives(&pattern.items, index);
    if tids.is_empty() {
        return Err(ElementError::EmptyElement(pattern.items.clone()));
    }
    let members = tids.iter().map(|&t| db.patch_refs()[t as usize]).collect();
    let mut covered_images: Vec<ImageKey> = tids.iter().map(|&t| db.images()[t as usize]).collect();
    covered_images.sort_unstable();
    covered_images.dedup();
    let mut pattern = pattern.clone();
    pattern.positive_transactions = Some(tids);
    Ok(VisualElement {
        element_id,
        pattern,
        members,
        covered_images,
    })
}

/// One element per pattern; element ids follow pattern order.
pub fn retrieve_all(
    patterns: &[Pattern],
    index: &InvertedIndex,
    db: &TransactionDatabase,
) -> Result<Vec<VisualElement>, ElementError> {
    patterns
        .iter()
        .enumerate()
        .map(|(i, p)| retrieve(ElementId(i as u32), p, index, db))
        .collect()
}

/// Feature files that patch refs point into, with their sorted image ids.
#[derive(Clone, Debug, Default)]
pub struct SourceTable {
    pub files: Vec<String>,
    pub image_ids: Vec<Vec<String>>,
}

impl SourceTable {
    pub fn push(&mut self, file: impl Into<String>, image_ids: Vec<String>) -> u32 {
        self.files.push(file.into());
        self.image_ids.push(image_ids);
        (self.files.len() - 1) as u32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberRef {
    pub file: String,
    pub record: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementManifest {
    pub element_id: ElementId,
    pub pattern: Vec<Item>,
    pub support: f64,
    pub confidence: f64,
    pub members: Vec<MemberRef>,
    pub covered_images: Vec<String>,
    /// Source elements merged into this one; empty for unmerged elements.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub absorbed: Vec<ElementId>,
}

impl ElementManifest {
    pub fn new(element: &VisualElement, absorbed: &[ElementId], sources: &SourceTable) -> Self {
        Self {
            element_id: element.element_id,
            pattern: element.pattern.items.clone(),
            support: element.pattern.support,
            confidence: element.pattern.confidence,
            members: element
                .members
                .iter()
                .map(|m| MemberRef {
                    file: sources.files[m.source as usize].clone(),
                    record: m.record,
                })
                .collect(),
            covered_images: element
                .covered_images
                .iter()
                .map(|k| sources.image_ids[k.source as usize][k.image as usize].clone())
                .collect(),
            absorbed: absorbed.to_vec(),
        }
    }

    /// Rebuilds the element and its absorbed-id list against `sources`.
    pub fn resolve(&self, sources: &SourceTable) -> Result<(VisualElement, Vec<ElementId>), ElementError> {
        let files: HashMap<&str, u32> = sources
            .files
            .iter()
            .enumerate()
            .map(|(i, f)| (f.as_str(), i as u32))
            .collect();
        let mut images: HashMap<&str, ImageKey> = HashMap::new();
        for (s, ids) in sources.image_ids.iter().enumerate() {
            for (i, id) in ids.iter().enumerate() {
                images.entry(id.as_str()).or_insert(ImageKey {
                    source: s as u32,
                    image: i as u32,
                });
            }
        }
        let members = self
            .members
            .iter()
            .map(|m| {
                files
                    .get(m.file.as_str())
                    .map(|&source| PatchRef::new(source, m.record))
                    .ok_or_else(|| ElementError::UnknownFile(m.file.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let covered_images = self
            .covered_images
            .iter()
            .map(|id| images.get(id.as_str()).copied().ok_or_else(|| ElementError::UnknownImage(id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let element = VisualElement {
            element_id: self.element_id,
            pattern: Pattern::new(self.pattern.clone(), self.support, self.confidence),
            members,
            covered_images,
        };
        Ok((element, self.absorbed.clone()))
    }
}

pub fn write_manifests(path: &Path, manifests: &[ElementManifest]) -> Result<(), ElementError> {
    let io_err = |source| ElementError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err)?);
    serde_json::to_writer(&mut w, manifests).map_err(|source| ElementError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n").map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn read_manifests(path: &Path) -> Result<Vec<ElementManifest>, ElementError> {
    let text = fs::read_to_string(path).map_err(|source| ElementError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ElementError::Json {
        path: path.to_path_buf(),
        source,
    })
}
