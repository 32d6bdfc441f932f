//! Turning patch activations into a transaction database.
//!
//! Items are 1-based activation dimensions, so with `D` dimensions the
//! item ids are `1..=D`, the positive label is `D + 1` and the negative
//! label is `D + 2`. At `D = 4096` that gives the familiar 4097/4098.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::featurestore::{top_k_indices, FeatureSet, ImageKey, PatchRef};

pub type Item = u32;

#[derive(Debug, Error, PartialEq)]
pub enum TransactionError {
    #[error("feature has {found} dimensions, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("transaction sparsity k must be at least 1")]
    ZeroK,
    #[error("natural-world sampling rate {0} outside (0, 1]")]
    SamplingRate(f64),
    #[error("transaction {index}: {reason}")]
    Invalid { index: usize, reason: String },
}

/// One patch as a set of active dimensions plus a class label item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transaction {
    pub items: Vec<Item>,
    pub label: Item,
}

pub fn positive_label(dimension: usize) -> Item {
    dimension as Item + 1
}

pub fn negative_label(dimension: usize) -> Item {
    dimension as Item + 2
}

/// Top-`k` dimensions of `feature` as 1-based items, labelled by class.
pub fn make_transaction(
    feature: &[f32],
    k: usize,
    is_target: bool,
    dimension: usize,
) -> Result<Transaction, TransactionError> {
    if feature.len() != dimension {
        return Err(TransactionError::DimensionMismatch {
            expected: dimension,
            found: feature.len(),
        });
    }
    if k == 0 {
        return Err(TransactionError::ZeroK);
    }
    let items = top_k_indices(feature, k)
        .into_iter()
        .map(|i| i as Item + 1)
        .collect();
    let label = if is_target {
        positive_label(dimension)
    } else {
        negative_label(dimension)
    };
    Ok(Transaction { items, label })
}

/// Borrowed view of one transaction inside a database.
#[derive(Clone, Copy, Debug)]
pub struct TransactionView<'a> {
    pub items: &'a [Item],
    pub positive: bool,
}

/// A set of records from one feature set.
#[derive(Clone, Debug)]
pub struct FeatureSelection<'a> {
    pub set: &'a FeatureSet,
    /// Index of `set` among the sources a [`PatchRef`] can point into.
    pub source: u32,
    pub records: Vec<usize>,
}

impl<'a> FeatureSelection<'a> {
    pub fn new(set: &'a FeatureSet, source: u32, records: Vec<usize>) -> Self {
        Self {
            set,
            source,
            records,
        }
    }

    pub fn all(set: &'a FeatureSet, source: u32) -> Self {
        Self::new(set, source, (0..set.len()).collect())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct DatabaseOptions {
    /// Fraction of natural-world patches kept, in `(0, 1]`.
    pub natural_sampling_rate: f64,
    pub seed: u64,
}

impl Default for DatabaseOptions {
    fn default() -> Self {
        Self {
            natural_sampling_rate: 1.0,
            seed: 0,
        }
    }
}

/// Transactions stored flat, with patch provenance for each.
#[derive(Clone, Debug, PartialEq)]
pub struct TransactionDatabase {
    dimension: usize,
    k: usize,
    offsets: Vec<usize>,
    items: Vec<Item>,
    positive: Vec<bool>,
    patch_refs: Vec<PatchRef>,
    images: Vec<ImageKey>,
}

impl TransactionDatabase {
    pub fn new(dimension: usize, k: usize) -> Self {
        Self {
            dimension,
            k,
            offsets: vec![0],
            items: Vec::new(),
            positive: Vec::new(),
            patch_refs: Vec::new(),
            images: Vec::new(),
        }
    }

    /// Appends a transaction after checking it respects `D` and `k`.
    pub fn push(&mut self, t: &Transaction, patch: PatchRef, image: ImageKey) -> Result<(), TransactionError> {
        let index = self.len();
        let invalid = |reason: String| TransactionError::Invalid { index, reason };
        if t.items.len() > self.k {
            return Err(invalid(format!("{} items exceeds k = {}", t.items.len(), self.k)));
        }
        if t.items.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("items not strictly increasing".into()));
        }
        if t.items.iter().any(|&i| i == 0 || i as usize > self.dimension) {
            return Err(invalid(format!("item outside [1, {}]", self.dimension)));
        }
        let positive = if t.label == positive_label(self.dimension) {
            true
        } else if t.label == negative_label(self.dimension) {
            false
        } else {
            return Err(invalid(format!("label {} is not a class item", t.label)));
        };
        self.items.extend_from_slice(&t.items);
        self.offsets.push(self.items.len());
        self.positive.push(positive);
        self.patch_refs.push(patch);
        self.images.push(image);
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }

    pub fn positive_label(&self) -> Item {
        positive_label(self.dimension)
    }

    pub fn negative_label(&self) -> Item {
        negative_label(self.dimension)
    }

    pub fn items(&self, index: usize) -> &[Item] {
        &self.items[self.offsets[index]..self.offsets[index + 1]]
    }

    pub fn is_positive(&self, index: usize) -> bool {
        self.positive[index]
    }

    pub fn get(&self, index: usize) -> TransactionView<'_> {
        TransactionView {
            items: self.items(index),
            positive: self.positive[index],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = TransactionView<'_>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// Owned copy of transaction `index`, label item included.
    pub fn transaction(&self, index: usize) -> Transaction {
        Transaction {
            items: self.items(index).to_vec(),
            label: if self.positive[index] {
                self.positive_label()
            } else {
                self.negative_label()
            },
        }
    }

    pub fn patch_refs(&self) -> &[PatchRef] {
        &self.patch_refs
    }

    pub fn images(&self) -> &[ImageKey] {
        &self.images
    }

    pub fn positive_count(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }

    /// Same transactions with labels recomputed by `is_target`. Lets one
    /// item table serve every target category.
    pub fn relabeled(&self, mut is_target: impl FnMut(usize) -> bool) -> TransactionDatabase {
        let mut out = self.clone();
        for (i, p) in out.positive.iter_mut().enumerate() {
            *p = is_target(i);
        }
        out
    }

    /// One transaction per line: ascending item ids, label id last.
    pub fn write_text<W: Write>(&self, mut w: W) -> io::Result<()> {
        let pos = self.positive_label();
        let neg = self.negative_label();
        for t in self.iter() {
            for item in t.items {
                write!(w, "{item} ")?;
            }
            writeln!(w, "{}", if t.positive { pos } else { neg })?;
        }
        Ok(())
    }
}

fn collect_transactions(
    selection: &FeatureSelection<'_>,
    k: usize,
    is_target: bool,
    dimension: usize,
) -> Result<Vec<(Transaction, PatchRef, ImageKey)>, TransactionError> {
    let ordinals = selection.set.record_image_ordinals();
    selection
        .records
        .par_iter()
        .map(|&r| {
            let t = make_transaction(&selection.set.records()[r].feature, k, is_target, dimension)?;
            Ok((
                t,
                PatchRef::new(selection.source, r as u32),
                ImageKey {
                    source: selection.source,
                    image: ordinals[r],
                },
            ))
        })
        .collect()
}

/// Target patches become positive transactions, natural-world patches
/// negative ones; target transactions come first.
pub fn build_database(
    target: &FeatureSelection<'_>,
    natural: &FeatureSelection<'_>,
    k: usize,
) -> Result<TransactionDatabase, TransactionError> {
    build_database_with(target, natural, k, &DatabaseOptions::default())
}

pub fn build_database_with(
    target: &FeatureSelection<'_>,
    natural: &FeatureSelection<'_>,
    k: usize,
    options: &DatabaseOptions,
) -> Result<TransactionDatabase, TransactionError> {
    let dimension = target.set.dimension();
    if natural.set.dimension() != dimension {
        return Err(TransactionError::DimensionMismatch {
            expected: dimension,
            found: natural.set.dimension(),
        });
    }
    if k == 0 {
        return Err(TransactionError::ZeroK);
    }
    let rate = options.natural_sampling_rate;
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(TransactionError::SamplingRate(rate));
    }
    let natural = if rate < 1.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let kept = natural
            .records
            .iter()
            .copied()
            .filter(|_| rng.random::<f64>() < rate)
            .collect();
        FeatureSelection::new(natural.set, natural.source, kept)
    } else {
        natural.clone()
    };

    let mut db = TransactionDatabase::new(dimension, k);
    for (t, patch, image) in collect_transactions(target, k, true, dimension)?
        .into_iter()
        .chain(collect_transactions(&natural, k, false, dimension)?)
    {
        db.push(&t, patch, image)?;
    }
    Ok(db)
}

/// All records of one selection as transactions, positive where
/// `is_target(category)` holds. Used to build the per-category databases
/// from a single pass over the features.
pub fn build_labeled_database(
    selection: &FeatureSelection<'_>,
    k: usize,
    mut is_target: impl FnMut(usize) -> bool,
) -> Result<TransactionDatabase, TransactionError> {
    let dimension = selection.set.dimension();
    let mut db = TransactionDatabase::new(dimension, k);
    for (t, patch, image) in collect_transactions(selection, k, false, dimension)? {
        let cat = selection.set.category_of(patch.record as usize).unwrap_or(usize::MAX);
        let t = Transaction {
            label: if is_target(cat) {
                positive_label(dimension)
            } else {
                t.label
            },
            ..t
        };
        db.push(&t, patch, image)?;
    }
    Ok(db)
}
