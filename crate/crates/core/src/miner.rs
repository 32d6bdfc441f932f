//! Levelwise Apriori mining of rules `P → pos`.
//!
//! A pattern `P` is reported when `supp(P) > supp_min` and
//! `conf(P → pos) > conf_min`. Counting is integer-exact; support and
//! confidence fractions are derived from the counts only when a pattern is
//! emitted or a threshold is tested.
//!
//! Frequent itemsets of each length are kept as a prefix tree flattened
//! into per-level arrays: an itemset of length `l` is its parent (a
//! frequent itemset of length `l - 1`) plus one larger last item. Children
//! of a node occupy a contiguous, last-item-sorted range of the next level,
//! which is what both candidate generation and counting walk over.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transactions::{build_labeled_database, FeatureSelection, Item, TransactionDatabase, TransactionError};

/// Categories are expected to yield at least this many patterns.
pub const MIN_PATTERNS_PER_CATEGORY: usize = 100;

#[derive(Debug, Error)]
pub enum MineError {
    #[error("transaction database is empty")]
    EmptyDatabase,
    #[error("antecedent {0:?} has zero support")]
    ZeroSupport(Vec<Item>),
    #[error("invalid mining config: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("database has {0} transactions, more than 32-bit counters allow")]
    TooManyTransactions(usize),
    #[error(transparent)]
    Transactions(#[from] TransactionError),
    #[error("pattern line {line}: {source}")]
    PatternJson {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MineConfig {
    pub supp_min: f64,
    pub conf_min: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            supp_min: 0.0001,
            conf_min: 0.3,
            min_len: 2,
            max_len: 4,
        }
    }
}

impl MineConfig {
    pub fn validate(&self) -> Result<(), MineError> {
        let bad = |field, reason: &str| {
            Err(MineError::InvalidConfig {
                field,
                reason: reason.to_owned(),
            })
        };
        if !(self.supp_min > 0.0 && self.supp_min <= 1.0) {
            return bad("supp_min", "must lie in (0, 1]");
        }
        if !(self.conf_min > 0.0 && self.conf_min <= 1.0) {
            return bad("conf_min", "must lie in (0, 1]");
        }
        if self.min_len < 1 {
            return bad("min_len", "must be at least 1");
        }
        if self.max_len < self.min_len {
            return bad("max_len", "must be at least min_len");
        }
        Ok(())
    }
}

/// A frequent itemset with its support and confidence toward `pos`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub items: Vec<Item>,
    pub support: f64,
    pub confidence: f64,
    /// Positive transactions containing the pattern, once retrieved.
    #[serde(skip)]
    pub positive_transactions: Option<Vec<u32>>,
}

impl Pattern {
    pub fn new(items: Vec<Item>, support: f64, confidence: f64) -> Self {
        Self {
            items,
            support,
            confidence,
            positive_transactions: None,
        }
    }
}

fn fraction(count: usize, n: usize) -> f64 {
    count as f64 / n as f64
}

fn exceeds(count: usize, n: usize, threshold: f64) -> bool {
    fraction(count, n) > threshold
}

/// `supp(I ∪ {pos}) / supp(I)` from raw counts.
fn confidence_from_counts(positive: usize, total: usize, n: usize) -> f64 {
    fraction(positive, n) / fraction(total, n)
}

/// Number of transactions containing `itemset`. Label ids are matched
/// against each transaction's class.
pub fn count_containing(db: &TransactionDatabase, itemset: &[Item]) -> usize {
    let pos = db.positive_label();
    let neg = db.negative_label();
    let want_pos = itemset.contains(&pos);
    let want_neg = itemset.contains(&neg);
    if want_pos && want_neg {
        return 0;
    }
    let mut items: Vec<Item> = itemset.iter().copied().filter(|&i| i != pos && i != neg).collect();
    items.sort_unstable();
    items.dedup();
    db.iter()
        .filter(|t| (!want_pos || t.positive) && (!want_neg || !t.positive))
        .filter(|t| is_sorted_subset(&items, t.items))
        .count()
}

fn is_sorted_subset(small: &[Item], large: &[Item]) -> bool {
    let mut it = large.iter();
    small.iter().all(|x| it.any(|y| y == x))
}

/// Fraction of transactions containing `itemset`.
pub fn support(db: &TransactionDatabase, itemset: &[Item]) -> Result<f64, MineError> {
    if db.is_empty() {
        return Err(MineError::EmptyDatabase);
    }
    Ok(fraction(count_containing(db, itemset), db.len()))
}

/// `supp(itemset ∪ {item}) / supp(itemset)`.
pub fn confidence(db: &TransactionDatabase, itemset: &[Item], item: Item) -> Result<f64, MineError> {
    let base = support(db, itemset)?;
    if base == 0.0 {
        return Err(MineError::ZeroSupport(itemset.to_vec()));
    }
    let mut joined = itemset.to_vec();
    joined.push(item);
    Ok(support(db, &joined)? / base)
}

const NONE: u32 = u32::MAX;

#[derive(Default)]
struct Level {
    parent: Vec<u32>,
    last: Vec<Item>,
    count: Vec<u32>,
    positive: Vec<u32>,
    /// Offsets of each node's children in the next level (`len + 1` entries
    /// once the next level exists).
    children: Vec<usize>,
}

impl Level {
    fn len(&self) -> usize {
        self.last.len()
    }
}

struct Candidates {
    /// `offsets[i]..offsets[i + 1]` are the candidates extending node `i`
    /// of the previous level.
    offsets: Vec<usize>,
    last: Vec<Item>,
}

struct Miner<'a> {
    config: &'a MineConfig,
    n: usize,
    /// Level-1 node of each item, or `NONE` if the item is infrequent.
    rank: Vec<u32>,
    levels: Vec<Level>,
    /// Transactions restricted to frequent items.
    offsets: Vec<usize>,
    items: Vec<Item>,
    positive: Vec<bool>,
}

/// Calls `f(index_in_a, index_in_b)` for every common element of two
/// ascending slices.
#[inline]
fn intersect(a: &[Item], b: &[Item], mut f: impl FnMut(usize, usize)) {
    if a.len() <= 4 * b.len() {
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    f(i, j);
                    i += 1;
                    j += 1;
                }
            }
        }
    } else {
        let mut lo = 0;
        for (j, x) in b.iter().enumerate() {
            match a[lo..].binary_search(x) {
                Ok(p) => {
                    f(lo + p, j);
                    lo += p + 1;
                }
                Err(p) => lo += p,
            }
            if lo >= a.len() {
                break;
            }
        }
    }
}

impl<'a> Miner<'a> {
    fn new(db: &TransactionDatabase, config: &'a MineConfig) -> Self {
        let n = db.len();
        let d = db.dimension();
        let mut count = vec![0u32; d + 1];
        let mut positive = vec![0u32; d + 1];
        for t in db.iter() {
            for &i in t.items {
                count[i as usize] += 1;
                positive[i as usize] += t.positive as u32;
            }
        }
        let mut rank = vec![NONE; d + 1];
        let mut level = Level::default();
        for item in 1..=d {
            if exceeds(count[item] as usize, n, config.supp_min) {
                rank[item] = level.len() as u32;
                level.parent.push(0);
                level.last.push(item as Item);
                level.count.push(count[item]);
                level.positive.push(positive[item]);
            }
        }
        let mut offsets = vec![0];
        let mut items = Vec::new();
        let mut pos = Vec::with_capacity(n);
        for t in db.iter() {
            items.extend(t.items.iter().copied().filter(|&i| rank[i as usize] != NONE));
            offsets.push(items.len());
            pos.push(t.positive);
        }
        Self {
            config,
            n,
            rank,
            levels: vec![level],
            offsets,
            items,
            positive: pos,
        }
    }

    /// Node index of a frequent itemset, if it is one.
    fn lookup(&self, itemset: &[Item]) -> Option<usize> {
        let node = *self.rank.get(itemset[0] as usize)?;
        if node == NONE {
            return None;
        }
        let mut node = node as usize;
        for (depth, item) in itemset[1..].iter().enumerate() {
            let range = self.levels[depth].children[node]..self.levels[depth].children[node + 1];
            let p = self.levels[depth + 1].last[range.clone()].binary_search(item).ok()?;
            node = range.start + p;
        }
        Some(node)
    }

    fn itemset(&self, depth: usize, mut node: usize) -> Vec<Item> {
        let mut out = vec![0; depth + 1];
        for d in (0..=depth).rev() {
            out[d] = self.levels[d].last[node];
            node = self.levels[d].parent[node] as usize;
        }
        out
    }

    /// Joins siblings of the newest level and prunes by subset frequency.
    fn generate(&self) -> Candidates {
        let depth = self.levels.len() - 1;
        let prev = &self.levels[depth];
        let mut offsets = Vec::with_capacity(prev.len() + 1);
        let mut last = Vec::new();
        offsets.push(0);
        let mut subset = Vec::with_capacity(depth + 1);
        for i in 0..prev.len() {
            let group_end = if depth == 0 {
                prev.len()
            } else {
                self.levels[depth - 1].children[prev.parent[i] as usize + 1]
            };
            let base = self.itemset(depth, i);
            for j in i + 1..group_end {
                let y = prev.last[j];
                // Dropping the last item of `base` gives sibling j, dropping
                // y gives `base`; both are frequent. Check the rest.
                let keep = (0..depth).all(|m| {
                    subset.clear();
                    subset.extend(base.iter().enumerate().filter(|&(p, _)| p != m).map(|(_, &v)| v));
                    subset.push(y);
                    self.lookup(&subset).is_some()
                });
                if keep {
                    last.push(y);
                }
            }
            offsets.push(last.len());
        }
        Candidates { offsets, last }
    }

    fn walk(&self, cands: &Candidates, counts: &[AtomicU64], depth: usize, node: usize, t: &[Item], start: usize, inc: u64) {
        let target = self.levels.len() - 1;
        let rest = &t[start..];
        if rest.len() < target - depth + 1 {
            return;
        }
        if depth == target {
            let range = cands.offsets[node]..cands.offsets[node + 1];
            intersect(&cands.last[range.clone()], rest, |p, _| {
                counts[range.start + p].fetch_add(inc, Ordering::Relaxed);
            });
        } else {
            let level = &self.levels[depth];
            let range = level.children[node]..level.children[node + 1];
            intersect(&self.levels[depth + 1].last[range.clone()], rest, |p, q| {
                self.walk(cands, counts, depth + 1, range.start + p, t, start + q + 1, inc);
            });
        }
    }

    fn count(&self, cands: &Candidates) -> Vec<u64> {
        let counts: Vec<AtomicU64> = (0..cands.last.len()).map(|_| AtomicU64::new(0)).collect();
        (0..self.positive.len()).into_par_iter().with_min_len(256).for_each(|ti| {
            let t = &self.items[self.offsets[ti]..self.offsets[ti + 1]];
            let inc = 1 | ((self.positive[ti] as u64) << 32);
            for (p, &item) in t.iter().enumerate() {
                let node = self.rank[item as usize] as usize;
                self.walk(cands, &counts, 0, node, t, p + 1, inc);
            }
        });
        counts.into_iter().map(AtomicU64::into_inner).collect()
    }

    /// Keeps frequent candidates as the next level; false when none survive.
    fn extend(&mut self, cands: Candidates, counts: Vec<u64>) -> bool {
        let mut next = Level::default();
        let prev_len = self.levels.last().map_or(0, Level::len);
        let mut children = Vec::with_capacity(prev_len + 1);
        for i in 0..prev_len {
            children.push(next.len());
            for c in cands.offsets[i]..cands.offsets[i + 1] {
                let total = (counts[c] & 0xffff_ffff) as u32;
                let positive = (counts[c] >> 32) as u32;
                if exceeds(total as usize, self.n, self.config.supp_min) {
                    next.parent.push(i as u32);
                    next.last.push(cands.last[c]);
                    next.count.push(total);
                    next.positive.push(positive);
                }
            }
        }
        children.push(next.len());
        self.levels.last_mut().unwrap().children = children;
        if next.len() == 0 {
            return false;
        }
        self.levels.push(next);
        true
    }

    fn emit(&self, depth: usize, out: &mut Vec<(u32, Pattern)>) {
        let level = &self.levels[depth];
        for node in 0..level.len() {
            let total = level.count[node] as usize;
            let positive = level.positive[node] as usize;
            let conf = confidence_from_counts(positive, total, self.n);
            if conf > self.config.conf_min {
                out.push((
                    level.count[node],
                    Pattern::new(self.itemset(depth, node), fraction(total, self.n), conf),
                ));
            }
        }
    }
}

/// All itemsets of non-label items with `min_len ≤ |P| ≤ max_len`,
/// `supp(P) > supp_min` and `conf(P → pos) > conf_min`, sorted by
/// descending support then lexicographically by items.
pub fn mine(db: &TransactionDatabase, config: &MineConfig) -> Result<Vec<Pattern>, MineError> {
    config.validate()?;
    if db.is_empty() {
        return Err(MineError::EmptyDatabase);
    }
    if db.len() > u32::MAX as usize {
        return Err(MineError::TooManyTransactions(db.len()));
    }
    let mut miner = Miner::new(db, config);
    let mut found = Vec::new();
    if miner.levels[0].len() > 0 && config.min_len <= 1 {
        miner.emit(0, &mut found);
    }
    for len in 2..=config.max_len {
        if miner.levels.last().map_or(true, |l| l.len() == 0) {
            break;
        }
        let cands = miner.generate();
        log::debug!("level {len}: {} candidates", cands.last.len());
        if cands.last.is_empty() {
            break;
        }
        let counts = miner.count(&cands);
        if !miner.extend(cands, counts) {
            break;
        }
        if len >= config.min_len {
            miner.emit(len - 1, &mut found);
        }
    }
    found.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.items.cmp(&b.1.items)));
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Thresholds for every category, with optional per-category overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMineConfig {
    pub default: MineConfig,
    #[serde(default)]
    pub overrides: BTreeMap<usize, MineConfig>,
}

impl CategoryMineConfig {
    pub fn for_category(&self, category: usize) -> &MineConfig {
        self.overrides.get(&category).unwrap_or(&self.default)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternShortfall {
    pub category: usize,
    pub found: usize,
    pub required: usize,
}

#[derive(Clone, Debug, Default)]
pub struct CategoryPatterns {
    pub patterns: BTreeMap<usize, Vec<Pattern>>,
    pub shortfalls: Vec<PatternShortfall>,
}

/// Mines each category against the pooled remaining categories.
pub fn mine_per_category(
    selection: &FeatureSelection<'_>,
    k: usize,
    configs: &CategoryMineConfig,
) -> Result<CategoryPatterns, MineError> {
    let base = build_labeled_database(selection, k, |_| false)?;
    let categories: Vec<usize> = selection
        .records
        .iter()
        .map(|&r| selection.set.category_of(r).unwrap_or(usize::MAX))
        .collect();
    let mut result = CategoryPatterns::default();
    for category in 0..selection.set.category_names().len() {
        let db = base.relabeled(|i| categories[i] == category);
        let patterns = if db.is_empty() {
            Vec::new()
        } else {
            mine(&db, configs.for_category(category))?
        };
        if patterns.len() < MIN_PATTERNS_PER_CATEGORY {
            log::warn!(
                "category {} ({}) yielded {} patterns, fewer than {MIN_PATTERNS_PER_CATEGORY}",
                category,
                selection.set.category_names()[category],
                patterns.len()
            );
            result.shortfalls.push(PatternShortfall {
                category,
                found: patterns.len(),
                required: MIN_PATTERNS_PER_CATEGORY,
            });
        }
        result.patterns.insert(category, patterns);
    }
    Ok(result)
}

/// One JSON object per line: `{"items":[...],"support":s,"confidence":c}`.
pub fn write_patterns<W: Write>(mut w: W, patterns: &[Pattern]) -> Result<(), MineError> {
    for p in patterns {
        let line = serde_json::to_string(p).map_err(|source| MineError::PatternJson { line: 0, source })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_patterns<R: BufRead>(r: R) -> Result<Vec<Pattern>, MineError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| MineError::PatternJson { line: i + 1, source })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurestore::{ImageKey, PatchRef};
    use crate::transactions::Transaction;

    /// [{1,2,pos},{1,neg},{2,pos},{1,2,pos}] with D = 4.
    fn small_db() -> TransactionDatabase {
        let mut db = TransactionDatabase::new(4, 4);
        let rows: [(&[Item], bool); 4] = [(&[1, 2], true), (&[1], false), (&[2], true), (&[1, 2], true)];
        for (i, (items, pos)) in rows.iter().enumerate() {
            let t = Transaction {
                items: items.to_vec(),
                label: if *pos { 5 } else { 6 },
            };
            db.push(&t, PatchRef::new(0, i as u32), ImageKey { source: 0, image: i as u32 }).unwrap();
        }
        db
    }

    #[test]
    fn support_examples() {
        let db = small_db();
        assert_eq!(support(&db, &[]).unwrap(), 1.0);
        assert_eq!(support(&db, &[1, 2]).unwrap(), 0.5);
        assert_eq!(support(&db, &[3]).unwrap(), 0.0);
        assert_eq!(support(&db, &[5]).unwrap(), 0.75);
        assert_eq!(support(&db, &[5, 6]).unwrap(), 0.0);
        assert!(matches!(support(&TransactionDatabase::new(4, 4), &[1]), Err(MineError::EmptyDatabase)));
    }

    #[test]
    fn confidence_examples() {
        let db = small_db();
        assert_eq!(confidence(&db, &[1, 2], 5).unwrap(), 1.0);
        assert!((confidence(&db, &[1], 5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(confidence(&db, &[], 5).unwrap(), 0.75);
        assert!(matches!(confidence(&db, &[3], 5), Err(MineError::ZeroSupport(_))));
    }

    #[test]
    fn mine_small_example() {
        let db = small_db();
        let cfg = MineConfig {
            supp_min: 0.4,
            conf_min: 0.9,
            min_len: 2,
            max_len: 3,
        };
        let got = mine(&db, &cfg).unwrap();
        assert_eq!(got, vec![Pattern::new(vec![1, 2], 0.5, 1.0)]);
    }

    #[test]
    fn unreachable_confidence_gives_nothing() {
        let cfg = MineConfig {
            supp_min: 0.1,
            conf_min: 1.0,
            min_len: 1,
            max_len: 3,
        };
        assert!(mine(&small_db(), &cfg).unwrap().is_empty());
    }

    #[test]
    fn singletons_when_min_len_is_one() {
        let cfg = MineConfig {
            supp_min: 0.4,
            conf_min: 0.5,
            min_len: 1,
            max_len: 1,
        };
        let got = mine(&small_db(), &cfg).unwrap();
        // {2}: supp 0.75, conf 1.0; {1}: supp 0.75, conf 2/3.
        let items: Vec<_> = got.iter().map(|p| p.items.clone()).collect();
        assert_eq!(items, vec![vec![1], vec![2]]);
    }

    #[test]
    fn config_validation_names_field() {
        let mut cfg = MineConfig::default();
        cfg.max_len = 1;
        match cfg.validate() {
            Err(MineError::InvalidConfig { field, .. }) => assert_eq!(field, "max_len"),
            other => panic!("{other:?}"),
        }
        cfg = MineConfig { supp_min: 0.0, ..MineConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(matches!(mine(&TransactionDatabase::new(4, 4), &MineConfig::default()), Err(MineError::EmptyDatabase)));
    }

    #[test]
    fn pattern_lines_round_trip_exactly() {
        let pats = vec![
            Pattern::new(vec![3, 100, 4096], 0.1 + 0.2, 2.0 / 3.0),
            Pattern::new(vec![7, 9], 1e-7, 0.6000000000000001),
        ];
        let mut buf = Vec::new();
        write_patterns(&mut buf, &pats).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"items\":[3,100,4096],\"support\":"));
        let back = read_patterns(&buf[..]).unwrap();
        assert_eq!(back, pats);
        for (a, b) in back.iter().zip(&pats) {
            assert_eq!(a.support.to_bits(), b.support.to_bits());
            assert_eq!(a.confidence.to_bits(), b.confidence.to_bits());
        }
    }
}
