//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use mdpm::featurestore::{ImageKey, PatchRef};
use mdpm::miner::MineConfig;
use mdpm::transactions::{make_transaction, Item, TransactionDatabase};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(items, support, confidence)` as the exhaustive oracle reports it.
pub type OraclePattern = (Vec<Item>, f64, f64);

/// Every itemset of non-label items with `min_len..=max_len` members,
/// counted by bitmask containment, filtered by the strict thresholds and
/// sorted by descending count, then items.
pub fn exhaustive_mine(db: &TransactionDatabase, config: &MineConfig) -> Vec<OraclePattern> {
    let d = db.dimension();
    assert!(d <= 64, "oracle uses 64-bit masks");
    let masks: Vec<(u64, bool)> = (0..db.len())
        .map(|i| {
            let mask = db.items(i).iter().fold(0u64, |m, &it| m | 1 << (it - 1));
            (mask, db.is_positive(i))
        })
        .collect();
    let n = db.len() as f64;
    let mut out: Vec<(usize, OraclePattern)> = Vec::new();
    let mut current = Vec::new();
    enumerate(1, d as Item, config.max_len, &mut current, &mut |set: &[Item]| {
        if set.len() < config.min_len {
            return;
        }
        let want = set.iter().fold(0u64, |m, &it| m | 1 << (it - 1));
        let (mut cnt, mut pos) = (0usize, 0usize);
        for &(mask, positive) in &masks {
            if mask & want == want {
                cnt += 1;
                pos += usize::from(positive);
            }
        }
        let supp = cnt as f64 / n;
        if !(supp > config.supp_min) {
            return;
        }
        let conf = (pos as f64 / n) / supp;
        if conf > config.conf_min {
            out.push((cnt, (set.to_vec(), supp, conf)));
        }
    });
    out.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1 .0.cmp(&b.1 .0)));
    out.into_iter().map(|(_, p)| p).collect()
}

fn enumerate(from: Item, to: Item, max_len: usize, current: &mut Vec<Item>, visit: &mut impl FnMut(&[Item])) {
    if !current.is_empty() {
        visit(current);
    }
    if current.len() == max_len {
        return;
    }
    for i in from..=to {
        current.push(i);
        enumerate(i + 1, to, max_len, current, visit);
        current.pop();
    }
}

/// Random non-negative features of dimension `d`, turned into a labelled
/// database with top-`k` items per transaction.
pub fn random_database(rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize, p_pos: f64) -> TransactionDatabase {
    let mut db = TransactionDatabase::new(d, k);
    // A few popular dimensions make frequent itemsets likely.
    let hot: Vec<usize> = (0..d.min(6)).map(|_| rng.random_range(0..d)).collect();
    for i in 0..n {
        let mut f: Vec<f32> = (0..d)
            .map(|_| if rng.random::<f64>() < 0.4 { rng.random::<f32>() } else { 0.0 })
            .collect();
        for &h in &hot {
            if rng.random::<f64>() < 0.5 {
                f[h] += 1.0;
            }
        }
        let positive = rng.random::<f64>() < p_pos;
        let t = make_transaction(&f, k, positive, d).unwrap();
        db.push(&t, PatchRef::new(0, i as u32), ImageKey { source: 0, image: (i / 5) as u32 })
            .unwrap();
    }
    db
}

/// Parameters for one random oracle case.
pub struct OracleCase {
    pub db: TransactionDatabase,
    pub config: MineConfig,
}

pub fn oracle_case(seed: u64) -> OracleCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..=30);
    let k = rng.random_range(1..=8);
    let n = rng.random_range(1..=500);
    let p_pos = rng.random_range(0.1..0.9);
    let db = random_database(&mut rng, n, d, k, p_pos);
    let max_len = rng.random_range(1..=4);
    let config = MineConfig {
        supp_min: rng.random_range(1e-6..0.2),
        conf_min: rng.random_range(1e-6..0.9),
        min_len: rng.random_range(1..=max_len),
        max_len,
    };
    OracleCase { db, config }
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Mean and `n − 1` covariance by direct summation.
pub fn naive_moments(rows: &[Vec<f32>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            mean[j] += r[j] as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (r[a] as f64 - mean[a]) * (r[b] as f64 - mean[b]);
            }
        }
    }
    for row in &mut cov {
        row.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    }
    (mean, cov)
}

pub fn relative_error(got: &[f64], want: &[f64]) -> f64 {
    let diff: f64 = got.iter().zip(want).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let norm: f64 = want.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(f64::MIN_POSITIVE)
}
