mod common;

use mdpm::miner::{count_containing, mine, MineConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{exhaustive_mine, oracle_case, random_database};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_exhaustive_oracle(seed in any::<u64>()) {
        let case = oracle_case(seed);
        let got: Vec<_> = mine(&case.db, &case.config)
            .unwrap()
            .into_iter()
            .map(|p| (p.items, p.support, p.confidence))
            .collect();
        prop_assert_eq!(got, exhaustive_mine(&case.db, &case.config));
    }

    #[test]
    fn every_pattern_clears_both_thresholds(seed in any::<u64>()) {
        let case = oracle_case(seed);
        for p in mine(&case.db, &case.config).unwrap() {
            prop_assert!(p.support > case.config.supp_min);
            prop_assert!(p.confidence > case.config.conf_min);
            prop_assert!(p.confidence <= 1.0);
            prop_assert!((case.config.min_len..=case.config.max_len).contains(&p.items.len()));
        }
    }

    #[test]
    fn subsets_are_at_least_as_frequent(seed in any::<u64>()) {
        let case = oracle_case(seed);
        for p in mine(&case.db, &case.config).unwrap() {
            let whole = count_containing(&case.db, &p.items);
            for skip in 0..p.items.len() {
                let mut sub = p.items.clone();
                sub.remove(skip);
                prop_assert!(count_containing(&case.db, &sub) >= whole);
            }
        }
    }

    #[test]
    fn raising_thresholds_only_removes_patterns(seed in any::<u64>(), dsupp in 0.0f64..0.1, dconf in 0.0f64..0.3) {
        let case = oracle_case(seed);
        let loose = mine(&case.db, &case.config).unwrap();
        let strict_config = MineConfig {
            supp_min: case.config.supp_min + dsupp,
            conf_min: (case.config.conf_min + dconf).min(0.99),
            ..case.config.clone()
        };
        let strict = mine(&case.db, &strict_config).unwrap();
        for p in &strict {
            prop_assert!(loose.iter().any(|q| q.items == p.items));
        }
    }

    #[test]
    fn output_is_sorted_by_count_then_items(seed in any::<u64>()) {
        let case = oracle_case(seed);
        let out = mine(&case.db, &case.config).unwrap();
        for pair in out.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            prop_assert!(a.support > b.support || (a.support == b.support && a.items < b.items));
        }
    }
}

#[test]
fn all_positive_database_has_full_confidence() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let db = random_database(&mut rng, 200, 12, 4, 1.0);
    let config = MineConfig {
        supp_min: 0.05,
        conf_min: 0.99,
        min_len: 1,
        max_len: 3,
    };
    let out = mine(&db, &config).unwrap();
    assert!(!out.is_empty());
    assert!(out.iter().all(|p| p.confidence == 1.0));
}
