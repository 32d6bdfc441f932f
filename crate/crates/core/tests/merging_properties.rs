use mdpm::detectors::{score_element, LdaDetector};
use mdpm::elements::{ElementId, VisualElement};
use mdpm::featurestore::{BBox, FeatureSet, PatchRecord, PatchRef};
use mdpm::merging::element_centroids;
use mdpm::miner::Pattern;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn centroid_score_equals_member_average(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..=16);
        let mut set = FeatureSet::new(d, vec!["c".into()]);
        set.set_image_label("img", 0).unwrap();
        let n = rng.random_range(1..=80);
        for _ in 0..n {
            set.push(PatchRecord {
                image_id: "img".into(),
                bbox: BBox::default(),
                scale_index: 0,
                feature: (0..d).map(|_| rng.random::<f32>() * 10.0).collect(),
            })
            .unwrap();
        }
        let members: Vec<PatchRef> = {
            let mut m: Vec<u32> = (0..rng.random_range(1..=n)).map(|_| rng.random_range(0..n as u32)).collect();
            m.sort_unstable();
            m.dedup();
            m.into_iter().map(|r| PatchRef::new(0, r)).collect()
        };
        let element = VisualElement {
            element_id: ElementId(0),
            pattern: Pattern::new(vec![1], 0.5, 1.0),
            members,
            covered_images: Vec::new(),
        };
        let det = LdaDetector { weights: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect() };
        let centroid = &element_centroids(std::slice::from_ref(&element), &set).unwrap()[0];
        let via_centroid: f64 = det.weights.iter().zip(centroid).map(|(w, c)| w * c).sum();
        let via_members = score_element(&det, &element, &set).unwrap();
        let magnitude: f64 = det.weights.iter().zip(centroid).map(|(w, c)| (w * c).abs()).sum();
        prop_assert!((via_centroid - via_members).abs() <= 1e-12 * magnitude.max(1.0));
    }
}
