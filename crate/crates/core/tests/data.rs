use std::collections::HashSet;

use msl_core::data::{synth_glyphs, GlyphGenConfig, Pool};
use msl_core::meta::{sample_episode, sample_task};
use msl_core::rng::stream;
use proptest::prelude::*;

/// Nearest class mean in pixel space, the separability oracle.
fn centroid_accuracy(tasks: usize) -> f64 {
    let data = synth_glyphs(&GlyphGenConfig::default()).unwrap();
    let (mut correct, mut total) = (0, 0);
    for t in 0..tasks {
        let mut rng = stream(99, &[t as u64]);
        let task = sample_task(&data, Pool::MetaTrain, 5, t, &mut rng).unwrap();
        let ep = sample_episode(&data, &task, 5, 15, &mut rng).unwrap();
        let d = 28 * 28;
        let mut means = vec![vec![0.0f64; d]; 5];
        for (img, &y) in ep.support_x.data().chunks(d).zip(&ep.support_y) {
            for (m, &v) in means[y].iter_mut().zip(img) {
                *m += v as f64 / 5.0;
            }
        }
        for (img, &y) in ep.query_x.data().chunks(d).zip(&ep.query_y) {
            let dist = |m: &Vec<f64>| m.iter().zip(img).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
            let pred = (0..5).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
            correct += (pred == y) as usize;
            total += 1;
        }
    }
    correct as f64 / total as f64
}

#[test]
fn synthetic_glyphs_are_separable_by_class_means() {
    let acc = centroid_accuracy(100);
    assert!(acc > 0.8, "nearest-centroid accuracy {acc}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, .. ProptestConfig::default() })]

    #[test]
    fn pools_are_disjoint_for_every_seed(seed in any::<u64>(), frac in 0.05f64..0.9) {
        let data = synth_glyphs(&GlyphGenConfig { num_classes: 40, images_per_class: 2, ..GlyphGenConfig::default() })
            .unwrap()
            .split_pools(frac, seed)
            .unwrap();
        let train: HashSet<_> = data.pool(Pool::MetaTrain).iter().map(|&i| data.class(i).id.clone()).collect();
        let test: HashSet<_> = data.pool(Pool::MetaTest).iter().map(|&i| data.class(i).id.clone()).collect();
        prop_assert!(train.is_disjoint(&test));
        prop_assert_eq!(train.len() + test.len(), 40);
    }
}
