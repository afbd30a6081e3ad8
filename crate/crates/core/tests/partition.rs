//! Split forward/backward with an identity channel against the monolithic
//! model.

use msl_core::nn::{backward, forward, softmax_cross_entropy, ModelConfig, Parameters, Real, Tensor};
use msl_core::split::{
    aggregator_backward, aggregator_forward, device_backward, device_forward, smashed_payload_bytes, split_at, CutPoint,
    Stage,
};
use msl_core::nn::DType;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Diff {
    logits: f64,
    smashed_grad: f64,
    grads: f64,
}

fn compare<T: Real>(cut: usize, seed: u64, batch: usize) -> Diff {
    let cfg = ModelConfig::default_cnn(5);
    let params = Parameters::<T>::init(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let x = Tensor::<T>::from_fn(&[batch, 1, 28, 28], |_| T::from_f64(rng.gen::<f64>()));
    let y: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..5)).collect();

    let mono = forward(&params, &cfg, &x).unwrap();
    let (_, g) = softmax_cross_entropy(mono.output(), &y).unwrap();
    let (mono_grads, _) = backward(&params, &cfg, &mono, &g).unwrap();

    let cut = CutPoint::new(cut).unwrap();
    let pair = split_at(&cfg, &params, cut).unwrap();
    let (mut s, dtrace) = device_forward(&pair, &x).unwrap();
    s.stage = Stage::PostChannel;
    let (logits, atrace) = aggregator_forward(&pair, &s).unwrap();
    let (_, g_split) = softmax_cross_entropy(&logits, &y).unwrap();
    let (agg_grads, sg) = aggregator_backward(&pair, &atrace, &g_split).unwrap();
    let dev_grads = device_backward(&pair, &dtrace, &sg).unwrap();

    // cotangent at the cut, recomputed through the monolithic tail
    let at = cut.layer_index(&cfg).unwrap();
    let (_, tail_params) = params.split_at(at);
    let tail_cfg = pair.aggregator.cfg.clone();
    let tail = forward(&tail_params, &tail_cfg, mono.layer_output(at - 1)).unwrap();
    let (_, tail_input_grad) = backward(&tail_params, &tail_cfg, &tail, &g).unwrap();

    Diff {
        logits: logits.max_abs_diff(mono.output()),
        smashed_grad: sg.tensor.max_abs_diff(&tail_input_grad),
        grads: dev_grads.concat(&agg_grads).max_abs_diff(&mono_grads),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 50, .. ProptestConfig::default() })]

    #[test]
    fn split_matches_monolithic_in_f32(cut in 1usize..=3, seed in any::<u64>(), batch in 1usize..4) {
        let d = compare::<f32>(cut, seed, batch);
        prop_assert!(d.logits < 1e-6, "logits differ by {}", d.logits);
        prop_assert!(d.smashed_grad < 1e-6, "smashed gradient differs by {}", d.smashed_grad);
        prop_assert!(d.grads < 1e-6, "parameter gradients differ by {}", d.grads);
    }

    #[test]
    fn split_matches_monolithic_in_f64(cut in 1usize..=3, seed in any::<u64>()) {
        let d = compare::<f64>(cut, seed, 2);
        prop_assert!(d.logits < 1e-12 && d.smashed_grad < 1e-12 && d.grads < 1e-12);
    }
}

#[test]
fn payload_strictly_decreases_with_depth() {
    let cfg = ModelConfig::default_cnn(5);
    let bytes: Vec<u64> = (1..=3)
        .map(|c| smashed_payload_bytes(&cfg, CutPoint::new(c).unwrap(), 1, DType::F32).unwrap())
        .collect();
    // 64 channels of 13x13, 6x6 and 2x2, four bytes each
    assert_eq!(bytes, vec![64 * 13 * 13 * 4, 64 * 6 * 6 * 4, 64 * 2 * 2 * 4]);
}
