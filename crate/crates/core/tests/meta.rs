use msl_core::channel::ChannelConfig;
use msl_core::data::{synth_glyphs, Dataset, GlyphGenConfig, Pool};
use msl_core::meta::{inner_adapt, meta_loss, meta_train, sample_episode, sample_task, Episode, MetaConfig};
use msl_core::nn::{
    backward, forward, sgd_step, softmax_cross_entropy, ModelConfig, OptimState, OptimizerKind, Parameters,
};
use msl_core::rng::stream;
use msl_core::split::{evaluate, split_at, CutPoint, Link, SplitPair};

fn dataset() -> Dataset {
    synth_glyphs(&GlyphGenConfig {
        num_classes: 30,
        images_per_class: 12,
        seed: 3,
        ..GlyphGenConfig::default()
    })
    .unwrap()
    .split_pools(0.2, 1)
    .unwrap()
}

fn loss_and_grads(params: &Parameters<f32>, cfg: &ModelConfig, x: &msl_core::nn::Tensor<f32>, y: &[usize]) -> (f64, Parameters<f32>) {
    let trace = forward(params, cfg, x).unwrap();
    let (loss, g) = softmax_cross_entropy(trace.output(), y).unwrap();
    (loss, backward(params, cfg, &trace, &g).unwrap().0)
}

/// First-order MAML written directly against the joined model. Returns the
/// final initialization and the per-epoch summed query losses.
fn monolithic_fomaml(cfg: &MetaConfig, model: &ModelConfig, data: &Dataset) -> (Parameters<f32>, Vec<f64>) {
    let mut init = Parameters::<f32>::init(model, cfg.seed).unwrap();
    let mut adam = OptimState::new(OptimizerKind::Adam, &init);
    let mut losses = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut total: Option<Parameters<f32>> = None;
        let mut epoch_loss = 0.0;
        for t in 0..cfg.tasks {
            let mut rng = stream(cfg.seed, &[epoch as u64, t as u64]);
            let task = sample_task(data, Pool::MetaTrain, cfg.ways, t, &mut rng).unwrap();
            let ep = sample_episode(data, &task, cfg.shots, cfg.queries, &mut rng).unwrap();
            let mut w = init.clone();
            for _ in 0..cfg.inner_steps {
                let (_, g) = loss_and_grads(&w, model, &ep.support_x, &ep.support_y);
                sgd_step(&mut w, &g, cfg.inner_lr).unwrap();
            }
            let (l, g) = loss_and_grads(&w, model, &ep.query_x, &ep.query_y);
            epoch_loss += l;
            match &mut total {
                Some(sum) => sum.axpy(1.0, &g).unwrap(),
                None => total = Some(g),
            }
        }
        adam.step(&mut init, &total.unwrap(), cfg.outer_lr).unwrap();
        losses.push(epoch_loss);
    }
    (init, losses)
}

#[test]
fn split_meta_training_equals_monolithic_fomaml() {
    let data = dataset();
    let model = ModelConfig::default_cnn(5);
    let cfg = MetaConfig {
        tasks: 3,
        ways: 5,
        images_per_class: 12,
        shots: 2,
        queries: 3,
        inner_steps: 2,
        inner_lr: 0.05,
        outer_lr: 0.001,
        epochs: 4,
        seed: 17,
        ..MetaConfig::default()
    };
    let (oracle, oracle_losses) = monolithic_fomaml(&cfg, &model, &data);
    for cut in 1..=3 {
        let (pair, log) = meta_train::<f32>(&cfg, &model, CutPoint::new(cut).unwrap(), &data, &ChannelConfig::identity()).unwrap();
        let diff = pair.join().1.max_abs_diff(&oracle);
        assert!(diff < 1e-6, "cut {cut}: parameters differ by {diff}");
        for (e, (a, b)) in log.iter().zip(&oracle_losses).enumerate() {
            assert!((a.meta_loss - b).abs() < 1e-6, "cut {cut}, epoch {}: {} vs {b}", e + 1, a.meta_loss);
        }
    }
}

fn episode(data: &Dataset, t: usize) -> Episode {
    let mut rng = stream(8, &[t as u64]);
    let task = sample_task(data, Pool::MetaTrain, 5, t, &mut rng).unwrap();
    sample_episode(data, &task, 5, 5, &mut rng).unwrap()
}

#[test]
fn small_step_lowers_support_loss_on_most_tasks() {
    let data = dataset();
    let model = ModelConfig::default_cnn(5);
    let tasks = 50;
    let mut improved = 0;
    for t in 0..tasks {
        let init = SplitPair::<f32>::init(&model, CutPoint::new(2).unwrap(), t as u64).unwrap();
        let ep = episode(&data, t);
        let mut link = Link::identity();
        let (before, _) = evaluate(&init, &ep.support_x, &ep.support_y, &mut link).unwrap();
        let (adapted, _) = inner_adapt(&init, &ep, 1, 0.001, &mut link).unwrap();
        let (after, _) = evaluate(&adapted, &ep.support_x, &ep.support_y, &mut link).unwrap();
        improved += (after.loss <= before.loss) as usize;
    }
    assert!(improved * 10 >= tasks * 9, "{improved}/{tasks} tasks improved");
}

#[test]
fn meta_loss_equals_recomputed_task_losses() {
    let data = dataset();
    let model = ModelConfig::default_cnn(5);
    let params = Parameters::<f32>::init(&model, 4).unwrap();
    let init = split_at(&model, &params, CutPoint::new(1).unwrap()).unwrap();
    let episodes: Vec<Episode> = (0..4).map(|t| episode(&data, t)).collect();
    let mut link = Link::identity();
    let adapted: Vec<SplitPair<f32>> = episodes
        .iter()
        .map(|ep| inner_adapt(&init, ep, 2, 0.05, &mut link).unwrap().0)
        .collect();
    let total = meta_loss(&adapted, &episodes, &mut link).unwrap();
    let recomputed: f64 = adapted
        .iter()
        .zip(&episodes)
        .map(|(pair, ep)| {
            let (cfg, p) = pair.join();
            loss_and_grads(&p, &cfg, &ep.query_x, &ep.query_y).0
        })
        .sum();
    assert!((total - recomputed).abs() < 1e-6, "{total} vs {recomputed}");
}
