//! Experiment orchestration: configuration, the three training modes
//! (monolithic baseline, split learning from scratch, meta-trained split
//! learning), metrics, FLOP accounting, run reports and sweeps.

mod config;
mod flops;
mod metrics;
mod report;
mod sweep;

pub use config::{DataSource, ExperimentConfig, Mode, SynthConfig};
pub use flops::{flop_report, layer_costs, total_flops, LayerCost};
pub use metrics::{classification_metrics, confusion_matrix, objective_p1, ClassificationMetrics};
pub use report::{config_from_report, RunReport};
pub use sweep::{sweep, SweepKind, SweepRow};

use crate::channel::ChannelConfig;
use crate::conformal::{self, CalibrationSet, CpResult};
use crate::data::{load_omniglot, synth_glyphs, Dataset, GlyphGenConfig, Pool};
use crate::error::{Error, Result};
use crate::meta::{meta_test, meta_train, sample_episode, sample_task, Episode, EpochLog};
use crate::nn::{argmax_rows, backward, forward, sgd_step, softmax, softmax_cross_entropy, Parameters};
use crate::rng::{derive_seed, stream};
use crate::split::{Link, SplitPair};
use crate::transport::{Batch, SessionConfig};

/// Stream identifiers under the run seed.
mod streams {
    pub const DATA: u64 = 0;
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const TRAIN_CHANNEL: u64 = 4;
    pub const EVAL_CHANNEL: u64 = 5;
    pub const CP: u64 = 6;
}

/// Seed of the model initialization (shared by all modes).
pub fn init_seed(cfg: &ExperimentConfig) -> u64 {
    derive_seed(cfg.seed, &[streams::INIT])
}

fn channel_for(cfg: &ExperimentConfig, purpose: u64) -> ChannelConfig {
    ChannelConfig {
        seed: derive_seed(cfg.seed, &[purpose, cfg.channel.seed]),
        ..cfg.channel.clone()
    }
}

/// Loads the configured images without splitting pools. Omniglot classes
/// with fewer than `meta.images_per_class` images are dropped.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synth => synth_glyphs(&GlyphGenConfig {
            num_classes: cfg.synth.num_classes,
            images_per_class: cfg.meta.images_per_class,
            strokes: (cfg.synth.strokes_min, cfg.synth.strokes_max),
            jitter: cfg.synth.jitter,
            seed: derive_seed(cfg.seed, &[streams::DATA]),
        }),
        DataSource::Omniglot(root) => load_omniglot(root, cfg.meta.images_per_class),
    }
}

/// Seeded meta-train/meta-test class split of `data`.
pub fn split_data(cfg: &ExperimentConfig, data: Dataset) -> Result<Dataset> {
    data.split_pools(cfg.meta_test_fraction, derive_seed(cfg.seed, &[streams::SPLIT]))
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    split_data(cfg, load_data(cfg)?)
}

/// The `i`-th meta-test episode of a run.
pub fn eval_episode(cfg: &ExperimentConfig, data: &Dataset, i: usize) -> Result<Episode> {
    let mut rng = stream(cfg.seed, &[streams::EVAL, i as u64]);
    let task = sample_task(data, Pool::MetaTest, cfg.meta.ways, i, &mut rng)?;
    sample_episode(data, &task, cfg.meta.shots, cfg.test_queries, &mut rng)
}

/// Query-side outcome of adapting to one meta-test episode.
struct Adapted {
    accuracy: Vec<f64>,
    query_loss: Vec<f64>,
    probs: Option<Vec<Vec<f64>>>,
    bytes_fwd: u64,
    bytes_bwd: u64,
}

fn adapt_split(init: &SplitPair<f32>, ep: &Episode, cfg: &ExperimentConfig, link: &mut Link) -> Result<Adapted> {
    let curve = meta_test(init, ep, cfg.meta.test_steps, cfg.test_lr, link)?;
    let (bytes_fwd, bytes_bwd) = curve.bytes();
    Ok(Adapted {
        accuracy: curve.accuracy,
        query_loss: curve.query_loss,
        probs: curve.final_probs,
        bytes_fwd,
        bytes_bwd,
    })
}

/// Monolithic baseline: the joined model trained on the device, no link.
fn adapt_dnn(init: &Parameters<f32>, ep: &Episode, cfg: &ExperimentConfig) -> Result<Adapted> {
    let model = cfg.model();
    let mut params = init.clone();
    let mut out = Adapted {
        accuracy: Vec::with_capacity(cfg.meta.test_steps + 1),
        query_loss: Vec::with_capacity(cfg.meta.test_steps + 1),
        probs: None,
        bytes_fwd: 0,
        bytes_bwd: 0,
    };
    for step in 0..=cfg.meta.test_steps {
        if step > 0 {
            let trace = forward(&params, &model, &ep.support_x)?;
            let (_, g) = softmax_cross_entropy(trace.output(), &ep.support_y)?;
            let (grads, _) = backward(&params, &model, &trace, &g)?;
            sgd_step(&mut params, &grads, cfg.test_lr)?;
        }
        let logits = forward(&params, &model, &ep.query_x)?.into_output();
        let (loss, _) = softmax_cross_entropy(&logits, &ep.query_y)?;
        let correct = argmax_rows(&logits).iter().zip(&ep.query_y).filter(|(p, y)| p == y).count();
        out.accuracy.push(correct as f64 / ep.query_y.len() as f64);
        out.query_loss.push(loss);
        out.probs = Some(softmax(&logits));
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Runs one experiment end to end on prepared data.
pub fn train_on(cfg: &ExperimentConfig, data: &Dataset) -> Result<RunReport> {
    cfg.validate()?;
    let model = cfg.model();
    let seed = init_seed(cfg);
    let mut meta_log: Vec<EpochLog> = Vec::new();
    let init = match cfg.mode {
        Mode::Msl => {
            let meta_cfg = crate::meta::MetaConfig {
                seed,
                ..cfg.meta.clone()
            };
            let (init, log) = meta_train::<f32>(&meta_cfg, &model, cfg.cut, data, &channel_for(cfg, streams::TRAIN_CHANNEL))?;
            meta_log = log;
            init
        }
        Mode::Sl | Mode::Dnn => SplitPair::<f32>::init(&model, cfg.cut, seed)?,
    };
    let monolithic = init.join().1;
    let eval_channel = channel_for(cfg, streams::EVAL_CHANNEL);

    let steps = cfg.meta.test_steps + 1;
    let mut accuracy = vec![0.0; steps];
    let mut query_loss = vec![0.0; steps];
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    let mut cp = Vec::new();
    let mut task_losses = Vec::new();
    let mut bytes_fwd: u64 = meta_log.iter().map(|e| e.bytes_fwd).sum();
    let mut bytes_bwd: u64 = meta_log.iter().map(|e| e.bytes_bwd).sum();
    let mut lost_evaluations = 0;
    for i in 0..cfg.eval_tasks {
        let ep = eval_episode(cfg, data, i)?;
        let a = match cfg.mode {
            Mode::Dnn => adapt_dnn(&monolithic, &ep, cfg)?,
            _ => adapt_split(&init, &ep, cfg, &mut Link::new(&eval_channel, &[i as u64])?)?,
        };
        for s in 0..steps {
            accuracy[s] += a.accuracy[s] / cfg.eval_tasks as f64;
            query_loss[s] += a.query_loss[s] / cfg.eval_tasks as f64;
        }
        task_losses.push(vec![*a.query_loss.last().expect("nonempty curve")]);
        bytes_fwd += a.bytes_fwd;
        bytes_bwd += a.bytes_bwd;
        let Some(probs) = a.probs else {
            lost_evaluations += 1;
            continue;
        };
        preds.extend(probs.iter().map(|r| argmax(r)));
        labels.extend_from_slice(&ep.query_y);
        let pool = CalibrationSet::new(probs, ep.query_y.clone())?;
        let mut rng = stream(cfg.seed, &[streams::CP, i as u64]);
        let (cal, val) = pool.split(cfg.cp.cal_fraction, &mut rng)?;
        cp.push((i, conformal::evaluate(&cal, &val, cfg.cp.alpha)?));
    }
    if cp.is_empty() {
        return Err(Error::Constraint("every meta-test evaluation was lost to deep fades".into()));
    }
    let metrics = classification_metrics(&preds, &labels, cfg.meta.ways)?;
    let (device_flops, aggregator_flops) = match cfg.mode {
        Mode::Dnn => (total_flops(&model)?, 0),
        _ => flop_report(&model, cfg.cut)?,
    };
    let p1 = objective_p1(&task_losses, cfg.meta.shots, cfg.meta.ways, cfg.meta.images_per_class, cfg.zeta)?;
    let mean = |f: fn(&CpResult) -> f64| cp.iter().map(|(_, r)| f(r)).sum::<f64>() / cp.len() as f64;
    Ok(RunReport {
        mode: cfg.mode,
        config: cfg.to_pairs(),
        seed: cfg.seed,
        init_seed: seed,
        accuracy_curve: accuracy,
        query_loss_curve: query_loss,
        metrics,
        coverage: mean(|r| r.coverage),
        inefficiency: mean(|r| r.inefficiency),
        cp,
        p1,
        bytes_fwd,
        bytes_bwd,
        device_flops,
        aggregator_flops,
        final_meta_loss: meta_log.last().map(|e| e.meta_loss),
        lost_evaluations,
        meta_log,
        init_params: monolithic,
    })
}

/// Loads data and runs one experiment.
pub fn train(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    train_on(cfg, &prepare_data(cfg)?)
}

/// Parameters both parties of a two-process split training run agree on.
pub fn session_config(cfg: &ExperimentConfig) -> Result<SessionConfig> {
    cfg.validate()?;
    Ok(SessionConfig {
        model: cfg.model(),
        cut: cfg.cut,
        seed: init_seed(cfg),
        lr: cfg.test_lr,
        channel: channel_for(cfg, streams::EVAL_CHANNEL),
    })
}

/// Device-side training data of a two-process run: the support set of the
/// first meta-test episode as a single batch.
pub fn session_batches(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<Batch<f32>>> {
    let ep = eval_episode(cfg, data, 0)?;
    Ok(vec![Batch {
        x: ep.support_x,
        y: ep.support_y,
    }])
}
