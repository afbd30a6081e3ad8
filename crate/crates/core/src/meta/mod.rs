//! Few-shot episodes and first-order MAML over a [`SplitPair`].

mod episode;

pub use episode::{sample_episode, sample_task, Episode, Task};

use std::io::Write;
use std::time::Instant;

use crate::channel::ChannelConfig;
use crate::data::{Dataset, Pool};
use crate::error::{Error, Result};
use crate::nn::{ModelConfig, OptimState, OptimizerKind, Real};
use crate::rng::stream;
use crate::split::{evaluate, split_gradients, train_step, CutPoint, Link, SplitGrads, SplitPair, StepStats};

#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    /// Meta-tasks per epoch (T).
    pub tasks: usize,
    /// Classes per task (Y).
    pub ways: usize,
    /// Images available per class (M).
    pub images_per_class: usize,
    /// Support shots per class (K).
    pub shots: usize,
    /// Query examples per class (Q).
    pub queries: usize,
    pub inner_steps: usize,
    /// Inner SGD rate (η).
    pub inner_lr: f64,
    /// Outer rate (β).
    pub outer_lr: f64,
    pub outer_optimizer: OptimizerKind,
    /// Epochs (E).
    pub epochs: usize,
    /// SGD steps at meta-test time.
    pub test_steps: usize,
    pub first_order: bool,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            tasks: 20,
            ways: 10,
            images_per_class: 20,
            shots: 5,
            queries: 15,
            inner_steps: 1,
            inner_lr: 0.001,
            outer_lr: 0.01,
            outer_optimizer: OptimizerKind::Adam,
            epochs: 1000,
            test_steps: 30,
            first_order: true,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.first_order {
            return Err(Error::Unsupported("second-order MAML is not implemented; set first_order = true".into()));
        }
        if self.shots == 0 {
            return Err(Error::config("shots must be at least 1"));
        }
        if self.shots > self.images_per_class {
            return Err(Error::Constraint(format!(
                "shots K = {} exceeds images per class M = {}",
                self.shots, self.images_per_class
            )));
        }
        if self.shots + self.queries > self.images_per_class {
            return Err(Error::config(format!(
                "K + Q = {} exceeds images per class M = {}",
                self.shots + self.queries,
                self.images_per_class
            )));
        }
        if self.ways < 2 {
            return Err(Error::config("a task needs at least two classes"));
        }
        if self.inner_steps == 0 {
            return Err(Error::config("inner_steps must be at least 1"));
        }
        if self.tasks == 0 {
            return Err(Error::config("at least one meta-task per epoch is required"));
        }
        for (name, v) in [("inner_lr", self.inner_lr), ("outer_lr", self.outer_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// `inner_steps` SGD steps on the support set, starting from a copy of
/// `init`. Deep-fade skipped steps count toward the budget.
pub fn inner_adapt<T: Real>(
    init: &SplitPair<T>,
    episode: &Episode<T>,
    steps: usize,
    lr: f64,
    link: &mut Link,
) -> Result<(SplitPair<T>, Vec<StepStats>)> {
    let mut pair = init.clone();
    let mut stats = Vec::with_capacity(steps);
    for _ in 0..steps {
        let s = train_step(&mut pair, &episode.support_x, &episode.support_y, lr, link).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("task {}: {m}", episode.task.id)),
            other => other,
        })?;
        stats.push(s);
    }
    Ok((pair, stats))
}

/// Sum over tasks of the query cross-entropy at the adapted parameters.
pub fn meta_loss<T: Real>(adapted: &[SplitPair<T>], episodes: &[Episode<T>], link: &mut Link) -> Result<f64> {
    if adapted.len() != episodes.len() {
        return Err(Error::input(format!("{} adapted models for {} episodes", adapted.len(), episodes.len())));
    }
    let mut total = 0.0;
    for (pair, ep) in adapted.iter().zip(episodes) {
        let (stats, _) = evaluate(pair, &ep.query_x, &ep.query_y, link)?;
        total += stats.loss;
    }
    Ok(total)
}

/// Outer optimizer state for both halves.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaOptimizer<T> {
    pub device: OptimState<T>,
    pub aggregator: OptimState<T>,
}

impl<T: Real> MetaOptimizer<T> {
    pub fn new(kind: OptimizerKind, init: &SplitPair<T>) -> Self {
        Self {
            device: OptimState::new(kind, &init.device.params),
            aggregator: OptimState::new(kind, &init.aggregator.params),
        }
    }
}

/// First-order outer step: the per-task query gradients (taken at the
/// adapted parameters) are summed and applied to the initialization.
pub fn meta_update<T: Real>(
    init: &mut SplitPair<T>,
    task_grads: &[SplitGrads<T>],
    lr: f64,
    optim: &mut MetaOptimizer<T>,
) -> Result<()> {
    let Some((first, rest)) = task_grads.split_first() else {
        return Ok(());
    };
    let mut sum = first.clone();
    for g in rest {
        sum.device.axpy(T::one(), &g.device)?;
        sum.aggregator.axpy(T::one(), &g.aggregator)?;
    }
    optim.aggregator.step(&mut init.aggregator.params, &sum.aggregator, lr)?;
    optim.device.step(&mut init.device.params, &sum.device, lr)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub meta_loss: f64,
    pub mean_query_acc: f64,
    pub wall_ms: u128,
    pub bytes_fwd: u64,
    pub bytes_bwd: u64,
}

/// Per-task result of one meta-training epoch.
struct TaskOutcome<T> {
    query: StepStats,
    grads: Option<SplitGrads<T>>,
    bytes_fwd: u64,
    bytes_bwd: u64,
}

fn run_task<T: Real>(
    init: &SplitPair<T>,
    cfg: &MetaConfig,
    dataset: &Dataset,
    channel: &ChannelConfig,
    epoch: usize,
    index: usize,
) -> Result<TaskOutcome<T>> {
    let path = [epoch as u64, index as u64];
    let mut rng = stream(cfg.seed, &path);
    let task = sample_task(dataset, Pool::MetaTrain, cfg.ways, index, &mut rng)?;
    let episode = sample_episode(dataset, &task, cfg.shots, cfg.queries, &mut rng)?.cast::<T>();
    let mut link = Link::new(channel, &path)?;
    let (adapted, inner) = inner_adapt(init, &episode, cfg.inner_steps, cfg.inner_lr, &mut link)?;
    let (query, grads) = split_gradients(&adapted, &episode.query_x, &episode.query_y, &mut link)?;
    let bytes_fwd = inner.iter().map(|s| s.bytes_fwd).sum::<u64>() + query.bytes_fwd;
    let bytes_bwd = inner.iter().map(|s| s.bytes_bwd).sum::<u64>() + query.bytes_bwd;
    Ok(TaskOutcome {
        query,
        grads,
        bytes_fwd,
        bytes_bwd,
    })
}

/// Runs `epochs` rounds of {sample T tasks, adapt each, sum query
/// gradients, outer step} from the seeded initialization.
pub fn meta_train<T: Real>(
    cfg: &MetaConfig,
    model: &ModelConfig,
    cut: CutPoint,
    dataset: &Dataset,
    channel: &ChannelConfig,
) -> Result<(SplitPair<T>, Vec<EpochLog>)> {
    cfg.validate()?;
    channel.validate()?;
    let mut init = SplitPair::<T>::init(model, cut, cfg.seed)?;
    meta_train_from(&mut init, cfg, dataset, channel, |_| Ok(())).map(|log| (init, log))
}

/// [`meta_train`] from a given initialization, calling `on_epoch` after
/// every epoch (e.g. to stream the log).
pub fn meta_train_from<T: Real>(
    init: &mut SplitPair<T>,
    cfg: &MetaConfig,
    dataset: &Dataset,
    channel: &ChannelConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if cfg.epochs > 0 && cfg.queries == 0 {
        return Err(Error::config("meta-training needs at least one query example per class"));
    }
    let mut optim = MetaOptimizer::new(cfg.outer_optimizer, init);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut grads = Vec::with_capacity(cfg.tasks);
        let mut entry = EpochLog {
            epoch,
            meta_loss: 0.0,
            mean_query_acc: 0.0,
            wall_ms: 0,
            bytes_fwd: 0,
            bytes_bwd: 0,
        };
        for t in 0..cfg.tasks {
            let out = run_task(init, cfg, dataset, channel, epoch, t)?;
            entry.meta_loss += out.query.loss;
            entry.mean_query_acc += out.query.accuracy() / cfg.tasks as f64;
            entry.bytes_fwd += out.bytes_fwd;
            entry.bytes_bwd += out.bytes_bwd;
            grads.extend(out.grads);
        }
        meta_update(init, &grads, cfg.outer_lr, &mut optim)?;
        entry.wall_ms = start.elapsed().as_millis();
        log::debug!(
            "epoch {epoch}: meta-loss {:.4}, query acc {:.3}",
            entry.meta_loss,
            entry.mean_query_acc
        );
        on_epoch(&entry)?;
        log.push(entry);
    }
    Ok(log)
}

/// Query accuracy after each of `steps` support SGD steps (index 0 is the
/// unadapted model), plus the adapted model.
#[derive(Debug, Clone)]
pub struct AdaptCurve<T> {
    pub accuracy: Vec<f64>,
    pub query_loss: Vec<f64>,
    pub support: Vec<StepStats>,
    pub adapted: SplitPair<T>,
    /// Query softmax rows after the last step; `None` if that evaluation
    /// was lost to a deep fade.
    pub final_probs: Option<Vec<Vec<f64>>>,
}

impl<T> AdaptCurve<T> {
    pub fn bytes(&self) -> (u64, u64) {
        (
            self.support.iter().map(|s| s.bytes_fwd).sum(),
            self.support.iter().map(|s| s.bytes_bwd).sum(),
        )
    }
}

/// Adapts `init` on the episode's support set and tracks query accuracy.
pub fn meta_test<T: Real>(
    init: &SplitPair<T>,
    episode: &Episode<T>,
    steps: usize,
    lr: f64,
    link: &mut Link,
) -> Result<AdaptCurve<T>> {
    if episode.query_y.is_empty() {
        return Err(Error::config("meta-test episode has no query examples"));
    }
    let mut pair = init.clone();
    let mut accuracy = Vec::with_capacity(steps + 1);
    let mut query_loss = Vec::with_capacity(steps + 1);
    let mut support = Vec::with_capacity(steps);
    let mut final_probs = None;
    let mut record = |pair: &SplitPair<T>, link: &mut Link| -> Result<()> {
        let (s, probs) = evaluate(pair, &episode.query_x, &episode.query_y, link)?;
        accuracy.push(s.accuracy());
        query_loss.push(s.loss);
        final_probs = probs;
        Ok(())
    };
    record(&pair, link)?;
    for _ in 0..steps {
        support.push(train_step(&mut pair, &episode.support_x, &episode.support_y, lr, link)?);
        record(&pair, link)?;
    }
    Ok(AdaptCurve {
        accuracy,
        query_loss,
        support,
        adapted: pair,
        final_probs,
    })
}

/// Writes `epoch,meta_loss,mean_query_acc,wall_ms,bytes_fwd,bytes_bwd`.
pub fn write_training_log<W: Write>(w: W, log: &[EpochLog]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "meta_loss", "mean_query_acc", "wall_ms", "bytes_fwd", "bytes_bwd"])?;
    for e in log {
        out.write_record([
            e.epoch.to_string(),
            e.meta_loss.to_string(),
            e.mean_query_acc.to_string(),
            e.wall_ms.to_string(),
            e.bytes_fwd.to_string(),
            e.bytes_bwd.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
