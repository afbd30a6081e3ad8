//! One split training step with both cut-layer hops routed through a
//! simulated channel.

use crate::channel::{Channel, ChannelConfig};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, softmax, softmax_cross_entropy, Gradients, Real, Tensor};

use super::{aggregator_backward, aggregator_forward, device_backward, device_forward, SmashedData, SmashedGrad, SplitPair, Stage};

/// Forward and backward channels of one device/aggregator link.
#[derive(Debug, Clone)]
pub struct Link {
    pub forward: Channel,
    pub backward: Channel,
}

impl Link {
    /// Independent forward and backward streams derived from
    /// `(cfg.seed, path)`. The backward hop is noiseless when
    /// `apply_to_backward` is off.
    pub fn new(cfg: &ChannelConfig, path: &[u64]) -> Result<Self> {
        let mut fwd_path = path.to_vec();
        fwd_path.push(0);
        let mut bwd_path = path.to_vec();
        bwd_path.push(1);
        let backward = if cfg.apply_to_backward {
            Channel::with_stream(cfg.clone(), &bwd_path)?
        } else {
            Channel::passthrough()
        };
        Ok(Self {
            forward: Channel::with_stream(cfg.clone(), &fwd_path)?,
            backward,
        })
    }

    pub fn identity() -> Self {
        Self {
            forward: Channel::passthrough(),
            backward: Channel::passthrough(),
        }
    }
}

/// Loss, accuracy and cut-layer traffic of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub examples: usize,
    pub bytes_fwd: u64,
    pub bytes_bwd: u64,
    /// True if a deep fade forced the step to be skipped.
    pub skipped: bool,
}

impl StepStats {
    pub fn accuracy(&self) -> f64 {
        if self.examples == 0 {
            0.0
        } else {
            self.correct as f64 / self.examples as f64
        }
    }
}

/// Gradients of both halves for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitGrads<T> {
    pub device: Gradients<T>,
    pub aggregator: Gradients<T>,
}

/// Smashed data after the channel, the device trace and the payload size.
type Sent<T> = (SmashedData<T>, crate::nn::ActivationTrace<T>, u64);

fn send_forward<T: Real>(pair: &SplitPair<T>, x: &Tensor<T>, link: &mut Link) -> Result<Option<Sent<T>>> {
    let (s, trace) = device_forward(pair, x)?;
    let bytes = s.byte_size();
    Ok(link.forward.pass(&s.tensor)?.map(|t| {
        (
            SmashedData {
                tensor: t,
                stage: Stage::PostChannel,
            },
            trace,
            bytes,
        )
    }))
}

fn count_correct<T: Real>(logits: &Tensor<T>, y: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(y).filter(|(p, t)| p == t).count()
}

/// Split forward/backward on `(x, y)`. `None` gradients mean the step was
/// lost to a deep fade.
pub fn split_gradients<T: Real>(
    pair: &SplitPair<T>,
    x: &Tensor<T>,
    y: &[usize],
    link: &mut Link,
) -> Result<(StepStats, Option<SplitGrads<T>>)> {
    let mut stats = StepStats {
        examples: y.len(),
        ..StepStats::default()
    };
    let Some((smashed, dtrace, bytes)) = send_forward(pair, x, link)? else {
        stats.skipped = true;
        return Ok((stats, None));
    };
    stats.bytes_fwd = bytes;
    let (logits, atrace) = aggregator_forward(pair, &smashed)?;
    let (loss, grad_logits) = softmax_cross_entropy(&logits, y)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {loss}")));
    }
    stats.loss = loss;
    stats.correct = count_correct(&logits, y);
    let (agg_grads, sg) = aggregator_backward(pair, &atrace, &grad_logits)?;
    stats.bytes_bwd = (sg.tensor.len() * T::DTYPE.size()) as u64;
    let Some(received) = link.backward.pass(&sg.tensor)? else {
        stats.skipped = true;
        return Ok((stats, None));
    };
    let dev_grads = device_backward(pair, &dtrace, &SmashedGrad { tensor: received })?;
    Ok((
        stats,
        Some(SplitGrads {
            device: dev_grads,
            aggregator: agg_grads,
        }),
    ))
}

/// One SGD step of both halves at rate `lr`. A skipped step leaves the
/// parameters untouched.
pub fn train_step<T: Real>(pair: &mut SplitPair<T>, x: &Tensor<T>, y: &[usize], lr: f64, link: &mut Link) -> Result<StepStats> {
    let (stats, grads) = split_gradients(pair, x, y, link)?;
    if let Some(g) = grads {
        pair.sgd(&g.device, &g.aggregator, lr)?;
    }
    Ok(stats)
}

/// Forward-only evaluation through the forward channel. Returns loss
/// statistics and the softmax rows; `None` rows on a deep-fade skip.
pub fn evaluate<T: Real>(
    pair: &SplitPair<T>,
    x: &Tensor<T>,
    y: &[usize],
    link: &mut Link,
) -> Result<(StepStats, Option<Vec<Vec<f64>>>)> {
    let mut stats = StepStats {
        examples: y.len(),
        ..StepStats::default()
    };
    let Some((smashed, _, bytes)) = send_forward(pair, x, link)? else {
        stats.skipped = true;
        return Ok((stats, None));
    };
    stats.bytes_fwd = bytes;
    let (logits, _) = aggregator_forward(pair, &smashed)?;
    let (loss, _) = softmax_cross_entropy(&logits, y)?;
    stats.loss = loss;
    stats.correct = count_correct(&logits, y);
    Ok((stats, Some(softmax(&logits))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{backward, forward, sgd_step, ModelConfig, Parameters};
    use crate::split::{split_at, CutPoint};

    fn batch(b: usize) -> (Tensor<f64>, Vec<usize>) {
        (
            Tensor::from_fn(&[b, 1, 28, 28], |i| ((i * 37 % 101) as f64) / 101.0),
            (0..b).map(|i| i % 5).collect(),
        )
    }

    #[test]
    fn identity_link_step_matches_monolithic_sgd() {
        let cfg = ModelConfig::default_cnn(5);
        let params = Parameters::<f64>::init(&cfg, 3).unwrap();
        let (x, y) = batch(4);
        let trace = forward(&params, &cfg, &x).unwrap();
        let (_, g) = softmax_cross_entropy(trace.output(), &y).unwrap();
        let (grads, _) = backward(&params, &cfg, &trace, &g).unwrap();
        let mut mono = params.clone();
        sgd_step(&mut mono, &grads, 0.05).unwrap();
        for block in 1..=3 {
            let mut pair = split_at(&cfg, &params, CutPoint::new(block).unwrap()).unwrap();
            let stats = train_step(&mut pair, &x, &y, 0.05, &mut Link::identity()).unwrap();
            assert!(!stats.skipped);
            assert!(pair.join().1.max_abs_diff(&mono) < 1e-12);
        }
    }

    #[test]
    fn byte_counts_follow_cut() {
        let cfg = ModelConfig::default_cnn(5);
        let mut pair = crate::split::SplitPair::<f32>::init(&cfg, CutPoint::new(3).unwrap(), 0).unwrap();
        let (x, y) = batch(2);
        let stats = train_step(&mut pair, &x.cast(), &y, 0.01, &mut Link::identity()).unwrap();
        assert_eq!((stats.bytes_fwd, stats.bytes_bwd), (2048, 2048));
    }

    #[test]
    fn noisy_link_changes_update_but_stays_finite() {
        let cfg = ModelConfig::default_cnn(5);
        let init = crate::split::SplitPair::<f32>::init(&cfg, CutPoint::new(2).unwrap(), 0).unwrap();
        let (x, y) = batch(3);
        let x = x.cast();
        let mut clean = init.clone();
        train_step(&mut clean, &x, &y, 0.1, &mut Link::identity()).unwrap();
        let mut noisy = init.clone();
        let mut link = Link::new(&ChannelConfig::awgn(5.0, 1), &[]).unwrap();
        train_step(&mut noisy, &x, &y, 0.1, &mut link).unwrap();
        assert_ne!(clean, noisy);
        assert!(noisy.device.params.is_finite() && noisy.aggregator.params.is_finite());
    }
}
