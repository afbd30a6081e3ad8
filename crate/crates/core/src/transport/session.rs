//! Per-step split training protocol between a device and an aggregator.
//!
//! Device, per step: SMASHED, LABELS → aggregator; aggregator replies
//! SMASHED_GRAD, LOSS_REPORT. A session opens with HELLO/HELLO and an
//! optional PARAM_SYNC exchange, and closes with BYE/BYE. The channel is
//! simulated device-side, on the smashed data before sending and on the
//! smashed gradient after receiving.

use std::io::Write;

use super::endpoint::{Endpoint, Role};
use super::frame::{Frame, MsgType};
use crate::channel::ChannelConfig;
use crate::error::{Error, Result};
use crate::nn::{sgd_step, ModelConfig, Real, Tensor};
use crate::split::{train_step, CutPoint, Half, Link, SmashedData, SmashedGrad, SplitPair, Stage};

/// What both sides agree on before a session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub model: ModelConfig,
    pub cut: CutPoint,
    /// Shared initialization seed.
    pub seed: u64,
    pub lr: f64,
    pub channel: ChannelConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub y: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub correct: usize,
    /// Checksum of this side's parameters after the step.
    pub checksum: u32,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub role: Role,
    /// Checksums of (own, peer) flattened parameters from PARAM_SYNC.
    pub sync: Option<(u32, u32)>,
    pub steps: Vec<StepRecord>,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl SessionLog {
    fn new(role: Role) -> Self {
        Self {
            role,
            sync: None,
            steps: Vec::new(),
            bytes_sent: 0,
            bytes_received: 0,
        }
    }

    pub fn checksums(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.checksum).collect()
    }

    /// `step,loss,correct,checksum,bytes_sent,bytes_received,skipped`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "loss", "correct", "checksum", "bytes_sent", "bytes_received", "skipped"])?;
        for s in &self.steps {
            out.write_record([
                s.step.to_string(),
                s.loss.to_string(),
                s.correct.to_string(),
                format!("{:08x}", s.checksum),
                s.bytes_sent.to_string(),
                s.bytes_received.to_string(),
                s.skipped.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn expect(frame: Frame, want: MsgType) -> Result<Frame> {
    if frame.msg_type != want {
        return Err(Error::protocol(
            4,
            format!("expected {want:?}, got {:?}", frame.msg_type),
        ));
    }
    Ok(frame)
}

fn flat_checksum<T: Real>(flat: &[T]) -> u32 {
    Tensor::new(vec![flat.len()], flat.to_vec()).expect("1-d shape").checksum()
}

/// Serves one session until BYE. `half` is updated in place with SGD at
/// `lr` after every step.
pub fn run_aggregator<T: Real, E: Endpoint + ?Sized>(ep: &mut E, half: &mut Half<T>, lr: f64) -> Result<SessionLog> {
    let mut log = SessionLog::new(Role::Aggregator);
    expect(ep.recv()?, MsgType::Hello)?;
    ep.send(&Frame::empty(MsgType::Hello))?;
    let mut step = 0;
    loop {
        let before = ep.counters();
        let frame = ep.recv()?;
        match frame.msg_type {
            MsgType::ParamSync => {
                let peer = frame.to_tensor::<T>()?;
                let own = half.params.flatten();
                ep.send(&Frame::vector(MsgType::ParamSync, &own))?;
                log.sync = Some((flat_checksum(&own), peer.checksum()));
            }
            MsgType::Smashed => {
                let smashed = SmashedData {
                    tensor: frame.to_tensor::<T>()?,
                    stage: Stage::PostChannel,
                };
                let labels_frame = ep.recv()?;
                if labels_frame.msg_type != MsgType::Labels {
                    return Err(Error::protocol(
                        4,
                        format!("expected Labels after Smashed, got {:?}", labels_frame.msg_type),
                    ));
                }
                let labels: Vec<usize> = labels_frame.to_f64_vec().into_iter().map(|v| v as usize).collect();
                if labels.len() != smashed.tensor.batch() {
                    return Err(Error::protocol(
                        0,
                        format!("{} labels for a batch of {}", labels.len(), smashed.tensor.batch()),
                    ));
                }
                let (logits, trace) = half.aggregator_forward(&smashed)?;
                let (loss, grad_logits) = crate::nn::softmax_cross_entropy(&logits, &labels)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("aggregator loss {loss} at step {step}")));
                }
                let correct = crate::nn::argmax_rows(&logits).iter().zip(&labels).filter(|(p, y)| p == y).count();
                let (grads, sg) = half.aggregator_backward(&trace, &grad_logits)?;
                sgd_step(&mut half.params, &grads, lr)?;
                ep.send(&Frame::from_tensor(MsgType::SmashedGrad, &sg.tensor))?;
                ep.send(&Frame::vector(MsgType::LossReport, &[loss, correct as f64]))?;
                let after = ep.counters();
                log.steps.push(StepRecord {
                    step,
                    loss,
                    correct,
                    checksum: half.params.checksum(),
                    bytes_sent: after.sent - before.sent,
                    bytes_received: after.received - before.received,
                    skipped: false,
                });
                step += 1;
            }
            MsgType::Bye => {
                ep.send(&Frame::empty(MsgType::Bye))?;
                break;
            }
            other => {
                return Err(Error::protocol(4, format!("unexpected {other:?} at step {step}")));
            }
        }
    }
    let c = ep.counters();
    log.bytes_sent = c.sent;
    log.bytes_received = c.received;
    Ok(log)
}

/// Drives `steps` training steps over `batches` (cycled), then BYE.
pub fn run_device<T: Real, E: Endpoint + ?Sized>(
    ep: &mut E,
    half: &mut Half<T>,
    batches: &[Batch<T>],
    steps: usize,
    lr: f64,
    channel: &ChannelConfig,
) -> Result<SessionLog> {
    if batches.is_empty() && steps > 0 {
        return Err(Error::config("device session needs at least one batch"));
    }
    let mut link = Link::new(channel, &[])?;
    let mut log = SessionLog::new(Role::Device);
    ep.send(&Frame::empty(MsgType::Hello))?;
    expect(ep.recv()?, MsgType::Hello)?;

    let own = half.params.flatten();
    ep.send(&Frame::vector(MsgType::ParamSync, &own))?;
    let peer = expect(ep.recv()?, MsgType::ParamSync)?.to_tensor::<T>()?;
    log.sync = Some((flat_checksum(&own), peer.checksum()));

    for step in 0..steps {
        let before = ep.counters();
        let batch = &batches[step % batches.len()];
        let (smashed, trace) = half.device_forward(&batch.x)?;
        let mut record = StepRecord {
            step,
            loss: f64::NAN,
            correct: 0,
            checksum: 0,
            bytes_sent: 0,
            bytes_received: 0,
            skipped: false,
        };
        match link.forward.pass(&smashed.tensor)? {
            None => record.skipped = true,
            Some(tx) => {
                ep.send(&Frame::from_tensor(MsgType::Smashed, &tx))?;
                let labels: Vec<f32> = batch.y.iter().map(|&y| y as f32).collect();
                ep.send(&Frame::vector(MsgType::Labels, &labels))?;
                let grad = expect(ep.recv()?, MsgType::SmashedGrad)?.to_tensor::<T>()?;
                let report = expect(ep.recv()?, MsgType::LossReport)?.to_f64_vec();
                if report.len() != 2 {
                    return Err(Error::protocol(0, format!("loss report with {} values", report.len())));
                }
                record.loss = report[0];
                record.correct = report[1] as usize;
                match link.backward.pass(&grad)? {
                    None => record.skipped = true,
                    Some(rx) => {
                        let grads = half.device_backward(&trace, &SmashedGrad { tensor: rx })?;
                        sgd_step(&mut half.params, &grads, lr)?;
                    }
                }
            }
        }
        let after = ep.counters();
        record.checksum = half.params.checksum();
        record.bytes_sent = after.sent - before.sent;
        record.bytes_received = after.received - before.received;
        log.steps.push(record);
    }
    ep.send(&Frame::empty(MsgType::Bye))?;
    expect(ep.recv()?, MsgType::Bye)?;
    let c = ep.counters();
    log.bytes_sent = c.sent;
    log.bytes_received = c.received;
    Ok(log)
}

/// Per-step `(device, aggregator)` checksums of the same training run
/// executed by direct function calls.
pub fn run_direct<T: Real>(cfg: &SessionConfig, batches: &[Batch<T>], steps: usize) -> Result<Vec<(u32, u32)>> {
    let mut pair = SplitPair::<T>::init(&cfg.model, cfg.cut, cfg.seed)?;
    let mut link = Link::new(&cfg.channel, &[])?;
    (0..steps)
        .map(|step| {
            let b = &batches[step % batches.len()];
            train_step(&mut pair, &b.x, &b.y, cfg.lr, &mut link)?;
            Ok(pair.checksum())
        })
        .collect()
}

/// The same run over an in-process loopback pair, aggregator on a scoped
/// thread. Returns (device log, aggregator log).
pub fn run_loopback<T: Real>(cfg: &SessionConfig, batches: &[Batch<T>], steps: usize) -> Result<(SessionLog, SessionLog)> {
    let (mut dev_ep, mut agg_ep) = super::loopback_pair();
    let mut dev = Half::<T>::init_device(&cfg.model, cfg.cut, cfg.seed)?;
    let mut agg = Half::<T>::init_aggregator(&cfg.model, cfg.cut, cfg.seed)?;
    std::thread::scope(|s| {
        let server = s.spawn(|| run_aggregator(&mut agg_ep, &mut agg, cfg.lr));
        let device = run_device(&mut dev_ep, &mut dev, batches, steps, cfg.lr, &cfg.channel);
        // a device error drops its endpoint, which unblocks the server
        drop(dev_ep);
        let server = server.join().map_err(|_| Error::Invariant("aggregator thread panicked".into()))?;
        Ok((device?, server?))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::loopback_pair;

    fn cfg(cut: usize) -> SessionConfig {
        SessionConfig {
            model: ModelConfig::default_cnn(4),
            cut: CutPoint::new(cut).unwrap(),
            seed: 7,
            lr: 0.05,
            channel: ChannelConfig::identity(),
        }
    }

    fn batches() -> Vec<Batch<f32>> {
        (0..2)
            .map(|k| Batch {
                x: Tensor::from_fn(&[3, 1, 28, 28], |i| (((i + k * 11) * 13 % 29) as f32) / 29.0),
                y: vec![0, 1 + k, 3],
            })
            .collect()
    }

    #[test]
    fn loopback_equals_direct_calls() {
        let c = cfg(2);
        let direct = run_direct(&c, &batches(), 4).unwrap();
        let (dev, agg) = run_loopback(&c, &batches(), 4).unwrap();
        let looped: Vec<(u32, u32)> = dev.checksums().into_iter().zip(agg.checksums()).collect();
        assert_eq!(looped, direct);
        assert_eq!(dev.bytes_sent, agg.bytes_received);
        assert_eq!(dev.bytes_received, agg.bytes_sent);
    }

    #[test]
    fn zero_step_session_has_empty_log() {
        let (dev, agg) = run_loopback(&cfg(3), &batches(), 0).unwrap();
        assert!(dev.steps.is_empty() && agg.steps.is_empty());
        let (own, peer) = agg.sync.unwrap();
        assert_eq!(dev.sync.unwrap(), (peer, own));
    }

    #[test]
    fn zero_smashed_step_reports_ln_y() {
        let c = cfg(3);
        let mut agg = Half::<f32>::init_aggregator(&c.model, c.cut, c.seed).unwrap();
        // zero the head so the untrained output is uniform
        for t in agg.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (mut dev_ep, mut agg_ep) = loopback_pair();
        std::thread::scope(|s| {
            let h = s.spawn(|| run_aggregator(&mut agg_ep, &mut agg, 0.0));
            dev_ep.send(&Frame::empty(MsgType::Hello)).unwrap();
            dev_ep.recv().unwrap();
            dev_ep
                .send(&Frame::from_tensor(MsgType::Smashed, &Tensor::<f32>::zeros(&[2, 64, 2, 2])))
                .unwrap();
            dev_ep.send(&Frame::vector(MsgType::Labels, &[0.0f32, 3.0])).unwrap();
            dev_ep.recv().unwrap();
            let report = dev_ep.recv().unwrap().to_f64_vec();
            assert!((report[0] - 4f64.ln()).abs() < 1e-6);
            dev_ep.send(&Frame::empty(MsgType::Bye)).unwrap();
            dev_ep.recv().unwrap();
            assert_eq!(h.join().unwrap().unwrap().steps.len(), 1);
        });
    }

    #[test]
    fn double_smashed_aborts() {
        let c = cfg(3);
        let mut agg = Half::<f32>::init_aggregator(&c.model, c.cut, c.seed).unwrap();
        let (mut dev_ep, mut agg_ep) = loopback_pair();
        std::thread::scope(|s| {
            let h = s.spawn(|| run_aggregator(&mut agg_ep, &mut agg, 0.1));
            dev_ep.send(&Frame::empty(MsgType::Hello)).unwrap();
            dev_ep.recv().unwrap();
            let f = Frame::from_tensor(MsgType::Smashed, &Tensor::<f32>::zeros(&[1, 64, 2, 2]));
            dev_ep.send(&f).unwrap();
            dev_ep.send(&f).unwrap();
            assert!(matches!(h.join().unwrap(), Err(Error::Protocol { .. })));
        });
    }

    #[test]
    fn step_bytes_match_frame_arithmetic() {
        let c = cfg(3);
        let (dev, _) = run_loopback(&c, &batches(), 1).unwrap();
        let smashed = crate::split::smashed_payload_bytes(&c.model, c.cut, 3, crate::nn::DType::F32).unwrap();
        // SMASHED (ndim 4) + LABELS (ndim 1, three f32)
        let expected = smashed + (4 + 1 + 1 + 2 + 16 + 8 + 4) + (4 + 1 + 1 + 2 + 4 + 8 + 12 + 4);
        assert_eq!(dev.steps[0].bytes_sent, expected);
    }
}
