//! Browser bindings for three small explorers: the cut-layer trade-off, a
//! channel SNR explorer and a conformal alpha explorer. Each binding returns
//! a JSON string; the plain functions behind them are testable natively.

use msl_core::channel::{Channel, ChannelConfig};
use msl_core::conformal::{evaluate, CalibrationSet};
use msl_core::harness::flop_report;
use msl_core::nn::{DType, ModelConfig, Tensor};
use msl_core::rng::stream;
use msl_core::split::{smashed_payload_bytes, CutPoint};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct CutRow {
    pub cut: usize,
    pub smashed_shape: Vec<usize>,
    pub payload_bytes: u64,
    pub device_flops: u64,
    pub aggregator_flops: u64,
}

/// Per-cut payload and compute split for a batch of `batch` items.
pub fn cut_rows(ways: usize, batch: usize, dtype: DType) -> msl_core::Result<Vec<CutRow>> {
    let cfg = ModelConfig::default_cnn(ways);
    let shapes = cfg.shapes()?;
    (1..=3)
        .map(|c| {
            let cut = CutPoint::new(c)?;
            let (device, aggregator) = flop_report(&cfg, cut)?;
            let n = batch as u64;
            Ok(CutRow {
                cut: c,
                smashed_shape: shapes[cut.layer_index(&cfg)?].clone(),
                payload_bytes: smashed_payload_bytes(&cfg, cut, batch, dtype)?,
                device_flops: device * n,
                aggregator_flops: aggregator * n,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct SnrReport {
    pub sigma: f64,
    /// Mean squared reconstruction error after equalization.
    pub mse: f64,
    /// Signal-to-distortion ratio of the reconstruction in dB.
    pub sdr_db: f64,
    pub skipped: bool,
    pub deep_fades: u64,
    /// First points of (sent, received) for plotting.
    pub sample: Vec<(f64, f64)>,
}

/// Sends `n` Gaussian activations through one channel use.
pub fn snr_probe(snr_db: f64, fading: bool, quant_levels: usize, n: usize, seed: u64) -> msl_core::Result<SnrReport> {
    let cfg = ChannelConfig {
        snr_db,
        fading,
        quant_levels: (quant_levels >= 2).then_some(quant_levels),
        seed,
        ..ChannelConfig::identity()
    };
    let mut rng = stream(seed, &[0]);
    // ReLU-like activations: nonnegative with a spread of magnitudes
    let s = Tensor::<f64>::from_fn(&[n.max(1)], |_| rng.sample::<f64, _>(StandardNormal).max(0.0) * 2.0);
    let sigma = cfg.sigma();
    let mut ch = Channel::new(cfg)?;
    let received = ch.pass(&s)?;
    let stats = ch.stats();
    let Some(r) = received else {
        return Ok(SnrReport {
            sigma,
            mse: f64::NAN,
            sdr_db: f64::NAN,
            skipped: true,
            deep_fades: stats.deep_fades,
            sample: Vec::new(),
        });
    };
    let mse = r.data().iter().zip(s.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / s.len() as f64;
    Ok(SnrReport {
        sigma,
        mse,
        sdr_db: 10.0 * (s.mean_square() / mse).log10(),
        skipped: false,
        deep_fades: stats.deep_fades,
        sample: s.data().iter().copied().zip(r.data().iter().copied()).take(200).collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub q_hat: f64,
    pub coverage: f64,
    pub inefficiency: f64,
}

/// Scores a synthetic 5-class pool whose true-class logit is raised by
/// `margin`, calibrates on half of it and evaluates on the other half for
/// each alpha in `alphas`.
pub fn alpha_curve(alphas: &[f64], pool: usize, margin: f64, seed: u64) -> msl_core::Result<Vec<AlphaPoint>> {
    let ways = 5;
    let mut rng = stream(seed, &[1]);
    let (mut probs, mut labels) = (Vec::with_capacity(pool), Vec::with_capacity(pool));
    for _ in 0..pool {
        let y = rng.gen_range(0..ways);
        let logits: Vec<f64> = (0..ways)
            .map(|c| rng.sample::<f64, _>(StandardNormal) + if c == y { margin } else { 0.0 })
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        probs.push(logits.iter().map(|l| l.exp() / z).collect());
        labels.push(y);
    }
    let (cal, val) = CalibrationSet::new(probs, labels)?.split(0.5, &mut rng)?;
    alphas
        .iter()
        .map(|&alpha| {
            let r = evaluate(&cal, &val, alpha)?;
            Ok(AlphaPoint {
                alpha,
                q_hat: r.q_hat,
                coverage: r.coverage,
                inefficiency: r.inefficiency,
            })
        })
        .collect()
}

fn to_js<T: Serialize>(v: msl_core::Result<T>) -> Result<String, JsError> {
    let v = v.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn cut_tradeoff(ways: usize, batch: usize, f64_payload: bool) -> Result<String, JsError> {
    to_js(cut_rows(ways, batch, if f64_payload { DType::F64 } else { DType::F32 }))
}

#[wasm_bindgen]
pub fn snr_explorer(snr_db: f64, fading: bool, quant_levels: usize, n: usize, seed: u32) -> Result<String, JsError> {
    to_js(snr_probe(snr_db, fading, quant_levels, n, seed as u64))
}

#[wasm_bindgen]
pub fn alpha_explorer(alphas: &[f64], pool: usize, margin: f64, seed: u32) -> Result<String, JsError> {
    to_js(alpha_curve(alphas, pool, margin, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deeper_cuts_send_less_and_compute_more_on_device() {
        let rows = cut_rows(5, 4, DType::F32).unwrap();
        assert_eq!(rows[2].smashed_shape, vec![64, 2, 2]);
        assert_eq!(rows[2].payload_bytes, 4 * 64 * 2 * 2 * 4);
        for w in rows.windows(2) {
            assert!(w[0].payload_bytes > w[1].payload_bytes);
            assert!(w[0].device_flops < w[1].device_flops);
            assert_eq!(w[0].device_flops + w[0].aggregator_flops, w[1].device_flops + w[1].aggregator_flops);
        }
    }

    #[test]
    fn distortion_tracks_snr() {
        let lo = snr_probe(0.0, false, 0, 20_000, 1).unwrap();
        let hi = snr_probe(20.0, false, 0, 20_000, 1).unwrap();
        assert!(hi.mse < lo.mse / 50.0);
        // without fading the distortion ratio equals the SNR
        assert!((hi.sdr_db - 20.0).abs() < 0.2, "{}", hi.sdr_db);
        let clean = snr_probe(f64::INFINITY, false, 0, 100, 1).unwrap();
        assert_eq!(clean.mse, 0.0);
    }

    #[test]
    fn lower_alpha_widens_sets() {
        let curve = alpha_curve(&[0.05, 0.1, 0.3], 400, 1.5, 3).unwrap();
        for w in curve.windows(2) {
            assert!(w[0].q_hat >= w[1].q_hat);
            assert!(w[0].inefficiency >= w[1].inefficiency);
        }
        assert!(curve[0].coverage > 0.85);
    }

    #[test]
    fn bindings_return_json() {
        let s = cut_tradeoff(5, 1, false).unwrap();
        assert!(s.starts_with('[') && s.contains("\"payload_bytes\":1024"));
    }
}
