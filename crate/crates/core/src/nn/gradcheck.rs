//! Central finite-difference verification of [`backward`](super::backward).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::ModelConfig;
use super::model::{backward, forward};
use super::params::Parameters;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so parameters whose true
/// gradient is zero (e.g. conv biases feeding a normalization) compare on an
/// absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub batch: usize,
    /// Number of parameters probed (all of them if the model is smaller).
    pub samples: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            batch: 2,
            samples: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Probes discarded because the perturbation crossed a ReLU kink or
    /// changed a pooling winner.
    pub skipped_kinks: usize,
}

/// Worst relative error between analytic and central-difference gradients
/// over a random subsample of parameters, in 64-bit.
pub fn grad_check(cfg: &ModelConfig, seed: u64, eps: f64) -> Result<f64> {
    Ok(grad_check_with(cfg, seed, eps, GradCheckOptions::default())?.max_rel_err)
}

pub fn grad_check_with(
    cfg: &ModelConfig,
    seed: u64,
    eps: f64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::config("finite-difference step must be positive"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::<f64>::init(cfg, seed)?;

    let mut in_shape = vec![opts.batch];
    in_shape.extend_from_slice(&cfg.input_shape);
    let batch = Tensor::from_fn(&in_shape, |_| rng.gen_range(0.05..1.0));
    let out_shape = [opts.batch, cfg.num_classes];
    // objective: <cotangent, output>, so backward receives the cotangent directly
    let cotangent = Tensor::from_fn(&out_shape, |_| rng.sample::<f64, _>(StandardNormal));

    let base = forward(&params, cfg, &batch)?;
    let base_sig = base.branch_signature();
    let (grads, _) = backward(&params, cfg, &base, &cotangent)?;

    let objective = |p: &Parameters<f64>| -> Result<(f64, u32)> {
        let t = forward(p, cfg, &batch)?;
        let v = t
            .output()
            .data()
            .iter()
            .zip(cotangent.data())
            .map(|(a, b)| a * b)
            .sum();
        Ok((v, t.branch_signature()))
    };

    let total = params.count();
    let wanted = opts.samples.min(total);
    let mut order: Vec<usize> = (0..total).collect();
    // partial Fisher-Yates: the first `k` entries become a uniform sample
    let mut next = 0;
    let mut draw = |rng: &mut ChaCha8Rng| -> Option<usize> {
        if next >= total {
            return None;
        }
        let j = rng.gen_range(next..total);
        order.swap(next, j);
        next += 1;
        Some(order[next - 1])
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    while report.checked < wanted {
        let Some(idx) = draw(&mut rng) else { break };
        let orig = params.get_flat(idx).expect("index in range");
        params.set_flat(idx, orig + eps);
        let (plus, sig_p) = objective(&params)?;
        params.set_flat(idx, orig - eps);
        let (minus, sig_m) = objective(&params)?;
        params.set_flat(idx, orig);
        if sig_p != base_sig || sig_m != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads.get_flat(idx).expect("index in range");
        let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        report.max_rel_err = report.max_rel_err.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::config::LayerSpec;

    #[test]
    fn linear_model_is_exact() {
        let cfg = ModelConfig {
            layers: vec![LayerSpec::fc(6)],
            input_shape: vec![5],
            num_classes: 6,
        };
        // no truncation error for a linear map, so a wide step only reduces cancellation
        let err = grad_check(&cfg, 3, 1e-3).unwrap();
        assert!(err < 1e-10, "linear model error {err}");
    }

    #[test]
    fn every_layer_kind_on_small_net() {
        let cfg = ModelConfig {
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 4,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Norm,
                LayerSpec::Relu,
                LayerSpec::max_pool(),
                LayerSpec::Flatten,
                LayerSpec::fc(6),
                LayerSpec::Relu,
                LayerSpec::fc(3),
            ],
            input_shape: vec![2, 9, 9],
            num_classes: 3,
        };
        let report = grad_check_with(&cfg, 5, 1e-5, GradCheckOptions { batch: 3, samples: 400 }).unwrap();
        assert!(report.checked >= 200);
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn kink_rejection_keeps_error_stable_across_seeds() {
        let cfg = ModelConfig {
            layers: vec![LayerSpec::fc(8), LayerSpec::Relu, LayerSpec::fc(3)],
            input_shape: vec![4],
            num_classes: 3,
        };
        for seed in 0..5 {
            let err = grad_check(&cfg, seed, 1e-5).unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }
}
