//! Simulated wireless hop for cut-layer traffic: power normalization, flat
//! Rayleigh fading, AWGN, zero-forcing equalization and an optional uniform
//! quantizer.
//!
//! Values are sent as real symbols and fading acts through its magnitude
//! `|h|`. SNR is `p / σ²` with σ² the per-element noise variance.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};
use crate::rng::stream;

/// Below this fading magnitude the receiver declares a deep fade.
pub const DEEP_FADE_THRESHOLD: f64 = 1e-6;
/// Fresh realizations tried after a deep fade before the step is skipped.
pub const MAX_FADE_RETRIES: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    /// `f64::INFINITY` means noiseless.
    pub snr_db: f64,
    pub fading: bool,
    pub power: f64,
    pub apply_to_backward: bool,
    pub quant_levels: Option<usize>,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self::identity()
    }
}

impl ChannelConfig {
    pub fn identity() -> Self {
        Self {
            snr_db: f64::INFINITY,
            fading: false,
            power: 1.0,
            apply_to_backward: true,
            quant_levels: None,
            seed: 0,
        }
    }

    pub fn awgn(snr_db: f64, seed: u64) -> Self {
        Self {
            snr_db,
            seed,
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(Error::config(format!("channel power must be positive, got {}", self.power)));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::config(format!("invalid snr_db {}", self.snr_db)));
        }
        if let Some(l) = self.quant_levels {
            if l < 2 {
                return Err(Error::config(format!("quant_levels must be at least 2, got {l}")));
            }
        }
        Ok(())
    }

    /// Noise standard deviation per element.
    pub fn sigma(&self) -> f64 {
        if self.snr_db == f64::INFINITY {
            0.0
        } else {
            (self.power / 10f64.powf(self.snr_db / 10.0)).sqrt()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.sigma() == 0.0 && !self.fading && self.quant_levels.is_none()
    }
}

/// One draw of the channel state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Realization {
    /// Fading magnitude, 1 when fading is off.
    pub h: f64,
    pub sigma: f64,
}

impl Realization {
    pub fn is_deep_fade(&self) -> bool {
        self.h < DEEP_FADE_THRESHOLD
    }
}

/// Scales `s` to mean square `p`. Returns the tensor and the applied scale.
/// An all-zero tensor is returned unchanged with scale 1.
pub fn power_normalize<T: Real>(s: &Tensor<T>, p: f64) -> Result<(Tensor<T>, f64)> {
    if s.is_empty() {
        return Err(Error::input("cannot normalize an empty tensor"));
    }
    let ms = s.mean_square();
    if ms == 0.0 {
        return Ok((s.clone(), 1.0));
    }
    let scale = (p / ms).sqrt();
    Ok((s.map(|v| T::from_f64(v.as_f64() * scale)), scale))
}

pub fn draw_realization(cfg: &ChannelConfig, rng: &mut ChaCha8Rng) -> Realization {
    let h = if cfg.fading {
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        ((x * x + y * y) / 2.0).sqrt()
    } else {
        1.0
    };
    Realization { h, sigma: cfg.sigma() }
}

/// Applies a given realization: `h·s + n`.
pub fn transmit_with<T: Real>(s_norm: &Tensor<T>, r: Realization, rng: &mut ChaCha8Rng) -> Tensor<T> {
    if r.sigma == 0.0 {
        if r.h == 1.0 {
            return s_norm.clone();
        }
        return s_norm.map(|v| T::from_f64(r.h * v.as_f64()));
    }
    s_norm.map(|v| {
        let n: f64 = rng.sample(StandardNormal);
        T::from_f64(r.h * v.as_f64() + r.sigma * n)
    })
}

/// Draws a fresh realization and sends `s_norm` through it.
pub fn transmit<T: Real>(s_norm: &Tensor<T>, cfg: &ChannelConfig, rng: &mut ChaCha8Rng) -> (Tensor<T>, Realization) {
    let r = draw_realization(cfg, rng);
    (transmit_with(s_norm, r, rng), r)
}

/// Zero-forcing receiver with known `h`, followed by de-normalization.
pub fn equalize<T: Real>(s_prime: &Tensor<T>, r: &Realization, scale: f64) -> Result<Tensor<T>> {
    if r.is_deep_fade() {
        return Err(Error::Constraint(format!("deep fade, |h| = {:e}", r.h)));
    }
    if r.h == 1.0 && scale == 1.0 {
        return Ok(s_prime.clone());
    }
    Ok(s_prime.map(|v| T::from_f64(v.as_f64() / r.h / scale)))
}

/// Uniform mid-rise quantizer over a fitted `[min, max]` range: the range is
/// split into `levels` equal cells and every value maps to its cell midpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantizer {
    pub min: f64,
    pub max: f64,
    pub levels: usize,
}

impl Quantizer {
    /// `None` for an empty or constant tensor, which passes through unchanged.
    pub fn fit<T: Real>(s: &Tensor<T>, levels: usize) -> Result<Option<Self>> {
        if levels < 2 {
            return Err(Error::config(format!("quantizer needs at least 2 levels, got {levels}")));
        }
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in s.data() {
            let v = v.as_f64();
            if !v.is_finite() {
                return Err(Error::NonFinite("cannot quantize a non-finite value".into()));
            }
            min = min.min(v);
            max = max.max(v);
        }
        Ok((max > min).then_some(Self { min, max, levels }))
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / self.levels as f64
    }

    pub fn apply_scalar(&self, v: f64) -> f64 {
        let step = self.step();
        let cell = ((v - self.min) / step).floor().clamp(0.0, (self.levels - 1) as f64);
        self.min + (cell + 0.5) * step
    }

    pub fn apply<T: Real>(&self, s: &Tensor<T>) -> Tensor<T> {
        s.map(|v| T::from_f64(self.apply_scalar(v.as_f64())))
    }
}

/// Fits a quantizer to `s` and applies it. Worst-case error is half a cell,
/// `range / (2·levels)`.
pub fn quantize<T: Real>(s: &Tensor<T>, levels: usize) -> Result<Tensor<T>> {
    Ok(match Quantizer::fit(s, levels)? {
        Some(q) => q.apply(s),
        None => s.clone(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub transmissions: u64,
    pub deep_fades: u64,
    pub skipped: u64,
}

/// A stateful one-direction channel that owns its RNG.
#[derive(Debug, Clone)]
pub struct Channel {
    cfg: ChannelConfig,
    rng: ChaCha8Rng,
    stats: ChannelStats,
}

impl Channel {
    pub fn new(cfg: ChannelConfig) -> Result<Self> {
        Self::with_stream(cfg, &[])
    }

    /// Channel whose draws come from the stream `(cfg.seed, path)`.
    pub fn with_stream(cfg: ChannelConfig, path: &[u64]) -> Result<Self> {
        cfg.validate()?;
        let rng = stream(cfg.seed, path);
        Ok(Self {
            cfg,
            rng,
            stats: ChannelStats::default(),
        })
    }

    /// An always-identity channel, e.g. for a disabled backward hop.
    pub fn passthrough() -> Self {
        Self::new(ChannelConfig::identity()).expect("identity config is valid")
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    /// Sends `s` end to end (quantize, normalize, fade, noise, equalize).
    /// `Ok(None)` means every attempt hit a deep fade and the caller should
    /// skip this step.
    pub fn pass<T: Real>(&mut self, s: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        self.stats.transmissions += 1;
        if self.cfg.is_identity() {
            return Ok(Some(s.clone()));
        }
        let quantized;
        let src = match self.cfg.quant_levels {
            Some(l) => {
                quantized = quantize(s, l)?;
                &quantized
            }
            None => s,
        };
        let (norm, scale) = power_normalize(src, self.cfg.power)?;
        for attempt in 0..=MAX_FADE_RETRIES {
            let r = draw_realization(&self.cfg, &mut self.rng);
            if r.is_deep_fade() {
                self.stats.deep_fades += 1;
                log::debug!("deep fade |h|={:e} on attempt {}", r.h, attempt + 1);
                continue;
            }
            let received = transmit_with(&norm, r, &mut self.rng);
            return equalize(&received, &r, scale).map(Some);
        }
        self.stats.skipped += 1;
        log::warn!(
            "deep fade persisted over {} attempts, skipping step",
            MAX_FADE_RETRIES + 1
        );
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(n: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng(seed);
        Tensor::from_fn(&[n], |_| r.sample::<f64, _>(StandardNormal) * 3.0 + 1.0)
    }

    #[test]
    fn normalize_scale_is_sqrt_p_over_ms() {
        let s = Tensor::new(vec![4], vec![2.0f64, -2.0, 2.0, -2.0]).unwrap();
        let (n, scale) = power_normalize(&s, 1.0).unwrap();
        assert_eq!(scale, 0.5);
        assert_eq!(n.data(), &[1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn normalize_zero_tensor_passes() {
        let s = Tensor::<f32>::zeros(&[3, 2]);
        let (n, scale) = power_normalize(&s, 1.0).unwrap();
        assert_eq!(scale, 1.0);
        assert_eq!(n, s);
        assert!(power_normalize(&Tensor::<f32>::zeros(&[0]), 1.0).is_err());
    }

    #[test]
    fn normalize_hits_target_power() {
        for p in [0.3, 1.0, 7.5] {
            let (n, _) = power_normalize(&random(1000, 1), p).unwrap();
            // independent recomputation of the mean square
            let ms = n.data().iter().map(|v| v * v).sum::<f64>() / n.len() as f64;
            assert!((ms - p).abs() < 1e-6);
        }
    }

    #[test]
    fn noiseless_no_fading_is_exact() {
        let s = random(50, 2);
        let (out, r) = transmit(&s, &ChannelConfig::identity(), &mut rng(0));
        assert_eq!(out, s);
        assert_eq!(r.h, 1.0);
    }

    #[test]
    fn noiseless_fading_recovers_exactly_enough() {
        let cfg = ChannelConfig {
            fading: true,
            ..ChannelConfig::identity()
        };
        let s = random(200, 3);
        let (norm, scale) = power_normalize(&s, 1.0).unwrap();
        let (rx, r) = transmit(&norm, &cfg, &mut rng(4));
        assert_ne!(r.h, 1.0);
        for (a, b) in rx.data().iter().zip(norm.data()) {
            assert!((a - r.h * b).abs() < 1e-15);
        }
        let back = equalize(&rx, &r, scale).unwrap();
        assert!(back.max_abs_diff(&s) < 1e-6);
    }

    #[test]
    fn equalize_divides_by_h() {
        let s = Tensor::new(vec![2], vec![4.0f64, -2.0]).unwrap();
        let r = Realization { h: 2.0, sigma: 0.0 };
        assert_eq!(equalize(&s, &r, 1.0).unwrap().data(), &[2.0, -1.0]);
        let fade = Realization { h: 1e-7, sigma: 0.0 };
        assert!(equalize(&s, &fade, 1.0).is_err());
    }

    #[test]
    fn awgn_variance_at_10db() {
        let cfg = ChannelConfig::awgn(10.0, 0);
        let n = 1_000_000;
        let zeros = Tensor::<f64>::zeros(&[n]);
        let (rx, r) = transmit(&zeros, &cfg, &mut rng(11));
        assert!((r.sigma * r.sigma - 0.1).abs() < 1e-12);
        let mean = rx.data().iter().sum::<f64>() / n as f64;
        let var = rx.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // std of the sample variance of a gaussian: σ²·sqrt(2/(n-1))
        let tol = 3.0 * 0.1 * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - 0.1).abs() < tol, "var {var}");
    }

    #[test]
    fn post_equalization_error_variance_is_sigma2_over_h2() {
        let sigma: f64 = 0.2;
        let n = 400_000;
        for h in [0.5, 1.7] {
            let r = Realization { h, sigma };
            let s = Tensor::<f64>::filled(&[n], 0.8);
            let rx = transmit_with(&s, r, &mut rng(5));
            let hat = equalize(&rx, &r, 1.0).unwrap();
            let var = hat.data().iter().map(|v| (v - 0.8).powi(2)).sum::<f64>() / n as f64;
            let expected = sigma * sigma / (h * h);
            let tol = 3.0 * expected * (2.0 / n as f64).sqrt();
            assert!((var - expected).abs() < tol, "h={h}: {var} vs {expected}");
        }
    }

    #[test]
    fn rayleigh_has_unit_mean_square() {
        let cfg = ChannelConfig {
            fading: true,
            ..ChannelConfig::identity()
        };
        let mut r = rng(8);
        let n = 200_000;
        let ms = (0..n).map(|_| draw_realization(&cfg, &mut r).h.powi(2)).sum::<f64>() / n as f64;
        // |h|² is Exp(1), so the estimator std is 1/sqrt(n)
        assert!((ms - 1.0).abs() < 3.0 / (n as f64).sqrt(), "{ms}");
    }

    #[test]
    fn quantizer_two_levels_midpoints() {
        let s = Tensor::new(vec![5], vec![-1.0f64, -0.2, 0.0, 0.3, 1.0]).unwrap();
        assert_eq!(quantize(&s, 2).unwrap().data(), &[-0.5, -0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn quantizer_constant_and_invalid() {
        let s = Tensor::<f32>::filled(&[4], 3.0);
        assert_eq!(quantize(&s, 16).unwrap(), s);
        assert!(quantize(&s, 1).is_err());
    }

    #[test]
    fn quantizer_bound_at_256_levels() {
        let s = random(5000, 6);
        let q = quantize(&s, 256).unwrap();
        let (lo, hi) = s.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(q.max_abs_diff(&s) <= (hi - lo) / 510.0);
    }

    #[test]
    fn quantizer_error_shrinks_with_levels() {
        let s = random(2000, 7);
        let errs: Vec<f64> = [4, 16, 64, 1024, 1 << 16]
            .iter()
            .map(|&l| quantize(&s, l).unwrap().max_abs_diff(&s))
            .collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]));
        assert!(errs[4] < 1e-3);
    }

    #[test]
    fn fitted_grid_is_idempotent() {
        let s = random(300, 9);
        let q = Quantizer::fit(&s, 8).unwrap().unwrap();
        let once = q.apply(&s);
        assert_eq!(q.apply(&once), once);
    }

    #[test]
    fn identity_channel_returns_input_bitwise() {
        let mut ch = Channel::new(ChannelConfig::identity()).unwrap();
        let s = Tensor::from_fn(&[7], |i| (i as f32 * 0.37).sin());
        assert_eq!(ch.pass(&s).unwrap().unwrap(), s);
    }

    #[test]
    fn seeded_channel_is_reproducible() {
        let cfg = ChannelConfig {
            fading: true,
            ..ChannelConfig::awgn(5.0, 42)
        };
        let s = random(64, 1).cast::<f32>();
        let run = || {
            let mut ch = Channel::new(cfg.clone()).unwrap();
            (0..5).map(|_| ch.pass(&s).unwrap().unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
        let mut other = Channel::with_stream(cfg.clone(), &[1]).unwrap();
        assert_ne!(other.pass(&s).unwrap().unwrap(), run()[0]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad_power = ChannelConfig {
            power: 0.0,
            ..ChannelConfig::identity()
        };
        assert!(Channel::new(bad_power).is_err());
        let bad_q = ChannelConfig {
            quant_levels: Some(1),
            ..ChannelConfig::identity()
        };
        assert!(bad_q.validate().is_err());
    }
}
