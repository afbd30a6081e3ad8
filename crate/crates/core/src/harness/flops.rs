use crate::error::Result;
use crate::nn::{LayerSpec, ModelConfig};
use crate::split::CutPoint;

/// Forward cost of one layer for a single item.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerCost {
    pub mul_adds: u64,
    /// Bias additions, comparisons and other single operations.
    pub other: u64,
}

impl LayerCost {
    pub fn total(&self) -> u64 {
        self.mul_adds + self.other
    }
}

/// Analytic per-item forward cost of every layer.
pub fn layer_costs(cfg: &ModelConfig) -> Result<Vec<LayerCost>> {
    let shapes = cfg.shapes()?;
    Ok(cfg
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let input = &shapes[i];
            let out: u64 = shapes[i + 1].iter().product::<usize>() as u64;
            match *layer {
                LayerSpec::Conv2d { kernel, .. } => LayerCost {
                    mul_adds: out * (input[0] * kernel * kernel) as u64,
                    other: out,
                },
                // normalize then scale and shift
                LayerSpec::Norm => LayerCost { mul_adds: 2 * out, other: 0 },
                LayerSpec::Relu => LayerCost { mul_adds: 0, other: out },
                LayerSpec::MaxPool { kernel, .. } => LayerCost {
                    mul_adds: 0,
                    other: out * (kernel * kernel - 1) as u64,
                },
                LayerSpec::Flatten => LayerCost::default(),
                LayerSpec::FullyConnected { out_features } => LayerCost {
                    mul_adds: (input[0] * out_features) as u64,
                    other: out_features as u64,
                },
            }
        })
        .collect())
}

/// Per-item forward FLOPs on the device and aggregator side of `cut`.
pub fn flop_report(cfg: &ModelConfig, cut: CutPoint) -> Result<(u64, u64)> {
    let at = cut.layer_index(cfg)?;
    let costs = layer_costs(cfg)?;
    let device = costs[..at].iter().map(LayerCost::total).sum();
    let aggregator = costs[at..].iter().map(LayerCost::total).sum();
    Ok((device, aggregator))
}

/// Per-item forward FLOPs of the whole model.
pub fn total_flops(cfg: &ModelConfig) -> Result<u64> {
    Ok(layer_costs(cfg)?.iter().map(LayerCost::total).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fc_layer_arithmetic() {
        let cfg = ModelConfig {
            layers: vec![LayerSpec::fc(10)],
            input_shape: vec![64],
            num_classes: 10,
        };
        let c = layer_costs(&cfg).unwrap()[0];
        assert_eq!((c.mul_adds, c.other), (640, 10));
    }

    #[test]
    fn first_conv_arithmetic() {
        let cfg = ModelConfig::default_cnn(5);
        // 64 filters of 1x3x3 over a 14x14 output
        let c = layer_costs(&cfg).unwrap()[0];
        assert_eq!(c.mul_adds, 64 * 14 * 14 * 9);
        assert_eq!(c.other, 64 * 14 * 14);
    }

    #[test]
    fn sides_partition_the_total() {
        let cfg = ModelConfig::default_cnn(5);
        let total = total_flops(&cfg).unwrap();
        let mut last = 0;
        for b in 1..=3 {
            let (d, a) = flop_report(&cfg, CutPoint::new(b).unwrap()).unwrap();
            assert_eq!(d + a, total);
            assert!(d > last);
            last = d;
        }
    }
}
