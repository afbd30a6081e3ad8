use crate::error::{Error, Result};

/// One layer of the feed-forward stack. Input channel/feature counts are
/// inferred from the shape flowing into the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Per-channel batch normalization with learnable scale and shift.
    Norm,
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Flatten,
    FullyConnected {
        out_features: usize,
    },
}

impl LayerSpec {
    /// 3x3 convolution, stride 2, padding 1.
    pub fn conv(out_channels: usize) -> Self {
        LayerSpec::Conv2d {
            out_channels,
            kernel: 3,
            stride: 2,
            padding: 1,
        }
    }

    /// 2x2 max pooling, stride 1, no padding.
    pub fn max_pool() -> Self {
        LayerSpec::MaxPool {
            kernel: 2,
            stride: 1,
            padding: 0,
        }
    }

    pub fn fc(out_features: usize) -> Self {
        LayerSpec::FullyConnected { out_features }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv",
            LayerSpec::Norm => "norm",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::FullyConnected { .. } => "fc",
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                ..
            } => out_channels > 0 && kernel > 0 && stride > 0,
            LayerSpec::MaxPool {
                kernel,
                stride,
                padding,
            } => kernel > 0 && stride > 0 && padding < kernel,
            LayerSpec::FullyConnected { out_features } => out_features > 0,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid hyperparameters in {self:?}")))
        }
    }

    /// Per-item output shape for a per-item input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [_, h, w] = spatial(input, self)?;
                let ho = window_extent(h, kernel, stride, padding, self)?;
                let wo = window_extent(w, kernel, stride, padding, self)?;
                Ok(vec![out_channels, ho, wo])
            }
            LayerSpec::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = spatial(input, self)?;
                let ho = window_extent(h, kernel, stride, padding, self)?;
                let wo = window_extent(w, kernel, stride, padding, self)?;
                Ok(vec![c, ho, wo])
            }
            LayerSpec::Norm | LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::FullyConnected { out_features } => {
                if input.len() != 1 {
                    return Err(Error::config(format!(
                        "fully connected layer needs a flat input, got {input:?}"
                    )));
                }
                Ok(vec![out_features])
            }
        }
    }

    /// Shapes of the learnable tensors for a given per-item input shape.
    pub fn param_shapes(&self, input: &[usize]) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                ..
            } => vec![
                vec![out_channels, input[0], kernel, kernel],
                vec![out_channels],
            ],
            LayerSpec::Norm => vec![vec![input[0]], vec![input[0]]],
            LayerSpec::FullyConnected { out_features } => {
                vec![vec![out_features, input[0]], vec![out_features]]
            }
            _ => Vec::new(),
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            LayerSpec::Conv2d { .. } | LayerSpec::FullyConnected { .. } => &["weight", "bias"],
            LayerSpec::Norm => &["scale", "shift"],
            _ => &[],
        }
    }
}

fn spatial(input: &[usize], layer: &LayerSpec) -> Result<[usize; 3]> {
    match input {
        &[c, h, w] => Ok([c, h, w]),
        _ => Err(Error::config(format!(
            "{} layer needs a (channels, height, width) input, got {input:?}",
            layer.kind_name()
        ))),
    }
}

fn window_extent(n: usize, k: usize, s: usize, p: usize, layer: &LayerSpec) -> Result<usize> {
    let padded = n + 2 * p;
    if padded < k {
        return Err(Error::config(format!(
            "{} window {k} larger than padded extent {padded}",
            layer.kind_name()
        )));
    }
    Ok((padded - k) / s + 1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: Vec<LayerSpec>,
    /// Per-item input shape, without the batch axis.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl ModelConfig {
    pub const IMAGE_SIDE: usize = 28;
    pub const CHANNELS: usize = 64;

    /// Three conv blocks (conv, norm, relu, pool) with 64 channels, then
    /// flatten and FC(64), FC(64), FC(classes) with ReLU in between.
    pub fn default_cnn(num_classes: usize) -> Self {
        let mut layers = Vec::new();
        for _ in 0..3 {
            layers.extend([
                LayerSpec::conv(Self::CHANNELS),
                LayerSpec::Norm,
                LayerSpec::Relu,
                LayerSpec::max_pool(),
            ]);
        }
        layers.extend([
            LayerSpec::Flatten,
            LayerSpec::fc(64),
            LayerSpec::Relu,
            LayerSpec::fc(64),
            LayerSpec::Relu,
            LayerSpec::fc(num_classes),
        ]);
        Self {
            layers,
            input_shape: vec![1, Self::IMAGE_SIDE, Self::IMAGE_SIDE],
            num_classes,
        }
    }

    /// Per-item shapes entering each layer, followed by the final output
    /// shape (`layers.len() + 1` entries).
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::config(format!(
                "invalid input shape {:?}",
                self.input_shape
            )));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap())
    }

    /// Checks the stack is consistent and ends in exactly `num_classes` logits.
    pub fn validate(&self) -> Result<()> {
        let out = self.output_shape()?;
        if out != [self.num_classes] {
            return Err(Error::config(format!(
                "model produces {out:?}, expected [{}] logits",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Layer indices just past each max-pool layer; these are the admissible
    /// cut positions (block boundaries).
    pub fn block_boundaries(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::MaxPool { .. }))
            .map(|(i, _)| i + 1)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_stack_spatial_arithmetic() {
        let cfg = ModelConfig::default_cnn(10);
        cfg.validate().unwrap();
        let shapes = cfg.shapes().unwrap();
        // conv -> pool per block: 28 -> 14 -> 13, 13 -> 7 -> 6, 6 -> 3 -> 2
        let spatial: Vec<usize> = [1, 4, 5, 8, 9, 12]
            .iter()
            .map(|&i| shapes[i][1])
            .collect();
        assert_eq!(spatial, vec![14, 13, 7, 6, 3, 2]);
        assert_eq!(shapes[13], vec![256]);
        assert_eq!(shapes.last().unwrap(), &vec![10]);
        assert_eq!(cfg.block_boundaries(), vec![4, 8, 12]);
    }

    #[test]
    fn wrong_logit_count_is_config_error() {
        let mut cfg = ModelConfig::default_cnn(10);
        cfg.num_classes = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_hyperparameter_rejected() {
        let cfg = ModelConfig {
            layers: vec![LayerSpec::fc(0)],
            input_shape: vec![3],
            num_classes: 0,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fc_on_image_needs_flatten() {
        let cfg = ModelConfig {
            layers: vec![LayerSpec::fc(3)],
            input_shape: vec![1, 4, 4],
            num_classes: 3,
        };
        assert!(cfg.validate().is_err());
    }
}
